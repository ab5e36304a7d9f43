//! Differentiable soft histograms.
//!
//! A bin `[a_n, a_{n+1})` is approximated by the product of two logistic
//! steps, `φ(f - a_n) · φ(-(f - a_{n+1}))`, where `φ(t) = 1 / (1 + e^{-c t})`
//! and `c` sets the steepness. Summing the product over the rows of a set
//! gives a soft count that approaches the hard count as `c` grows, while
//! staying differentiable in `f`.
//!
//! [`soft_histogram`] squashes raw features into `[0, 1]` with a sigmoid and
//! then bins every feature column independently. Counts are not normalized.

use crate::autodiff::{sigmoid, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bin edges on `[0, 1]` and the logistic steepness.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSpec {
    edges: Vec<f64>,
    steepness: f64,
}

impl HistogramSpec {
    pub const DEFAULT_BINS: usize = 16;
    pub const DEFAULT_STEEPNESS: f64 = 100.0;

    /// `bins` equal-width bins on `[0, 1]`.
    pub fn uniform(bins: usize, steepness: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::contract("histogram needs at least one bin"));
        }
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        HistogramSpec::with_edges(edges, steepness)
    }

    pub fn with_edges(edges: Vec<f64>, steepness: f64) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::contract("histogram needs at least two edges"));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("histogram edges must be strictly increasing"));
        }
        if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
            return Err(Error::contract("histogram edges must span [0, 1]"));
        }
        if !(steepness > 0.0 && steepness.is_finite()) {
            return Err(Error::contract(format!("steepness must be positive, got {steepness}")));
        }
        Ok(HistogramSpec { edges, steepness })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn steepness(&self) -> f64 {
        self.steepness
    }
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec::uniform(Self::DEFAULT_BINS, Self::DEFAULT_STEEPNESS).expect("valid defaults")
    }
}

/// `(φ(z), φ(-z))` from a single exponential, accurate for either sign.
#[inline]
fn logistic_pair(z: f64) -> (f64, f64) {
    if z >= 0.0 {
        let e = (-z).exp();
        let d = 1.0 / (1.0 + e);
        (d, e * d)
    } else {
        let e = z.exp();
        let d = 1.0 / (1.0 + e);
        (e * d, d)
    }
}

/// Logistic step at midpoint `alpha`: `1 / (1 + exp(-c (f - alpha)))`.
pub fn logistic_membership(f: f64, alpha: f64, c: f64) -> f64 {
    sigmoid(c * (f - alpha))
}

/// Per-set feature values already squashed into `[0, 1]`: `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim(
                "feature_matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("feature value {v} outside [0, 1]")));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Soft count of bin `n` for feature column `j`, summed over all rows.
pub fn bin_mass(f: &FeatureMatrix, j: usize, n: usize, spec: &HistogramSpec) -> Result<f64> {
    if n >= spec.bins() {
        return Err(Error::contract(format!("bin {n} out of range for {} bins", spec.bins())));
    }
    if j >= f.cols && f.rows > 0 {
        return Err(Error::contract(format!("feature {j} out of range for {} columns", f.cols)));
    }
    let (lo, hi, c) = (spec.edges[n], spec.edges[n + 1], spec.steepness);
    Ok((0..f.rows)
        .map(|i| {
            let v = f.get(i, j);
            logistic_membership(v, lo, c) * logistic_membership(-(v - hi), 0.0, c)
        })
        .sum())
}

/// Soft histogram of one set: `raw` is `[s, F]` pre-squash features; the
/// result is `[F, B]`.
pub fn soft_histogram_values(raw: &Tensor, spec: &HistogramSpec) -> Result<Tensor> {
    if raw.rank() != 2 {
        return Err(Error::dim("soft_histogram", format!("expected [s, F], got {:?}", raw.shape())));
    }
    let op = SoftHistogramOp::new(spec, raw.rows());
    let out = op.forward(&[raw])?;
    out.reshape(vec![raw.cols(), spec.bins()])
}

/// Batched soft histogram on the tape.
///
/// `raw` is `[sets * set_rows, F]` with each set's rows contiguous. Returns
/// `[sets, F * B]` where set `s`, feature `j`, bin `n` sits at column
/// `j * B + n`.
pub fn soft_histogram(g: &mut Graph, raw: Var, set_rows: usize, spec: &HistogramSpec) -> Result<Var> {
    g.custom(&[raw], Box::new(SoftHistogramOp::new(spec, set_rows)))
}

/// Largest `c` for which `exp(c)` is formed directly on uniform edges.
const GEOMETRIC_LIMIT: f64 = 300.0;

#[derive(Debug, Clone)]
struct SoftHistogramOp {
    edges: Vec<f64>,
    c: f64,
    set_rows: usize,
    /// `exp(c e / B)` per edge `e` when the edges are uniform and `c` is moderate.
    powers: Option<Vec<f64>>,
}

impl SoftHistogramOp {
    fn new(spec: &HistogramSpec, set_rows: usize) -> Self {
        let nb = spec.bins() as f64;
        let uniform = spec
            .edges
            .iter()
            .enumerate()
            .all(|(e, &a)| (a - e as f64 / nb).abs() <= 1e-15);
        SoftHistogramOp {
            edges: spec.edges.clone(),
            c: spec.steepness,
            set_rows,
            powers: (uniform && spec.steepness <= GEOMETRIC_LIMIT).then(|| {
                (0..spec.edges.len())
                    .map(|e| (spec.steepness * e as f64 / nb).exp())
                    .collect()
            }),
        }
    }

    /// Fills `left[e] = φ(c (u − α_e))` and `right[e] = φ(−c (u − α_e))`.
    ///
    /// On uniform edges `exp(−c (u − α_e)) = exp(−c u) · exp(c e / B)`, so one
    /// exponential serves every edge.
    #[inline]
    fn memberships(&self, u: f64, left: &mut [f64], right: &mut [f64]) {
        match &self.powers {
            Some(p) => {
                let t0 = (-self.c * u).exp();
                for ((l, rr), &pe) in left.iter_mut().zip(right.iter_mut()).zip(p) {
                    let t = t0 * pe;
                    let d = 1.0 / (1.0 + t);
                    *l = d;
                    *rr = t * d;
                }
            }
            None => {
                for (e, &a) in self.edges.iter().enumerate() {
                    (left[e], right[e]) = logistic_pair(self.c * (u - a));
                }
            }
        }
    }

    fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.rank() != 2 || self.set_rows == 0 || x.rows() % self.set_rows != 0 {
            return Err(Error::dim(
                "soft_histogram",
                format!("shape {:?} with {} rows per set", x.shape(), self.set_rows),
            ));
        }
        Ok((x.rows() / self.set_rows, x.cols()))
    }
}

impl CustomOp for SoftHistogramOp {
    fn name(&self) -> &'static str {
        "soft_histogram"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (sets, feats) = self.layout(x)?;
        let nb = self.bins();
        let mut out = vec![0.0; sets * feats * nb];
        let mut left = vec![0.0; nb + 1];
        let mut right = vec![0.0; nb + 1];
        let d = x.data();
        for s in 0..sets {
            let dst = &mut out[s * feats * nb..(s + 1) * feats * nb];
            for r in 0..self.set_rows {
                let row = &d[(s * self.set_rows + r) * feats..(s * self.set_rows + r + 1) * feats];
                for (j, &raw) in row.iter().enumerate() {
                    self.memberships(sigmoid(raw), &mut left, &mut right);
                    let bins = &mut dst[j * nb..(j + 1) * nb];
                    for ((b, &l), &r) in bins.iter_mut().zip(&left).zip(&right[1..]) {
                        *b += l * r;
                    }
                }
            }
        }
        Tensor::new(vec![sets, feats * nb], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (_, feats) = self.layout(x).expect("validated in forward");
        let nb = self.bins();
        let c = self.c;
        let mut left = vec![0.0; nb + 1];
        let mut right = vec![0.0; nb + 1];
        let mut grad = vec![0.0; x.numel()];
        for (row, (xr, gr)) in x.data().chunks(feats).zip(grad.chunks_mut(feats)).enumerate() {
            let s = row / self.set_rows;
            let gos = &grad_output[s * feats * nb..(s + 1) * feats * nb];
            for ((&raw, gx), go) in xr.iter().zip(gr.iter_mut()).zip(gos.chunks(nb)) {
                let u = sigmoid(raw);
                self.memberships(u, &mut left, &mut right);
                // d/du [L_n R_{n+1}] = c L_n R_{n+1} (R_n - L_{n+1})
                let mut du = 0.0;
                for (((&gn, l), r), (&r0, &l1)) in go.iter().zip(&left).zip(&right[1..]).zip(right.iter().zip(&left[1..])) {
                    du += gn * l * r * (r0 - l1);
                }
                *gx = c * du * u * (1.0 - u);
            }
        }
        vec![Some(grad)]
    }
}
