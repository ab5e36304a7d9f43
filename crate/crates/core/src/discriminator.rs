//! Discriminators over single samples, packs and sets.
//!
//! All discriminators take a batch of `m` groups of `k` samples stacked as an
//! `[m * k, d]` matrix (group rows contiguous) and return `[m, 1]`
//! probabilities that each group is real.
//!
//! The set discriminator is invariant to the order of samples inside a
//! group. It maps every sample through a feature stack (`d_f`), applies a
//! pairing stack (`d_g`) to every ordered pair of distinct feature vectors,
//! aggregates the pair features with a soft histogram and classifies the
//! flattened histogram (`d_h`). Because the set of ordered pairs is closed
//! under permutation of the samples, so is the histogram.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::histogram::{soft_histogram, HistogramSpec};
use crate::nn::{Activation, Dense, Maxout, Module};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Plain per-sample discriminator.
    Gan,
    /// Per-sample discriminator with minibatch-discrimination features.
    Md,
    /// Packed samples concatenated into one wide input.
    Pacgan,
    /// Permutation-invariant pairwise set discriminator.
    Setgan,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Gan,
        Architecture::Md,
        Architecture::Pacgan,
        Architecture::Setgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Gan => "gan",
            Architecture::Md => "md",
            Architecture::Pacgan => "pacgan",
            Architecture::Setgan => "setgan",
        }
    }

    /// Whether the discriminator judges groups of `k >= 2` samples.
    pub fn uses_sets(self) -> bool {
        matches!(self, Architecture::Pacgan | Architecture::Setgan)
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture `{s}` (expected gan, md, pacgan or setgan)"))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Generated,
}

/// `k` samples of one origin, stacked `k x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    samples: Tensor,
    origin: Origin,
}

impl SampleSet {
    pub fn new(samples: Tensor, origin: Origin) -> Result<Self> {
        if samples.rank() != 2 {
            return Err(Error::dim("sample_set", format!("expected k x d, got {:?}", samples.shape())));
        }
        Ok(SampleSet { samples, origin })
    }

    pub fn k(&self) -> usize {
        self.samples.rows()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// Stacks sets of one origin and equal shape into an `[m * k, d]` batch.
    pub fn stack(sets: &[SampleSet]) -> Result<Tensor> {
        let first = sets.first().ok_or_else(|| Error::contract("no sets to stack"))?;
        let mut data = Vec::with_capacity(sets.len() * first.samples.numel());
        for s in sets {
            if s.samples.shape() != first.samples.shape() {
                return Err(Error::dim("stack", "sets differ in shape"));
            }
            if s.origin != first.origin {
                return Err(Error::contract("cannot mix real and generated sets in one batch"));
            }
            data.extend_from_slice(s.samples.data());
        }
        Tensor::new(vec![sets.len() * first.k(), first.dim()], data)
    }
}

/// All ordered pairs `(i, j)` with `i != j`, in lexicographic order.
pub fn enumerate_pairs(k: usize) -> Result<Vec<(usize, usize)>> {
    if k < 2 {
        return Err(Error::contract(format!("pairs need a set of at least 2 samples, got {k}")));
    }
    Ok((0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect())
}

/// Row indices of both pair members for `sets` contiguous groups of `k` rows.
fn pair_rows(sets: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let pairs = enumerate_pairs(k)?;
    let mut left = Vec::with_capacity(sets * pairs.len());
    let mut right = Vec::with_capacity(sets * pairs.len());
    for s in 0..sets {
        for &(i, j) in &pairs {
            left.push(s * k + i);
            right.push(s * k + j);
        }
    }
    Ok((left, right))
}

fn group_count(g: &Graph, x: Var, k: usize, width: usize) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::dim("discriminator", format!("input {s:?}, expected width {width}")));
    }
    if k == 0 || s[0] % k != 0 {
        return Err(Error::dim("discriminator", format!("{} rows do not form sets of {k}", s[0])));
    }
    Ok(s[0] / k)
}

fn maxout_stack(g: &mut Graph, layers: &[Maxout], mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, x)?;
    }
    Ok(x)
}

fn dense_stack(g: &mut Graph, layers: &[Dense], mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, x)?;
    }
    Ok(x)
}

/// How pair features are pooled over a set.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregation {
    SoftHistogram(HistogramSpec),
    /// Mean over pairs; turns the network into a sum-decomposable set model.
    Mean,
}

/// Sizes shared by every discriminator variant.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorShape {
    pub data_dim: usize,
    /// Width of each hidden layer.
    pub hidden: usize,
    pub feature_layers: usize,
    pub pieces: usize,
    pub pair_layers: usize,
    pub histogram: HistogramSpec,
    /// Number of minibatch-discrimination kernels (appended features).
    pub mbd_kernels: usize,
    /// Dimension of each minibatch-discrimination kernel.
    pub mbd_dim: usize,
}

impl Default for DiscriminatorShape {
    fn default() -> Self {
        DiscriminatorShape {
            data_dim: 2,
            hidden: 200,
            feature_layers: 3,
            pieces: 5,
            pair_layers: 3,
            histogram: HistogramSpec::default(),
            mbd_kernels: 16,
            mbd_dim: 8,
        }
    }
}

fn feature_stack<R: Rng + ?Sized>(shape: &DiscriminatorShape, input: usize, rng: &mut R) -> Vec<Maxout> {
    (0..shape.feature_layers)
        .map(|i| {
            let fan_in = if i == 0 { input } else { shape.hidden };
            Maxout::new(&format!("d_f/{i}"), fan_in, shape.hidden, shape.pieces, rng)
        })
        .collect()
}

fn feature_width(layers: &[Maxout], input: usize) -> usize {
    layers.last().map_or(input, Maxout::outputs)
}

/// Per-sample discriminator: maxout feature stack and a logistic output unit.
#[derive(Clone, Debug)]
pub struct VanillaDiscriminator {
    pub body: Vec<Maxout>,
    pub head: Dense,
    input: usize,
}

impl VanillaDiscriminator {
    pub fn new<R: Rng + ?Sized>(shape: &DiscriminatorShape, input: usize, rng: &mut R) -> Self {
        let body = feature_stack(shape, input, rng);
        let head = Dense::new("d_h/0", feature_width(&body, input), 1, Activation::Identity, rng);
        VanillaDiscriminator { body, head, input }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    /// `x: [m, input]` to `[m, 1]` probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        group_count(g, x, 1, self.input)?;
        let h = maxout_stack(g, &self.body, x)?;
        let logit = self.head.forward(g, h)?;
        g.sigmoid(logit)
    }
}

impl Module for VanillaDiscriminator {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.body.iter().flat_map(Module::parameters).collect();
        v.extend(self.head.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.body.iter_mut().flat_map(Module::parameters_mut).collect();
        v.extend(self.head.parameters_mut());
        v
    }
}

/// Packed discriminator: the `k` samples of a group are concatenated in
/// order into one `k * d` input.
#[derive(Clone, Debug)]
pub struct PacDiscriminator {
    pub inner: VanillaDiscriminator,
    pack: usize,
}

impl PacDiscriminator {
    pub fn new<R: Rng + ?Sized>(shape: &DiscriminatorShape, pack: usize, rng: &mut R) -> Self {
        PacDiscriminator {
            inner: VanillaDiscriminator::new(shape, pack * shape.data_dim, rng),
            pack,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = self.inner.input_width() / self.pack;
        let m = group_count(g, x, self.pack, d)?;
        let packed = g.reshape(x, &[m, self.pack * d])?;
        self.inner.forward(g, packed)
    }
}

/// Appends, for every row, `Σ_{j≠i} exp(-‖M_i,b − M_j,b‖₁)` per kernel `b`,
/// where `M = F T` reshaped into `kernels x dim` matrices.
#[derive(Clone, Debug)]
pub struct MinibatchDiscrimination {
    pub projection: Parameter,
    kernels: usize,
    dim: usize,
}

impl MinibatchDiscrimination {
    pub fn new<R: Rng + ?Sized>(inputs: usize, kernels: usize, dim: usize, rng: &mut R) -> Self {
        let t = crate::gradcheck::random_tensor(rng, &[inputs, kernels * dim], 0.1);
        MinibatchDiscrimination {
            projection: Parameter::new("mbd/projection", t, "normal(0, 0.1)"),
            kernels,
            dim,
        }
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    /// `f: [n, A]` to `[n, A + kernels]`.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let a = self.projection.value.shape()[0];
        if s.len() != 2 || s[1] != a {
            return Err(Error::dim("minibatch_discrimination", format!("input {s:?}, expected width {a}")));
        }
        let n = s[0];
        if n < 2 {
            return Err(Error::contract("minibatch discrimination needs a batch of at least 2"));
        }
        let (left, right) = pair_rows(1, n)?;
        let t = g.param(&self.projection);
        let m = g.matmul(f, t)?;
        let mi = g.gather_rows(m, &left)?;
        let mj = g.gather_rows(m, &right)?;
        let diff = g.sub(mi, mj)?;
        let diff = g.abs(diff)?;
        let diff = g.reshape(diff, &[n * (n - 1), self.kernels, self.dim])?;
        let l1 = g.sum(diff, 2)?;
        let neg = g.neg(l1)?;
        let sim = g.exp(neg)?;
        let sim = g.reshape(sim, &[n, n - 1, self.kernels])?;
        let o = g.sum(sim, 1)?;
        g.concat_cols(&[f, o])
    }
}

#[derive(Clone, Debug)]
pub struct MinibatchDiscriminator {
    pub body: Vec<Maxout>,
    pub mbd: MinibatchDiscrimination,
    pub head: Dense,
    input: usize,
}

impl MinibatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(shape: &DiscriminatorShape, rng: &mut R) -> Self {
        let input = shape.data_dim;
        let body = feature_stack(shape, input, rng);
        let width = feature_width(&body, input);
        let mbd = MinibatchDiscrimination::new(width, shape.mbd_kernels, shape.mbd_dim, rng);
        let head = Dense::new("d_h/0", width + shape.mbd_kernels, 1, Activation::Identity, rng);
        MinibatchDiscriminator { body, mbd, head, input }
    }

    /// The whole batch forms the comparison pool, so `x` must be all real or
    /// all generated.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        group_count(g, x, 1, self.input)?;
        let h = maxout_stack(g, &self.body, x)?;
        let h = self.mbd.forward(g, h)?;
        let logit = self.head.forward(g, h)?;
        g.sigmoid(logit)
    }
}

/// The pairwise set discriminator.
#[derive(Clone, Debug)]
pub struct SetDiscriminator {
    pub d_f: Vec<Maxout>,
    /// Applied to `[feat_i ‖ feat_j]`; empty means identity.
    pub d_g: Vec<Dense>,
    pub aggregation: Aggregation,
    pub d_h: Vec<Dense>,
    input: usize,
}

impl SetDiscriminator {
    pub fn new<R: Rng + ?Sized>(shape: &DiscriminatorShape, rng: &mut R) -> Self {
        let input = shape.data_dim;
        let d_f = feature_stack(shape, input, rng);
        let fw = feature_width(&d_f, input);
        let d_g: Vec<Dense> = (0..shape.pair_layers)
            .map(|i| {
                let fan_in = if i == 0 { 2 * fw } else { shape.hidden };
                // the last pair layer feeds the histogram's own sigmoid
                let act = if i + 1 == shape.pair_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense::new(&format!("d_g/{i}"), fan_in, shape.hidden, act, rng)
            })
            .collect();
        let pair_width = d_g.last().map_or(2 * fw, Dense::outputs);
        let agg = Aggregation::SoftHistogram(shape.histogram.clone());
        let d_h = vec![Dense::new(
            "d_h/0",
            pair_width * shape.histogram.bins(),
            1,
            Activation::Identity,
            rng,
        )];
        SetDiscriminator {
            d_f,
            d_g,
            aggregation: agg,
            d_h,
            input,
        }
    }

    /// Assembles a discriminator from explicit parts.
    pub fn from_parts(
        input: usize,
        d_f: Vec<Maxout>,
        d_g: Vec<Dense>,
        aggregation: Aggregation,
        d_h: Vec<Dense>,
    ) -> Self {
        SetDiscriminator {
            d_f,
            d_g,
            aggregation,
            d_h,
            input,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    /// Pair features `[m * k(k-1), F]` for `m` sets of `k` rows.
    pub fn pair_features(&self, g: &mut Graph, x: Var, k: usize) -> Result<Var> {
        let m = group_count(g, x, k, self.input)?;
        let h = maxout_stack(g, &self.d_f, x)?;
        let (left, right) = pair_rows(m, k)?;
        let Some((first, rest)) = self.d_g.split_first() else {
            let hi = g.gather_rows(h, &left)?;
            let hj = g.gather_rows(h, &right)?;
            return g.concat_cols(&[hi, hj]);
        };
        // [h_i ‖ h_j] W = h_i W_top + h_j W_bottom, evaluated per sample
        // before gathering so the product runs over k rows instead of k(k-1).
        let fw = g.shape(h)[1];
        if first.inputs() != 2 * fw {
            return Err(Error::dim("pairing", format!("d_g expects {}, pairs have {}", first.inputs(), 2 * fw)));
        }
        let w = g.param(&first.weight);
        let b = g.param(&first.bias);
        let w_top = g.slice_rows(w, 0, fw)?;
        let w_bottom = g.slice_rows(w, fw, 2 * fw)?;
        let a = g.matmul(h, w_top)?;
        let c = g.matmul(h, w_bottom)?;
        let ai = g.gather_rows(a, &left)?;
        let cj = g.gather_rows(c, &right)?;
        let z = g.add(ai, cj)?;
        let z = g.add(z, b)?;
        let p = first.activation.apply(g, z)?;
        dense_stack(g, rest, p)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, k: usize) -> Result<Var> {
        let m = group_count(g, x, k, self.input)?;
        let p = self.pair_features(g, x, k)?;
        let pairs = k * (k - 1);
        let pooled = match &self.aggregation {
            Aggregation::SoftHistogram(spec) => soft_histogram(g, p, pairs, spec)?,
            Aggregation::Mean => {
                let f = g.shape(p)[1];
                let p = g.reshape(p, &[m, pairs, f])?;
                g.mean(p, 1)?
            }
        };
        let logit = dense_stack(g, &self.d_h, pooled)?;
        if g.shape(logit)[1] != 1 {
            return Err(Error::dim("d_h", "classifier must end in one unit"));
        }
        g.sigmoid(logit)
    }
}

impl Module for SetDiscriminator {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.d_f.iter().flat_map(Module::parameters).collect();
        v.extend(self.d_g.iter().flat_map(Module::parameters));
        v.extend(self.d_h.iter().flat_map(Module::parameters));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.d_f.iter_mut().flat_map(Module::parameters_mut).collect();
        v.extend(self.d_g.iter_mut().flat_map(Module::parameters_mut));
        v.extend(self.d_h.iter_mut().flat_map(Module::parameters_mut));
        v
    }
}

/// Any of the four discriminator variants.
#[derive(Clone, Debug)]
pub enum Discriminator {
    Vanilla(VanillaDiscriminator),
    Minibatch(MinibatchDiscriminator),
    Pac(PacDiscriminator),
    Set(SetDiscriminator),
}

impl Discriminator {
    pub fn build<R: Rng + ?Sized>(
        arch: Architecture,
        shape: &DiscriminatorShape,
        set_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match arch {
            Architecture::Gan | Architecture::Md if set_size != 1 => Err(Error::config(
                "k",
                format!("{arch} judges single samples; k must be 1"),
            )),
            Architecture::Pacgan | Architecture::Setgan if set_size < 2 => {
                Err(Error::config("k", format!("{arch} requires k >= 2")))
            }
            Architecture::Gan => Ok(Discriminator::Vanilla(VanillaDiscriminator::new(shape, shape.data_dim, rng))),
            Architecture::Md => Ok(Discriminator::Minibatch(MinibatchDiscriminator::new(shape, rng))),
            Architecture::Pacgan => Ok(Discriminator::Pac(PacDiscriminator::new(shape, set_size, rng))),
            Architecture::Setgan => Ok(Discriminator::Set(SetDiscriminator::new(shape, rng))),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Discriminator::Vanilla(_) => Architecture::Gan,
            Discriminator::Minibatch(_) => Architecture::Md,
            Discriminator::Pac(_) => Architecture::Pacgan,
            Discriminator::Set(_) => Architecture::Setgan,
        }
    }

    /// `x: [m * k, d]` to `[m, 1]` probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var, k: usize) -> Result<Var> {
        match self {
            Discriminator::Vanilla(d) if k == 1 => d.forward(g, x),
            Discriminator::Minibatch(d) if k == 1 => d.forward(g, x),
            Discriminator::Vanilla(_) | Discriminator::Minibatch(_) => {
                Err(Error::contract(format!("per-sample discriminator given sets of {k}")))
            }
            Discriminator::Pac(d) if d.pack == k => d.forward(g, x),
            Discriminator::Pac(d) => Err(Error::contract(format!("pack size is {}, given {k}", d.pack))),
            Discriminator::Set(d) => d.forward(g, x, k),
        }
    }

    /// Probability that one set is real.
    pub fn probability(&self, set: &SampleSet) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(set.samples().clone());
        let p = self.forward(&mut g, x, set.k())?;
        g.value(p).item()
    }
}

impl Module for Discriminator {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Discriminator::Vanilla(d) => d.parameters(),
            Discriminator::Minibatch(d) => {
                let mut v: Vec<&Parameter> = d.body.iter().flat_map(Module::parameters).collect();
                v.push(&d.mbd.projection);
                v.extend(d.head.parameters());
                v
            }
            Discriminator::Pac(d) => d.inner.parameters(),
            Discriminator::Set(d) => d.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Discriminator::Vanilla(d) => d.parameters_mut(),
            Discriminator::Minibatch(d) => {
                let mut v: Vec<&mut Parameter> = d.body.iter_mut().flat_map(Module::parameters_mut).collect();
                v.push(&mut d.mbd.projection);
                v.extend(d.head.parameters_mut());
                v
            }
            Discriminator::Pac(d) => d.inner.parameters_mut(),
            Discriminator::Set(d) => d.parameters_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, random_tensor, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_shape() -> DiscriminatorShape {
        DiscriminatorShape {
            hidden: 8,
            pieces: 3,
            histogram: HistogramSpec::uniform(4, 20.0).unwrap(),
            mbd_kernels: 3,
            mbd_dim: 2,
            ..DiscriminatorShape::default()
        }
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(enumerate_pairs(2).unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(enumerate_pairs(5).unwrap().len(), 20);
        assert_eq!(
            enumerate_pairs(3).unwrap(),
            vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
        );
        assert!(matches!(enumerate_pairs(1), Err(Error::Contract(_))));
    }

    #[test]
    fn split_first_pair_layer_matches_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = SetDiscriminator::new(&small_shape(), &mut rng);
        let x = random_tensor(&mut rng, &[8, 2], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fast = d.pair_features(&mut g, xv, 4).unwrap();
        let h = maxout_stack(&mut g, &d.d_f, xv).unwrap();
        let (l, r) = pair_rows(2, 4).unwrap();
        let hi = g.gather_rows(h, &l).unwrap();
        let hj = g.gather_rows(h, &r).unwrap();
        let cat = g.concat_cols(&[hi, hj]).unwrap();
        let slow = dense_stack(&mut g, &d.d_g, cat).unwrap();
        for (a, b) in g.value(fast).data().iter().zip(g.value(slow).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_pair_rows_concentrate_histogram_mass() {
        // two identical samples give two identical pair rows, so every
        // occupied bin holds about two units of mass; with five bins a
        // feature 0.08 from both edges keeps each logistic above 0.9997
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = HistogramSpec::uniform(5, 100.0).unwrap();
        let shape = DiscriminatorShape {
            hidden: 64,
            histogram: spec.clone(),
            ..small_shape()
        };
        let d = SetDiscriminator::new(&shape, &mut rng);
        let x = Tensor::from_rows(&[[0.3, -0.7], [0.3, -0.7]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = d.pair_features(&mut g, xv, 2).unwrap();
        let pv = g.value(p).clone();
        assert_eq!(pv.row(0), pv.row(1));
        let h = soft_histogram(&mut g, p, 2, &spec).unwrap();
        let h = g.value(h).data().to_vec();
        let mut checked = 0;
        for (j, &raw) in pv.row(0).iter().enumerate() {
            let u = crate::autodiff::sigmoid(raw);
            let bin = ((u * 5.0).floor() as usize).min(4);
            let lo = bin as f64 / 5.0;
            if u - lo < 0.08 || lo + 0.2 - u < 0.08 {
                continue;
            }
            checked += 1;
            assert!((h[j * 5 + bin] - 2.0).abs() < 1e-3, "feature {j}: {}", h[j * 5 + bin]);
        }
        assert!(checked > 0);
    }

    #[test]
    fn set_forward_is_permutation_invariant_and_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::build(Architecture::Setgan, &small_shape(), 5, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3 - 0.5, (i * i) as f64 * 0.1]).collect();
        let base = d
            .probability(&SampleSet::new(Tensor::from_rows(&rows).unwrap(), Origin::Real).unwrap())
            .unwrap();
        assert!(base > 0.0 && base < 1.0);
        for perm in [[4, 3, 2, 1, 0], [1, 0, 3, 2, 4], [2, 4, 1, 0, 3]] {
            let p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let out = d
                .probability(&SampleSet::new(Tensor::from_rows(&p).unwrap(), Origin::Real).unwrap())
                .unwrap();
            assert!((out - base).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (arch, k) in [
            (Architecture::Gan, 1),
            (Architecture::Md, 1),
            (Architecture::Pacgan, 3),
            (Architecture::Setgan, 3),
        ] {
            let d = Discriminator::build(arch, &small_shape(), k, &mut rng).unwrap();
            let x = random_tensor(&mut rng, &[6, 2], 1.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let p = d.forward(&mut g, xv, k).unwrap();
            let l = g.mean_all(p).unwrap();
            g.backward(l).unwrap();
            for prm in d.parameters() {
                let gr = g.param_grad(prm.id()).unwrap_or_else(|| panic!("{arch}: {} missing", prm.name));
                assert!(gr.iter().any(|v| *v != 0.0), "{arch}: {} all zero", prm.name);
            }
        }
    }

    #[test]
    fn pac_with_one_sample_equals_vanilla() {
        let shape = small_shape();
        let pac = PacDiscriminator::new(&shape, 1, &mut ChaCha8Rng::seed_from_u64(4));
        let van = VanillaDiscriminator::new(&shape, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[7, 2], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = pac.forward(&mut g, xv).unwrap();
        let b = van.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn config_invariants_on_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = small_shape();
        assert!(Discriminator::build(Architecture::Pacgan, &s, 1, &mut rng).is_err());
        assert!(Discriminator::build(Architecture::Setgan, &s, 1, &mut rng).is_err());
        assert!(Discriminator::build(Architecture::Gan, &s, 2, &mut rng).is_err());
        let d = Discriminator::build(Architecture::Gan, &s, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 3]));
        assert!(matches!(d.forward(&mut g, x, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn minibatch_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = MinibatchDiscrimination::new(3, 4, 2, &mut rng);
        let mut g = Graph::new();
        let same = g.constant(Tensor::from_rows(&[[0.5, 1.0, -2.0], [0.5, 1.0, -2.0]]).unwrap());
        let o = layer.forward(&mut g, same).unwrap();
        assert_eq!(g.shape(o), &[2, 7]);
        for r in 0..2 {
            assert_eq!(&g.value(o).row(r)[3..], &[1.0; 4]);
        }
        let far = g.constant(Tensor::from_rows(&[[1e4, -1e4, 1e4], [-1e4, 1e4, -1e4]]).unwrap());
        let o = layer.forward(&mut g, far).unwrap();
        assert!(g.value(o).row(0)[3..].iter().all(|&v| v < 1e-12));
        let one = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(layer.forward(&mut g, one), Err(Error::Contract(_))));
    }

    #[test]
    fn minibatch_feature_ignores_order_of_other_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = MinibatchDiscrimination::new(3, 4, 2, &mut rng);
        let x = random_tensor(&mut rng, &[5, 3], 1.0);
        let rows: Vec<Vec<f64>> = (0..5).map(|i| x.row(i).to_vec()).collect();
        let perm = vec![rows[0].clone(), rows[3].clone(), rows[1].clone(), rows[4].clone(), rows[2].clone()];
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(Tensor::from_rows(&perm).unwrap());
        let oa = layer.forward(&mut g, a).unwrap();
        let ob = layer.forward(&mut g, b).unwrap();
        for (u, v) in g.value(oa).row(0).iter().zip(g.value(ob).row(0)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_projection_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = MinibatchDiscrimination::new(3, 2, 2, &mut rng);
        let x = random_tensor(&mut rng, &[4, 3], 1.0);
        let loss = |l: &MinibatchDiscrimination, g: &mut Graph| -> Result<Var> {
            let xv = g.constant(x.clone());
            let o = l.forward(g, xv)?;
            let o = g.square(o)?;
            g.sum_all(o)
        };
        let mut g = Graph::new();
        let lv = loss(&layer, &mut g).unwrap();
        g.backward(lv).unwrap();
        let analytic = g.param_grad(layer.projection.id()).unwrap().to_vec();
        let numeric = numeric_gradient(&layer.projection.value, 1e-5, |t| {
            let mut p = layer.clone();
            p.projection.value = t.clone();
            let mut g = Graph::new();
            let lv = loss(&p, &mut g)?;
            g.value(lv).item()
        })
        .unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn mean_aggregation_with_identity_pairing_is_sum_decomposable() {
        // rho(mean over pairs of [phi(x_i) ‖ phi(x_j)]) = rho([mean phi ‖ mean phi])
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = small_shape();
        let d_f = feature_stack(&shape, 2, &mut rng);
        let rho = Dense::new("d_h/0", 16, 1, Activation::Identity, &mut rng);
        let d = SetDiscriminator::from_parts(2, d_f.clone(), vec![], Aggregation::Mean, vec![rho.clone()]);
        let x = random_tensor(&mut rng, &[4, 2], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = d.forward(&mut g, xv, 4).unwrap();
        let phi = maxout_stack(&mut g, &d_f, xv).unwrap();
        let mean_phi = g.mean(phi, 0).unwrap();
        let mean_phi = g.reshape(mean_phi, &[1, 8]).unwrap();
        let both = g.concat_cols(&[mean_phi, mean_phi]).unwrap();
        let logit = rho.forward(&mut g, both).unwrap();
        let expect = g.sigmoid(logit).unwrap();
        assert!((g.value(out).data()[0] - g.value(expect).data()[0]).abs() < 1e-12);
    }
}
