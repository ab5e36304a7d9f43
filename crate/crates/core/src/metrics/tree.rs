//! PCA-median partition trees and the space binning distance.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative gap under which two eigenvalues count as tied.
const EIGEN_TIE: f64 = 1e-12;

/// Binary tree of `(direction, threshold)` splits stored in heap order:
/// node `i` has children `2i + 1` (projection `<=` threshold) and `2i + 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionTree {
    depth: usize,
    dim: usize,
    directions: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
}

/// Normalized leaf occupancies.
#[derive(Clone, Debug, PartialEq)]
pub struct BinHistogram {
    probs: Vec<f64>,
}

impl BinHistogram {
    /// Validates nonnegative entries summing to one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("a histogram needs at least one bin"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract("histogram entries must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("histogram sums to {total}")));
        }
        Ok(BinHistogram { probs })
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::contract("cannot normalize an empty histogram"));
        }
        BinHistogram::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `Σ (p_i − q_i)² / (p_i + q_i)`, skipping bins empty in both.
pub fn sbd(p: &BinHistogram, q: &BinHistogram) -> Result<f64> {
    if p.bins() != q.bins() {
        return Err(Error::contract(format!("histograms have {} and {} bins", p.bins(), q.bins())));
    }
    let s: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(a, b)| *a + *b > 0.0)
        .map(|(a, b)| (a - b) * (a - b) / (a + b))
        .sum();
    // Disjoint histograms sum to 2 only up to rounding.
    Ok(s.min(2.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign_normalize(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| **x != 0.0) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn unit(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Top principal direction of the given rows, or `None` without variance.
fn principal_direction(data: &Tensor, rows: &[usize]) -> Option<Vec<f64>> {
    let d = data.cols();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| data.row(rows[i])[j] - mean[j]);
    if centered.iter().all(|x| *x == 0.0) {
        return None;
    }
    // the smaller of X^T X and X X^T shares the nonzero spectrum
    let use_gram = n < d;
    let m = if use_gram {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    };
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top <= 0.0 {
        return None;
    }
    let mut best: Option<Vec<f64>> = None;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if top - lambda > EIGEN_TIE * top {
            continue;
        }
        let col = eig.eigenvectors.column(k);
        let mut v: Vec<f64> = if use_gram {
            (centered.transpose() * col).iter().cloned().collect()
        } else {
            col.iter().cloned().collect()
        };
        unit(&mut v);
        sign_normalize(&mut v);
        let better = match &best {
            None => true,
            Some(b) => v.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some(v);
        }
    }
    best
}

impl PartitionTree {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    /// Split directions of the internal nodes in heap order.
    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for _ in 0..self.depth {
            node = if dot(&self.directions[node], x) <= self.thresholds[node] {
                2 * node + 1
            } else {
                2 * node + 2
            };
        }
        node - (self.leaves() - 1)
    }

    pub fn leaf_counts(&self, samples: &Tensor) -> Result<Vec<usize>> {
        if samples.rank() != 2 || samples.cols() != self.dim {
            return Err(Error::dim(
                "assign_histogram",
                format!("samples {:?}, tree dimension {}", samples.shape(), self.dim),
            ));
        }
        let mut counts = vec![0; self.leaves()];
        for i in 0..samples.rows() {
            counts[self.leaf_of(samples.row(i))] += 1;
        }
        Ok(counts)
    }
}

/// Recursively halves `data` (`N x d`) at the projection median along each
/// node's top principal direction.
///
/// The threshold is the lower median and ties go left, so distinct
/// projections yield leaves of exactly `⌊N/2ⁿ⌋` or `⌈N/2ⁿ⌉` points. A node
/// whose points coincide splits along the first axis with everything left.
pub fn build_partition_tree(data: &Tensor, depth: usize) -> Result<PartitionTree> {
    if data.rank() != 2 {
        return Err(Error::dim("build_partition_tree", "data must be N x d"));
    }
    let n = data.rows();
    if depth >= usize::BITS as usize - 1 || n < (1usize << depth) {
        return Err(Error::contract(format!("{n} samples cannot fill 2^{depth} bins")));
    }
    let d = data.cols();
    let internal = (1usize << depth) - 1;
    let mut tree = PartitionTree {
        depth,
        dim: d,
        directions: vec![Vec::new(); internal],
        thresholds: vec![0.0; internal],
    };
    let mut stack = vec![(0usize, (0..n).collect::<Vec<usize>>())];
    while let Some((node, rows)) = stack.pop() {
        if node >= internal {
            continue;
        }
        let mut axis0 = vec![0.0; d];
        axis0[0] = 1.0;
        let (dir, thr) = if rows.is_empty() {
            (axis0, f64::INFINITY)
        } else {
            match principal_direction(data, &rows) {
                Some(dir) => {
                    let mut proj: Vec<f64> = rows.iter().map(|&r| dot(&dir, data.row(r))).collect();
                    proj.sort_by(f64::total_cmp);
                    let thr = proj[(proj.len() - 1) / 2];
                    (dir, thr)
                }
                None => {
                    let thr = data.row(rows[0])[0];
                    (axis0, thr)
                }
            }
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| dot(&dir, data.row(r)) <= thr);
        tree.directions[node] = dir;
        tree.thresholds[node] = thr;
        stack.push((2 * node + 2, right));
        stack.push((2 * node + 1, left));
    }
    Ok(tree)
}

/// Routes every sample to its leaf and normalizes by the sample count.
pub fn assign_histogram(tree: &PartitionTree, samples: &Tensor) -> Result<BinHistogram> {
    if samples.numel() == 0 || samples.rank() != 2 {
        return Err(Error::contract("cannot bin an empty sample set"));
    }
    BinHistogram::from_counts(&tree.leaf_counts(samples)?)
}

/// Builds a tree on `reference` and scores `samples` against it.
pub fn sbd_against(reference: &Tensor, samples: &Tensor, depth: usize) -> Result<f64> {
    let tree = build_partition_tree(reference, depth)?;
    sbd(&assign_histogram(&tree, reference)?, &assign_histogram(&tree, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_zero_is_one_bin() {
        let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[10, 2], 1.0);
        let tree = build_partition_tree(&data, 0).unwrap();
        assert_eq!(assign_histogram(&tree, &data).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn collinear_points_split_between_one_and_two() {
        let data = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        let tree = build_partition_tree(&data, 1).unwrap();
        let dir = &tree.directions()[0];
        assert!((dir[0].abs() - 1.0).abs() < 1e-12 && dir[1].abs() < 1e-12);
        let thr = tree.thresholds()[0] * dir[0];
        assert!((1.0..2.0).contains(&thr), "threshold {thr}");
        assert_eq!(tree.leaf_counts(&data).unwrap(), vec![2, 2]);
    }

    #[test]
    fn exact_halving_of_4096_points() {
        let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[4096, 2], 1.0);
        let tree = build_partition_tree(&data, 5).unwrap();
        assert_eq!(tree.leaf_counts(&data).unwrap(), vec![128; 32]);
        for dir in tree.directions() {
            assert!((dot(dir, dir) - 1.0).abs() < 1e-12);
        }
        let h = assign_histogram(&tree, &data).unwrap();
        assert_eq!(sbd(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn more_dimensions_than_points_use_the_gram_matrix() {
        let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[16, 40], 1.0);
        let tree = build_partition_tree(&data, 3).unwrap();
        assert_eq!(tree.leaf_counts(&data).unwrap(), vec![2; 8]);
        for dir in tree.directions() {
            assert!((dot(dir, dir) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_points_go_left() {
        let data = Tensor::filled(&[8, 2], 0.5);
        let tree = build_partition_tree(&data, 2).unwrap();
        assert_eq!(tree.leaf_counts(&data).unwrap(), vec![8, 0, 0, 0]);
        assert_eq!(tree.directions()[0], vec![1.0, 0.0]);
        let far = Tensor::from_rows(&[[3.0, 0.0]]).unwrap();
        assert_ne!(tree.leaf_of(far.row(0)), 0);
    }

    #[test]
    fn too_few_points_and_empty_samples() {
        let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[7, 2], 1.0);
        assert!(matches!(build_partition_tree(&data, 3), Err(Error::Contract(_))));
        let tree = build_partition_tree(&data, 2).unwrap();
        let wrong = Tensor::zeros(&[3, 3]);
        assert!(assign_histogram(&tree, &wrong).is_err());
    }

    #[test]
    fn point_mass_fills_one_bin() {
        let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[64, 2], 1.0);
        let tree = build_partition_tree(&data, 3).unwrap();
        let h = assign_histogram(&tree, &Tensor::filled(&[20, 2], 0.3)).unwrap();
        assert_eq!(h.probs().iter().filter(|p| **p == 1.0).count(), 1);
        assert_eq!(h.probs().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn mixture_histogram_is_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_tensor(&mut rng, &[256, 2], 1.0);
        let tree = build_partition_tree(&data, 4).unwrap();
        let a = random_tensor(&mut rng, &[100, 2], 1.0);
        let b = random_tensor(&mut rng, &[100, 2], 2.0);
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let ab = Tensor::new(vec![200, 2], both).unwrap();
        let (ha, hb, hab) = (
            assign_histogram(&tree, &a).unwrap(),
            assign_histogram(&tree, &b).unwrap(),
            assign_histogram(&tree, &ab).unwrap(),
        );
        for i in 0..16 {
            assert!((hab.probs()[i] - 0.5 * (ha.probs()[i] + hb.probs()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_versus_concentrated_closed_form() {
        let flat = BinHistogram::new(vec![1.0 / 32.0; 32]).unwrap();
        let mut c = vec![0.0; 32];
        c[7] = 1.0;
        let conc = BinHistogram::new(c).unwrap();
        let expect = 31.0 / 32.0 + (31.0f64 / 32.0).powi(2) / (33.0 / 32.0);
        assert!((sbd(&flat, &conc).unwrap() - expect).abs() < 1e-12);
        // 31/32 + 961/1056
        assert!((expect - 1.878_787_878_8).abs() < 1e-10);
        assert!(sbd(&flat, &BinHistogram::new(vec![0.5, 0.5]).unwrap()).is_err());
    }

    fn histogram() -> impl Strategy<Value = BinHistogram> {
        prop::collection::vec(0.0f64..1.0, 8).prop_filter_map("nonzero", |w| {
            let s: f64 = w.iter().sum();
            (s > 0.0).then(|| BinHistogram::new(w.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    /// Scalar re-evaluation with explicit indexing.
    fn sbd_loop(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let denom = p[i] + q[i];
            if denom != 0.0 {
                total += (p[i] - q[i]).powi(2) / denom;
            }
        }
        total
    }

    proptest! {
        #[test]
        fn sbd_is_bounded_symmetric_and_matches_loop(p in histogram(), q in histogram()) {
            let v = sbd(&p, &q).unwrap();
            prop_assert!((0.0..=2.0).contains(&v));
            prop_assert_eq!(v, sbd(&q, &p).unwrap());
            prop_assert!((v - sbd_loop(p.probs(), q.probs())).abs() < 1e-12);
            prop_assert_eq!(sbd(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn leaves_differ_by_at_most_one(n in 8usize..300, depth in 0usize..4, seed in any::<u64>()) {
            prop_assume!(n >= 1 << depth);
            let data = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[n, 3], 1.0);
            let tree = build_partition_tree(&data, depth).unwrap();
            let counts = tree.leaf_counts(&data).unwrap();
            let lo = *counts.iter().min().unwrap();
            let hi = *counts.iter().max().unwrap();
            prop_assert!(hi - lo <= 1, "{:?}", counts);
        }
    }
}
