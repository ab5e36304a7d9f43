//! Sample-quality metrics for generators of low-dimensional data.
//!
//! The space binning distance compares two histograms over the leaves of a
//! partition tree built on real data only; the other scores use a known
//! Gaussian mixture as ground truth.

mod frechet;
mod haar;
mod mixture;
mod tree;

pub use frechet::frechet_distance;
pub use haar::{haar_transform, inverse_haar, multiscale_sbd, HaarPyramid, MultiscaleSbd};
pub use mixture::{analytic_inception_score, high_quality_fraction, mode_coverage, mode_coverage_rows, posterior, MixtureSpec};
pub use tree::{assign_histogram, build_partition_tree, sbd, sbd_against, BinHistogram, PartitionTree};

use crate::error::Result;
use crate::tensor::Tensor;

/// Default fraction of samples a mode must hold to count as covered.
pub const MODE_THRESHOLD: f64 = 0.01;

/// All scores for one batch of generated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub sbd: f64,
    pub inception: f64,
    pub high_quality: f64,
    pub frechet: f64,
    pub modes: usize,
}

/// Scores `samples` against a tree built on `real` and the ground-truth
/// `mixture`. `real` should be held out from training.
pub fn score_samples(
    samples: &Tensor,
    real: &Tensor,
    tree: &PartitionTree,
    mixture: &MixtureSpec,
    n_std: f64,
) -> Result<SampleScores> {
    Ok(SampleScores {
        sbd: sbd(&assign_histogram(tree, real)?, &assign_histogram(tree, samples)?)?,
        inception: analytic_inception_score(samples, mixture)?,
        high_quality: high_quality_fraction(samples, mixture, n_std)?,
        frechet: frechet_distance(samples, real)?,
        modes: mode_coverage(samples, mixture, MODE_THRESHOLD)?,
    })
}
