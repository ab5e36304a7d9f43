//! Fréchet distance between Gaussian fits of two sample sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JITTER: f64 = 1e-10;

fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::contract("Fréchet distance needs at least two samples per set"));
    }
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let mut c = m;
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Symmetric square root through the eigendecomposition; negative
/// eigenvalues from rounding are clipped to zero.
fn sqrtm_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

fn regularize(cov: &mut DMatrix<f64>, which: &str) {
    let min = cov.clone().symmetric_eigen().eigenvalues.min();
    if min <= 0.0 {
        log::warn!("covariance of {which} is singular (min eigenvalue {min:e}); adding {JITTER:e} I");
        for i in 0..cov.nrows() {
            cov[(i, i)] += JITTER;
        }
    }
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ma, mut sa) = moments(a)?;
    let (mb, mut sb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::dim("frechet_distance", format!("dimensions {} and {}", ma.len(), mb.len())));
    }
    regularize(&mut sa, "first set");
    regularize(&mut sb, "second set");
    let ra = sqrtm_sym(&sa);
    let mut inner = &ra * &sb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shifted(t: &Tensor, delta: &[f64]) -> Tensor {
        let data = t.data().chunks(delta.len()).flat_map(|r| r.iter().zip(delta).map(|(x, d)| x + d)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    fn rotated(t: &Tensor, theta: f64) -> Tensor {
        let (s, c) = theta.sin_cos();
        let data = t.data().chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn same_set_is_zero() {
        let a = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[500, 2], 1.5);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-10);
    }

    #[test]
    fn shifted_unit_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[100_000, 2], 1.0);
        let b = shifted(&random_tensor(&mut rng, &[100_000, 2], 1.0), &[1.5, -2.0]);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 6.25).abs() < 0.05 * 6.25, "{fd}");
    }

    #[test]
    fn degenerate_covariance_is_jittered() {
        let line = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        let fd = frechet_distance(&line, &line).unwrap();
        assert!(fd.is_finite() && fd < 1e-4);
        assert!(frechet_distance(&Tensor::zeros(&[1, 2]), &line).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_rotation_invariant(seed in any::<u64>(), theta in 0.0f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, &[50, 2], 1.0);
            let b = shifted(&random_tensor(&mut rng, &[40, 2], 2.0), &[0.5, 0.1]);
            let ab = frechet_distance(&a, &b).unwrap();
            prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-10);
            let rot = frechet_distance(&rotated(&a, theta), &rotated(&b, theta)).unwrap();
            prop_assert!((ab - rot).abs() < 1e-8);
        }
    }
}
