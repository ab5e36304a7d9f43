//! Scores against a known isotropic Gaussian mixture.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equal-weight mixture of isotropic Gaussians sharing one `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::config("sigma", format!("must be finite and nonnegative, got {sigma}")));
        }
        let d = means.first().map(Vec::len).ok_or_else(|| Error::config("means", "mixture is empty"))?;
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::config("means", "component means must share a positive dimension"));
        }
        if means.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::config("means", "component means must be finite"));
        }
        for (i, a) in means.iter().enumerate() {
            if means[..i].contains(a) {
                return Err(Error::config("means", format!("duplicate center {a:?}")));
            }
        }
        Ok(MixtureSpec { means, sigma })
    }

    /// `side x side` grid of 2D centers `start + step * (i, j)`.
    pub fn grid(side: usize, start: f64, step: f64, sigma: f64) -> Result<Self> {
        let means = (0..side)
            .flat_map(|i| (0..side).map(move |j| vec![start + step * i as f64, start + step * j as f64]))
            .collect();
        MixtureSpec::new(means, sigma)
    }

    /// The 25-mode benchmark: centers `{-4, -2, 0, 2, 4}²`, `sigma = 0.05`.
    pub fn default_grid() -> Self {
        MixtureSpec::grid(5, -4.0, 2.0, 0.05).expect("valid grid")
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Draws `n` points: a uniform component, then isotropic noise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let c = &self.means[rng.random_range(0..self.components())];
            for &mu in c {
                let z: f64 = StandardNormal.sample(rng);
                data.push(mu + self.sigma * z);
            }
        }
        Tensor::new(vec![n, d], data).expect("n > 0")
    }

    /// Index of and squared distance to the closest center.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.means.iter().enumerate() {
            let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    fn check(&self, samples: &Tensor) -> Result<()> {
        if samples.rank() != 2 || samples.cols() != self.dim() {
            return Err(Error::dim(
                "mixture",
                format!("samples {:?}, mixture dimension {}", samples.shape(), self.dim()),
            ));
        }
        Ok(())
    }
}

/// Fraction of samples within `n_std * sigma` of their nearest center.
pub fn high_quality_fraction(samples: &Tensor, mixture: &MixtureSpec, n_std: f64) -> Result<f64> {
    mixture.check(samples)?;
    let r2 = (n_std * mixture.sigma).powi(2);
    let hits = (0..samples.rows())
        .filter(|&i| mixture.nearest(samples.row(i)).1 <= r2)
        .count();
    Ok(hits as f64 / samples.rows() as f64)
}

/// Posterior over components for one point (equal priors), via log-sum-exp.
pub fn posterior(x: &[f64], mixture: &MixtureSpec) -> Vec<f64> {
    let s2 = mixture.sigma * mixture.sigma;
    let logits: Vec<f64> = mixture
        .means
        .iter()
        .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * s2))
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// `exp(mean KL(p(y|x) ‖ p(y)))` with the exact mixture posterior as the
/// classifier and `p(y)` its average over the samples.
pub fn analytic_inception_score(samples: &Tensor, mixture: &MixtureSpec) -> Result<f64> {
    mixture.check(samples)?;
    if mixture.sigma == 0.0 {
        return Err(Error::domain("inception_score", "posterior undefined for sigma = 0"));
    }
    let n = samples.rows();
    let posts: Vec<Vec<f64>> = (0..n).map(|i| posterior(samples.row(i), mixture)).collect();
    let k = mixture.components();
    let mut marginal = vec![0.0; k];
    for p in &posts {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n as f64);
    let mean_kl = posts
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(mean_kl.exp())
}

/// Number of components holding at least `threshold_fraction` of all
/// samples among points within `3 sigma` of them and nearest to them.
pub fn mode_coverage(samples: &Tensor, mixture: &MixtureSpec, threshold_fraction: f64) -> Result<usize> {
    mixture.check(samples)?;
    Ok(mode_coverage_rows((0..samples.rows()).map(|i| samples.row(i)), mixture, threshold_fraction))
}

/// [`mode_coverage`] over any sequence of points; an empty sequence covers
/// nothing.
pub fn mode_coverage_rows<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    mixture: &MixtureSpec,
    threshold_fraction: f64,
) -> usize {
    let r2 = (3.0 * mixture.sigma).powi(2);
    let mut counts = vec![0usize; mixture.components()];
    let mut total = 0usize;
    for x in rows {
        total += 1;
        let (c, d2) = mixture.nearest(x);
        if d2 <= r2 {
            counts[c] += 1;
        }
    }
    let need = threshold_fraction * total as f64;
    counts.iter().filter(|&&c| c > 0 && c as f64 >= need).count()
}
