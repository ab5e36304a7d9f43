//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! Only forward values are used here, so the numerical gradient is
//! independent of every backward rule it is compared against.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)`, with a tiny floor for all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Gradient of the scalar `f(x)` with respect to the input `x`, analytic vs
/// numeric. Returns the relative error.
pub fn check_gradient(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let loss = f(&mut g, v)?;
    g.backward(loss)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = numeric_gradient(x, h, |xp| {
        let mut g = Graph::new();
        let v = g.constant(xp.clone());
        let loss = f(&mut g, v)?;
        g.value(loss).item()
    })?;
    if analytic.len() != numeric.len() {
        return Err(Error::contract("gradient length mismatch"));
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape is valid")
}
