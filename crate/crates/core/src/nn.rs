//! Parameterized layers and the Adam update rule.

use rand::Rng;

use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns parameters.
pub trait Module {
    /// Every parameter and buffer, in a stable order.
    fn parameters(&self) -> Vec<&Parameter>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    /// Pulls gradients for this module's parameters out of `graph`.
    fn collect_grads(&mut self, graph: &Graph) {
        for p in self.parameters_mut() {
            if p.trainable {
                p.accumulate_grad(graph);
            }
        }
    }

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn num_trainable(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

const GLOROT: &str = "glorot_uniform";

fn check_width(op: &'static str, g: &Graph, x: Var, expected: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != expected {
        return Err(Error::dim(op, format!("input {s:?}, layer expects width {expected}")));
    }
    Ok(())
}

/// Fully connected layer: `activation(x W + b)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: Parameter::new(
                format!("{name}/weight"),
                glorot_uniform(rng, &[inputs, outputs], inputs, outputs),
                GLOROT,
            ),
            bias: Parameter::new(format!("{name}/bias"), Tensor::zeros(&[outputs]), "zeros"),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Pre-activation `x W + b`.
    pub fn affine(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_width("dense", g, x, self.inputs())?;
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.affine(g, x)?;
        self.activation.apply(g, z)
    }
}

impl Module for Dense {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Maxout unit: each output is the maximum over `pieces` affine maps.
///
/// Weights are stored as `[in, out * pieces]` with the pieces of output `j`
/// in columns `j * pieces .. (j + 1) * pieces`.
#[derive(Clone, Debug)]
pub struct Maxout {
    pub weight: Parameter,
    pub bias: Parameter,
    pieces: usize,
    outputs: usize,
}

impl Maxout {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        pieces: usize,
        rng: &mut R,
    ) -> Self {
        assert!(pieces >= 1, "maxout needs at least one piece");
        Maxout {
            weight: Parameter::new(
                format!("{name}/weight"),
                glorot_uniform(rng, &[inputs, outputs * pieces], inputs, outputs),
                GLOROT,
            ),
            bias: Parameter::new(
                format!("{name}/bias"),
                Tensor::zeros(&[outputs * pieces]),
                "zeros",
            ),
            pieces,
            outputs,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn pieces(&self) -> usize {
        self.pieces
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_width("maxout", g, x, self.inputs())?;
        let batch = g.shape(x)[0];
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let z = g.matmul(x, w)?;
        let z = g.add(z, b)?;
        let z = g.reshape(z, &[batch, self.outputs, self.pieces])?;
        g.max(z, 2)
    }
}

impl Module for Maxout {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Which statistics a [`BatchNorm`] normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    BatchStats,
    /// Running statistics.
    Infer,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(format!("{name}/gamma"), Tensor::filled(&[features], 1.0), "ones"),
            beta: Parameter::new(format!("{name}/beta"), Tensor::zeros(&[features]), "zeros"),
            running_mean: Parameter::buffer(format!("{name}/running_mean"), Tensor::zeros(&[features])),
            running_var: Parameter::buffer(
                format!("{name}/running_var"),
                Tensor::filled(&[features], 1.0),
            ),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: NormMode) -> Result<Var> {
        check_width("batchnorm", g, x, self.features())?;
        let xhat = match mode {
            NormMode::Train | NormMode::BatchStats => {
                let batch = g.shape(x)[0];
                if batch < 2 {
                    return Err(Error::contract("batch norm in train mode needs batch >= 2"));
                }
                let mu = g.mean(x, 0)?;
                let xc = g.sub(x, mu)?;
                let sq = g.square(xc)?;
                let var = g.mean(sq, 0)?;
                if mode == NormMode::Train {
                    let m = self.momentum;
                    let (bm, bv) = (g.value(mu).data(), g.value(var).data());
                    for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(bm) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                    for (r, b) in self.running_var.value.data_mut().iter_mut().zip(bv) {
                        *r = m * *r + (1.0 - m) * b;
                    }
                }
                let ve = g.add_scalar(var, self.eps)?;
                let sd = g.sqrt(ve)?;
                g.div(xc, sd)?
            }
            NormMode::Infer => {
                let mu = g.constant(self.running_mean.value.clone());
                let sd: Vec<f64> = self
                    .running_var
                    .value
                    .data()
                    .iter()
                    .map(|v| (v + self.eps).sqrt())
                    .collect();
                let sd = g.constant(Tensor::new(vec![sd.len()], sd)?);
                let xc = g.sub(x, mu)?;
                g.div(xc, sd)?
            }
        };
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul(xhat, gamma)?;
        g.add(y, beta)
    }
}

impl Module for BatchNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// follow the order of the parameters passed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter in place, then clears its gradient.
    pub fn step(&mut self, params: Vec<&mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().filter(|p| p.trainable).collect();
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, p)| m.len() != p.value.numel())
        {
            return Err(Error::contract("Adam moments do not mirror the parameter list"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().expect("checked above");
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
