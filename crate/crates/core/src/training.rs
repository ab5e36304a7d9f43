//! Generator, adversarial losses, set sampling and the alternating loop.
//!
//! The discriminator minimizes
//! `−[mean log D(real set) + mean log(1 − D(generated set))]`; the generator
//! either minimizes `mean log(1 − D(generated set))` or, by default, the
//! nonsaturating `−mean log D(generated set)`.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Var};
use crate::discriminator::{Architecture, Discriminator, DiscriminatorShape, Origin, SampleSet};
use crate::error::{Error, Result};
use crate::histogram::HistogramSpec;
use crate::metrics::{assign_histogram, build_partition_tree, sbd, BinHistogram, PartitionTree};
use crate::nn::{Activation, Adam, BatchNorm, Dense, Module, NormMode};
use crate::tensor::Tensor;

/// Outputs are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

/// Independent random streams derived from one run seed.
pub mod streams {
    pub const GENERATOR_INIT: u64 = 0;
    pub const DISCRIMINATOR_INIT: u64 = 1;
    pub const REAL_SETS: u64 = 2;
    pub const LATENTS: u64 = 3;
    pub const EVALUATION: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorLoss {
    Minimax,
    Nonsaturating,
}

/// `[hidden] x layers` of dense, batch-norm, ReLU, then a linear output.
#[derive(Clone, Debug)]
pub struct Generator {
    pub hidden: Vec<(Dense, BatchNorm)>,
    pub output: Dense,
    latent_dim: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden: usize, layers: usize, data_dim: usize, rng: &mut R) -> Self {
        let hidden_layers = (0..layers)
            .map(|i| {
                let fan_in = if i == 0 { latent_dim } else { hidden };
                (
                    Dense::new(&format!("g/{i}"), fan_in, hidden, Activation::Identity, rng),
                    BatchNorm::new(&format!("g/{i}/bn"), hidden),
                )
            })
            .collect();
        let fan_in = if layers == 0 { latent_dim } else { hidden };
        let output = Dense::new("g/out", fan_in, data_dim, Activation::Identity, rng);
        Generator {
            hidden: hidden_layers,
            output,
            latent_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.output.outputs()
    }

    /// `n` standard-normal latent vectors.
    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * self.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(vec![n, self.latent_dim], data).expect("n > 0")
    }

    pub fn forward(&mut self, g: &mut Graph, z: Var, mode: NormMode) -> Result<Var> {
        let mut h = z;
        for (dense, bn) in &mut self.hidden {
            h = dense.forward(g, h)?;
            h = bn.forward(g, h, mode)?;
            h = g.relu(h)?;
        }
        self.output.forward(g, h)
    }

    /// Maps `z` without recording gradients, normalizing with the statistics
    /// of this batch.
    pub fn map_latent(&mut self, z: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        g.set_frozen(true);
        let zv = g.constant(z);
        let x = self.forward(&mut g, zv, NormMode::BatchStats)?;
        Ok(g.value(x).clone())
    }

    /// `n` samples, using batch statistics over all `n`.
    pub fn generate<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Tensor> {
        let z = self.sample_latent(n, rng);
        self.map_latent(z)
    }
}

impl Module for Generator {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for (d, b) in &self.hidden {
            v.extend(d.parameters());
            v.extend(b.parameters());
        }
        v.extend(self.output.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for (d, b) in &mut self.hidden {
            v.extend(d.parameters_mut());
            v.extend(b.parameters_mut());
        }
        v.extend(self.output.parameters_mut());
        v
    }
}

/// `m` sets of `k` rows, each drawn without replacement within its set.
pub fn sample_real_batch<R: Rng + ?Sized>(data: &Tensor, k: usize, m: usize, rng: &mut R) -> Result<Tensor> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::contract(format!("cannot draw sets of {k} from {n} samples")));
    }
    let d = data.cols();
    let mut out = Vec::with_capacity(m * k * d);
    for _ in 0..m {
        for i in sample_indices(rng, n, k) {
            out.extend_from_slice(data.row(i));
        }
    }
    Tensor::new(vec![m * k, d], out)
}

pub fn sample_real_sets<R: Rng + ?Sized>(data: &Tensor, k: usize, m: usize, rng: &mut R) -> Result<Vec<SampleSet>> {
    let batch = sample_real_batch(data, k, m, rng)?;
    split_sets(&batch, k, Origin::Real)
}

/// `m` sets of `k` generated samples from one `m * k` batch.
pub fn sample_fake_sets<R: Rng + ?Sized>(
    generator: &mut Generator,
    k: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<SampleSet>> {
    let batch = generator.generate(m * k, rng)?;
    split_sets(&batch, k, Origin::Generated)
}

fn split_sets(batch: &Tensor, k: usize, origin: Origin) -> Result<Vec<SampleSet>> {
    let d = batch.cols();
    batch
        .data()
        .chunks(k * d)
        .map(|c| SampleSet::new(Tensor::new(vec![k, d], c.to_vec())?, origin))
        .collect()
}

fn checked_log(g: &mut Graph, p: Var, complement: bool) -> Result<Var> {
    if g.value(p).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("discriminator output outside [0, 1]"));
    }
    let c = g.clamp(p, CLAMP, 1.0 - CLAMP)?;
    let q = if complement {
        let n = g.neg(c)?;
        g.add_scalar(n, 1.0)?
    } else {
        c
    };
    g.log(q)
}

/// `−[mean log D(real) + mean log(1 − D(fake))]` from discriminator outputs.
pub fn discriminator_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    if g.shape(d_real) != g.shape(d_fake) {
        return Err(Error::contract("real and generated batches differ in size"));
    }
    let lr = checked_log(g, d_real, false)?;
    let lf = checked_log(g, d_fake, true)?;
    let a = g.mean_all(lr)?;
    let b = g.mean_all(lf)?;
    let s = g.add(a, b)?;
    g.neg(s)
}

pub fn generator_loss(g: &mut Graph, d_fake: Var, mode: GeneratorLoss) -> Result<Var> {
    match mode {
        GeneratorLoss::Minimax => {
            let l = checked_log(g, d_fake, true)?;
            g.mean_all(l)
        }
        GeneratorLoss::Nonsaturating => {
            let l = checked_log(g, d_fake, false)?;
            let m = g.mean_all(l)?;
            g.neg(m)
        }
    }
}

/// Discriminator loss over explicit sets.
pub fn set_discriminator_loss(
    g: &mut Graph,
    d: &Discriminator,
    real: &[SampleSet],
    fake: &[SampleSet],
) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::contract(format!("{} real vs {} generated sets", real.len(), fake.len())));
    }
    let k = real.first().map(SampleSet::k).unwrap_or(0);
    let r = g.constant(SampleSet::stack(real)?);
    let f = g.constant(SampleSet::stack(fake)?);
    let pr = d.forward(g, r, k)?;
    let pf = d.forward(g, f, k)?;
    discriminator_loss(g, pr, pf)
}

/// Full description of a run. Serialized with flat dotted keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Architecture,
    pub k: usize,
    pub lr: f64,
    pub gd_ratio: usize,
    pub epochs: usize,
    /// Sets per update (samples per update for per-sample discriminators).
    #[serde(rename = "batch")]
    pub batch_sets: usize,
    pub seed: u64,
    #[serde(rename = "hist.bins")]
    pub hist_bins: usize,
    #[serde(rename = "hist.steepness")]
    pub hist_steepness: f64,
    #[serde(rename = "early_stop.every")]
    pub eval_every: usize,
    #[serde(rename = "early_stop.patience")]
    pub patience: usize,
    #[serde(rename = "early_stop.samples")]
    pub eval_samples: usize,
    #[serde(rename = "early_stop.depth")]
    pub sbd_depth: usize,
    #[serde(rename = "loss.generator")]
    pub generator_loss: GeneratorLoss,
    #[serde(rename = "model.latent_dim")]
    pub latent_dim: usize,
    #[serde(rename = "model.g_hidden")]
    pub g_hidden: usize,
    #[serde(rename = "model.g_layers")]
    pub g_layers: usize,
    #[serde(rename = "model.d_hidden")]
    pub d_hidden: usize,
    #[serde(rename = "model.d_layers")]
    pub d_layers: usize,
    #[serde(rename = "model.pieces")]
    pub pieces: usize,
    #[serde(rename = "model.pair_layers")]
    pub pair_layers: usize,
    #[serde(rename = "model.mbd_kernels")]
    pub mbd_kernels: usize,
    #[serde(rename = "model.mbd_dim")]
    pub mbd_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Architecture::Setgan,
            k: 5,
            lr: 2e-4,
            gd_ratio: 2,
            epochs: 400,
            batch_sets: 64,
            seed: 0,
            hist_bins: 16,
            hist_steepness: 100.0,
            eval_every: 5,
            patience: 10,
            eval_samples: 4000,
            sbd_depth: 8,
            generator_loss: GeneratorLoss::Nonsaturating,
            latent_dim: 2,
            g_hidden: 128,
            g_layers: 4,
            d_hidden: 64,
            d_layers: 3,
            pieces: 5,
            pair_layers: 3,
            mbd_kernels: 16,
            mbd_dim: 8,
        }
    }
}

impl RunConfig {
    /// Layer widths used in the full-scale grid experiment.
    pub fn paper_widths(self) -> Self {
        RunConfig {
            g_hidden: 400,
            d_hidden: 200,
            ..self
        }
    }

    /// Checks every field; per-sample architectures have `k` forced to 1.
    pub fn validate(mut self) -> Result<Self> {
        if matches!(self.arch, Architecture::Gan | Architecture::Md) {
            if self.k != 1 {
                log::info!("{} judges single samples; forcing k = 1 (was {})", self.arch, self.k);
            }
            self.k = 1;
        } else if self.k < 2 {
            return Err(Error::config("k", format!("{} requires k >= 2, got {}", self.arch, self.k)));
        }
        let positive = [
            ("gd_ratio", self.gd_ratio),
            ("batch", self.batch_sets),
            ("hist.bins", self.hist_bins),
            ("early_stop.every", self.eval_every),
            ("early_stop.patience", self.patience),
            ("model.latent_dim", self.latent_dim),
            ("model.g_hidden", self.g_hidden),
            ("model.d_hidden", self.d_hidden),
            ("model.pieces", self.pieces),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.hist_steepness.is_finite() && self.hist_steepness > 0.0) {
            return Err(Error::config("hist.steepness", "must be positive"));
        }
        if self.batch_sets * self.k < 2 {
            return Err(Error::config("batch", "batch statistics need at least 2 samples per update"));
        }
        if self.sbd_depth >= 30 || self.eval_samples < 1 << self.sbd_depth {
            return Err(Error::config("early_stop.samples", "must be at least 2^early_stop.depth"));
        }
        if self.arch == Architecture::Md && (self.mbd_kernels == 0 || self.mbd_dim == 0) {
            return Err(Error::config("model.mbd_kernels", "minibatch discrimination needs kernels"));
        }
        if self.arch == Architecture::Setgan && self.pair_layers == 0 {
            return Err(Error::config("model.pair_layers", "the pairing stack needs a layer"));
        }
        Ok(self)
    }

    pub fn histogram(&self) -> Result<HistogramSpec> {
        HistogramSpec::uniform(self.hist_bins, self.hist_steepness)
    }

    pub fn discriminator_shape(&self, data_dim: usize) -> Result<DiscriminatorShape> {
        Ok(DiscriminatorShape {
            data_dim,
            hidden: self.d_hidden,
            feature_layers: self.d_layers,
            pieces: self.pieces,
            pair_layers: self.pair_layers,
            histogram: self.histogram()?,
            mbd_kernels: self.mbd_kernels,
            mbd_dim: self.mbd_dim,
        })
    }

    /// Updates per epoch: enough sets to touch `n` samples once on average.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_sets * self.k).max(1)
    }
}

/// Freshly initialized networks for `config`.
pub fn init_models(config: &RunConfig, data_dim: usize) -> Result<(Generator, Discriminator)> {
    let gen = Generator::new(
        config.latent_dim,
        config.g_hidden,
        config.g_layers,
        data_dim,
        &mut stream_rng(config.seed, streams::GENERATOR_INIT),
    );
    let disc = Discriminator::build(
        config.arch,
        &config.discriminator_shape(data_dim)?,
        config.k,
        &mut stream_rng(config.seed, streams::DISCRIMINATOR_INIT),
    )?;
    Ok((gen, disc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub sbd: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,d_loss,g_loss,sbd,wall_s";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let sbd = r.sbd.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{:.3}\n", r.epoch, r.d_loss, r.g_loss, sbd, r.wall_s));
        }
        s
    }

    /// The log without wall-clock times, for reproducibility checks.
    pub fn deterministic_part(&self) -> Vec<(usize, u64, u64, Option<u64>)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.d_loss.to_bits(), r.g_loss.to_bits(), r.sbd.map(f64::to_bits)))
            .collect()
    }
}

/// Real data for one run: the training pool and a disjoint slice used only
/// for monitoring.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Tensor,
    pub heldout: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Networks at the best monitored SBD.
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_sbd: Option<f64>,
    pub epochs_run: usize,
}

/// Tree on the held-out slice plus its own histogram.
pub struct SbdMonitor {
    tree: PartitionTree,
    reference: BinHistogram,
    samples: usize,
}

impl SbdMonitor {
    pub fn new(heldout: &Tensor, depth: usize, samples: usize) -> Result<Self> {
        let tree = build_partition_tree(heldout, depth)?;
        let reference = assign_histogram(&tree, heldout)?;
        Ok(SbdMonitor {
            tree,
            reference,
            samples,
        })
    }

    pub fn score<R: Rng + ?Sized>(&self, generator: &mut Generator, rng: &mut R) -> Result<f64> {
        let x = generator.generate(self.samples, rng)?;
        sbd(&self.reference, &assign_histogram(&self.tree, &x)?)
    }
}

fn abort(epoch: usize, step: usize, phase: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::NumericalAbort {
            epoch,
            step,
            phase,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Alternating optimization state for one run.
pub struct Trainer {
    pub config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    real_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig, data_dim: usize) -> Result<Self> {
        let config = config.validate()?;
        let (generator, discriminator) = init_models(&config, data_dim)?;
        Ok(Trainer {
            opt_g: Adam::new(config.lr),
            opt_d: Adam::new(config.lr),
            real_rng: stream_rng(config.seed, streams::REAL_SETS),
            latent_rng: stream_rng(config.seed, streams::LATENTS),
            config,
            generator,
            discriminator,
        })
    }

    /// One discriminator update; returns its loss.
    pub fn discriminator_step(&mut self, data: &Tensor) -> Result<f64> {
        let (k, m) = (self.config.k, self.config.batch_sets);
        let real = sample_real_batch(data, k, m, &mut self.real_rng)?;
        let fake = self.generator.generate(m * k, &mut self.latent_rng)?;
        let mut g = Graph::new();
        let r = g.constant(real);
        let f = g.constant(fake);
        let pr = self.discriminator.forward(&mut g, r, k)?;
        let pf = self.discriminator.forward(&mut g, f, k)?;
        let loss = discriminator_loss(&mut g, pr, pf)?;
        let v = g.value(loss).item()?;
        g.backward(loss)?;
        self.discriminator.collect_grads(&g);
        self.opt_d.step(self.discriminator.parameters_mut())?;
        Ok(v)
    }

    /// One generator update through a fixed discriminator; returns its loss.
    pub fn generator_step(&mut self) -> Result<f64> {
        let (k, m) = (self.config.k, self.config.batch_sets);
        let z = self.generator.sample_latent(m * k, &mut self.latent_rng);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let x = self.generator.forward(&mut g, zv, NormMode::Train)?;
        g.set_frozen(true);
        let p = self.discriminator.forward(&mut g, x, k)?;
        g.set_frozen(false);
        let loss = generator_loss(&mut g, p, self.config.generator_loss)?;
        let v = g.value(loss).item()?;
        g.backward(loss)?;
        self.generator.collect_grads(&g);
        self.opt_g.step(self.generator.parameters_mut())?;
        Ok(v)
    }

    /// One pass of `steps_per_epoch` outer steps; returns mean losses.
    pub fn run_epoch(&mut self, epoch: usize, data: &Tensor) -> Result<(f64, f64)> {
        let steps = self.config.steps_per_epoch(data.rows());
        let (mut dl, mut gl) = (0.0, 0.0);
        for step in 0..steps {
            let d = self
                .discriminator_step(data)
                .map_err(abort(epoch, step, "discriminator"))?;
            if !d.is_finite() {
                return Err(abort(epoch, step, "discriminator")(Error::NonFinite { op: "loss" }));
            }
            dl += d;
            let mut gsum = 0.0;
            for _ in 0..self.config.gd_ratio {
                let v = self.generator_step().map_err(abort(epoch, step, "generator"))?;
                if !v.is_finite() {
                    return Err(abort(epoch, step, "generator")(Error::NonFinite { op: "loss" }));
                }
                gsum += v;
            }
            gl += gsum / self.config.gd_ratio as f64;
        }
        Ok((dl / steps as f64, gl / steps as f64))
    }
}

/// Trains with SBD-monitored early stopping and returns the best networks.
pub fn train(config: &RunConfig, data: &TrainData) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data.train.cols())?;
    let cfg = trainer.config.clone();
    if data.heldout.cols() != data.train.cols() {
        return Err(Error::dim("train", "held-out and training data differ in width"));
    }
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            generator: trainer.generator,
            discriminator: trainer.discriminator,
            log,
            best_epoch: 0,
            best_sbd: None,
            epochs_run: 0,
        });
    }
    let monitor = SbdMonitor::new(&data.heldout, cfg.sbd_depth, cfg.eval_samples)?;
    let mut eval_rng = stream_rng(cfg.seed, streams::EVALUATION);
    let start = Instant::now();
    let mut best: Option<(f64, usize, Generator, Discriminator)> = None;
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let (d_loss, g_loss) = trainer.run_epoch(epoch, &data.train)?;
        epochs_run = epoch;
        let mut score = None;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let s = monitor
                .score(&mut trainer.generator, &mut eval_rng)
                .map_err(abort(epoch, 0, "evaluation"))?;
            score = Some(s);
            if best.as_ref().is_none_or(|b| s < b.0) {
                best = Some((s, epoch, trainer.generator.clone(), trainer.discriminator.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.records.push(EpochRecord {
            epoch,
            d_loss,
            g_loss,
            sbd: score,
            wall_s: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: d {d_loss:.4} g {g_loss:.4} sbd {score:?}");
        if stale >= cfg.patience {
            log::info!("early stop at epoch {epoch}: no SBD improvement in {stale} evaluations");
            break;
        }
    }
    let (best_sbd, best_epoch, generator, discriminator) = best.expect("final epoch is always evaluated");
    Ok(TrainOutcome {
        generator,
        discriminator,
        log,
        best_epoch,
        best_sbd: Some(best_sbd),
        epochs_run,
    })
}
