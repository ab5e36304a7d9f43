//! Repeated-trial evaluation of a generator against the grid mixture.

use setgan::metrics::{build_partition_tree, score_samples, MixtureSpec, SampleScores};
use setgan::training::{stream_rng, Generator};
use setgan::Tensor;

use crate::error::{LabError, LabResult};

/// Evaluation draws use their own stream so they never overlap training.
const EVAL_STREAM: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub trials: usize,
    pub samples: usize,
    pub depth: usize,
    pub n_std: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            trials: 10,
            samples: 4000,
            depth: 5,
            n_std: 3.0,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> LabResult<()> {
        if self.trials == 0 {
            return Err(LabError::usage("invalid protocol: trials must be at least 1"));
        }
        if self.depth >= 30 || self.samples < 1 << self.depth {
            return Err(LabError::usage("invalid protocol: samples must be at least 2^depth"));
        }
        if !(self.n_std.is_finite() && self.n_std > 0.0) {
            return Err(LabError::usage("invalid protocol: n_std must be positive"));
        }
        Ok(())
    }
}

/// What produces samples under evaluation.
pub enum Sampler<'a> {
    Generator(&'a mut Generator),
    /// The mixture itself, as a calibration reference.
    GroundTruth(&'a MixtureSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: Vec<SampleScores>,
    pub summary: Vec<MetricSummary>,
}

impl EvalReport {
    pub const HEADER: &'static str = "metric,value,stderr,trials";

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.metric == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for m in &self.summary {
            s.push_str(&format!("{},{},{},{}\n", m.metric, m.mean, m.std, m.trials));
        }
        s
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores `protocol.trials` fresh batches against `reference`, which should
/// be real data not used in training.
pub fn evaluate(
    mut sampler: Sampler<'_>,
    reference: &Tensor,
    mixture: &MixtureSpec,
    protocol: &EvalProtocol,
) -> LabResult<EvalReport> {
    protocol.validate()?;
    let tree = build_partition_tree(reference, protocol.depth)?;
    let mut rng = stream_rng(protocol.seed, EVAL_STREAM);
    let mut trials = Vec::with_capacity(protocol.trials);
    for _ in 0..protocol.trials {
        let x = match &mut sampler {
            Sampler::Generator(g) => g.generate(protocol.samples, &mut rng)?,
            Sampler::GroundTruth(m) => m.sample(protocol.samples, &mut rng),
        };
        trials.push(score_samples(&x, reference, &tree, mixture, protocol.n_std)?);
    }
    let column = |f: fn(&SampleScores) -> f64| trials.iter().map(f).collect::<Vec<_>>();
    let metrics: [(&'static str, fn(&SampleScores) -> f64); 5] = [
        ("sbd", |s| s.sbd),
        ("inception", |s| s.inception),
        ("high_quality", |s| s.high_quality),
        ("frechet", |s| s.frechet),
        ("modes", |s| s.modes as f64),
    ];
    let summary = metrics
        .iter()
        .map(|(name, f)| {
            let (mean, std) = mean_std(&column(*f));
            MetricSummary {
                metric: name,
                mean,
                std,
                trials: trials.len(),
            }
        })
        .collect();
    Ok(EvalReport { trials, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> (MixtureSpec, Tensor) {
        let m = MixtureSpec::default_grid();
        let r = m.sample(4000, &mut stream_rng(99, 0));
        (m, r)
    }

    #[test]
    fn single_trial_has_zero_spread() {
        let (m, r) = reference();
        let p = EvalProtocol {
            trials: 1,
            ..EvalProtocol::default()
        };
        let rep = evaluate(Sampler::GroundTruth(&m), &r, &m, &p).unwrap();
        assert!(rep.summary.iter().all(|s| s.std == 0.0 && s.trials == 1));
        assert!(rep.to_csv().starts_with("metric,value,stderr,trials\nsbd,"));
    }

    #[test]
    fn ground_truth_is_calibrated() {
        let (m, r) = reference();
        let p = EvalProtocol {
            trials: 3,
            ..EvalProtocol::default()
        };
        let rep = evaluate(Sampler::GroundTruth(&m), &r, &m, &p).unwrap();
        assert_eq!(rep.metric("modes").unwrap().mean, 25.0);
        assert!(rep.metric("inception").unwrap().mean > 24.5);
        assert!((rep.metric("high_quality").unwrap().mean - 0.9889).abs() < 0.01);
        assert!(rep.metric("sbd").unwrap().mean < 0.05);
    }

    #[test]
    fn protocol_is_checked() {
        let bad = EvalProtocol {
            samples: 16,
            ..EvalProtocol::default()
        };
        assert!(bad.validate().is_err());
        assert!(EvalProtocol { trials: 0, ..EvalProtocol::default() }.validate().is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
