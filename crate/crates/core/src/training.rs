//! Surrogate-objective training: losses, momentum SGD, the training loop
//! and finite-difference gradient checks.
//!
//! Everything here runs in `f64`. Each step evaluates the batch fixtures
//! independently (possibly in parallel) and reduces their gradients in
//! fixture order, so results do not depend on the execution policy.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::classic::{run_classic, ClassicIspConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fixtures;
use crate::kv::KvFile;
use crate::pipeline::graph::{forward_graph, ParamVars};
use crate::pipeline::params::hex;
use crate::pipeline::{PipelineConfig, PipelineParams};
use crate::raw_io::{pack, parse_raw, RawImage, RgbImage};

/// Soft-histogram resolution of the entropy objective.
pub const ENTROPY_BINS: usize = 32;

/// Side length of the synthetic fixtures used when no batch is given.
pub const DEFAULT_FIXTURE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean squared error against the classic ISP.
    DistillL2,
    /// Negative entropy of the output histogram.
    EntropyMax,
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill_l2" => Ok(Loss::DistillL2),
            "entropy_max" => Ok(Loss::EntropyMax),
            _ => Err(Error::Config(format!(
                "unknown loss {s:?} (expected distill_l2 or entropy_max)"
            ))),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::DistillL2 => "distill_l2",
            Loss::EntropyMax => "entropy_max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: Loss,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// RAWI fixture paths; empty selects the built-in synthetic batch.
    pub batch: Vec<PathBuf>,
    pub seed: u64,
    /// Text-log interval in steps; 0 logs only the last step.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: Loss::DistillL2,
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 200,
            batch: Vec::new(),
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Reads `loss`, `learning_rate`, `momentum`, `steps`, `batch`, `seed`
    /// and `log_every`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            loss: kv.parsed("loss")?.unwrap_or(d.loss),
            learning_rate: kv.parsed("learning_rate")?.unwrap_or(d.learning_rate),
            momentum: kv.parsed("momentum")?.unwrap_or(d.momentum),
            steps: kv.parsed("steps")?.unwrap_or(d.steps),
            batch: kv.list("batch")?.unwrap_or(d.batch),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
            log_every: kv.parsed("log_every")?.unwrap_or(d.log_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the batch files, or builds the synthetic batch when none are listed.
    pub fn load_batch(&self) -> Result<Vec<RawImage>> {
        if self.batch.is_empty() {
            return Ok(fixtures::training_batch(DEFAULT_FIXTURE_SIZE, DEFAULT_FIXTURE_SIZE));
        }
        self.batch.iter().map(|p| parse_raw(&std::fs::read(p)?)).collect()
    }
}

/// One training input with its precomputed packed tensor and teacher.
#[derive(Debug, Clone)]
pub struct Sample {
    packed_shape: [usize; 3],
    packed: Vec<f64>,
    teacher: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(raw: &RawImage, loss: Loss) -> Result<Self> {
        let p = pack::<f64>(raw, Exec::default());
        let teacher = match loss {
            Loss::DistillL2 => Some(run_classic(raw, &ClassicIspConfig::default(), Exec::default())?.values),
            Loss::EntropyMax => None,
        };
        Ok(Sample {
            packed_shape: p.shape(),
            packed: p.values,
            teacher,
        })
    }
}

/// Records the forward pass and the loss node for one sample.
fn loss_on_tape<R: Rng + ?Sized>(
    g: &mut Graph,
    sample: &Sample,
    params: &PipelineParams,
    config: &PipelineConfig,
    rng: &mut R,
) -> Result<(Var, ParamVars)> {
    let p = ParamVars::register(g, params, config)?;
    let x = g.constant(&sample.packed_shape, sample.packed.clone())?;
    let stages = forward_graph(g, x, &p, config, rng, false)?;
    let loss = match &sample.teacher {
        Some(t) => loss_distill_l2(g, stages.rgb, t)?,
        None => loss_entropy_max(g, stages.rgb, ENTROPY_BINS)?,
    };
    Ok((loss, p))
}

/// Mean squared error of `pred` against a constant teacher.
pub fn loss_distill_l2(g: &mut Graph, pred: Var, teacher: &[f64]) -> Result<Var> {
    g.mse_const(pred, teacher)
}

/// `sum p log p` of a hat-kernel histogram of `pred` over [0, 1].
pub fn loss_entropy_max(g: &mut Graph, pred: Var, bins: usize) -> Result<Var> {
    g.neg_entropy_histogram(pred, bins)
}

/// Plain-value versions of the losses on finished images.
pub fn distill_l2(pred: &RgbImage, teacher: &RgbImage) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(&[pred.values.len()], pred.values.clone())?;
    let l = loss_distill_l2(&mut g, x, &teacher.values)?;
    Ok(g.scalar(l))
}

pub fn entropy_max(pred: &RgbImage, bins: usize) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(&[pred.values.len()], pred.values.clone())?;
    let l = loss_entropy_max(&mut g, x, bins)?;
    Ok(g.scalar(l))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(
    params: &mut PipelineParams,
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} tensors",
            grads.len(),
            params.tensors.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    }
    for ((t, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut state.velocity) {
        if g.len() != t.data.len() || v.len() != t.data.len() {
            return Err(Error::Contract(format!("gradient size mismatch for {}", t.name)));
        }
        for ((p, &gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *p -= lr * *vi;
        }
    }
    Ok(())
}

/// Per-step diagnostics of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss: Loss,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub step_ms: Vec<f64>,
    /// SHA-256 of the final parameter file.
    pub params_checksum: String,
    pub log_every: usize,
}

impl TrainReport {
    /// SHA-256 over the loss and gradient-norm bits and the final
    /// parameters; timing is excluded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.losses.iter().chain(&self.grad_norms) {
            h.update(v.to_le_bytes());
        }
        h.update(self.params_checksum.as_bytes());
        hex(&h.finalize())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,ms\n");
        for (i, ((l, g), ms)) in self.losses.iter().zip(&self.grad_norms).zip(&self.step_ms).enumerate() {
            let _ = writeln!(out, "{},{l:e},{g:e},{ms:.3}", i + 1);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let n = self.losses.len();
        for i in 0..n {
            let step = i + 1;
            if step == n || (self.log_every > 0 && step % self.log_every == 0) {
                let _ = writeln!(
                    out,
                    "step {step:>5}  loss {:.6e}  grad_norm {:.4e}  {:.2} ms",
                    self.losses[i], self.grad_norms[i], self.step_ms[i]
                );
            }
        }
        let _ = writeln!(out, "loss            {}", self.loss);
        let _ = writeln!(out, "initial_loss    {:.6e}", self.losses.first().copied().unwrap_or(f64::NAN));
        let _ = writeln!(out, "final_loss      {:.6e}", self.losses.last().copied().unwrap_or(f64::NAN));
        let _ = writeln!(out, "params_checksum {}", self.params_checksum);
        let _ = writeln!(out, "report_checksum {}", self.checksum());
        out
    }
}

/// Mean loss and gradients over the batch for one step.
fn batch_gradients(
    samples: &[Sample],
    params: &PipelineParams,
    config: &PipelineConfig,
    seed: u64,
    step: usize,
    exec: Exec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per = exec.map(samples.len(), |i| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut rng = noise_rng(seed, step, i);
        let mut g = Graph::new();
        let (loss, p) = loss_on_tape(&mut g, &samples[i], params, config, &mut rng)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), p.all.iter().map(|(_, v)| g.grad_or_zeros(*v)).collect()))
    });
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    for r in per {
        let (l, gs) = r?;
        loss += l / n;
        for (acc, gi) in grads.iter_mut().zip(gs) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v / n;
            }
        }
    }
    Ok((loss, grads))
}

/// Gumbel noise stream for one (seed, step, fixture) triple.
fn noise_rng(seed: u64, step: usize, fixture: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 16) | fixture as u64);
    rng
}

/// Runs `steps` iterations of forward, loss, backward and SGD.
pub fn train(
    params: &mut PipelineParams,
    config: &PipelineConfig,
    train: &TrainConfig,
    batch: &[RawImage],
    exec: Exec,
) -> Result<TrainReport> {
    train.validate()?;
    config.validate()?;
    params.check(config)?;
    if batch.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    let samples = batch
        .iter()
        .map(|raw| Sample::new(raw, train.loss))
        .collect::<Result<Vec<_>>>()?;
    let mut state = SgdState::default();
    let mut report = TrainReport {
        loss: train.loss,
        losses: Vec::with_capacity(train.steps),
        grad_norms: Vec::with_capacity(train.steps),
        step_ms: Vec::with_capacity(train.steps),
        params_checksum: String::new(),
        log_every: train.log_every,
    };
    for step in 0..train.steps {
        let start = Instant::now();
        let (loss, grads) = batch_gradients(&samples, params, config, train.seed, step, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: "loss".into(),
                what: "loss",
            });
        }
        if let Some((t, _)) = params
            .tensors
            .iter()
            .zip(&grads)
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                step,
                tensor: t.name.clone(),
                what: "gradient",
            });
        }
        let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        sgd_step(params, &grads, train.learning_rate, train.momentum, &mut state)?;
        if let Err(name) = params.all_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: name,
                what: "parameter",
            });
        }
        report.losses.push(loss);
        report.grad_norms.push(norm);
        report.step_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    report.params_checksum = params.checksum();
    Ok(report)
}

/// Means of consecutive non-overlapping windows of `window` losses.
pub fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// True when no window mean rises more than `tolerance` (relative) above
/// the one before it.
pub fn windows_non_increasing(losses: &[f64], window: usize, tolerance: f64) -> bool {
    window_means(losses, window)
        .windows(2)
        .all(|p| p[1] <= p[0] * (1.0 + tolerance))
}

/// A differentiable scalar function of the pipeline parameters.
pub trait Objective {
    fn value(&self, params: &PipelineParams) -> Result<f64>;
    /// Value and per-tensor gradients, in parameter order.
    fn value_and_grads(&self, params: &PipelineParams) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// One fixture under one loss with a fixed Gumbel draw, so repeated
/// evaluations see the same function.
#[derive(Debug, Clone)]
pub struct PipelineObjective {
    pub config: PipelineConfig,
    pub sample: Sample,
    pub noise_seed: u64,
}

impl PipelineObjective {
    pub fn new(config: &PipelineConfig, raw: &RawImage, loss: Loss, noise_seed: u64) -> Result<Self> {
        Ok(PipelineObjective {
            config: config.clone(),
            sample: Sample::new(raw, loss)?,
            noise_seed,
        })
    }
}

impl Objective for PipelineObjective {
    fn value(&self, params: &PipelineParams) -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = noise_rng(self.noise_seed, 0, 0);
        let (loss, _) = loss_on_tape(&mut g, &self.sample, params, &self.config, &mut rng)?;
        Ok(g.scalar(loss))
    }

    fn value_and_grads(&self, params: &PipelineParams) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let mut rng = noise_rng(self.noise_seed, 0, 0);
        let (loss, p) = loss_on_tape(&mut g, &self.sample, params, &self.config, &mut rng)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), p.all.iter().map(|(_, v)| g.grad_or_zeros(*v)).collect()))
    }
}

/// Finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose gradient
/// is (nearly) zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, |a, e| if e.is_nan() || a.is_nan() { f64::NAN } else { a.max(e) })
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backprop against central differences on `trials` random
/// coordinates per tensor (all coordinates when the tensor is smaller).
pub fn grad_check(
    objective: &dyn Objective,
    params: &PipelineParams,
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Parameter("grad_check needs at least one trial".into()));
    }
    let (_, grads) = objective.value_and_grads(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(params.tensors.len());
    for (ti, t) in params.tensors.iter().enumerate() {
        let n = t.data.len();
        let coords: Vec<usize> = if n <= trials {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, trials).into_vec()
        };
        let mut check = TensorCheck {
            name: t.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for idx in coords {
            let orig = t.data[idx];
            probe.tensors[ti].data[idx] = orig + GRAD_CHECK_STEP;
            let up = objective.value(&probe)?;
            probe.tensors[ti].data[idx] = orig - GRAD_CHECK_STEP;
            let down = objective.value(&probe)?;
            probe.tensors[ti].data[idx] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let err = relative_error(grads[ti][idx], numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_index = idx;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests;
