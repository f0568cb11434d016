//! Parameter, FLOP and latency measurement for the inference path.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pipeline::{count_flops, count_params, FastModel, PipelineConfig, PipelineParams};
use crate::raw_io::{BayerPattern, RawImage};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank statistics over `samples` (milliseconds).
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("no latency samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Ok(LatencyStats {
            min_ms: s[0],
            median_ms: rank(0.5),
            p95_ms: rank(0.95),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub width: usize,
    pub height: usize,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub exec: Exec,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            width: 3840,
            height: 2160,
            reps: 5,
            warmup: 2,
            precision: Precision::F32,
            exec: Exec::Parallel,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub width: usize,
    pub height: usize,
    pub param_count: usize,
    pub flop_count: u64,
    pub precision: Precision,
    pub warmup: usize,
    pub reps: usize,
    pub exec: &'static str,
    pub threads: usize,
    pub latency: LatencyStats,
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params          {}", self.param_count)?;
        writeln!(
            f,
            "flops           {} ({:.4} G at {}x{})",
            self.flop_count,
            self.flop_count as f64 * 1e-9,
            self.width,
            self.height
        )?;
        writeln!(
            f,
            "latency_ms      min {:.2}  median {:.2}  p95 {:.2}",
            self.latency.min_ms, self.latency.median_ms, self.latency.p95_ms
        )?;
        write!(
            f,
            "setup           {} {} ({} threads), warmup {}, reps {}",
            self.precision, self.exec, self.threads, self.warmup, self.reps
        )
    }
}

/// Seeded uniform 12-bit RGGB mosaic.
pub fn synthetic_raw(width: usize, height: usize, seed: u64) -> Result<RawImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height).map(|_| rng.gen_range(0..=4095)).collect();
    RawImage::new(width, height, 12, BayerPattern::Rggb, 0, 4095, data)
}

fn time_runs<T: Real>(
    params: &PipelineParams,
    config: &PipelineConfig,
    raw: &RawImage,
    opts: &BenchOptions,
) -> Result<Vec<f64>> {
    let model = FastModel::<T>::new(params, config)?;
    for _ in 0..opts.warmup {
        std::hint::black_box(model.run(raw, opts.exec)?);
    }
    (0..opts.reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(model.run(raw, opts.exec)?);
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Times infer-mode forward passes on a synthetic mosaic.
pub fn run_bench(params: &PipelineParams, config: &PipelineConfig, opts: &BenchOptions) -> Result<BenchResult> {
    if opts.reps < 3 {
        return Err(Error::Parameter(format!("need at least 3 repetitions, got {}", opts.reps)));
    }
    if opts.warmup < 2 {
        return Err(Error::Parameter(format!("need at least 2 warmup runs, got {}", opts.warmup)));
    }
    let raw = synthetic_raw(opts.width, opts.height, opts.seed)?;
    let samples = match opts.precision {
        Precision::F32 => time_runs::<f32>(params, config, &raw, opts)?,
        Precision::F64 => time_runs::<f64>(params, config, &raw, opts)?,
    };
    Ok(BenchResult {
        width: opts.width,
        height: opts.height,
        param_count: count_params(config),
        flop_count: count_flops(config, opts.height, opts.width),
        precision: opts.precision,
        warmup: opts.warmup,
        reps: opts.reps,
        exec: opts.exec.label(),
        threads: thread_count(opts.exec),
        latency: LatencyStats::from_samples(&samples)?,
    })
}

fn thread_count(exec: Exec) -> usize {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return rayon::current_num_threads();
    }
    let _ = exec;
    1
}
