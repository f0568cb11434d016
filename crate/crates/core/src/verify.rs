//! The self-check suite behind `taisp verify`: named groups of invariant,
//! gradient, round-trip and classic-ISP checks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::classic::{
    self, gamma_curve, run_classic, white_balance, ClassicIspConfig, Gamma, WhiteBalance, SRGB_SLOPE,
    SRGB_THRESHOLD,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::fixtures;
use crate::pipeline::graph::{forward_graph, ParamVars};
use crate::pipeline::{
    count_flops, count_params, load_params, save_params, FastModel, PipelineConfig, PipelineParams, Planes,
};
use crate::raw_io::{parse_ppm, parse_raw, quantize, write_ppm, write_raw, RgbImage};
use crate::training::{grad_check, Loss, PipelineObjective};

/// Extremes of each stage quantity over a batch of randomized trials.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub trials: usize,
    pub min_gain: f64,
    pub min_attention: f64,
    pub max_attention: f64,
    /// Largest `|sum_k M_k - 1|` over all pixels.
    pub max_partition_error: f64,
    pub min_exponent: f64,
    pub max_exponent: f64,
    pub min_output: f64,
    pub max_output: f64,
}

impl InvariantReport {
    pub fn gains_ok(&self) -> bool {
        self.min_gain > 1.0
    }

    pub fn attention_ok(&self) -> bool {
        self.min_attention > 0.0 && self.max_attention < 1.0
    }

    pub fn partition_ok(&self) -> bool {
        self.max_partition_error <= 1e-9
    }

    pub fn exponents_ok(&self) -> bool {
        self.min_exponent > 0.0 && self.max_exponent < 1.0
    }

    pub fn output_ok(&self) -> bool {
        self.min_output >= 0.0 && self.max_output <= 1.0
    }

    pub fn all_ok(&self) -> bool {
        self.gains_ok() && self.attention_ok() && self.partition_ok() && self.exponents_ok() && self.output_ok()
    }
}

/// Runs the training-mode graph on `trials` random inputs (2..=6 pixels
/// per side) with randomly perturbed parameters and records the extremes.
///
/// Parameters stay near their initialization scale: far outside it the
/// region weights saturate to exactly 1 in floating point.
pub fn stage_invariants(config: &PipelineConfig, trials: usize, seed: u64) -> Result<InvariantReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = InvariantReport {
        trials,
        min_gain: f64::INFINITY,
        min_attention: f64::INFINITY,
        max_attention: f64::NEG_INFINITY,
        max_partition_error: 0.0,
        min_exponent: f64::INFINITY,
        max_exponent: f64::NEG_INFINITY,
        min_output: f64::INFINITY,
        max_output: f64::NEG_INFINITY,
    };
    let k = config.mask_count;
    for _ in 0..trials {
        let cfg = PipelineConfig {
            seed: rng.gen(),
            ..config.clone()
        };
        let mut params = PipelineParams::init(&cfg)?;
        let scale = rng.gen_range(0.1..1.5);
        for t in &mut params.tensors {
            for v in &mut t.data {
                *v = *v * scale + rng.gen_range(-0.25..0.25);
            }
        }
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let c = cfg.channels;
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen()).collect();
        let mut g = Graph::new();
        let p = ParamVars::register(&mut g, &params, &cfg)?;
        let xv = g.constant(&[c, h, w], x)?;
        let s = forward_graph(&mut g, xv, &p, &cfg, &mut rng, false)?;
        for &v in g.value(s.gains) {
            r.min_gain = r.min_gain.min(v);
        }
        for &v in g.value(s.attention) {
            r.min_attention = r.min_attention.min(v);
            r.max_attention = r.max_attention.max(v);
        }
        let masks = g.value(s.masks);
        for px in 0..h * w {
            let total: f64 = (0..k).map(|kk| masks[kk * h * w + px]).sum();
            r.max_partition_error = r.max_partition_error.max((total - 1.0).abs());
        }
        for &wk in g.value(s.weights) {
            r.min_exponent = r.min_exponent.min(1.0 / wk);
            r.max_exponent = r.max_exponent.max(1.0 / wk);
        }
        for &v in g.value(s.rgb).iter().chain(g.value(s.packed_out)) {
            r.min_output = r.min_output.min(v);
            r.max_output = r.max_output.max(v);
        }
    }
    Ok(r)
}

/// Outcome of one named group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    /// `Err` carries a one-line reason.
    pub outcome: std::result::Result<(), String>,
    pub ms: f64,
}

pub struct CheckGroup {
    pub name: &'static str,
    pub run: Box<dyn Fn() -> std::result::Result<(), String> + Send + Sync>,
}

impl CheckGroup {
    pub fn new(name: &'static str, run: impl Fn() -> std::result::Result<(), String> + Send + Sync + 'static) -> Self {
        CheckGroup {
            name,
            run: Box::new(run),
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err_str<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const INVARIANT_TRIALS: usize = 100;

fn invariants() -> std::result::Result<InvariantReport, String> {
    err_str(stage_invariants(&PipelineConfig::default(), INVARIANT_TRIALS, 0x1a7))
}

/// The standard suite, in reporting order.
pub fn default_groups() -> Vec<CheckGroup> {
    vec![
        CheckGroup::new("budgets", || {
            let cfg = PipelineConfig::default();
            let params = count_params(&cfg);
            let flops = count_flops(&cfg, 640, 640);
            ensure(params <= 3500, || format!("{params} parameters exceed 3500"))?;
            ensure((100_000_000..=400_000_000).contains(&flops), || format!("{flops} FLOPs at 640x640"))
        }),
        CheckGroup::new("gradient-check", || {
            let cfg = PipelineConfig::default();
            let params = err_str(PipelineParams::init(&cfg))?;
            let raw = fixtures::scene(16, 16, 7);
            for loss in [Loss::DistillL2, Loss::EntropyMax] {
                let obj = err_str(PipelineObjective::new(&cfg, &raw, loss, 11))?;
                let worst = err_str(grad_check(&obj, &params, 4, 1))?.worst();
                ensure(worst < 1e-4, || format!("{loss}: relative error {worst:.3e}"))?;
            }
            Ok(())
        }),
        CheckGroup::new("gain-positivity", || {
            let r = invariants()?;
            ensure(r.gains_ok(), || format!("smallest gain {}", r.min_gain))
        }),
        CheckGroup::new("attention-range", || {
            let r = invariants()?;
            ensure(r.attention_ok(), || format!("attention in [{}, {}]", r.min_attention, r.max_attention))
        }),
        CheckGroup::new("partition-of-unity", || {
            let r = invariants()?;
            ensure(r.partition_ok(), || format!("mask sums off by {:.3e}", r.max_partition_error))
        }),
        CheckGroup::new("exponent-range", || {
            let r = invariants()?;
            ensure(r.exponents_ok(), || format!("exponents in [{}, {}]", r.min_exponent, r.max_exponent))
        }),
        CheckGroup::new("output-range", || {
            let r = invariants()?;
            ensure(r.output_ok(), || format!("outputs in [{}, {}]", r.min_output, r.max_output))
        }),
        CheckGroup::new("fast-path", fast_path_agreement),
        CheckGroup::new("round-trips", round_trips),
        CheckGroup::new("classic-isp", classic_properties),
    ]
}

fn fast_path_agreement() -> std::result::Result<(), String> {
    let cfg = PipelineConfig::default();
    let params = err_str(PipelineParams::init(&cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (6, 7);
    let x: Vec<f64> = (0..4 * h * w).map(|_| rng.gen()).collect();
    let mut g = Graph::new();
    let p = err_str(ParamVars::register(&mut g, &params, &cfg))?;
    let xv = err_str(g.constant(&[4, h, w], x.clone()))?;
    let s = err_str(forward_graph(&mut g, xv, &p, &cfg, &mut rng, true))?;
    let model = err_str(FastModel::<f64>::new(&params, &cfg))?;
    let planes = err_str(Planes::new(4, h, w, x))?;
    for exec in [Exec::Sequential, Exec::Parallel] {
        let out = err_str(model.run_packed(&planes, exec))?;
        let diff = out
            .values
            .iter()
            .zip(g.value(s.packed_out))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(diff < 1e-10, || format!("{} fast path differs by {diff:.3e}", exec.label()))?;
    }
    Ok(())
}

fn round_trips() -> std::result::Result<(), String> {
    let raw = fixtures::golden_scene();
    let bytes = write_raw(&raw);
    let back = err_str(parse_raw(&bytes))?;
    ensure(back == raw && write_raw(&back) == bytes, || "RAWI round trip changed the image".into())?;

    let cfg = PipelineConfig::default();
    let params = err_str(PipelineParams::init(&cfg))?;
    let loaded = err_str(load_params(&save_params(&params), &cfg))?;
    ensure(loaded == params.rounded_to_f32(), || "TAIP round trip is not f32-exact".into())?;

    for i in 0..=10_000 {
        let v = i as f64 / 10_000.0;
        let want = (v * 255.0 + 0.5).floor() as u8;
        ensure(quantize(v) == want, || format!("quantize({v}) = {} not {want}", quantize(v)))?;
    }
    let img = err_str(RgbImage::new(1, 4, (0..12).map(|i| i as f64 / 11.0).collect()))?;
    let ppm = write_ppm(&img);
    let again = write_ppm(&err_str(parse_ppm(&ppm))?);
    ensure(again == ppm, || "PPM round trip changed bytes".into())
}

fn classic_properties() -> std::result::Result<(), String> {
    let t = SRGB_THRESHOLD;
    let step = (SRGB_SLOPE * t - (1.055 * t.powf(1.0 / 2.4) - 0.055)).abs();
    ensure(step < 1e-9, || format!("sRGB branches differ by {step:.3e}"))?;
    ensure(gamma_curve(0.0, Gamma::Srgb) == 0.0 && (gamma_curve(1.0, Gamma::Srgb) - 1.0).abs() < 1e-15, || {
        "sRGB endpoints".into()
    })?;

    let img = classic::demosaic_bilinear(&classic::black_level_correct(&fixtures::golden_scene()), Exec::default());
    let once = white_balance(&img, WhiteBalance::GrayWorld);
    let twice = white_balance(&once, WhiteBalance::GrayWorld);
    let drift = once.values.iter().zip(&twice.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(drift < 1e-9, || format!("gray world not idempotent ({drift:.3e})"))?;

    let cfg = ClassicIspConfig::default();
    let neutral = err_str(run_classic(&fixtures::neutral_field(16, 12, 0.3), &cfg, Exec::default()))?;
    let n = neutral.height * neutral.width;
    let chroma = (0..n)
        .map(|p| {
            let v = [neutral.values[p], neutral.values[n + p], neutral.values[2 * n + p]];
            (v[0] - v[1]).abs().max((v[1] - v[2]).abs())
        })
        .fold(0.0, f64::max);
    ensure(chroma < 1e-6, || format!("neutral scene picked up {chroma:.3e} chroma"))?;

    let golden = fixtures::golden_scene();
    let a = write_ppm(&err_str(run_classic(&golden, &cfg, Exec::Parallel))?);
    let b = write_ppm(&err_str(run_classic(&golden, &cfg, Exec::Sequential))?);
    ensure(a == b, || "golden fixture output differs between runs".into())
}

/// Runs every group, timing each.
pub fn run_groups(groups: &[CheckGroup]) -> Vec<GroupResult> {
    groups
        .iter()
        .map(|g| {
            let start = Instant::now();
            let outcome = (g.run)();
            GroupResult {
                name: g.name.to_string(),
                outcome,
                ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

pub fn all_passed(results: &[GroupResult]) -> bool {
    results.iter().all(|r| r.outcome.is_ok())
}

/// `PASS name (ms)` or `FAIL name: reason (ms)`, one line per group.
pub fn format_results(results: &[GroupResult]) -> String {
    let mut out = String::new();
    for r in results {
        match &r.outcome {
            Ok(()) => out.push_str(&format!("PASS {:<20} ({:.0} ms)\n", r.name, r.ms)),
            Err(e) => out.push_str(&format!("FAIL {:<20} {e} ({:.0} ms)\n", r.name, r.ms)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let results = run_groups(&default_groups());
        assert!(all_passed(&results), "{}", format_results(&results));
        assert_eq!(results.len(), 10);
    }

    #[test]
    fn a_failing_group_is_named() {
        let mut groups = default_groups();
        groups.truncate(1);
        groups.push(CheckGroup::new("injected-fault", || Err("forced failure".into())));
        let results = run_groups(&groups);
        assert!(!all_passed(&results));
        let text = format_results(&results);
        assert!(text.contains("PASS budgets"));
        assert!(text.contains("FAIL injected-fault"));
        assert!(text.contains("forced failure"));
    }

    #[test]
    fn invariant_report_flags_violations() {
        let r = stage_invariants(&PipelineConfig::default(), 5, 1).unwrap();
        assert!(r.all_ok(), "{r:?}");
        let bad = InvariantReport {
            max_partition_error: 1e-6,
            ..r.clone()
        };
        assert!(!bad.partition_ok() && !bad.all_ok());
        let bad = InvariantReport { max_exponent: 1.0, ..r };
        assert!(!bad.exponents_ok());
    }
}
