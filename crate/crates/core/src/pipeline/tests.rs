use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{self, ParamVars};
use super::*;
use crate::raw_io::BayerPattern;

fn random_planes(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Planes<f64> {
    Planes::new(c, h, w, (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn random_raw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RawImage {
    let data = (0..h * w).map(|_| rng.gen_range(64..=4095)).collect();
    RawImage::new(w, h, 12, BayerPattern::Rggb, 64, 4095, data).unwrap()
}

/// Runs the tape on a packed tensor in inference mode.
fn graph_stages(
    x: &Planes<f64>,
    params: &PipelineParams,
    cfg: &PipelineConfig,
) -> (Graph, graph::Stages) {
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, cfg).unwrap();
    let xv = g.constant(&[x.channels, x.height, x.width], x.values.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stages = graph::forward_graph(&mut g, xv, &p, cfg, &mut rng, true).unwrap();
    (g, stages)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn glc_statistics_on_checkerboard() {
    let mut g = Graph::new();
    let vals: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let x = g.param(&[1, 4, 4], vals).unwrap();
    let (mu, var) = graph::glc_statistics(&mut g, x).unwrap();
    assert_eq!(g.value(mu), &[0.5]);
    assert_eq!(g.value(var), &[0.25]);
    let s = g.sum(mu);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&d| (d - 1.0 / 16.0).abs() < 1e-15));
}

#[test]
fn zero_parameters_give_reference_values() {
    let cfg = PipelineConfig::default();
    let params = PipelineParams::zeros(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_planes(&mut rng, 4, 5, 6);
    let (g, s) = graph_stages(&x, &params, &cfg);
    let gain = 2f64.ln() + 1.0;
    assert!(g.value(s.gains).iter().all(|&v| (v - gain).abs() < 1e-15));
    // All branch maps are 0.5 and the branch weights are uniform.
    assert!(g.value(s.attention).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    assert!(g.value(s.weights).iter().all(|&v| (v - gain).abs() < 1e-15));
    assert!((1.0 / gain - 0.5906).abs() < 1e-4);
    // Zero logits: every mask is 1/K.
    assert!(g.value(s.masks).iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
}

#[test]
fn hsa_descriptor_and_weight_examples() {
    let mut g = Graph::new();
    let mut vals = vec![0.0; 9];
    vals.extend([1.0; 9]);
    let x = g.param(&[2, 3, 3], vals).unwrap();
    let m = graph::hsa_pooled_descriptors(&mut g, x).unwrap();
    assert_eq!(&g.value(m)[..9], &[0.5; 9]);
    assert_eq!(&g.value(m)[9..], &[1.0; 9]);
}

#[test]
fn rgfc_apply_examples() {
    let mut g = Graph::new();
    let xs = g.param(&[1, 2, 2], vec![0.25; 4]).unwrap();
    // Single effective mask (index 1), w = 2 -> square root.
    let masks = g.constant(&[2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let w = g.constant(&[2], vec![5.0, 2.0]).unwrap();
    let out = graph::rgfc_apply(&mut g, xs, masks, w, 1e-6).unwrap();
    assert!(g.value(out).iter().all(|&v| (v - 0.5).abs() < 1e-15));

    // Identity exponents reproduce clamp(X_s, eps).
    let mut g = Graph::new();
    let xs = g.param(&[1, 1, 3], vec![0.0, 0.3, 0.9]).unwrap();
    let masks = g.constant(&[2, 1, 3], vec![0.2, 0.7, 0.5, 0.8, 0.3, 0.5]).unwrap();
    let w = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let out = graph::rgfc_apply(&mut g, xs, masks, w, 1e-6).unwrap();
    assert!(max_diff(g.value(out), &[1e-6, 0.3, 0.9]) < 1e-15);
}

#[test]
fn sharp_masks_at_large_margin() {
    let mut g = Graph::new();
    let logits = g.constant(&[2, 1, 1], vec![5.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = graph::rgfc_masks(&mut g, logits, 0.1, &mut rng, true).unwrap();
    assert!(1.0 - g.value(m)[0] < 1e-20);
}

#[test]
fn fast_path_matches_graph_at_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (k, h, w) in [(16, 6, 6), (4, 5, 9), (1, 1, 1), (8, 2, 7), (32, 3, 1)] {
        let cfg = PipelineConfig {
            seed: rng.gen(),
            ..PipelineConfig::default().with_mask_count(k)
        };
        let mut params = PipelineParams::init(&cfg).unwrap();
        // Nonzero mixer and biases so every path is exercised.
        for t in &mut params.tensors {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = random_planes(&mut rng, 4, h, w);
        let (g, s) = graph_stages(&x, &params, &cfg);
        let fast = FastModel::<f64>::new(&params, &cfg).unwrap();
        let t = fast.trace(&x, Exec::Sequential).unwrap();
        assert!(max_diff(&t.gains, g.value(s.gains)) < 1e-12);
        assert!(max_diff(&t.attention, g.value(s.attention)) < 1e-12);
        assert!(max_diff(&t.xs.values, g.value(s.xs)) < 1e-12);
        let pooled: Vec<f64> = {
            let l = g.value(s.logits);
            l.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect()
        };
        assert!(max_diff(&t.pooled_logits, &pooled) < 1e-12, "k={k} {h}x{w}");
        assert!(max_diff(&t.region_weights, g.value(s.weights)) < 1e-12);
        let masks = fast.masks(&t.xs, Exec::Sequential);
        assert!(max_diff(&masks.values, g.value(s.masks)) < 1e-10);
        assert!(max_diff(&t.output.values, g.value(s.packed_out)) < 1e-10);
    }
}

#[test]
fn fast_path_is_policy_independent_and_f32_is_close() {
    let cfg = PipelineConfig::default();
    let params = PipelineParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = random_raw(&mut rng, 24, 32);
    let m64 = FastModel::<f64>::new(&params, &cfg).unwrap();
    let seq = m64.run(&raw, Exec::Sequential).unwrap();
    let par = m64.run(&raw, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    let m32 = FastModel::<f32>::new(&params, &cfg).unwrap();
    let f = m32.run(&raw, Exec::Parallel).unwrap().to_f64();
    assert!(max_diff(&f.values, &seq.values) < 1e-3);
}

#[test]
fn forward_modes_are_deterministic_and_bounded() {
    let cfg = PipelineConfig::default();
    let params = PipelineParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw = random_raw(&mut rng, 16, 16);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = forward(&raw, &params, &cfg, Mode::Infer, &mut r).unwrap();
    let b = forward(&raw, &params, &cfg, Mode::Infer, &mut r).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height, a.width), (16, 16));
    let t1 = forward(&raw, &params, &cfg, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let t2 = forward(&raw, &params, &cfg, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(t1, t2);
    for img in [&a, &t1] {
        assert!(img.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let cfg = PipelineConfig {
        channels: 3,
        ..Default::default()
    };
    let params = PipelineParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = random_raw(&mut rng, 4, 4);
    assert!(matches!(
        forward(&raw, &params, &cfg, Mode::Infer, &mut rng),
        Err(Error::Config(_))
    ));
    let other = PipelineParams::init(&PipelineConfig::default()).unwrap();
    assert!(FastModel::<f64>::new(&other, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Parameters stay near initialization scale: far outside it the region
    // weight 1 + softplus(r) rounds to exactly 1 once r < -36.7.
    #[test]
    fn stage_invariants_hold(seed in any::<u64>(), k in 1usize..6, h in 1usize..5, w in 1usize..5, scale in 0.1f64..1.5) {
        let cfg = PipelineConfig { seed, ..PipelineConfig::default().with_mask_count(k) };
        let mut params = PipelineParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut params.tensors {
            for v in &mut t.data {
                *v = *v * scale + rng.gen_range(-0.25..0.25);
            }
        }
        let x = random_planes(&mut rng, 4, h, w);
        let mut g = Graph::new();
        let p = ParamVars::register(&mut g, &params, &cfg).unwrap();
        let xv = g.constant(&[4, h, w], x.values.clone()).unwrap();
        let s = graph::forward_graph(&mut g, xv, &p, &cfg, &mut rng, false).unwrap();
        prop_assert!(g.value(s.gains).iter().all(|&v| v > 1.0));
        prop_assert!(g.value(s.attention).iter().all(|&v| v > 0.0 && v < 1.0));
        for px in 0..h * w {
            let total: f64 = (0..k).map(|kk| g.value(s.masks)[kk * h * w + px]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        prop_assert!(g.value(s.weights).iter().all(|&v| v > 1.0 && (1.0 / v) < 1.0));
        prop_assert!(g.value(s.rgb).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
