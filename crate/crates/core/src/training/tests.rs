use super::*;
use crate::autodiff::Graph;

fn rgb(h: usize, w: usize, f: impl Fn(usize) -> f64) -> RgbImage {
    RgbImage::new(h, w, (0..3 * h * w).map(f).collect()).unwrap()
}

#[test]
fn distill_examples() {
    let t = rgb(2, 3, |i| i as f64 / 20.0);
    assert_eq!(distill_l2(&t, &t).unwrap(), 0.0);
    let shifted = rgb(2, 3, |i| i as f64 / 20.0 + 0.1);
    assert!((distill_l2(&shifted, &t).unwrap() - 0.01).abs() < 1e-15);
}

#[test]
fn distill_gradient_is_scaled_residual() {
    let pred: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let teacher: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let mut g = Graph::new();
    let x = g.param(&[12], pred.clone()).unwrap();
    let l = loss_distill_l2(&mut g, x, &teacher).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap();
    let f = |p: &[f64]| p.iter().zip(&teacher).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
    for i in 0..12 {
        assert!((grad[i] - 2.0 * (pred[i] - teacher[i]) / 12.0).abs() < 1e-15);
        let (mut up, mut down) = (pred.clone(), pred.clone());
        up[i] += 1e-6;
        down[i] -= 1e-6;
        assert!((grad[i] - (f(&up) - f(&down)) / 2e-6).abs() < 1e-8);
    }
}

#[test]
fn entropy_examples() {
    // A constant image lands in one bin when it sits on a bin center.
    let flat = rgb(4, 4, |_| 5.0 / 31.0);
    assert!(entropy_max(&flat, 32).unwrap().abs() < 1e-12);
    // Any other image has strictly positive entropy, so a lower loss.
    let two = rgb(4, 4, |i| if i % 2 == 0 { 0.0 } else { 1.0 });
    assert!((entropy_max(&two, 32).unwrap() + 2f64.ln()).abs() < 1e-12);
    // A dense uniform ramp spreads mass over every bin: close to -ln(bins).
    let ramp = rgb(100, 100, |i| i as f64 / 29_999.0);
    let loss = entropy_max(&ramp, 32).unwrap();
    assert!((loss + 32f64.ln()).abs() < 0.01, "{loss}");
}

#[test]
fn entropy_gradient_matches_differences() {
    let pred: Vec<f64> = (0..30).map(|i| 0.5 + 0.45 * (i as f64 * 1.7).sin()).collect();
    let mut g = Graph::new();
    let x = g.param(&[30], pred.clone()).unwrap();
    let l = loss_entropy_max(&mut g, x, 8).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap().to_vec();
    let f = |p: &[f64]| {
        let mut g = Graph::new();
        let x = g.constant(&[30], p.to_vec()).unwrap();
        let l = loss_entropy_max(&mut g, x, 8).unwrap();
        g.scalar(l)
    };
    for i in 0..30 {
        let (mut up, mut down) = (pred.clone(), pred.clone());
        up[i] += 1e-7;
        down[i] -= 1e-7;
        let numeric = (f(&up) - f(&down)) / 2e-7;
        assert!(relative_error(grad[i], numeric) < 1e-5, "{i}: {} vs {numeric}", grad[i]);
    }
}

fn scalar_params(v: f64) -> PipelineParams {
    PipelineParams {
        tensors: vec![crate::pipeline::ParamTensor {
            name: "p".into(),
            shape: vec![1],
            data: vec![v],
        }],
    }
}

#[test]
fn sgd_examples() {
    let mut p = scalar_params(1.0);
    let mut s = SgdState::default();
    sgd_step(&mut p, &[vec![0.0]], 0.1, 0.9, &mut s).unwrap();
    assert_eq!(p.tensors[0].data, vec![1.0]);

    let mut p = scalar_params(1.0);
    let mut s = SgdState::default();
    sgd_step(&mut p, &[vec![2.0]], 0.1, 0.0, &mut s).unwrap();
    assert!((p.tensors[0].data[0] - 0.8).abs() < 1e-15);

    // v1 = 2, p1 = 1 - 0.2 = 0.8; v2 = 0.9*2 + 1 = 2.8, p2 = 0.8 - 0.28 = 0.52.
    let mut p = scalar_params(1.0);
    let mut s = SgdState::default();
    sgd_step(&mut p, &[vec![2.0]], 0.1, 0.9, &mut s).unwrap();
    sgd_step(&mut p, &[vec![1.0]], 0.1, 0.9, &mut s).unwrap();
    assert!((p.tensors[0].data[0] - 0.52).abs() < 1e-15);
    assert!((s.velocity[0][0] - 2.8).abs() < 1e-15);

    assert!(sgd_step(&mut p, &[], 0.1, 0.9, &mut s).is_err());
}

#[test]
fn config_from_text_and_validation() {
    let kv = KvFile::parse("loss=entropy_max\nlearning_rate=0.05\nmomentum=0\nsteps=7\nbatch=a.rawi, b.rawi\nseed=9\nlog_every=2\n").unwrap();
    let cfg = TrainConfig::from_kv(&kv).unwrap();
    assert_eq!(cfg.loss, Loss::EntropyMax);
    assert_eq!((cfg.learning_rate, cfg.momentum, cfg.steps, cfg.seed, cfg.log_every), (0.05, 0.0, 7, 9, 2));
    assert_eq!(cfg.batch, vec![PathBuf::from("a.rawi"), PathBuf::from("b.rawi")]);
    for bad in ["learning_rate=0", "momentum=1", "steps=0", "loss=l1"] {
        assert!(TrainConfig::from_kv(&KvFile::parse(bad).unwrap()).is_err(), "{bad}");
    }
    assert_eq!(TrainConfig::from_kv(&KvFile::default()).unwrap(), TrainConfig::default());
}

fn small_run(steps: usize, seed: u64, exec: Exec) -> (PipelineParams, TrainReport) {
    let config = PipelineConfig::default();
    let mut params = PipelineParams::init(&config).unwrap();
    let train_cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let batch = fixtures::training_batch(16, 16);
    let report = train(&mut params, &config, &train_cfg, &batch, exec).unwrap();
    (params, report)
}

#[test]
fn training_is_deterministic_and_policy_independent() {
    let (pa, a) = small_run(4, 3, Exec::Parallel);
    let (pb, b) = small_run(4, 3, Exec::Sequential);
    assert_eq!(pa, pb);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.losses.len(), 4);
    assert_eq!(a.grad_norms.len(), 4);
    let (_, c) = small_run(4, 4, Exec::Parallel);
    assert_ne!(a.losses[1..], c.losses[1..]);
}

#[test]
fn report_formats() {
    let (_, r) = small_run(3, 0, Exec::default());
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,grad_norm,ms");
    assert_eq!(lines.len(), 4);
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields[0], "2");
    assert_eq!(fields[1].parse::<f64>().unwrap(), r.losses[1]);
    let text = r.to_text();
    assert!(text.contains("step     3"));
    assert!(text.contains(&r.params_checksum));
}

#[test]
fn non_finite_inputs_abort_with_the_tensor_name() {
    let config = PipelineConfig::default();
    let mut params = PipelineParams::init(&config).unwrap();
    params.get_mut("glc.fc2.bias").unwrap().data[0] = f64::NAN;
    let err = train(
        &mut params,
        &config,
        &TrainConfig { steps: 2, ..TrainConfig::default() },
        &fixtures::training_batch(8, 8),
        Exec::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");

    let mut params = PipelineParams::init(&config).unwrap();
    let err = train(
        &mut params,
        &config,
        &TrainConfig { steps: 3, learning_rate: 1e300, ..TrainConfig::default() },
        &fixtures::training_batch(8, 8),
        Exec::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite { tensor, .. } => assert!(params.get(&tensor).is_ok() || tensor == "loss", "{tensor}"),
        other => panic!("{other}"),
    }
}

#[test]
fn zero_learning_rate_is_rejected_and_a_zero_step_changes_nothing() {
    let config = PipelineConfig::default();
    let mut params = PipelineParams::init(&config).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(train(&mut params, &config, &cfg, &fixtures::training_batch(8, 8), Exec::default()).is_err());
    let before = params.clone();
    let grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![1.0; t.data.len()]).collect();
    sgd_step(&mut params, &grads, 0.0, 0.9, &mut SgdState::default()).unwrap();
    assert_eq!(params, before);
}

#[test]
fn window_gate_by_hand() {
    let l = [4.0, 4.0, 3.0, 3.0, 3.1, 3.1, 1.0];
    assert_eq!(window_means(&l, 2), vec![4.0, 3.0, 3.1]);
    assert!(windows_non_increasing(&l, 2, 0.05));
    assert!(!windows_non_increasing(&l, 2, 0.01));
}

struct Corrupted<'a>(&'a PipelineObjective, usize);

impl Objective for Corrupted<'_> {
    fn value(&self, params: &PipelineParams) -> Result<f64> {
        self.0.value(params)
    }

    fn value_and_grads(&self, params: &PipelineParams) -> Result<(f64, Vec<Vec<f64>>)> {
        let (v, mut g) = self.0.value_and_grads(params)?;
        for x in &mut g[self.1] {
            *x = *x * 1.5 + 1e-3;
        }
        Ok((v, g))
    }
}

#[test]
fn grad_check_flags_a_corrupted_backward() {
    let config = PipelineConfig::default();
    let params = PipelineParams::init(&config).unwrap();
    let raw = fixtures::scene(16, 16, 5);
    let obj = PipelineObjective::new(&config, &raw, Loss::DistillL2, 1).unwrap();
    let honest = grad_check(&obj, &params, 3, 0).unwrap();
    assert!(honest.worst() < 1e-4, "{honest:?}");
    let bad = grad_check(&Corrupted(&obj, 4), &params, 3, 0).unwrap();
    assert!(bad.tensors[4].max_rel_error > 1e-2);
    assert!(bad.worst() > 1e-2);
    assert!(grad_check(&obj, &params, 0, 0).is_err());
}
