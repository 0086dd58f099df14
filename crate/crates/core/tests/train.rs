use matchflow_core::eval::aepe;
use matchflow_core::flow::{downsample_flow, flow_loss};
use matchflow_core::model::flow_trace;
use matchflow_core::synth::{gen_flow_pair, MotionSpec, WarpSpec};
use matchflow_core::train::{
    clip_global_norm, compare_curricula, finetune_flow, one_cycle, pretrain_matching, train, train_seed, validate,
    validation_seed, AdamW, CurriculumConfig, DataSpec, Stage, TrainConfig,
};
use matchflow_core::{Error, MatchFlow, ModelConfig, ModelWeights, ParamGroup};
use matchflow_tensor::{Tape, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn tiny_stage1(seed: u64, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::stage1(seed);
    c.model = ModelConfig::tiny();
    c.steps = steps;
    c.val_pairs = 2;
    c.val_every = 2;
    c
}

fn tiny_stage2(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig { stage: Stage::Flow, data: TrainConfig::stage2(seed).data, val_iters: 2, train_iters: 2, ..tiny_stage1(seed, steps) }
}

#[test]
fn zero_steps_return_the_initialization() {
    let cfg = tiny_stage1(3, 0);
    let (w, r) = pretrain_matching(&cfg).unwrap();
    assert_eq!(w, ModelWeights::init(&cfg.model, 3).unwrap());
    assert!(r.losses.is_empty() && r.validation.is_empty());
    let init = ModelWeights::init(&cfg.model, 17).unwrap();
    let (w, r) = finetune_flow(&tiny_stage2(3, 0), Some(init.clone())).unwrap();
    assert_eq!(w, init);
    assert!(r.to_json_lines().is_empty());
}

#[test]
fn same_seed_gives_identical_curves_and_weights() {
    let cfg = tiny_stage2(5, 4);
    let (w1, r1) = finetune_flow(&cfg, None).unwrap();
    let (w2, r2) = finetune_flow(&cfg, None).unwrap();
    assert_eq!(w1, w2);
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(r1.validation, r2.validation);
    assert_eq!(r1.to_json_lines(), r2.to_json_lines());
    let (w3, _) = finetune_flow(&tiny_stage2(6, 4), None).unwrap();
    assert_ne!(w1, w3);
}

#[test]
fn report_logs_one_record_per_step() {
    let (_, r) = pretrain_matching(&tiny_stage1(2, 5)).unwrap();
    assert_eq!(r.losses.len(), 5);
    assert!(r.losses.iter().all(|l| l.is_finite()));
    let lines: Vec<serde_json::Value> = r.to_json_lines().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["step"], i + 1);
        assert_eq!(rec["stage"], "Matching");
        assert_eq!(rec["loss"].as_f64().unwrap(), r.losses[i]);
    }
    // Validation at 0, 2, 4 and the final step.
    assert_eq!(r.validation.iter().map(|v| v.step).collect::<Vec<_>>(), [0, 2, 4, 5]);
    assert!(r.validation.iter().all(|v| v.precision.is_some_and(|p| (0.0..=1.0).contains(&p))));
    assert!(lines[1].get("val").is_some() && lines[0].get("val").is_none());
}

#[test]
fn stage_one_leaves_the_refiner_untouched() {
    let cfg = tiny_stage1(4, 3);
    let init = ModelWeights::init(&cfg.model, 4).unwrap();
    let (w, _) = train(&cfg, init.clone()).unwrap();
    for g in [ParamGroup::Context, ParamGroup::Refiner] {
        assert_eq!(w.fingerprint(g), init.fingerprint(g), "{g:?} changed");
    }
    assert_ne!(w.fingerprint(ParamGroup::Features), init.fingerprint(ParamGroup::Features));
    let (w2, _) = train(&tiny_stage2(4, 2), init.clone()).unwrap();
    for g in [ParamGroup::Features, ParamGroup::Context, ParamGroup::Refiner] {
        assert_ne!(w2.fingerprint(g), init.fingerprint(g), "{g:?} did not train");
    }
}

#[test]
fn stage_two_default_discount() {
    assert_eq!(TrainConfig::stage2(0).gamma, 0.8);
    assert_eq!(TrainConfig::stage2(0).stage, Stage::Flow);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_stage1(0, 1);
    for bad in [
        TrainConfig { gamma: 0.0, ..base.clone() },
        TrainConfig { gamma: 1.2, ..base.clone() },
        TrainConfig { temperature: 0.0, ..base.clone() },
        TrainConfig { temperature: f64::NAN, ..base.clone() },
        TrainConfig { batch: 0, ..base.clone() },
        TrainConfig { stage: Stage::Flow, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert!(matches!(finetune_flow(&base, None), Err(Error::Config(_))));
    assert!(matches!(pretrain_matching(&tiny_stage2(0, 1)), Err(Error::Config(_))));
    let desk = ModelWeights::init(&ModelConfig::desk(), 0).unwrap();
    assert!(matches!(train(&base, desk), Err(Error::Config(_))));
}

#[test]
fn nan_weights_stop_training_with_the_step() {
    let cfg = tiny_stage1(0, 3);
    let mut w = ModelWeights::init(&cfg.model, 0).unwrap();
    w.get_mut("enc.stem.w").unwrap().data_mut()[0] = f32::NAN;
    match train(&TrainConfig { val_every: 0, ..cfg }, w) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoints_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, checkpoint_dir: Some(dir.path().to_path_buf()), val_every: 0, ..tiny_stage1(1, 5) };
    let (w, r) = pretrain_matching(&cfg).unwrap();
    assert_eq!(r.checkpoints.len(), 2);
    assert!(r.checkpoints.iter().all(|p| p.exists()));
    let last = matchflow_core::io::load_weights(&r.checkpoints[1]).unwrap();
    assert_eq!(last.config, w.config);
}

#[test]
fn training_and_validation_seeds_never_meet() {
    let train: std::collections::HashSet<u64> =
        (0..50).flat_map(|s| (0..4).map(move |b| train_seed(7, s, b))).collect();
    assert_eq!(train.len(), 200);
    assert!((0..64).all(|k| !train.contains(&validation_seed(7, k))));
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = BTreeMap::new();
    g.insert("a".to_string(), Tensor::new(&[2], vec![3.0f32, 0.0]).unwrap());
    g.insert("b".to_string(), Tensor::new(&[1], vec![4.0f32]).unwrap());
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let n: f32 = g.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    assert_eq!(clip_global_norm(&mut g, 10.0) as f32, n);
}

#[test]
fn identical_arms_when_pretraining_is_skipped() {
    let base = CurriculumConfig { pretrain: tiny_stage1(0, 0), finetune: tiny_stage2(0, 3), threshold: 0.5 };
    let r = compare_curricula(&base, &[1, 2, 3]).unwrap();
    assert_eq!(r.seeds.len(), 3);
    for s in &r.seeds {
        let (a, b) = (&s.pretrained, &s.scratch);
        assert_eq!((a.steps_to_threshold, a.final_aepe.to_bits()), (b.steps_to_threshold, b.final_aepe.to_bits()));
        assert_eq!((&a.report.losses, &a.report.validation), (&b.report.losses, &b.report.validation));
        assert_eq!(s.pretrained.report.losses.len(), 3);
        assert!(!s.pretrained_faster());
        assert!(s.pretrained_not_worse());
    }
    assert!(matches!(compare_curricula(&base, &[1, 2]), Err(Error::Config(_))));
}

#[test]
fn matching_loss_halves_in_300_steps() {
    let cfg = TrainConfig::stage1(0);
    assert_eq!(cfg.steps, 300);
    if let DataSpec::Static { size, warp, .. } = &cfg.data {
        assert_eq!(*size, (64, 96));
        assert!(matches!(warp, WarpSpec::RandomTranslation { .. }));
    }
    let (w, r) = pretrain_matching(&cfg).unwrap();
    let initial = r.validation.first().unwrap().metric;
    let last = validate(&w, &cfg, cfg.steps).unwrap().metric;
    assert!(last <= 0.5 * initial, "held-out matching loss {initial} -> {last}");
    let head: f64 = r.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = r.losses[r.losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * head, "training loss {head} -> {tail}");
}

#[test]
fn uniform_translation_reaches_sub_half_pixel_aepe() {
    let (pre, _) = pretrain_matching(&TrainConfig::stage1(0)).unwrap();
    let cfg = TrainConfig {
        steps: 800,
        val_every: 0,
        data: DataSpec::Flow { size: (64, 96), motion: MotionSpec::Uniform { max: 8.0, integer: false } },
        ..TrainConfig::stage2(0)
    };
    let (w, _) = finetune_flow(&cfg, Some(pre)).unwrap();
    let v = validate(&w, &TrainConfig { val_pairs: 16, ..cfg }, 800).unwrap();
    assert!(v.metric < 0.5, "held-out coarse AEPE {}", v.metric);
}

#[test]
fn more_iterations_do_not_hurt_a_converged_toy_model() {
    let cfg = ModelConfig::tiny();
    let pair = gen_flow_pair(3, (64, 64), &MotionSpec::Fixed { background: (5.0, -3.0), layers: vec![] }).unwrap();
    let coarse = downsample_flow(&pair.flow).unwrap();
    let mut w = ModelWeights::init(&cfg, 3).unwrap();
    let mut opt = AdamW::new(0.0);
    let steps = 300;
    for step in 0..steps {
        let mut g: Tape<f32> = Tape::new();
        let p = w.bind(&mut g, |_| true);
        let (a, b) = (g.constant(pair.i1.clone()), g.constant(pair.i2.clone()));
        let trace = flow_trace(&mut g, &p, &cfg, a, b, 12).unwrap();
        let loss = flow_loss(&mut g, &trace.flows, &coarse, 0.8, None).unwrap();
        g.backward(loss).unwrap();
        let mut grads: BTreeMap<String, Tensor<f32>> =
            p.iter().filter_map(|(n, &v)| g.grad(v).map(|t| (n.clone(), t.clone()))).collect();
        clip_global_norm(&mut grads, 1.0);
        let lr = one_cycle(step, steps, 3e-3, 0.3);
        opt.step(&mut w, &grads, |_| lr);
    }
    let epe = |n: usize| aepe(&MatchFlow::new(w.clone()).with_iters(n).predict_coarse(&pair.i1, &pair.i2).unwrap(), &coarse, None).unwrap();
    let (e4, e12) = (epe(4), epe(12));
    assert!(e12 < 0.25, "toy model did not converge: EPE {e12}");
    assert!(e12 <= e4, "EPE rose from {e4} (N=4) to {e12} (N=12)");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_cycle_rises_then_falls(total in 2usize..2000, pct in 0.05f64..0.95, peak in 1e-5f64..1.0) {
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle(s, total, peak, pct)).collect();
        let top = lrs.iter().cloned().fold(0.0, f64::max);
        let at = lrs.iter().position(|&v| v == top).unwrap();
        let warm = ((pct * total as f64).round() as usize).clamp(1, total - 1);
        prop_assert!((top - peak).abs() <= 1e-12 * peak);
        prop_assert_eq!(at, warm);
        prop_assert!(lrs[..=at].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[at..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(lrs[0] <= peak / 25.0 + 1e-18);
        prop_assert!(lrs[total - 1] <= peak / 25.0 + 1e-18);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn trained_runs_are_deterministic(seed in 0u64..1000) {
        let cfg = TrainConfig { val_every: 0, ..tiny_stage1(seed, 2) };
        let (a, ra) = pretrain_matching(&cfg).unwrap();
        let (b, rb) = pretrain_matching(&cfg).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ra.losses, rb.losses);
    }
}
