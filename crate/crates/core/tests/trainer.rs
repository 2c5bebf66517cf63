mod common;

use std::collections::BTreeMap;

use convllava_core::config::TrainConfig;
use convllava_core::encoder::{param_owner, ParamOwner};
use convllava_core::pipeline::Model;
use convllava_core::trainer::{
    adamw_step, cosine_lr, run_protocol, run_stage, synth_data, AdamW, DataSource, OptimizerState, StagePlan, SynthData,
};
use convllava_core::{Error, FreezeSpec, ParamStore, Tensor};

#[test]
fn cosine_reference_points() {
    let (total, peak) = (1000, 2e-5);
    let warm = 30;
    assert_eq!(cosine_lr(warm, total, peak, 0.03), peak);
    assert_eq!(cosine_lr(total, total, peak, 0.03), 0.0);
    let mid = warm + (total - warm) / 2;
    assert!((cosine_lr(mid, total, peak, 0.03) - peak / 2.0).abs() < 1e-18);
    assert!(cosine_lr(warm / 2, total, peak, 0.03) < peak);
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    s
}

fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::from([("x".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
}

#[test]
fn adamw_zero_gradient_is_a_no_op() {
    let mut s = scalar_store(1.5);
    let mut opt = OptimizerState::new(AdamW::default());
    adamw_step(&mut s, &grad(0.0), &mut opt, 0.1).unwrap();
    assert_eq!(s.value("x").unwrap().item(), 1.5);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    // Bias correction makes the first update lr * g / (|g| + eps).
    let mut s = scalar_store(1.0);
    let mut opt = OptimizerState::new(AdamW::default());
    adamw_step(&mut s, &grad(0.25), &mut opt, 1e-3).unwrap();
    assert!((s.value("x").unwrap().item() - (1.0 - 1e-3)).abs() < 1e-10);
}

#[test]
fn adamw_matches_scalar_recurrence() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let mut s = scalar_store(0.0);
    let mut opt = OptimizerState::new(AdamW::default());
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let cur = s.value("x").unwrap().item();
        adamw_step(&mut s, &grad(2.0 * (cur - 3.0)), &mut opt, lr).unwrap();
    }
    assert!((s.value("x").unwrap().item() - x).abs() < 1e-12);
    assert!((x - 3.0).abs() < 0.5, "{x}");
}

#[test]
fn nan_gradient_aborts_the_step() {
    let mut s = scalar_store(1.0);
    let mut opt = OptimizerState::new(AdamW::default());
    let err = adamw_step(&mut s, &grad(f64::NAN), &mut opt, 0.1).unwrap_err();
    assert!(matches!(err, Error::NanGradient(ref n) if n == "x"), "{err}");
    assert_eq!(s.value("x").unwrap().item(), 1.0);
    assert_eq!(opt.step, 0);
}

/// Desk setup shrunk to a few steps on 64 px images.
fn small(stages: &[u8], steps: usize) -> (TrainConfig, SynthData) {
    let mut c = TrainConfig::desk(stages).unwrap();
    c.samples = 8;
    c.image_size = 64;
    for p in &mut c.plans {
        p.max_steps = Some(steps);
    }
    let data = synth_data(c.seed, c.samples, c.image_size, c.caption_len, c.model.lm.vocab_size).unwrap();
    (c, data)
}

fn encoder_owner(name: &str) -> Option<ParamOwner> {
    name.strip_prefix("encoder.").map(|n| param_owner(n).unwrap())
}

#[test]
fn stage_one_touches_only_last_stage_and_projector() {
    let (c, data) = small(&[1], 2);
    let mut model = Model::<f32>::build(&c.model, 0).unwrap();
    let before = model.state_dict();
    run_stage(&mut model, &c.plans[0], &data).unwrap();
    let after = model.state_dict();
    for (name, t) in &before {
        let moved = after[name] != *t;
        let should = match encoder_owner(name) {
            Some(ParamOwner::Block(4, _) | ParamOwner::Downsample(4) | ParamOwner::FinalNorm) => None,
            Some(_) => Some(false),
            None if name.starts_with("lm.") => Some(false),
            None => None,
        };
        if let Some(s) = should {
            assert_eq!(moved, s, "{name}");
        }
    }
    assert!(after["encoder.stages.4.downsample.conv.weight"] != before["encoder.stages.4.downsample.conv.weight"]);
    assert!(after["projector.fc1.weight"] != before["projector.fc1.weight"]);
}

#[test]
fn stage_three_freezes_the_encoder() {
    let (c, data) = small(&[3], 2);
    let mut model = Model::<f32>::build(&c.model, 0).unwrap();
    let before = model.state_dict();
    run_stage(&mut model, &c.plans[0], &data).unwrap();
    let after = model.state_dict();
    for (name, t) in &before {
        if name.starts_with("encoder.") {
            assert_eq!(&after[name], t, "{name}");
        }
    }
    assert!(after["lm.tok_emb"] != before["lm.tok_emb"]);
}

#[test]
fn logged_lr_is_the_schedule() {
    let (c, data) = small(&[1], 5);
    let mut model = Model::<f32>::build(&c.model, 0).unwrap();
    let log = run_stage(&mut model, &c.plans[0], &data).unwrap();
    assert_eq!(log.records.len(), 5);
    for r in &log.records {
        assert_eq!(r.lr, cosine_lr(r.step, 5, 3e-4, c.plans[0].warmup_ratio));
        assert_eq!(r.stage, 1);
    }
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = synth_data(3, 6, 64, 5, 16).unwrap();
    let b = synth_data(3, 6, 64, 5, 16).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_data(4, 6, 64, 5, 16).unwrap());
    assert!(synth_data(3, 6, 64, 6, 16).is_err());
}

#[test]
fn captions_are_a_function_of_image_parameters() {
    let data = synth_data(1, 64, 64, 5, 16).unwrap();
    let mut seen: BTreeMap<[usize; 5], Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        let s = data.sample(0, i);
        assert_eq!(s.text_ids, data.specs[i].caption(5).0);
        let prev = seen.entry(data.specs[i].attributes()).or_insert_with(|| s.text_ids.clone());
        assert_eq!(*prev, s.text_ids);
    }
    let control = data.shuffled_control(9);
    let moved = (0..data.len()).filter(|&i| control.sample(0, i).text_ids != data.sample(0, i).text_ids).count();
    assert!(moved > 0);
    assert_eq!(control.sample(0, 0).image, data.sample(0, 0).image);
}

#[test]
fn three_stage_run_is_deterministic_and_composes() {
    let (c, data) = small(&[1, 2, 3], 2);
    let run = || {
        let mut m = Model::<f32>::build(&c.model, 0).unwrap();
        let logs = run_protocol(&mut m, &c.plans, &data).unwrap();
        (m, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let specs: Vec<(u8, FreezeSpec, f64, usize)> = la
        .iter()
        .map(|l| (l.plan.stage, l.plan.encoder, l.plan.peak_lr, l.plan.batch_size))
        .collect();
    assert_eq!(
        specs,
        vec![
            (1, FreezeSpec::FromStage(5), 3e-4, 256),
            (2, FreezeSpec::FromStage(3), 2e-5, 256),
            (3, FreezeSpec::None, 2e-5, 128),
        ]
    );
    // Stage 3 leaves the encoder exactly as stage 2 produced it.
    let (mut m2, _) = {
        let mut m = Model::<f32>::build(&c.model, 0).unwrap();
        let l = run_protocol(&mut m, &c.plans[..2], &data).unwrap();
        (m, l)
    };
    let enc = m2.encoder.params.to_tensor_map();
    run_stage(&mut m2, &c.plans[2], &data).unwrap();
    assert_eq!(enc, m2.encoder.params.to_tensor_map());
}

#[test]
fn invalid_plans_are_rejected() {
    let mut p = StagePlan::protocol(1, 5).unwrap();
    p.batch_divisor = 3;
    assert!(p.validate().is_err());
    let mut p = StagePlan::protocol(2, 5).unwrap();
    p.warmup_ratio = 0.0;
    assert!(p.validate().is_err());
}
