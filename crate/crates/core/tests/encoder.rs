mod common;

use common::{randn, rng};
use convllava_core::encoder::{build_encoder, encode, freeze_mask, param_owner, EncoderConfig, FreezeSpec, ParamOwner};
use convllava_core::{Graph, Tensor};

#[test]
fn convnext_large_is_about_200m_with_36_blocks() {
    let cfg = EncoderConfig::convnext_large();
    let n = cfg.param_count() as f64;
    assert!((n / 200e6 - 1.0).abs() < 0.05, "{n}");
    assert_eq!(cfg.total_blocks(), 36);
    assert_eq!(cfg.downsampling_factor(), 32);
    assert_eq!(EncoderConfig::convnext_large_stage5().downsampling_factor(), 64);
}

#[test]
fn one_stage_parameter_hand_count() {
    // stem 3*8*4*4 + 8, stem norm 16, dwconv 8*49 + 8, norm 16,
    // pwconv1 8*32 + 32, pwconv2 32*8 + 8, gamma 8, final norm 16.
    let hand = (384 + 8) + 16 + (392 + 8) + 16 + (256 + 32) + (256 + 8) + 8 + 16;
    let cfg = EncoderConfig {
        depths: vec![1],
        channels: vec![8],
        use_stage5: false,
        ..EncoderConfig::toy4()
    };
    assert_eq!(cfg.param_count(), hand);
    assert_eq!(build_encoder::<f32>(&cfg, 0).unwrap().params.numel(), hand);
}

#[test]
fn builds_are_deterministic_per_seed() {
    let cfg = EncoderConfig::toy5();
    let a = build_encoder::<f32>(&cfg, 9).unwrap();
    let b = build_encoder::<f32>(&cfg, 9).unwrap();
    let c = build_encoder::<f32>(&cfg, 10).unwrap();
    assert_eq!(a.params.to_tensor_map(), b.params.to_tensor_map());
    assert_ne!(a.params.to_tensor_map(), c.params.to_tensor_map());
}

#[test]
fn initialization_follows_the_recipe() {
    let cfg = EncoderConfig::toy5();
    let s = build_encoder::<f64>(&cfg, 1).unwrap();
    for (name, p) in s.params.iter() {
        let d = p.value.data();
        if name.ends_with(".bias") {
            let is_norm = name.ends_with("norm.bias");
            assert!(is_norm || d.iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with(".gamma") {
            assert!(d.iter().all(|&v| v == cfg.layer_scale_init), "{name}");
        } else if name.contains("norm") {
            assert!(d.iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert!(d.iter().all(|v| v.abs() <= 0.04), "{name}: truncated at two std");
        }
    }
}

#[test]
fn five_stage_geometry_token_grids() {
    let five = build_encoder::<f32>(&EncoderConfig::toy5(), 0).unwrap();
    for (side, n, grid) in [(1536, 576, 24), (1024, 256, 16)] {
        let t = encode(&five, &Tensor::zeros(&[1, 3, side, side])).unwrap();
        assert_eq!((t.count(), t.grid_h, t.grid_w), (n, grid, grid));
    }
    let four = build_encoder::<f32>(&EncoderConfig::toy4(), 0).unwrap();
    assert_eq!(encode(&four, &Tensor::zeros(&[1, 3, 768, 768])).unwrap().count(), 576);
}

#[test]
fn any_aspect_ratio_and_floor_law() {
    let cfg = EncoderConfig::toy4();
    let s = build_encoder::<f32>(&cfg, 0).unwrap();
    let t = encode(&s, &Tensor::zeros(&[2, 3, 70, 200])).unwrap();
    assert_eq!((t.grid_h, t.grid_w), (70 / 32, 200 / 32));
    assert_eq!(t.tokens.shape(), &[2, 12, 32]);
}

#[test]
fn undersized_input_names_the_minimum() {
    let s = build_encoder::<f32>(&EncoderConfig::toy5(), 0).unwrap();
    let err = encode(&s, &Tensor::zeros(&[1, 3, 63, 128])).unwrap_err().to_string();
    assert!(err.contains("64x64"), "{err}");
}

#[test]
fn zeroed_branch_is_the_identity() {
    let cfg = EncoderConfig::toy4();
    let mut s = build_encoder::<f64>(&cfg, 2).unwrap();
    for name in ["pwconv2.weight", "pwconv2.bias", "gamma"] {
        let full = format!("stages.1.blocks.0.{name}");
        s.params.get_mut(&full).unwrap().value.data_mut().fill(0.0);
    }
    let x = randn(&mut rng(3), &[1, 8, 6, 5]);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = s.block(&mut g, "", 1, 0, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

fn trainable_owners(cfg: &EncoderConfig, spec: FreezeSpec) -> (Vec<ParamOwner>, Vec<ParamOwner>, usize) {
    let mut s = build_encoder::<f32>(cfg, 0).unwrap();
    let count = freeze_mask(&mut s, spec).unwrap();
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for (name, p) in s.params.iter() {
        let o = param_owner(name).unwrap();
        if p.trainable { on.push(o) } else { off.push(o) }
    }
    (on, off, count)
}

#[test]
fn last_18_blocks_of_convnext_large_ordering() {
    // ConvNeXt-L depths with narrow widths: block ordering is geometry free.
    let cfg = EncoderConfig {
        channels: vec![2, 4, 8, 16],
        ..EncoderConfig::convnext_large()
    };
    let (on, _, _) = trainable_owners(&cfg, FreezeSpec::LastNBlocks(18));
    let mut blocks: Vec<(usize, usize)> = on
        .iter()
        .map(|o| match o {
            ParamOwner::Block(s, b) => (*s, *b),
            other => panic!("{other:?} should be frozen"),
        })
        .collect();
    blocks.dedup();
    let want: Vec<(usize, usize)> = (12..27).map(|b| (2, b)).chain((0..3).map(|b| (3, b))).collect();
    assert_eq!(blocks, want);
}

#[test]
fn from_stage_3_on_five_stages() {
    let (on, off, _) = trainable_owners(&EncoderConfig::toy5(), FreezeSpec::FromStage(3));
    for o in &on {
        match o {
            ParamOwner::Block(s, _) | ParamOwner::Downsample(s) => assert!(*s >= 2, "{o:?}"),
            ParamOwner::FinalNorm => {}
            ParamOwner::Stem => panic!("stem must be frozen"),
        }
    }
    assert!(off.contains(&ParamOwner::Stem));
    assert!(off.iter().all(|o| !matches!(o, ParamOwner::Block(s, _) if *s >= 2)));
    assert!(on.contains(&ParamOwner::Block(4, 0)));
}

#[test]
fn none_and_all() {
    let cfg = EncoderConfig::toy4();
    assert_eq!(trainable_owners(&cfg, FreezeSpec::None).2, 0);
    assert_eq!(trainable_owners(&cfg, FreezeSpec::All).2, cfg.param_count());
    let mut s = build_encoder::<f32>(&cfg, 0).unwrap();
    assert!(freeze_mask(&mut s, FreezeSpec::LastNBlocks(5)).is_err());
    assert!(freeze_mask(&mut s, FreezeSpec::FromStage(5)).is_err());
}
