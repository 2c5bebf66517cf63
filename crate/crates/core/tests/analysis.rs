use convllava_core::analysis::{
    attention_flops, curve_rows, dwconv_flops, emit_curves, lmm_total_flops, matmul_flops, token_count, total_ratio,
    EncoderKind, FlopsModel, LayerKind, LlmGeometry, CSV_HEADER,
};
use convllava_core::encoder::{build_encoder, encode, EncoderConfig};
use convllava_core::ops::mac_probe;
use convllava_core::{Error, Tensor};

#[test]
fn token_table() {
    use EncoderKind::*;
    for (kind, side, n) in [
        (Vit, 336, 576),
        (Vit, 672, 2304),
        (ConvNext4, 768, 576),
        (ConvNext4, 1536, 2304),
        (ConvNext5, 1536, 576),
        (ConvNext5, 1024, 256),
    ] {
        assert_eq!(token_count(kind, side, side).unwrap(), n, "{kind} {side}");
    }
    assert!(matches!(token_count(Vit, 1024, 1024), Err(Error::NotMultiple { value: 1024, factor: 14 })));
    assert_eq!(token_count(ConvNext5, 1536, 3072).unwrap(), 1152);
    assert_eq!(token_count(ConvNext5, 1664, 3328).unwrap(), 26 * 52);
}

#[test]
fn closed_form_terms() {
    assert_eq!(attention_flops(1024, 576), 3_095_396_352);
    assert_eq!(dwconv_flops(7, 192, 36864), 346_816_512);
    assert_eq!(matmul_flops(2, 3, 4), 48);
}

#[test]
fn llm_prefill_per_layer() {
    let llm = LlmGeometry::seven_b();
    let (d, n) = (4096u128, 576u128);
    let per_layer = 4 * d * d * n + 2 * d * n * n + 16 * d * d * n;
    assert_eq!(llm.prefill_flops(576), 32 * per_layer);
}

#[test]
fn costs_grow_with_resolution() {
    for kind in EncoderKind::ALL {
        let m = FlopsModel::new(kind);
        let f = kind.factor();
        let mut prev = 0;
        for cells in [4, 8, 12, 16, 24] {
            let t = lmm_total_flops(&m, cells * f, cells * f).unwrap();
            assert!(t.total > prev, "{kind} {cells}");
            assert_eq!(t.total, t.encoder + t.llm_prefill);
            prev = t.total;
        }
    }
}

#[test]
fn csv_is_sorted_with_token_column() {
    let csv = emit_curves(&[EncoderKind::ConvNext5, EncoderKind::Vit], &[672, 336, 672]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    let keys: Vec<(&str, &str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0], f[1], f[2])
        })
        .collect();
    assert_eq!(
        keys,
        vec![("convnext5", "336", "25"), ("convnext5", "672", "100"), ("vit", "336", "576"), ("vit", "672", "2304")]
    );
    assert_eq!(curve_rows(&EncoderKind::ALL, &[336, 672, 768, 1024, 1536]).unwrap().len(), 15);
}

#[test]
fn vit_over_convnext4_ratio_at_672() {
    let r = total_ratio(&FlopsModel::new(EncoderKind::Vit), &FlopsModel::new(EncoderKind::ConvNext4), 672).unwrap();
    assert!((5.0..=10.0).contains(&r), "{r}");
}

/// Analytic layer costs equal the MACs counted by the live convolutions.
#[test]
fn layer_costs_match_live_mac_tally() {
    let cfg = EncoderConfig::toy5();
    let state = build_encoder::<f32>(&cfg, 0).unwrap();
    let model = FlopsModel::convnext(cfg, LlmGeometry::seven_b());
    for (h, w) in [(64, 64), (128, 192)] {
        let (out, log) = mac_probe::record(|| encode(&state, &Tensor::zeros(&[1, 3, h, w])).unwrap());
        let layers = model.encoder_layers(h, w).unwrap();
        assert_eq!(log.len(), layers.len());
        for (rec, layer) in log.iter().zip(&layers) {
            let want = match layer.kind {
                LayerKind::Depthwise => {
                    assert!(rec.is_depthwise(), "{}", layer.name);
                    rec.macs as u128
                }
                LayerKind::Dense => 2 * rec.macs as u128,
                LayerKind::Attention => unreachable!(),
            };
            assert_eq!(layer.flops, want, "{}", layer.name);
        }
        assert_eq!(lmm_total_flops(&model, h, w).unwrap().tokens, out.count() as u64);
    }
}
