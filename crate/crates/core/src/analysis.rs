//! Analytic token counts and FLOPs for ViT / ConvNeXt encoders in front of
//! a dense decoder LLM.
//!
//! Counting convention: dense matmuls and convolutions cost 2 FLOPs per
//! multiply-accumulate. The two complexity terms quoted for the encoders are
//! used exactly as written, as plain counts: self-attention costs
//! `4C²N + 2CN²` and a depthwise conv costs `k²CN`. Norms, activations,
//! biases and softmax are not counted. LLM prefill covers the visual tokens
//! only: per layer `4D²N + 2DN²` for attention plus `16D²N` for a 4x MLP.
//! All counts are exact integers.

use std::fmt::Write as _;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EncoderKind {
    ConvNext4,
    ConvNext5,
    Vit,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Vit, EncoderKind::ConvNext4, EncoderKind::ConvNext5];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Vit => "vit",
            EncoderKind::ConvNext4 => "convnext4",
            EncoderKind::ConvNext5 => "convnext5",
        }
    }

    /// Pixels per token along each side.
    pub fn factor(self) -> usize {
        match self {
            EncoderKind::Vit => 14,
            EncoderKind::ConvNext4 => 32,
            EncoderKind::ConvNext5 => 64,
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder kind {s:?}; valid kinds: vit, convnext4, convnext5")))
    }
}

/// Strict token count: both sides must be multiples of the kind's factor.
pub fn token_count(kind: EncoderKind, height: usize, width: usize) -> Result<u64> {
    let f = kind.factor();
    for v in [height, width] {
        if v == 0 || v % f != 0 {
            return Err(Error::NotMultiple { value: v, factor: f });
        }
    }
    Ok(((height / f) * (width / f)) as u64)
}

pub fn attention_flops(c: u64, n: u64) -> u128 {
    let (c, n) = (c as u128, n as u128);
    4 * c * c * n + 2 * c * n * n
}

pub fn dwconv_flops(k: u64, c: u64, n: u64) -> u128 {
    (k as u128) * (k as u128) * (c as u128) * (n as u128)
}

/// `2·m·n·p` for an `[m,n] x [n,p]` product.
pub fn matmul_flops(m: u64, n: u64, p: u64) -> u128 {
    2 * (m as u128) * (n as u128) * (p as u128)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitGeometry {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl VitGeometry {
    /// ViT-L/14.
    pub fn large14() -> Self {
        VitGeometry {
            patch: 14,
            width: 1024,
            depth: 24,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LlmGeometry {
    pub dim: usize,
    pub layers: usize,
}

impl LlmGeometry {
    /// 7B-class decoder: width 4096, 32 layers.
    pub fn seven_b() -> Self {
        LlmGeometry { dim: 4096, layers: 32 }
    }

    pub fn prefill_flops(&self, n: u64) -> u128 {
        let d = self.dim as u64;
        let per_layer = attention_flops(d, n) + 16 * (d as u128) * (d as u128) * (n as u128);
        per_layer * self.layers as u128
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderGeometry {
    Vit(VitGeometry),
    ConvNext(EncoderConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsModel {
    pub kind: EncoderKind,
    pub encoder: EncoderGeometry,
    pub llm: LlmGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Counted as `2 x MACs`.
    Dense,
    /// Counted as `k²CN`.
    Depthwise,
    /// Self-attention, `4C²N + 2CN²`.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub tokens: u64,
    pub encoder: u128,
    pub llm_prefill: u128,
    pub total: u128,
}

impl FlopsModel {
    /// Default geometry: ViT-L/14, ConvNeXt-L with or without stage 5, and a
    /// 7B-class LLM.
    pub fn new(kind: EncoderKind) -> Self {
        let encoder = match kind {
            EncoderKind::Vit => EncoderGeometry::Vit(VitGeometry::large14()),
            EncoderKind::ConvNext4 => EncoderGeometry::ConvNext(EncoderConfig::convnext_large()),
            EncoderKind::ConvNext5 => EncoderGeometry::ConvNext(EncoderConfig::convnext_large_stage5()),
        };
        FlopsModel {
            kind,
            encoder,
            llm: LlmGeometry::seven_b(),
        }
    }

    /// Cost model for an arbitrary ConvNeXt geometry.
    pub fn convnext(config: EncoderConfig, llm: LlmGeometry) -> Self {
        let kind = if config.use_stage5 {
            EncoderKind::ConvNext5
        } else {
            EncoderKind::ConvNext4
        };
        FlopsModel {
            kind,
            encoder: EncoderGeometry::ConvNext(config),
            llm,
        }
    }

    pub fn factor(&self) -> usize {
        match &self.encoder {
            EncoderGeometry::Vit(v) => v.patch,
            EncoderGeometry::ConvNext(c) => c.downsampling_factor(),
        }
    }

    /// Output grid, rounding partial cells down.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.factor();
        if height < f || width < f {
            return Err(Error::InputTooSmall { height, width, min: f });
        }
        Ok((height / f, width / f))
    }

    /// Per-layer costs of the encoder at `height x width`.
    pub fn encoder_layers(&self, height: usize, width: usize) -> Result<Vec<LayerCost>> {
        let (gh, gw) = self.grid(height, width)?;
        let mut layers = Vec::new();
        let mut push = |name: String, kind, flops| layers.push(LayerCost { name, kind, flops });
        match &self.encoder {
            EncoderGeometry::Vit(v) => {
                let n = (gh * gw) as u64;
                let c = v.width as u64;
                let p = v.patch as u64;
                push("patch_embed".into(), LayerKind::Dense, matmul_flops(n, 3 * p * p, c));
                for l in 0..v.depth {
                    push(format!("blocks.{l}.attn"), LayerKind::Attention, attention_flops(c, n));
                    let hidden = c * v.mlp_ratio as u64;
                    push(format!("blocks.{l}.mlp.fc1"), LayerKind::Dense, matmul_flops(n, c, hidden));
                    push(format!("blocks.{l}.mlp.fc2"), LayerKind::Dense, matmul_flops(n, hidden, c));
                }
            }
            EncoderGeometry::ConvNext(cfg) => {
                let sp = cfg.stem_patch;
                let (mut h, mut w) = (height / sp, width / sp);
                let stages = cfg.stages();
                let k = cfg.kernel_size as u64;
                let e = cfg.ffn_expansion as u64;
                let c0 = stages[0].channels as u64;
                push(
                    "stem.conv".into(),
                    LayerKind::Dense,
                    matmul_flops((h * w) as u64, 3 * (sp * sp) as u64, c0),
                );
                let mut prev = c0;
                for (si, s) in stages.iter().enumerate() {
                    let c = s.channels as u64;
                    if si > 0 {
                        h /= 2;
                        w /= 2;
                        push(
                            format!("stages.{si}.downsample.conv"),
                            LayerKind::Dense,
                            matmul_flops((h * w) as u64, 4 * prev, c),
                        );
                    }
                    let n = (h * w) as u64;
                    for b in 0..s.depth {
                        let pre = format!("stages.{si}.blocks.{b}");
                        push(format!("{pre}.dwconv"), LayerKind::Depthwise, dwconv_flops(k, c, n));
                        push(format!("{pre}.pwconv1"), LayerKind::Dense, matmul_flops(n, c, e * c));
                        push(format!("{pre}.pwconv2"), LayerKind::Dense, matmul_flops(n, e * c, c));
                    }
                    prev = c;
                }
            }
        }
        Ok(layers)
    }

    pub fn encoder_flops(&self, height: usize, width: usize) -> Result<u128> {
        Ok(self.encoder_layers(height, width)?.iter().map(|l| l.flops).sum())
    }
}

pub fn lmm_total_flops(model: &FlopsModel, height: usize, width: usize) -> Result<FlopsBreakdown> {
    let (gh, gw) = model.grid(height, width)?;
    let tokens = (gh * gw) as u64;
    let encoder = model.encoder_flops(height, width)?;
    let llm_prefill = model.llm.prefill_flops(tokens);
    Ok(FlopsBreakdown {
        tokens,
        encoder,
        llm_prefill,
        total: encoder + llm_prefill,
    })
}

/// Ratio of total costs of two models at a square resolution.
pub fn total_ratio(a: &FlopsModel, b: &FlopsModel, resolution: usize) -> Result<f64> {
    let ta = lmm_total_flops(a, resolution, resolution)?.total;
    let tb = lmm_total_flops(b, resolution, resolution)?.total;
    Ok(ta as f64 / tb as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurveRow {
    pub kind: EncoderKind,
    pub resolution: usize,
    pub flops: FlopsBreakdown,
}

pub const CSV_HEADER: &str = "kind,resolution,tokens,encoder_flops,llm_flops,total_flops";

/// One row per (kind, square resolution), sorted by kind name then
/// resolution, duplicates removed. Tokens use the floor grid, which equals
/// [`token_count`] whenever that is defined.
pub fn curve_rows(kinds: &[EncoderKind], resolutions: &[usize]) -> Result<Vec<CurveRow>> {
    let mut keys: Vec<(EncoderKind, usize)> = kinds
        .iter()
        .flat_map(|&k| resolutions.iter().map(move |&r| (k, r)))
        .collect();
    keys.sort_by(|a, b| (a.0.name(), a.1).cmp(&(b.0.name(), b.1)));
    keys.dedup();
    keys.into_iter()
        .map(|(kind, resolution)| {
            let flops = lmm_total_flops(&FlopsModel::new(kind), resolution, resolution)?;
            Ok(CurveRow { kind, resolution, flops })
        })
        .collect()
}

pub fn emit_curves(kinds: &[EncoderKind], resolutions: &[usize]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in curve_rows(kinds, resolutions)? {
        let f = r.flops;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.kind, r.resolution, f.tokens, f.encoder, f.llm_prefill, f.total
        )
        .expect("writing to a String");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_formulas() {
        assert_eq!(attention_flops(1, 1), 6);
        assert_eq!(dwconv_flops(1, 1, 1), 1);
    }

    #[test]
    fn strict_tokens_name_the_factor() {
        let err = token_count(EncoderKind::ConvNext5, 1000, 1024).unwrap_err();
        assert!(err.to_string().contains("64"));
    }

    #[test]
    fn kind_parsing_lists_valid_names() {
        let err = "bogus".parse::<EncoderKind>().unwrap_err();
        assert!(err.to_string().contains("vit, convnext4, convnext5"));
    }

    #[test]
    fn rows_sorted_by_name() {
        let rows = curve_rows(&[EncoderKind::Vit, EncoderKind::ConvNext4], &[672, 336]).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.kind.name(), r.resolution)).collect();
        assert_eq!(keys, [("convnext4", 336), ("convnext4", 672), ("vit", 336), ("vit", 672)]);
    }
}
