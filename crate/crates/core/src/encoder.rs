//! Hierarchical ConvNeXt visual encoder.
//!
//! A stride-`stem_patch` patchify stem, then stages of residual ConvNeXt
//! blocks separated by 2x2 stride-2 downsamplers, then a final channel
//! layer norm. The optional fifth stage repeats the downsampler + blocks
//! pattern once more, halving each spatial side again. The output grid is
//! flattened row-major into visual tokens.
//!
//! Parameter names are hierarchical, with 0-based stage indices:
//! `stem.conv.weight`, `stages.2.downsample.conv.weight`,
//! `stages.2.blocks.14.pwconv1.weight`, `norm.bias`, ...

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::params::{trunc_normal, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Block counts of the standard stages.
    pub depths: Vec<usize>,
    /// Widths of the standard stages.
    pub channels: Vec<usize>,
    pub stage5_depth: usize,
    pub stage5_channels: usize,
    pub use_stage5: bool,
    pub kernel_size: usize,
    pub stem_patch: usize,
    pub ffn_expansion: usize,
    pub layer_scale_init: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub depth: usize,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::convnext_large()
    }
}

impl EncoderConfig {
    /// ConvNeXt-L: depths 3/3/27/3, widths 192..1536, 32x downsampling.
    pub fn convnext_large() -> Self {
        EncoderConfig {
            depths: vec![3, 3, 27, 3],
            channels: vec![192, 384, 768, 1536],
            stage5_depth: 6,
            stage5_channels: 3072,
            use_stage5: false,
            kernel_size: 7,
            stem_patch: 4,
            ffn_expansion: 4,
            layer_scale_init: 1e-6,
        }
    }

    /// ConvNeXt-L with the appended fifth stage (64x downsampling).
    pub fn convnext_large_stage5() -> Self {
        EncoderConfig {
            use_stage5: true,
            ..Self::convnext_large()
        }
    }

    /// Same stem and stride pattern as ConvNeXt-L, one block per stage and
    /// widths 4..32.
    pub fn toy4() -> Self {
        EncoderConfig {
            depths: vec![1, 1, 1, 1],
            channels: vec![4, 8, 16, 32],
            stage5_depth: 1,
            stage5_channels: 64,
            use_stage5: false,
            kernel_size: 7,
            stem_patch: 4,
            ffn_expansion: 4,
            layer_scale_init: 1e-6,
        }
    }

    pub fn toy5() -> Self {
        EncoderConfig {
            use_stage5: true,
            ..Self::toy4()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "convnext-l" | "convnext4" => Ok(Self::convnext_large()),
            "convnext-l5" | "convnext5" => Ok(Self::convnext_large_stage5()),
            "toy4" => Ok(Self::toy4()),
            "toy5" => Ok(Self::toy5()),
            other => Err(Error::Config(format!(
                "unknown encoder preset {other:?} (expected convnext-l, convnext-l5, toy4, toy5)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.channels.len() {
            return bad(format!(
                "depths {:?} and channels {:?} must be non-empty and of equal length",
                self.depths, self.channels
            ));
        }
        if self.stages().iter().any(|s| s.depth == 0 || s.channels == 0) {
            return bad("stage depths and widths must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.stem_patch == 0 || self.ffn_expansion == 0 {
            return bad("stem_patch and ffn_expansion must be positive".into());
        }
        if !self.layer_scale_init.is_finite() {
            return bad("layer_scale_init must be finite".into());
        }
        Ok(())
    }

    /// All active stages, standard stages first.
    pub fn stages(&self) -> Vec<StageSpec> {
        let mut s: Vec<StageSpec> = self
            .depths
            .iter()
            .zip(&self.channels)
            .map(|(&depth, &channels)| StageSpec { depth, channels })
            .collect();
        if self.use_stage5 {
            s.push(StageSpec {
                depth: self.stage5_depth,
                channels: self.stage5_channels,
            });
        }
        s
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len() + usize::from(self.use_stage5)
    }

    /// Pixels per output cell along each side.
    pub fn downsampling_factor(&self) -> usize {
        self.stem_patch << (self.num_stages() - 1)
    }

    pub fn out_channels(&self) -> usize {
        self.stages().last().expect("validated").channels
    }

    pub fn total_blocks(&self) -> usize {
        self.stages().iter().map(|s| s.depth).sum()
    }

    /// Grid produced for an `h x w` input.
    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        let d = self.downsampling_factor();
        (h / d, w / d)
    }

    /// Parameter total from the layer formulas, without allocating.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let e = self.ffn_expansion;
        let stages = self.stages();
        let c0 = stages[0].channels;
        let mut total = 3 * c0 * self.stem_patch * self.stem_patch + c0 + 2 * c0;
        let mut prev = c0;
        for (i, s) in stages.iter().enumerate() {
            let c = s.channels;
            if i > 0 {
                total += 2 * prev + 4 * prev * c + c;
            }
            total += s.depth * (2 * e * c * c + (k2 + e + 5) * c);
            prev = c;
        }
        total + 2 * prev
    }

    /// Receptive field of one output cell, in input pixels.
    pub fn receptive_field(&self) -> usize {
        let mut rf = self.stem_patch;
        let mut jump = self.stem_patch;
        for (i, s) in self.stages().iter().enumerate() {
            if i > 0 {
                rf += jump;
                jump *= 2;
            }
            rf += s.depth * (self.kernel_size - 1) * jump;
        }
        rf
    }

    /// Cells next to an image edge whose receptive field reaches past it:
    /// `ceil(R / D)` with `R = receptive_field / 2`.
    pub fn border_margin(&self) -> usize {
        (self.receptive_field() / 2).div_ceil(self.downsampling_factor())
    }
}

/// Encoder parameters and the topology they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T: Scalar = f32> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
}

/// Encoder output: `tokens` is `[B, grid_h * grid_w, C]` in row-major grid
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens<T: Scalar = f32> {
    pub tokens: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Scalar> VisualTokens<T> {
    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.tokens.dim(2)
    }
}

fn stage_prefix(stage: usize) -> String {
    format!("stages.{stage}")
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// Random initialization: truncated normal (std 0.02) weights, zero biases,
/// unit norm scales and layer scale at `layer_scale_init`. Deterministic
/// for a fixed seed.
pub fn build_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let k = config.kernel_size;
    let e = config.ffn_expansion;
    let stages = config.stages();

    let norm = |p: &mut ParamStore<T>, name: &str, c: usize| -> Result<()> {
        p.insert(format!("{name}.weight"), Tensor::ones(&[c]))?;
        p.insert(format!("{name}.bias"), Tensor::zeros(&[c]))
    };

    let c0 = stages[0].channels;
    let sp = config.stem_patch;
    p.insert("stem.conv.weight", trunc_normal(&mut rng, &[c0, 3, sp, sp], INIT_STD))?;
    p.insert("stem.conv.bias", Tensor::zeros(&[c0]))?;
    norm(&mut p, "stem.norm", c0)?;

    let mut prev = c0;
    for (si, stage) in stages.iter().enumerate() {
        let c = stage.channels;
        if si > 0 {
            let pre = format!("{}.downsample", stage_prefix(si));
            norm(&mut p, &format!("{pre}.norm"), prev)?;
            p.insert(format!("{pre}.conv.weight"), trunc_normal(&mut rng, &[c, prev, 2, 2], INIT_STD))?;
            p.insert(format!("{pre}.conv.bias"), Tensor::zeros(&[c]))?;
        }
        for bi in 0..stage.depth {
            let pre = block_prefix(si, bi);
            p.insert(format!("{pre}.dwconv.weight"), trunc_normal(&mut rng, &[c, 1, k, k], INIT_STD))?;
            p.insert(format!("{pre}.dwconv.bias"), Tensor::zeros(&[c]))?;
            norm(&mut p, &format!("{pre}.norm"), c)?;
            p.insert(format!("{pre}.pwconv1.weight"), trunc_normal(&mut rng, &[e * c, c, 1, 1], INIT_STD))?;
            p.insert(format!("{pre}.pwconv1.bias"), Tensor::zeros(&[e * c]))?;
            p.insert(format!("{pre}.pwconv2.weight"), trunc_normal(&mut rng, &[c, e * c, 1, 1], INIT_STD))?;
            p.insert(format!("{pre}.pwconv2.bias"), Tensor::zeros(&[c]))?;
            p.insert(format!("{pre}.gamma"), Tensor::full(&[c], T::of(config.layer_scale_init)))?;
        }
        prev = c;
    }
    norm(&mut p, "norm", prev)?;
    Ok(EncoderState {
        config: config.clone(),
        params: p,
    })
}

impl<T: Scalar> EncoderState<T> {
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "encode",
                format!("image must be [B,3,H,W], got {shape:?}"),
            ));
        }
        let d = self.config.downsampling_factor();
        if shape[2] < d || shape[3] < d {
            return Err(Error::InputTooSmall {
                height: shape[2],
                width: shape[3],
                min: d,
            });
        }
        Ok(())
    }

    fn norm(&self, g: &mut Graph<T>, prefix: &str, name: &str, x: Var) -> Result<Var> {
        let w = self.params.var(g, prefix, &format!("{name}.weight"))?;
        let b = self.params.var(g, prefix, &format!("{name}.bias"))?;
        g.layer_norm_channels(x, w, b, T::of(NORM_EPS))
    }

    fn conv(&self, g: &mut Graph<T>, prefix: &str, name: &str, x: Var, p: ConvParams) -> Result<Var> {
        let w = self.params.var(g, prefix, &format!("{name}.weight"))?;
        let b = self.params.var(g, prefix, &format!("{name}.bias"))?;
        g.conv2d(x, w, Some(b), p)
    }

    /// One residual block: depthwise conv, channel norm, pointwise expand,
    /// GELU, pointwise project, layer scale, skip.
    pub fn block(&self, g: &mut Graph<T>, prefix: &str, stage: usize, block: usize, x: Var) -> Result<Var> {
        let pre = block_prefix(stage, block);
        let c = self.config.stages()[stage].channels;
        let k = self.config.kernel_size;
        let y = self.conv(g, prefix, &format!("{pre}.dwconv"), x, ConvParams::new(1, (k - 1) / 2, c))?;
        let y = self.norm(g, prefix, &format!("{pre}.norm"), y)?;
        let y = self.conv(g, prefix, &format!("{pre}.pwconv1"), y, ConvParams::new(1, 0, 1))?;
        let y = g.gelu(y);
        let y = self.conv(g, prefix, &format!("{pre}.pwconv2"), y, ConvParams::new(1, 0, 1))?;
        let gamma = self.params.var(g, prefix, &format!("{pre}.gamma"))?;
        let y = g.scale_channels(y, gamma)?;
        g.add(x, y)
    }

    /// Final normalized feature map `[B, C, H/D, W/D]`.
    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, image: Var) -> Result<Var> {
        self.check_input(g.value(image).shape())?;
        let sp = self.config.stem_patch;
        let mut x = self.conv(g, prefix, "stem.conv", image, ConvParams::new(sp, 0, 1))?;
        x = self.norm(g, prefix, "stem.norm", x)?;
        for (si, stage) in self.config.stages().iter().enumerate() {
            if si > 0 {
                let pre = format!("{}.downsample", stage_prefix(si));
                x = self.norm(g, prefix, &format!("{pre}.norm"), x)?;
                x = self.conv(g, prefix, &format!("{pre}.conv"), x, ConvParams::new(2, 0, 1))?;
            }
            for bi in 0..stage.depth {
                x = self.block(g, prefix, si, bi, x)?;
            }
        }
        self.norm(g, prefix, "norm", x)
    }

    /// Visual tokens `[B, N, C]` on the graph, with the grid size.
    pub fn forward_tokens(&self, g: &mut Graph<T>, prefix: &str, image: Var) -> Result<(Var, usize, usize)> {
        let fmap = self.forward(g, prefix, image)?;
        let (h, w) = (g.value(fmap).dim(2), g.value(fmap).dim(3));
        Ok((g.to_tokens(fmap)?, h, w))
    }
}

/// Run the encoder without recording gradients.
pub fn encode<T: Scalar>(state: &EncoderState<T>, image: &Tensor<T>) -> Result<VisualTokens<T>> {
    state.check_input(image.shape())?;
    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let (tokens, grid_h, grid_w) = state.forward_tokens(&mut g, "", x)?;
    Ok(VisualTokens {
        tokens: g.value(tokens).clone(),
        grid_h,
        grid_w,
    })
}

/// Which encoder parameters are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeSpec {
    /// The last `n` blocks in stage-major order.
    LastNBlocks(usize),
    /// Stages `s..` (1-based) with their downsamplers and the final norm; the
    /// stem too when `s == 1`.
    FromStage(usize),
    All,
    None,
}

impl std::str::FromStr for FreezeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_n = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad freeze count in {s:?}")))
        };
        match s.trim() {
            "all" => Ok(FreezeSpec::All),
            "none" => Ok(FreezeSpec::None),
            other => match other.split_once(':') {
                Some(("last_n_blocks", n)) => Ok(FreezeSpec::LastNBlocks(parse_n(n)?)),
                Some(("from_stage", n)) => Ok(FreezeSpec::FromStage(parse_n(n)?)),
                _ => Err(Error::Config(format!(
                    "unknown freeze spec {s:?} (expected all, none, last_n_blocks:N, from_stage:S)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for FreezeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FreezeSpec::LastNBlocks(n) => write!(f, "last_n_blocks:{n}"),
            FreezeSpec::FromStage(s) => write!(f, "from_stage:{s}"),
            FreezeSpec::All => write!(f, "all"),
            FreezeSpec::None => write!(f, "none"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamOwner {
    Stem,
    /// Downsampler in front of a 0-based stage.
    Downsample(usize),
    /// (0-based stage, block within stage).
    Block(usize, usize),
    FinalNorm,
}

pub fn param_owner(name: &str) -> Option<ParamOwner> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["stem", ..] => Some(ParamOwner::Stem),
        ["norm", _] => Some(ParamOwner::FinalNorm),
        ["stages", s, "downsample", ..] => s.parse().ok().map(ParamOwner::Downsample),
        ["stages", s, "blocks", b, ..] => Some(ParamOwner::Block(s.parse().ok()?, b.parse().ok()?)),
        _ => None,
    }
}

/// Set trainable flags per `spec`; returns the number of trainable scalars.
pub fn freeze_mask<T: Scalar>(state: &mut EncoderState<T>, spec: FreezeSpec) -> Result<usize> {
    let stages = state.config.stages();
    let total = state.config.total_blocks();
    let starts: Vec<usize> = stages
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.depth;
            Some(start)
        })
        .collect();
    match spec {
        FreezeSpec::LastNBlocks(n) if n > total => {
            return Err(Error::InvalidArgument(format!(
                "last_n_blocks {n} exceeds the encoder's {total} blocks"
            )))
        }
        FreezeSpec::FromStage(s) if s == 0 || s > stages.len() => {
            return Err(Error::InvalidArgument(format!(
                "from_stage {s} outside 1..={}",
                stages.len()
            )))
        }
        _ => {}
    }
    for (name, p) in state.params.iter_mut() {
        let owner = param_owner(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        p.trainable = match spec {
            FreezeSpec::All => true,
            FreezeSpec::None => false,
            FreezeSpec::LastNBlocks(n) => match owner {
                ParamOwner::Block(s, b) => starts[s] + b >= total - n,
                _ => false,
            },
            FreezeSpec::FromStage(s) => match owner {
                ParamOwner::Stem => s == 1,
                ParamOwner::Downsample(si) | ParamOwner::Block(si, _) => si + 1 >= s,
                ParamOwner::FinalNorm => true,
            },
        };
    }
    Ok(state.params.trainable_numel())
}
