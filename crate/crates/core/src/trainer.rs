//! Staged training: freeze masks per stage, AdamW, warmup + cosine decay,
//! procedurally generated captioning data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::encoder::FreezeSpec;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::{next_token_targets, Model, MultimodalBatch, ToyLM};
use crate::preprocess::{ImageRGB, Planes, CLIP_MEAN, CLIP_STD};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup over `ceil(warmup_ratio * total_steps)` steps, then cosine
/// decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak_lr;
    }
    let progress = (step.min(total_steps) - warmup) as f64 / (total_steps - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments keyed by full parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(hyper: AdamW) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected AdamW update of every trainable parameter that has
    /// a gradient in `grads` (keyed by `prefix + name`). Frozen parameters
    /// are not touched. A non-finite or mis-shaped gradient aborts before
    /// anything is written.
    pub fn update(&mut self, stores: &mut [(&str, &mut ParamStore<T>)], grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (prefix, store) in stores.iter() {
            for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
                let full = format!("{prefix}{name}");
                if let Some(g) = grads.get(&full) {
                    if g.shape() != p.value.shape() {
                        return Err(Error::shape(
                            "adamw",
                            format!("{full}: gradient {:?} vs parameter {:?}", g.shape(), p.value.shape()),
                        ));
                    }
                    if !g.all_finite() {
                        return Err(Error::NanGradient(full));
                    }
                }
            }
        }
        self.step += 1;
        let AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (prefix, store) in stores.iter_mut() {
            for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
                let full = format!("{prefix}{name}");
                let Some(g) = grads.get(&full) else { continue };
                let m = self.m.entry(full.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let v = self.v.entry(full).or_insert_with(|| Tensor::zeros(g.shape()));
                for (((w, &gi), mi), vi) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let gi = gi.f64();
                    let mn = beta1 * mi.f64() + (1.0 - beta1) * gi;
                    let vn = beta2 * vi.f64() + (1.0 - beta2) * gi * gi;
                    *mi = T::of(mn);
                    *vi = T::of(vn);
                    let mut x = w.f64();
                    if weight_decay > 0.0 {
                        x -= lr * weight_decay * x;
                    }
                    x -= lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                    *w = T::of(x);
                }
            }
        }
        Ok(())
    }
}

/// AdamW step on a single unprefixed store.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    opt.update(&mut [("", params)], grads, lr)
}

/// One training stage: which components learn, and how.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub encoder: FreezeSpec,
    pub projector: bool,
    pub lm: bool,
    pub peak_lr: f64,
    /// Structural batch size.
    pub batch_size: usize,
    /// Desk-scale shrink: samples per optimizer step = batch_size / batch_divisor.
    pub batch_divisor: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl StagePlan {
    /// Protocol defaults for an encoder with `num_stages` stages:
    /// 1 trains the last encoder stage + projector at 3e-4, 2 trains the
    /// encoder from stage 3 + projector + LM at 2e-5, 3 trains projector + LM
    /// at 2e-5. Batch sizes 256/256/128.
    pub fn protocol(stage: u8, num_stages: usize) -> Result<Self> {
        let base = StagePlan {
            stage,
            encoder: FreezeSpec::None,
            projector: true,
            lm: false,
            peak_lr: 2e-5,
            batch_size: 256,
            batch_divisor: 1,
            accum_steps: 1,
            warmup_ratio: 0.03,
            epochs: 1,
            max_steps: None,
            weight_decay: 0.0,
            seed: 0,
        };
        match stage {
            1 => Ok(StagePlan {
                encoder: FreezeSpec::FromStage(num_stages),
                peak_lr: 3e-4,
                ..base
            }),
            2 => Ok(StagePlan {
                encoder: FreezeSpec::FromStage(3.min(num_stages)),
                lm: true,
                ..base
            }),
            3 => Ok(StagePlan {
                lm: true,
                batch_size: 128,
                ..base
            }),
            s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size / self.batch_divisor
    }

    pub fn micro_batch(&self) -> usize {
        self.effective_batch() / self.accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_divisor == 0 || self.accum_steps == 0 || self.batch_size == 0 {
            return bad("batch_size, batch_divisor and accum_steps must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.batch_divisor) || !self.effective_batch().is_multiple_of(self.accum_steps) {
            return bad(format!(
                "batch {} / divisor {} / accum {} must divide evenly",
                self.batch_size, self.batch_divisor, self.accum_steps
            ));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad(format!("warmup_ratio {} outside (0, 1)", self.warmup_ratio));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) || self.weight_decay < 0.0 {
            return bad("peak_lr and weight_decay must be finite and non-negative".into());
        }
        if self.max_steps == Some(0) || (self.max_steps.is_none() && self.epochs == 0) {
            return bad("stage must run at least one step".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_samples.div_ceil(self.effective_batch()))
    }

    pub fn summary(&self) -> String {
        let onoff = |b: bool| if b { "train" } else { "frozen" };
        format!(
            "# stage={} peak_lr={:e} batch_size={} desk_batch={} accum_steps={} warmup_ratio={} encoder={} projector={} lm={}",
            self.stage,
            self.peak_lr,
            self.batch_size,
            self.effective_batch(),
            self.accum_steps,
            self.warmup_ratio,
            self.encoder,
            onoff(self.projector),
            onoff(self.lm)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub plan: StagePlan,
    pub total_steps: usize,
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "step,stage,lr,loss";

impl StageLog {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean loss over the last `window` records.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(window)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }

    /// Plan summary comment, then one `step,stage,lr,loss` line per step.
    pub fn to_lines(&self) -> String {
        let mut out = self.plan.summary();
        out.push('\n');
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.step, r.stage, r.lr, r.loss).expect("writing to a String");
        }
        out
    }
}

/// One captioning example: image `[3, S, S]`, text ids and per-token
/// loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub text_ids: Vec<usize>,
    pub text_mask: Vec<bool>,
}

pub trait DataSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `index` as seen during `epoch`.
    fn sample(&self, epoch: usize, index: usize) -> Sample;
}

pub mod vocab {
    pub const PAD: usize = 0;
    pub const PROMPT: usize = 1;
    pub const EOS: usize = 2;
    /// red, green, blue, yellow
    pub const COLOR: usize = 3;
    pub const LEFT: usize = 7;
    pub const RIGHT: usize = 8;
    pub const TOP: usize = 9;
    pub const BOTTOM: usize = 10;
    pub const SMALL: usize = 11;
    pub const LARGE: usize = 12;
    pub const MIN_VOCAB: usize = 13;
    pub const WORDS: [&str; 13] = [
        "<pad>", "<prompt>", "<eos>", "red", "green", "blue", "yellow", "left", "right", "top", "bottom", "small",
        "large",
    ];
}

pub const PALETTE: [[u8; 3]; 4] = [[220, 40, 40], [40, 200, 60], [40, 70, 220], [230, 210, 40]];

/// Parameters of one synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RectSpec {
    pub background: usize,
    pub foreground: usize,
    pub right: bool,
    pub bottom: bool,
    pub large: bool,
    /// Top-left corner in pixels.
    pub x0: usize,
    pub y0: usize,
}

impl RectSpec {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let background = rng.random_range(0..PALETTE.len());
        let foreground = (background + rng.random_range(1..PALETTE.len())) % PALETTE.len();
        let (right, bottom, large) = (rng.random(), rng.random(), rng.random());
        let half = size / 2;
        let side = Self::side(size, large);
        let x0 = usize::from(right) * half + rng.random_range(0..=half - side);
        let y0 = usize::from(bottom) * half + rng.random_range(0..=half - side);
        RectSpec {
            background,
            foreground,
            right,
            bottom,
            large,
            x0,
            y0,
        }
    }

    fn side(size: usize, large: bool) -> usize {
        if large {
            size / 2
        } else {
            size / 4
        }
    }

    pub fn render(&self, size: usize) -> ImageRGB {
        let mut img = ImageRGB::filled(size, size, PALETTE[self.background]);
        let side = Self::side(size, self.large);
        for y in self.y0..self.y0 + side {
            for x in self.x0..self.x0 + side {
                img.set_pixel(x, y, PALETTE[self.foreground]);
            }
        }
        img
    }

    /// Attribute tokens: background, foreground, horizontal, vertical, size.
    pub fn attributes(&self) -> [usize; 5] {
        use vocab::*;
        [
            COLOR + self.background,
            COLOR + self.foreground,
            if self.right { RIGHT } else { LEFT },
            if self.bottom { BOTTOM } else { TOP },
            if self.large { LARGE } else { SMALL },
        ]
    }

    /// Grid cell `(row, col)` holding the rectangle's center.
    pub fn cell(&self, size: usize, grid_h: usize, grid_w: usize) -> (usize, usize) {
        let half = Self::side(size, self.large) / 2;
        ((self.y0 + half) * grid_h / size, (self.x0 + half) * grid_w / size)
    }

    /// Text stand-in for the visual grid: every cell holds the background
    /// color, except the rectangle's cell which holds foreground color plus
    /// size word. Returned as two id planes whose embeddings are summed;
    /// `PAD` marks an empty second slot.
    pub fn slot_tokens(&self, size: usize, grid_h: usize, grid_w: usize) -> (Vec<usize>, Vec<usize>) {
        let [bg, fg, _, _, sz] = self.attributes();
        let target = self.cell(size, grid_h, grid_w);
        let mut first = Vec::with_capacity(grid_h * grid_w);
        let mut second = Vec::with_capacity(grid_h * grid_w);
        for r in 0..grid_h {
            for c in 0..grid_w {
                let hit = (r, c) == target;
                first.push(if hit { fg } else { bg });
                second.push(if hit { sz } else { vocab::PAD });
            }
        }
        (first, second)
    }

    /// `[PROMPT, first caption_len attributes.., EOS]` with the prompt
    /// excluded from the loss.
    pub fn caption(&self, caption_len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = vec![vocab::PROMPT];
        ids.extend_from_slice(&self.attributes()[..caption_len]);
        ids.push(vocab::EOS);
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        (ids, mask)
    }
}

/// Colored rectangles on solid backgrounds with rule-derived captions.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub specs: Vec<RectSpec>,
    pub images: Vec<Tensor<f32>>,
    pub image_size: usize,
    pub caption_len: usize,
    /// When set, captions are re-paired with images by a fresh permutation
    /// every epoch, breaking any image/caption correlation.
    pub shuffle_seed: Option<u64>,
}

pub fn synth_data(seed: u64, n_samples: usize, image_size: usize, caption_len: usize, vocab_size: usize) -> Result<SynthData> {
    if !(1..=5).contains(&caption_len) {
        return Err(Error::Config(format!("caption_len {caption_len} outside 1..=5")));
    }
    if vocab_size < vocab::MIN_VOCAB {
        return Err(Error::Config(format!(
            "vocab of {vocab_size} cannot hold the {} caption tokens",
            vocab::MIN_VOCAB
        )));
    }
    if image_size < 8 || !image_size.is_multiple_of(4) {
        return Err(Error::Config(format!("image_size {image_size} must be a multiple of 4 and >= 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<RectSpec> = (0..n_samples).map(|_| RectSpec::random(&mut rng, image_size)).collect();
    let images = specs
        .iter()
        .map(|s| {
            let t = Planes::from_rgb(&s.render(image_size)).normalize(CLIP_MEAN, CLIP_STD);
            t.reshape(&[3, image_size, image_size]).expect("same numel")
        })
        .collect();
    Ok(SynthData {
        specs,
        images,
        image_size,
        caption_len,
        shuffle_seed: None,
    })
}

impl SynthData {
    /// Control set: identical images, captions decorrelated from them.
    pub fn shuffled_control(&self, seed: u64) -> Self {
        SynthData {
            shuffle_seed: Some(seed),
            ..self.clone()
        }
    }

    fn caption_source(&self, epoch: usize, index: usize) -> usize {
        match self.shuffle_seed {
            None => index,
            Some(seed) => {
                let mut perm: Vec<usize> = (0..self.specs.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                perm[index]
            }
        }
    }
}

impl DataSource for SynthData {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn sample(&self, epoch: usize, index: usize) -> Sample {
        let (text_ids, text_mask) = self.specs[self.caption_source(epoch, index)].caption(self.caption_len);
        Sample {
            image: self.images[index].clone(),
            text_ids,
            text_mask,
        }
    }
}

/// Stack samples into a batch for an encoder producing `n_visual` tokens.
pub fn make_batch<T: Scalar>(samples: &[Sample], n_visual: usize) -> Result<MultimodalBatch<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape("batch", "images differ in shape"));
        }
        data.extend(s.image.data().iter().map(|&v| T::of(f64::from(v))));
    }
    MultimodalBatch::new(
        Tensor::new(shape, data)?,
        samples.iter().map(|s| s.text_ids.clone()).collect(),
        samples.iter().map(|s| s.text_mask.clone()).collect(),
        n_visual,
    )
}

/// Sample indices in epoch-wise shuffled order, cycling through epochs.
struct OrderStream {
    n: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl OrderStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = OrderStream {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch as u64));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> (usize, usize) {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        self.pos += 1;
        (self.epoch, self.order[self.pos - 1])
    }
}

/// Apply the plan's masks and train; returns the per-step log.
pub fn run_stage<T: Scalar>(model: &mut Model<T>, plan: &StagePlan, data: &dyn DataSource) -> Result<StageLog> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    model.set_trainable(plan.encoder, plan.projector, plan.lm)?;
    let mut opt = OptimizerState::new(AdamW {
        weight_decay: plan.weight_decay,
        ..AdamW::default()
    });
    let total = plan.total_steps(data.len());
    let mut stream = OrderStream::new(data.len(), plan.seed);
    let grid = {
        let s = data.sample(0, 0);
        let cfg = &model.encoder.config;
        let (gh, gw) = cfg.grid(s.image.dim(1), s.image.dim(2));
        gh * gw
    };
    let mut records = Vec::with_capacity(total);
    let scale = T::of(1.0 / plan.accum_steps as f64);
    for step in 0..total {
        let lr = cosine_lr(step, total, plan.peak_lr, plan.warmup_ratio);
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..plan.accum_steps {
            let samples: Vec<Sample> = (0..plan.micro_batch())
                .map(|_| {
                    let (epoch, i) = stream.next();
                    data.sample(epoch, i)
                })
                .collect();
            let batch = make_batch::<T>(&samples, grid)?;
            let mut g = Graph::new();
            let out = model.loss_on(&mut g, &batch)?;
            loss_sum += g.value(out.loss).item().f64();
            let mut gr = g.backward(out.loss)?;
            for (prefix, store) in model.components() {
                for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
                    let full = format!("{prefix}{name}");
                    if let Some(gp) = gr.take_param(&full) {
                        let gp = gp.scale(scale);
                        match grads.get_mut(&full) {
                            Some(acc) => acc.add_assign(&gp)?,
                            None => {
                                debug_assert_eq!(gp.shape(), p.value.shape());
                                grads.insert(full, gp);
                            }
                        }
                    }
                }
            }
        }
        let [(pe, enc), (pp, proj), (pl, lm)] = model.components_mut();
        opt.update(&mut [(pe, enc), (pp, proj), (pl, lm)], &grads, lr)?;
        records.push(LogRecord {
            step,
            stage: plan.stage,
            lr,
            loss: loss_sum / plan.accum_steps as f64,
        });
    }
    Ok(StageLog {
        plan: plan.clone(),
        total_steps: total,
        records,
    })
}

/// Text-only language-model pretraining, standing in for the pretrained
/// LLM: the model learns to caption from slot descriptions laid out like the
/// visual grid (see [`RectSpec::slot_tokens`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LmPretrain {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for LmPretrain {
    fn default() -> Self {
        LmPretrain {
            steps: 400,
            batch: 16,
            peak_lr: 3e-3,
            warmup_ratio: 0.03,
            seed: 0,
        }
    }
}

/// Returns per-step records with stage 0.
pub fn pretrain_lm<T: Scalar>(
    lm: &mut ToyLM<T>,
    cfg: &LmPretrain,
    image_size: usize,
    grid: (usize, usize),
    caption_len: usize,
) -> Result<Vec<LogRecord>> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("pretraining needs positive steps and batch".into()));
    }
    lm.params.set_all_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(AdamW::default());
    let (gh, gw) = grid;
    let n = gh * gw;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.peak_lr, cfg.warmup_ratio);
        let (mut first, mut second, mut text, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.batch {
            let spec = RectSpec::random(&mut rng, image_size);
            let (a, b) = spec.slot_tokens(image_size, gh, gw);
            first.extend(a);
            second.extend(b);
            let (ids, m) = spec.caption(caption_len);
            text.push(ids);
            mask.push(std::iter::repeat_n(false, n).chain(m).collect::<Vec<_>>());
        }
        let mut g = Graph::new();
        let tok = lm.params.var(&mut g, "", "tok_emb")?;
        let a = g.gather_rows(tok, &first, &[cfg.batch, n])?;
        let b = g.gather_rows(tok, &second, &[cfg.batch, n])?;
        let prefix = g.add(a, b)?;
        let logits = lm.forward(&mut g, "", Some(prefix), &text)?;
        let (targets, tmask) = next_token_targets(n, &text, &mask)?;
        let loss = g.cross_entropy(logits, &targets, &tmask)?;
        let mut grads = g.backward(loss)?;
        let named: BTreeMap<String, Tensor<T>> = lm
            .params
            .names()
            .filter_map(|name| grads.take_param(name).map(|t| (name.to_string(), t)))
            .collect();
        opt.update(&mut [("", &mut lm.params)], &named, lr)?;
        records.push(LogRecord {
            step,
            stage: 0,
            lr,
            loss: g.value(loss).item().f64(),
        });
    }
    Ok(records)
}

/// Run stages in order on the same model.
pub fn run_protocol<T: Scalar>(model: &mut Model<T>, plans: &[StagePlan], data: &dyn DataSource) -> Result<Vec<StageLog>> {
    plans.iter().map(|p| run_stage(model, p, data)).collect()
}
