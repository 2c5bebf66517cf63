//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every key
//! must be consumed by the reader, so a typo is an error rather than a silently
//! ignored setting.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, FreezeSpec};
use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, ToyLMConfig};
use crate::trainer::{LmPretrain, StagePlan};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Remove and parse `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: {key} = {v:?}: {e}"))),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("line {line}: {key} = {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Error if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!(
                "line {line}: unknown key {k:?} (unused: {})",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// `preset` picks a starting geometry (default `toy5`); the remaining keys
/// override single fields.
pub fn encoder_config(kv: &mut KeyValues) -> Result<EncoderConfig> {
    let preset: String = kv.take("preset")?.unwrap_or_else(|| "toy5".into());
    let mut c = EncoderConfig::preset(&preset)?;
    if let Some(d) = kv.take_list("depths")? {
        c.depths = d;
    }
    if let Some(ch) = kv.take_list("channels")? {
        c.channels = ch;
    }
    kv.set("use_stage5", &mut c.use_stage5)?;
    kv.set("stage5_depth", &mut c.stage5_depth)?;
    kv.set("stage5_channels", &mut c.stage5_channels)?;
    kv.set("kernel_size", &mut c.kernel_size)?;
    kv.set("stem_patch", &mut c.stem_patch)?;
    kv.set("ffn_expansion", &mut c.ffn_expansion)?;
    kv.set("layer_scale_init", &mut c.layer_scale_init)?;
    c.validate()?;
    Ok(c)
}

pub fn load_encoder_config(path: impl AsRef<Path>) -> Result<EncoderConfig> {
    let mut kv = KeyValues::load(path)?;
    let c = encoder_config(&mut kv)?;
    kv.finish()?;
    Ok(c)
}

/// Everything `train` needs: model geometry, synthetic data, LM pretraining
/// and the stage plans.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub samples: usize,
    pub image_size: usize,
    pub caption_len: usize,
    /// Train on captions permuted across images.
    pub control: bool,
    /// `None` skips LM pretraining.
    pub pretrain: Option<LmPretrain>,
    pub plans: Vec<StagePlan>,
}

impl TrainConfig {
    /// Desk defaults for `stages`: 64 samples of 128 px, structural batches
    /// divided by 64, 300 steps per stage.
    pub fn desk(stages: &[u8]) -> Result<Self> {
        let model = ModelConfig::desk();
        let n = model.encoder.num_stages();
        let plans = desk_plans(stages, n, 0)?;
        Ok(TrainConfig {
            model,
            seed: 0,
            samples: 64,
            image_size: 128,
            caption_len: 5,
            control: false,
            pretrain: Some(LmPretrain::default()),
            plans,
        })
    }

    /// Keys: `stages`, `seed`, `samples`, `image_size`, `caption_len`,
    /// `control`, `pretrain_steps` (0 disables), `pretrain_lr`,
    /// `pretrain_batch`, `encoder.*` (see [`encoder_config`]), `lm.*`
    /// (`vocab_size`, `embed_dim`, `num_layers`, `heads`, `max_seq`), plan keys
    /// applied to every stage, and `stageN.<plan key>` for one stage. Plan
    /// keys: `encoder`, `projector`, `lm`, `peak_lr`, `batch_size`,
    /// `batch_divisor`, `accum_steps`, `warmup_ratio`, `epochs`, `max_steps`,
    /// `weight_decay`.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let stages: Vec<u8> = kv.take_list("stages")?.unwrap_or_else(|| vec![1, 2, 3]);
        let mut c = TrainConfig::desk(&stages)?;

        let mut enc = KeyValues::default();
        let mut lm = KeyValues::default();
        let keys: Vec<String> = kv.entries.keys().cloned().collect();
        for k in keys {
            let (target, rest) = if let Some(r) = k.strip_prefix("encoder.") {
                (&mut enc, r)
            } else if let Some(r) = k.strip_prefix("lm.") {
                (&mut lm, r)
            } else {
                continue;
            };
            let v = kv.entries.remove(&k).expect("key listed");
            target.entries.insert(rest.to_string(), v);
        }
        if !enc.entries.is_empty() {
            c.model.encoder = encoder_config(&mut enc)?;
            enc.finish()?;
        }
        let l: &mut ToyLMConfig = &mut c.model.lm;
        lm.set("vocab_size", &mut l.vocab_size)?;
        lm.set("embed_dim", &mut l.embed_dim)?;
        lm.set("num_layers", &mut l.num_layers)?;
        lm.set("heads", &mut l.heads)?;
        lm.set("max_seq", &mut l.max_seq)?;
        lm.finish()?;

        kv.set("seed", &mut c.seed)?;
        kv.set("samples", &mut c.samples)?;
        kv.set("image_size", &mut c.image_size)?;
        kv.set("caption_len", &mut c.caption_len)?;
        kv.set("control", &mut c.control)?;
        let mut pre = LmPretrain::default();
        kv.set("pretrain_steps", &mut pre.steps)?;
        kv.set("pretrain_lr", &mut pre.peak_lr)?;
        kv.set("pretrain_batch", &mut pre.batch)?;
        pre.seed = c.seed;
        c.pretrain = (pre.steps > 0).then_some(pre);

        // Rebuild defaults now that the encoder depth is known.
        let n = c.model.encoder.num_stages();
        c.plans = desk_plans(&stages, n, c.seed)?;
        let shared = plan_keys(kv, "")?;
        for p in &mut c.plans {
            shared.apply(p);
            plan_keys(kv, &format!("stage{}.", p.stage))?.apply(p);
            p.validate()?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }
}

fn desk_plans(stages: &[u8], num_stages: usize, seed: u64) -> Result<Vec<StagePlan>> {
    stages
        .iter()
        .map(|&s| {
            let mut p = StagePlan::protocol(s, num_stages)?;
            p.batch_divisor = 64;
            p.max_steps = Some(300);
            p.seed = seed.wrapping_add(s as u64);
            Ok(p)
        })
        .collect()
}

#[derive(Default)]
struct PlanOverrides {
    encoder: Option<FreezeSpec>,
    projector: Option<bool>,
    lm: Option<bool>,
    peak_lr: Option<f64>,
    batch_size: Option<usize>,
    batch_divisor: Option<usize>,
    accum_steps: Option<usize>,
    warmup_ratio: Option<f64>,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    weight_decay: Option<f64>,
}

fn plan_keys(kv: &mut KeyValues, prefix: &str) -> Result<PlanOverrides> {
    let k = |s: &str| format!("{prefix}{s}");
    Ok(PlanOverrides {
        encoder: kv.take(&k("encoder"))?,
        projector: kv.take(&k("projector"))?,
        lm: kv.take(&k("lm"))?,
        peak_lr: kv.take(&k("peak_lr"))?,
        batch_size: kv.take(&k("batch_size"))?,
        batch_divisor: kv.take(&k("batch_divisor"))?,
        accum_steps: kv.take(&k("accum_steps"))?,
        warmup_ratio: kv.take(&k("warmup_ratio"))?,
        epochs: kv.take(&k("epochs"))?,
        max_steps: kv.take(&k("max_steps"))?,
        weight_decay: kv.take(&k("weight_decay"))?,
    })
}

impl PlanOverrides {
    fn apply(&self, p: &mut StagePlan) {
        if let Some(e) = self.encoder {
            p.encoder = e;
        }
        p.projector = self.projector.unwrap_or(p.projector);
        p.lm = self.lm.unwrap_or(p.lm);
        p.peak_lr = self.peak_lr.unwrap_or(p.peak_lr);
        p.batch_size = self.batch_size.unwrap_or(p.batch_size);
        p.batch_divisor = self.batch_divisor.unwrap_or(p.batch_divisor);
        p.accum_steps = self.accum_steps.unwrap_or(p.accum_steps);
        p.warmup_ratio = self.warmup_ratio.unwrap_or(p.warmup_ratio);
        p.epochs = self.epochs.unwrap_or(p.epochs);
        if self.max_steps.is_some() {
            p.max_steps = self.max_steps;
        }
        p.weight_decay = self.weight_decay.unwrap_or(p.weight_decay);
    }
}
