//! Visual tokens -> projector -> toy causal language model.
//!
//! Projected visual tokens are concatenated in front of the text embeddings
//! and the joint sequence runs through a small pre-norm decoder whose output
//! head shares the token-embedding matrix. Logits at position `i` predict the
//! token at `i + 1`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{build_encoder, freeze_mask, EncoderConfig, EncoderState, FreezeSpec, NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const PROJECTOR_PREFIX: &str = "projector.";
pub const LM_PREFIX: &str = "lm.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Two affine layers with a GELU between: `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T: Scalar = f32> {
    pub config: ProjectorConfig,
    pub params: ParamStore<T>,
}

fn scaled_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let fan_in = shape[1];
    normal(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

impl<T: Scalar> Projector<T> {
    pub fn new(config: ProjectorConfig, seed: u64) -> Result<Self> {
        let ProjectorConfig { in_dim, out_dim } = config;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("projector dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("fc1.weight", scaled_init(&mut rng, &[out_dim, in_dim]))?;
        params.insert("fc1.bias", Tensor::zeros(&[out_dim]))?;
        params.insert("fc2.weight", scaled_init(&mut rng, &[out_dim, out_dim]))?;
        params.insert("fc2.bias", Tensor::zeros(&[out_dim]))?;
        Ok(Projector { config, params })
    }

    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, tokens: Var) -> Result<Var> {
        let c = g.value(tokens).shape().last().copied().unwrap_or(0);
        if c != self.config.in_dim {
            return Err(Error::shape(
                "project",
                format!("token channels {c} != projector in_dim {}", self.config.in_dim),
            ));
        }
        let h = self.affine(g, prefix, "fc1", tokens)?;
        let h = g.gelu(h);
        self.affine(g, prefix, "fc2", h)
    }

    fn affine(&self, g: &mut Graph<T>, prefix: &str, name: &str, x: Var) -> Result<Var> {
        let w = self.params.var(g, prefix, &format!("{name}.weight"))?;
        let b = self.params.var(g, prefix, &format!("{name}.bias"))?;
        g.linear(x, w, Some(b))
    }
}

/// Apply the projector to a token tensor `[B, N, in_dim]`.
pub fn project<T: Scalar>(proj: &Projector<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let y = proj.forward(&mut g, "", x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyLMConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        ToyLMConfig {
            vocab_size: 16,
            embed_dim: 32,
            num_layers: 1,
            heads: 1,
            max_seq: 32,
        }
    }
}

/// Token + position embeddings, `num_layers` pre-norm attention/MLP blocks,
/// final norm, output head tied to the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLM<T: Scalar = f32> {
    pub config: ToyLMConfig,
    pub params: ParamStore<T>,
}

const EMBED_SCALE: f64 = 0.5;

impl<T: Scalar> ToyLM<T> {
    pub fn new(config: ToyLMConfig, seed: u64) -> Result<Self> {
        let ToyLMConfig {
            vocab_size: v,
            embed_dim: d,
            num_layers,
            heads,
            max_seq,
        } = config;
        if v == 0 || d == 0 || max_seq == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "invalid LM config {config:?}: dims must be positive and embed_dim divisible by heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert("tok_emb", normal(&mut rng, &[v, d], EMBED_SCALE / (d as f64).sqrt()))?;
        p.insert("pos_emb", normal(&mut rng, &[max_seq, d], EMBED_SCALE / (d as f64).sqrt()))?;
        for l in 0..num_layers {
            let pre = format!("blocks.{l}");
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{pre}.{ln}.weight"), Tensor::ones(&[d]))?;
                p.insert(format!("{pre}.{ln}.bias"), Tensor::zeros(&[d]))?;
            }
            for proj in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{proj}.weight"), scaled_init(&mut rng, &[d, d]))?;
                p.insert(format!("{pre}.attn.{proj}.bias"), Tensor::zeros(&[d]))?;
            }
            p.insert(format!("{pre}.mlp.fc1.weight"), scaled_init(&mut rng, &[4 * d, d]))?;
            p.insert(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(&[4 * d]))?;
            p.insert(format!("{pre}.mlp.fc2.weight"), scaled_init(&mut rng, &[d, 4 * d]))?;
            p.insert(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
        }
        p.insert("ln_f.weight", Tensor::ones(&[d]))?;
        p.insert("ln_f.bias", Tensor::zeros(&[d]))?;
        Ok(ToyLM { config, params: p })
    }

    fn affine(&self, g: &mut Graph<T>, prefix: &str, name: &str, x: Var) -> Result<Var> {
        let w = self.params.var(g, prefix, &format!("{name}.weight"))?;
        let b = self.params.var(g, prefix, &format!("{name}.bias"))?;
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph<T>, prefix: &str, name: &str, x: Var) -> Result<Var> {
        let w = self.params.var(g, prefix, &format!("{name}.weight"))?;
        let b = self.params.var(g, prefix, &format!("{name}.bias"))?;
        g.layer_norm_last(x, w, b, T::of(NORM_EPS))
    }

    /// Logits `[B, N + T, V]` for an optional visual prefix `[B, N, D]` and
    /// `B` text sequences of equal length `T`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        visual: Option<Var>,
        text_ids: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = self.config;
        let batch = match visual {
            Some(v) => g.value(v).dim(0),
            None => text_ids.len(),
        };
        if text_ids.len() != batch {
            return Err(Error::shape(
                "forward_lm",
                format!("{} text sequences for batch of {batch}", text_ids.len()),
            ));
        }
        let t = text_ids.first().map_or(0, Vec::len);
        if text_ids.iter().any(|s| s.len() != t) {
            return Err(Error::shape("forward_lm", "text sequences must share one length"));
        }
        if let Some(v) = visual {
            let shape = g.value(v).shape();
            if shape.len() != 3 || shape[2] != cfg.embed_dim {
                return Err(Error::shape(
                    "forward_lm",
                    format!("visual prefix must be [B,N,{}], got {shape:?}", cfg.embed_dim),
                ));
            }
        }
        let n = visual.map_or(0, |v| g.value(v).dim(1));
        let seq = n + t;
        if seq == 0 {
            return Err(Error::InvalidArgument("forward_lm: empty sequence".into()));
        }
        if seq > cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "sequence of {seq} tokens ({n} visual + {t} text) exceeds max_seq {}",
                cfg.max_seq
            )));
        }

        let tok_emb = self.params.var(g, prefix, "tok_emb")?;
        let text = if t > 0 {
            let ids: Vec<usize> = text_ids.iter().flatten().copied().collect();
            Some(g.gather_rows(tok_emb, &ids, &[batch, t])?)
        } else {
            None
        };
        let mut h = match (visual, text) {
            (Some(v), Some(e)) => g.concat_seq(v, e)?,
            (Some(v), None) => v,
            (None, Some(e)) => e,
            (None, None) => unreachable!("seq > 0"),
        };
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos_emb = self.params.var(g, prefix, "pos_emb")?;
        let pos = g.gather_rows(pos_emb, &pos_ids, &[batch, seq])?;
        h = g.add(h, pos)?;

        for l in 0..cfg.num_layers {
            let pre = format!("blocks.{l}");
            let a = self.norm(g, prefix, &format!("{pre}.ln1"), h)?;
            let q = self.affine(g, prefix, &format!("{pre}.attn.q"), a)?;
            let k = self.affine(g, prefix, &format!("{pre}.attn.k"), a)?;
            let v = self.affine(g, prefix, &format!("{pre}.attn.v"), a)?;
            let att = g.causal_attention(q, k, v, cfg.heads)?;
            let o = self.affine(g, prefix, &format!("{pre}.attn.o"), att)?;
            h = g.add(h, o)?;
            let m = self.norm(g, prefix, &format!("{pre}.ln2"), h)?;
            let m = self.affine(g, prefix, &format!("{pre}.mlp.fc1"), m)?;
            let m = g.gelu(m);
            let m = self.affine(g, prefix, &format!("{pre}.mlp.fc2"), m)?;
            h = g.add(h, m)?;
        }
        let h = self.norm(g, prefix, "ln_f", h)?;
        g.linear(h, tok_emb, None)
    }
}

/// Inference-mode LM forward returning `[B, N + T, V]` logits.
pub fn forward_lm<T: Scalar>(lm: &ToyLM<T>, visual: Option<&Tensor<T>>, text_ids: &[Vec<usize>]) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = visual.map(|t| g.constant(t.clone()));
    let y = lm.forward(&mut g, "", v, text_ids)?;
    Ok(g.value(y).clone())
}

/// Images with their text and a loss mask over the full `N + T` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub text_ids: Vec<Vec<usize>>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl<T: Scalar> MultimodalBatch<T> {
    /// Build from per-sample text masks, prepending `n_visual` false entries.
    pub fn new(images: Tensor<T>, text_ids: Vec<Vec<usize>>, text_mask: Vec<Vec<bool>>, n_visual: usize) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != text_ids.len() || text_ids.len() != text_mask.len() {
            return Err(Error::shape(
                "batch",
                format!(
                    "images {:?} vs {} texts and {} masks",
                    images.shape(),
                    text_ids.len(),
                    text_mask.len()
                ),
            ));
        }
        let loss_mask = text_ids
            .iter()
            .zip(text_mask)
            .map(|(ids, m)| {
                if ids.len() != m.len() {
                    return Err(Error::shape("batch", "text and mask lengths differ"));
                }
                Ok(std::iter::repeat_n(false, n_visual).chain(m).collect())
            })
            .collect::<Result<_>>()?;
        Ok(MultimodalBatch {
            images,
            text_ids,
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_ids.is_empty()
    }
}

/// Next-token targets and mask for logits rows: row `j` predicts position
/// `j + 1`, so the last row of each sample never contributes.
pub fn next_token_targets(n_visual: usize, text_ids: &[Vec<usize>], loss_mask: &[Vec<bool>]) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (ids, m) in text_ids.iter().zip(loss_mask) {
        let seq = n_visual + ids.len();
        if m.len() != seq {
            return Err(Error::shape(
                "lm_loss",
                format!("loss mask has {} entries for a sequence of {seq}", m.len()),
            ));
        }
        if m[..n_visual.min(seq)].iter().any(|&b| b) {
            return Err(Error::InvalidArgument(
                "lm_loss: visual positions cannot carry targets".into(),
            ));
        }
        for j in 0..seq {
            let next = j + 1;
            if next < seq && next >= n_visual {
                targets.push(ids[next - n_visual]);
                mask.push(m[next]);
            } else {
                targets.push(0);
                mask.push(false);
            }
        }
    }
    Ok((targets, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: ToyLMConfig,
}

impl ModelConfig {
    /// Toy five-stage encoder feeding a one-block, four-head LM with a
    /// 16-token vocabulary.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy5(),
            lm: ToyLMConfig {
                heads: 4,
                ..ToyLMConfig::default()
            },
        }
    }
}

/// Encoder g, projector h and language model f.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub encoder: EncoderState<T>,
    pub projector: Projector<T>,
    pub lm: ToyLM<T>,
}

/// Scalar loss on a graph plus the number of contributing positions.
pub struct LossOutput {
    pub loss: Var,
    pub n_visual: usize,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let encoder = build_encoder(&config.encoder, seed)?;
        let projector = Projector::new(
            ProjectorConfig {
                in_dim: config.encoder.out_channels(),
                out_dim: config.lm.embed_dim,
            },
            seed.wrapping_add(1),
        )?;
        let lm = ToyLM::new(config.lm, seed.wrapping_add(2))?;
        Ok(Model { encoder, projector, lm })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            lm: self.lm.config,
        }
    }

    /// The three parameter stores with their name prefixes.
    pub fn components(&self) -> [(&'static str, &ParamStore<T>); 3] {
        [
            (ENCODER_PREFIX, &self.encoder.params),
            (PROJECTOR_PREFIX, &self.projector.params),
            (LM_PREFIX, &self.lm.params),
        ]
    }

    pub fn components_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 3] {
        [
            (ENCODER_PREFIX, &mut self.encoder.params),
            (PROJECTOR_PREFIX, &mut self.projector.params),
            (LM_PREFIX, &mut self.lm.params),
        ]
    }

    pub fn set_trainable(&mut self, encoder: FreezeSpec, projector: bool, lm: bool) -> Result<()> {
        freeze_mask(&mut self.encoder, encoder)?;
        self.projector.params.set_all_trainable(projector);
        self.lm.params.set_all_trainable(lm);
        Ok(())
    }

    /// Record the full forward on `g` and return the masked next-token loss.
    pub fn loss_on(&self, g: &mut Graph<T>, batch: &MultimodalBatch<T>) -> Result<LossOutput> {
        let image = g.constant(batch.images.clone());
        let (tokens, _, _) = self.encoder.forward_tokens(g, ENCODER_PREFIX, image)?;
        let z = self.projector.forward(g, PROJECTOR_PREFIX, tokens)?;
        let n_visual = g.value(z).dim(1);
        let logits = self.lm.forward(g, LM_PREFIX, Some(z), &batch.text_ids)?;
        let (targets, mask) = next_token_targets(n_visual, &batch.text_ids, &batch.loss_mask)?;
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        Ok(LossOutput { loss, n_visual })
    }

    /// Inference-mode loss value.
    pub fn lm_loss(&self, batch: &MultimodalBatch<T>) -> Result<T> {
        let mut g = Graph::inference();
        let out = self.loss_on(&mut g, batch)?;
        Ok(g.value(out.loss).item())
    }

    /// All parameters keyed by prefixed name.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor<T>> {
        self.components()
            .into_iter()
            .flat_map(|(prefix, store)| {
                store
                    .iter()
                    .map(move |(name, p)| (format!("{prefix}{name}"), p.value.clone()))
            })
            .collect()
    }

    /// Replace parameters from prefixed names. Unknown names or shape
    /// mismatches leave the model untouched.
    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut split: [BTreeMap<String, Tensor<T>>; 3] = Default::default();
        'outer: for (name, t) in state {
            for (i, (prefix, _)) in self.components().iter().enumerate() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    split[i].insert(rest.to_string(), t.clone());
                    continue 'outer;
                }
            }
            return Err(Error::UnknownParameter(name.clone()));
        }
        for ((_, store), part) in self.components().iter().zip(&split) {
            store.check_assign(part)?;
        }
        for ((_, store), part) in self.components_mut().into_iter().zip(&split) {
            store.assign_all(part)?;
        }
        Ok(())
    }
}

/// Maps each byte to its own id; `offset` shifts ids past reserved specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer {
    pub offset: usize,
}

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        self.offset + 256
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| b as usize + self.offset).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let bytes = ids
            .iter()
            .map(|&id| {
                id.checked_sub(self.offset)
                    .and_then(|b| u8::try_from(b).ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("id {id} is not a byte token")))
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_skip_visual_rows() {
        let ids = vec![vec![5, 6, 7]];
        let mask = vec![vec![false, false, false, true, true]];
        let (t, m) = next_token_targets(2, &ids, &mask).unwrap();
        // rows 0..5; row 2 predicts position 3 (id 6), row 3 predicts id 7
        assert_eq!(m, vec![false, false, true, true, false]);
        assert_eq!(&t[2..4], &[6, 7]);
    }

    #[test]
    fn visual_targets_rejected() {
        let err = next_token_targets(1, &[vec![3]], &[vec![true, false]]).unwrap_err();
        assert!(err.to_string().contains("visual"));
    }

    #[test]
    fn single_token_shape() {
        let lm = ToyLM::<f64>::new(ToyLMConfig::default(), 0).unwrap();
        let y = forward_lm(&lm, None, &[vec![3], vec![4]]).unwrap();
        assert_eq!(y.shape(), &[2, 1, 16]);
    }

    #[test]
    fn sequence_overflow() {
        let lm = ToyLM::<f32>::new(ToyLMConfig { max_seq: 4, ..Default::default() }, 0).unwrap();
        assert!(forward_lm(&lm, None, &[vec![1; 5]]).is_err());
    }

    #[test]
    fn byte_tokenizer_round_trip() {
        let tok = ByteTokenizer { offset: 3 };
        let ids = tok.encode("red box");
        assert_eq!(ids[0], b'r' as usize + 3);
        assert_eq!(tok.decode(&ids).unwrap(), "red box");
        assert!(tok.decode(&[1]).is_err());
    }
}
