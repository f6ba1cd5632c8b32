//! Post-norm transformer encoder with a frozen affine featurizer.

use serde::{Deserialize, Serialize};

use crate::adapters::InnerAttachment;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm, ParamSink};
use crate::param::{Component, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small encoder used for every training run.
    pub fn desk() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            input_dim: 20,
            seed: 17,
        }
    }

    /// WavLM Base+ transformer dimensions; only used for parameter accounting.
    /// Input width 512 is the conv encoder's output width.
    pub fn wavlm_base_plus_dims() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 8,
            ffn_dim: 3072,
            input_dim: 512,
            seed: 17,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "wavlm-base-plus-dims" => Ok(Self::wavlm_base_plus_dims()),
            other => Err(Error::Config(format!(
                "unknown encoder preset '{other}' (expected desk or wavlm-base-plus-dims)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.input_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Featurizer {
    pub proj: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub attn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub featurizer: Featurizer,
    pub layers: Vec<TransformerLayer>,
}

/// How the backbone participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneMode {
    /// Every transformer parameter trains; the featurizer stays frozen.
    FullFinetune,
    Frozen,
}

impl Encoder {
    pub fn declare(sink: &mut dyn ParamSink, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, seed) = (config.hidden_dim, config.ffn_dim, config.seed);
        let featurizer = Featurizer {
            proj: Linear::declare(sink, "featurizer", config.input_dim, d, Component::Featurizer, seed, false),
        };
        let c = Component::Transformer;
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                TransformerLayer {
                    q: Linear::declare(sink, &format!("{p}.attn.q"), d, d, c, seed, false),
                    k: Linear::declare(sink, &format!("{p}.attn.k"), d, d, c, seed, false),
                    v: Linear::declare(sink, &format!("{p}.attn.v"), d, d, c, seed, false),
                    o: Linear::declare(sink, &format!("{p}.attn.o"), d, d, c, seed, false),
                    attn_norm: Norm::declare(sink, &format!("{p}.attn_norm"), d, c),
                    ffn_in: Linear::declare(sink, &format!("{p}.ffn.in"), d, f, c, seed, false),
                    ffn_out: Linear::declare(sink, &format!("{p}.ffn.out"), f, d, c, seed, false),
                    ffn_norm: Norm::declare(sink, &format!("{p}.ffn_norm"), d, c),
                }
            })
            .collect();
        Ok(Encoder {
            config: config.clone(),
            featurizer,
            layers,
        })
    }

    /// Fresh encoder with its own store, weights derived from `config.seed`.
    pub fn build(config: &EncoderConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let enc = Encoder::declare(&mut store, config)?;
        store.set_trainable_where(false, |p| p.component == Component::Featurizer);
        Ok((enc, store))
    }
}

/// Apply the freeze policy to every backbone parameter in `store`.
pub fn set_trainable(store: &mut ParamStore, mode: BackboneMode) {
    store.set_trainable_where(false, |p| p.component == Component::Featurizer);
    let ft = mode == BackboneMode::FullFinetune;
    store.set_trainable_where(ft, |p| p.component == Component::Transformer);
}

/// Scaled dot-product multi-head self-attention without masking.
pub fn mhsa(tape: &mut Tape, store: &ParamStore, x: Var, layer: &TransformerLayer, num_heads: usize) -> Result<Var> {
    mhsa_with_weights(tape, store, x, layer, num_heads).map(|(out, _)| out)
}

/// [`mhsa`], also returning each head's `[T × T]` attention matrix.
pub fn mhsa_with_weights(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layer: &TransformerLayer,
    num_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = store.value(layer.q.weight).shape()[0];
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != d || num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::shape("mhsa", s, &[d, num_heads]));
    }
    let dh = d / num_heads;
    let q = layer.q.forward(tape, store, x)?;
    let k = layer.k.forward(tape, store, x)?;
    let v = layer.v.forward(tape, store, x)?;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut attn = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, inv);
        let a = tape.softmax_rows(scores);
        attn.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if num_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((layer.o.forward(tape, store, cat)?, attn))
}

pub fn ffn(tape: &mut Tape, store: &ParamStore, x: Var, layer: &TransformerLayer) -> Result<Var> {
    let h = layer.ffn_in.forward(tape, store, x)?;
    let h = tape.relu(h);
    layer.ffn_out.forward(tape, store, h)
}

/// One post-norm layer: `u = LN(MHSA(x) + x)`, then the FFN sub-block as
/// arranged by `attachment`.
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layer: &TransformerLayer,
    num_heads: usize,
    attachment: &InnerAttachment,
) -> Result<Var> {
    let a = mhsa(tape, store, x, layer, num_heads)?;
    let a = attachment.after_attention(tape, store, a)?;
    let s = tape.add(a, x)?;
    let u = layer.attn_norm.forward(tape, store, s)?;
    let f = ffn(tape, store, u, layer)?;
    attachment.ffn_sublayer(tape, store, u, f, &layer.ffn_norm)
}

/// Featurizer then every layer; returns the N layer outputs (the featurizer
/// output is not among them).
pub fn encode_collect(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &Encoder,
    attachments: &[InnerAttachment],
    frames: &Tensor,
) -> Result<Vec<Var>> {
    let cfg = &encoder.config;
    if frames.shape().len() != 2 || frames.shape()[1] != cfg.input_dim {
        return Err(Error::shape("encode_collect", frames.shape(), &[cfg.input_dim]));
    }
    if frames.rows() == 0 {
        return Err(Error::Contract("encode_collect needs at least one frame".into()));
    }
    if !attachments.is_empty() && attachments.len() != encoder.layers.len() {
        return Err(Error::shape("encode_collect", &[attachments.len()], &[encoder.layers.len()]));
    }
    let input = tape.input(frames.clone());
    let mut x = encoder.featurizer.proj.forward(tape, store, input)?;
    let none = InnerAttachment::None;
    let mut outs = Vec::with_capacity(encoder.layers.len());
    for (i, layer) in encoder.layers.iter().enumerate() {
        let att = attachments.get(i).unwrap_or(&none);
        x = layer_forward(tape, store, x, layer, cfg.num_heads, att)?;
        outs.push(x);
    }
    Ok(outs)
}
