//! Speaker-verification backend: time pooling, two FC layers, a training-only
//! speaker classifier, and cosine scoring.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSink};
use crate::param::{Component, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct SvHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub in_dim: usize,
    pub embed_dim: usize,
}

impl SvHead {
    /// `fc1: in_dim → e`, `fc2: e → e`. With an inter-layer adapter in front
    /// `in_dim` is already `e`.
    pub fn declare(sink: &mut dyn ParamSink, in_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let c = Component::SvHead;
        SvHead {
            fc1: Linear::declare(sink, "head.fc1", in_dim, embed_dim, c, seed, false),
            fc2: Linear::declare(sink, "head.fc2", embed_dim, embed_dim, c, seed, false),
            in_dim,
            embed_dim,
        }
    }
}

/// Mean over time, then `fc1 + relu`, then `fc2`: `[T × in] → [1 × e]`.
pub fn pool_and_embed(tape: &mut Tape, store: &ParamStore, h: Var, head: &SvHead) -> Result<Var> {
    let s = tape.shape(h);
    if s.len() != 2 || s[1] != head.in_dim {
        return Err(Error::shape("pool_and_embed", s, &[head.in_dim]));
    }
    let pooled = tape.mean_rows(h);
    let z = head.fc1.forward(tape, store, pooled)?;
    let z = tape.relu(z);
    head.fc2.forward(tape, store, z)
}

/// Linear speaker classifier used only while training.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub fc: Linear,
    pub num_speakers: usize,
}

impl ClassifierHead {
    pub fn declare(sink: &mut dyn ParamSink, embed_dim: usize, num_speakers: usize, seed: u64) -> Self {
        ClassifierHead {
            fc: Linear::declare(sink, "classifier", embed_dim, num_speakers, Component::Classifier, seed, false),
            num_speakers,
        }
    }
}

/// Cross-entropy of the classifier over a `[B × e]` embedding batch.
pub fn train_loss(
    tape: &mut Tape,
    store: &ParamStore,
    embeddings: Var,
    labels: &[usize],
    clf: &ClassifierHead,
) -> Result<Var> {
    let logits = clf.fc.forward(tape, store, embeddings)?;
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub utt_id: String,
    pub vector: Vec<f64>,
}

pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineScore {
    pub score: f64,
    /// Either side had norm below [`DEGENERATE_NORM`]; `score` is then 0.
    pub degenerate: bool,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> CosineScore {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return CosineScore {
            score: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    CosineScore {
        score: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Text rows `utt v1 … ve`.
pub fn write_embeddings(mut w: impl Write, embeddings: &[SpeakerEmbedding]) -> std::io::Result<()> {
    for e in embeddings {
        write!(w, "{}", e.utt_id)?;
        for v in &e.vector {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
