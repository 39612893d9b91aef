//! Downstream heads: an FC layer feeding CTC for transcription, and two FC
//! layers around average time pooling for utterance-level labels.

pub mod ctc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::nn::{Linear, ParamSink};
use crate::{Error, Result};

pub use ctc::{collapse, ctc_loss, ctc_loss_and_grad, greedy_decode, BLANK};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadConfig {
    /// `vocab` non-blank labels; logits have `vocab + 1` columns.
    Ctc { vocab: usize },
    Cls { hidden: usize, classes: usize },
}

impl HeadConfig {
    pub fn param_count(&self, in_dim: usize) -> usize {
        match *self {
            HeadConfig::Ctc { vocab } => Linear::param_count(in_dim, vocab + 1),
            HeadConfig::Cls { hidden, classes } => Linear::param_count(in_dim, hidden) + Linear::param_count(hidden, classes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CtcHead {
    pub fc: Linear,
}

impl CtcHead {
    pub fn vocab(&self) -> usize {
        self.fc.out_dim - 1
    }

    /// Per-frame logits `[T×(V+1)]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        self.fc.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct ClsHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Class logits and the pooled utterance embedding.
#[derive(Clone, Copy, Debug)]
pub struct ClsOutput {
    pub logits: Var,
    pub embedding: Var,
}

impl ClsHead {
    pub fn classes(&self) -> usize {
        self.fc2.out_dim
    }

    /// fc1 per frame, average over time, fc2.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<ClsOutput> {
        if g.shape(h).first() == Some(&0) {
            return Err(Error::EmptySequence { op: "cls_forward" });
        }
        let z = self.fc1.forward(g, store, h)?;
        let embedding = g.mean_over_time(z)?;
        let w = g.param(store, self.fc2.w)?;
        let b = g.param(store, self.fc2.b)?;
        let hidden = g.shape(embedding)[0];
        let row = g.reshape(embedding, &[1, hidden])?;
        let logits = g.matmul(row, w)?;
        let logits = g.add_row(logits, b)?;
        let logits = g.reshape(logits, &[self.classes()])?;
        Ok(ClsOutput { logits, embedding })
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Ctc(CtcHead),
    Cls(ClsHead),
}

impl Head {
    pub fn declare(sink: &mut dyn ParamSink, in_dim: usize, cfg: &HeadConfig) -> Result<Self> {
        match *cfg {
            HeadConfig::Ctc { vocab } => {
                if vocab == 0 {
                    return Err(Error::config("CTC vocabulary must be non-empty"));
                }
                Ok(Head::Ctc(CtcHead {
                    fc: Linear::declare(sink, "head.fc", in_dim, vocab + 1)?,
                }))
            }
            HeadConfig::Cls { hidden, classes } => {
                if hidden == 0 || classes == 0 {
                    return Err(Error::config("classification head needs positive hidden and class sizes"));
                }
                Ok(Head::Cls(ClsHead {
                    fc1: Linear::declare(sink, "head.fc1", in_dim, hidden)?,
                    fc2: Linear::declare(sink, "head.fc2", hidden, classes)?,
                }))
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Head::Ctc(h) => h.fc.ids().to_vec(),
            Head::Cls(h) => h.fc1.ids().into_iter().chain(h.fc2.ids()).collect(),
        }
    }
}

#[cfg(test)]
mod tests;
