//! L-adapters, E-adapters and the learnable layer weighting that joins
//! them, plus adaptation strategies and exact parameter accounting.

mod accounting;
mod strategy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_vec, Graph, ParamId, ParamStore, Scalar, Var};
use crate::nn::{Activation, Init, Linear, Norm, ParamSink};
use crate::{Error, Result};

pub use accounting::{count_learnable_params, l_adapter_config_params, ParamReport};
pub use strategy::{apply_strategy, components, trainable_set, AdaptationStrategy, Component, TrainableSet};

/// Per-layer transform applied before the weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LAdapterVariant {
    /// Identity: only the layer weights are learned.
    Weight,
    #[serde(rename = "LN")]
    Ln,
    #[serde(rename = "Act+LN")]
    ActLn,
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "FC+Act")]
    FcAct,
    #[serde(rename = "FC+LN")]
    FcLn,
    /// FC → Act → LN.
    Base,
    /// Residual bottleneck MLP with LN, same shape as an E-adapter.
    Skip,
}

impl LAdapterVariant {
    pub const ALL: [LAdapterVariant; 8] = [
        LAdapterVariant::Weight,
        LAdapterVariant::Ln,
        LAdapterVariant::ActLn,
        LAdapterVariant::Fc,
        LAdapterVariant::FcAct,
        LAdapterVariant::FcLn,
        LAdapterVariant::Base,
        LAdapterVariant::Skip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LAdapterVariant::Weight => "Weight",
            LAdapterVariant::Ln => "LN",
            LAdapterVariant::ActLn => "Act+LN",
            LAdapterVariant::Fc => "FC",
            LAdapterVariant::FcAct => "FC+Act",
            LAdapterVariant::FcLn => "FC+LN",
            LAdapterVariant::Base => "Base",
            LAdapterVariant::Skip => "Skip",
        }
    }

    pub fn has_fc(self) -> bool {
        matches!(
            self,
            LAdapterVariant::Fc | LAdapterVariant::FcAct | LAdapterVariant::FcLn | LAdapterVariant::Base
        )
    }
}

impl fmt::Display for LAdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LAdapterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "weight" => LAdapterVariant::Weight,
            "ln" => LAdapterVariant::Ln,
            "actln" => LAdapterVariant::ActLn,
            "fc" => LAdapterVariant::Fc,
            "fcact" => LAdapterVariant::FcAct,
            "fcln" => LAdapterVariant::FcLn,
            "base" => LAdapterVariant::Base,
            "skip" => LAdapterVariant::Skip,
            _ => return Err(Error::Parse(format!("unknown L-adapter variant {s}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LAdapterConfig {
    pub variant: LAdapterVariant,
    /// Output width of the FC variants.
    pub embed_dim: usize,
    /// Hidden width of the Skip variant.
    pub bottleneck_dim: usize,
    pub activation: Activation,
}

impl LAdapterConfig {
    pub fn wavlm_base(variant: LAdapterVariant) -> Self {
        LAdapterConfig {
            variant,
            embed_dim: 512,
            bottleneck_dim: 256,
            activation: Activation::Gelu,
        }
    }

    pub fn toy(variant: LAdapterVariant) -> Self {
        LAdapterConfig {
            variant,
            embed_dim: 24,
            bottleneck_dim: 16,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.variant.has_fc() && self.embed_dim == 0 {
            return Err(Error::config("L-adapter embed_dim must be positive"));
        }
        if self.variant == LAdapterVariant::Skip {
            validate_bottleneck(d_model, self.bottleneck_dim)?;
        }
        Ok(())
    }

    /// Width of `a_l`.
    pub fn output_dim(&self, d_model: usize) -> usize {
        if self.variant.has_fc() {
            self.embed_dim
        } else {
            d_model
        }
    }

    /// Scalars in one layer's transform (zero for `Weight`).
    pub fn param_count(&self, d_model: usize) -> usize {
        let (d, e) = (d_model, self.embed_dim);
        match self.variant {
            LAdapterVariant::Weight => 0,
            LAdapterVariant::Ln | LAdapterVariant::ActLn => Norm::param_count(d),
            LAdapterVariant::Fc | LAdapterVariant::FcAct => Linear::param_count(d, e),
            LAdapterVariant::FcLn | LAdapterVariant::Base => Linear::param_count(d, e) + Norm::param_count(e),
            LAdapterVariant::Skip => Bottleneck::param_count(d, self.bottleneck_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EAdapterConfig {
    pub bottleneck_dim: usize,
    pub activation: Activation,
}

impl EAdapterConfig {
    pub fn wavlm_base() -> Self {
        EAdapterConfig {
            bottleneck_dim: 256,
            activation: Activation::Gelu,
        }
    }

    pub fn toy() -> Self {
        EAdapterConfig {
            bottleneck_dim: 16,
            activation: Activation::Gelu,
        }
    }
}

/// A bottleneck must actually narrow the representation.
pub fn validate_bottleneck(d_model: usize, bottleneck: usize) -> Result<()> {
    if bottleneck == 0 || bottleneck >= d_model {
        return Err(Error::config(format!(
            "bottleneck_dim {bottleneck} must lie in 1..{d_model}"
        )));
    }
    Ok(())
}

/// `h + LN(up(act(down(h))))`.
///
/// Serves as the E-adapter, the Skip L-adapter and the conventional
/// adapter. The up-projection starts at zero, so a fresh module is an
/// exact identity map.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub down: Linear,
    pub up: Linear,
    pub ln: Norm,
    pub activation: Activation,
}

impl Bottleneck {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, d_model: usize, bottleneck: usize, activation: Activation) -> Result<Self> {
        validate_bottleneck(d_model, bottleneck)?;
        Ok(Bottleneck {
            down: Linear::declare(sink, &format!("{prefix}.down"), d_model, bottleneck)?,
            up: Linear::declare_with(sink, &format!("{prefix}.up"), bottleneck, d_model, Init::Zeros)?,
            ln: Norm::declare(sink, &format!("{prefix}.ln"), d_model)?,
            activation,
        })
    }

    pub fn param_count(d_model: usize, bottleneck: usize) -> usize {
        Linear::param_count(d_model, bottleneck) + Linear::param_count(bottleneck, d_model) + Norm::param_count(d_model)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.down.ids().to_vec();
        v.extend(self.up.ids());
        v.extend(self.ln.ids());
        v
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let z = self.down.forward(g, store, h)?;
        let z = self.activation.apply(g, z)?;
        let z = self.up.forward(g, store, z)?;
        let z = self.ln.forward(g, store, z)?;
        g.add(h, z)
    }
}

/// `f_l` for one tapped layer.
#[derive(Clone, Debug)]
pub enum LAdapter {
    Weight,
    Ln(Norm),
    ActLn(Activation, Norm),
    Fc(Linear),
    FcAct(Linear, Activation),
    FcLn(Linear, Norm),
    Base(Linear, Activation, Norm),
    Skip(Bottleneck),
}

impl LAdapter {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, d_model: usize, cfg: &LAdapterConfig) -> Result<Self> {
        cfg.validate(d_model)?;
        let act = cfg.activation;
        let e = cfg.embed_dim;
        Ok(match cfg.variant {
            LAdapterVariant::Weight => LAdapter::Weight,
            LAdapterVariant::Ln => LAdapter::Ln(Norm::declare(sink, &format!("{prefix}.ln"), d_model)?),
            LAdapterVariant::ActLn => LAdapter::ActLn(act, Norm::declare(sink, &format!("{prefix}.ln"), d_model)?),
            LAdapterVariant::Fc => LAdapter::Fc(Linear::declare(sink, &format!("{prefix}.fc"), d_model, e)?),
            LAdapterVariant::FcAct => LAdapter::FcAct(Linear::declare(sink, &format!("{prefix}.fc"), d_model, e)?, act),
            LAdapterVariant::FcLn => LAdapter::FcLn(
                Linear::declare(sink, &format!("{prefix}.fc"), d_model, e)?,
                Norm::declare(sink, &format!("{prefix}.ln"), e)?,
            ),
            LAdapterVariant::Base => LAdapter::Base(
                Linear::declare(sink, &format!("{prefix}.fc"), d_model, e)?,
                act,
                Norm::declare(sink, &format!("{prefix}.ln"), e)?,
            ),
            LAdapterVariant::Skip => {
                LAdapter::Skip(Bottleneck::declare(sink, prefix, d_model, cfg.bottleneck_dim, act)?)
            }
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            LAdapter::Weight => Vec::new(),
            LAdapter::Ln(n) | LAdapter::ActLn(_, n) => n.ids().to_vec(),
            LAdapter::Fc(l) | LAdapter::FcAct(l, _) => l.ids().to_vec(),
            LAdapter::FcLn(l, n) | LAdapter::Base(l, _, n) => l.ids().into_iter().chain(n.ids()).collect(),
            LAdapter::Skip(b) => b.ids(),
        }
    }

    /// `a_l = f_l(h_l)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        match self {
            LAdapter::Weight => Ok(h),
            LAdapter::Ln(n) => n.forward(g, store, h),
            LAdapter::ActLn(a, n) => {
                let z = a.apply(g, h)?;
                n.forward(g, store, z)
            }
            LAdapter::Fc(l) => l.forward(g, store, h),
            LAdapter::FcAct(l, a) => {
                let z = l.forward(g, store, h)?;
                a.apply(g, z)
            }
            LAdapter::FcLn(l, n) => {
                let z = l.forward(g, store, h)?;
                n.forward(g, store, z)
            }
            LAdapter::Base(l, a, n) => {
                let z = l.forward(g, store, h)?;
                let z = a.apply(g, z)?;
                n.forward(g, store, z)
            }
            LAdapter::Skip(b) => b.forward(g, store, h),
        }
    }
}

/// Free logits whose softmax gives the layer weights `w_l`.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub logits: ParamId,
    pub count: usize,
}

impl LayerWeights {
    /// Zero logits, i.e. uniform weights.
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("layer weights need at least one layer"));
        }
        Ok(LayerWeights {
            logits: sink.declare(&format!("{prefix}.logits"), &[count], Init::Zeros)?,
            count,
        })
    }

    pub fn normalized<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<f64> {
        let logits: Vec<f64> = store.value(self.logits).to_f64_vec();
        log_softmax_vec(&logits).into_iter().map(f64::exp).collect()
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Result<Var> {
        let l = g.param(store, self.logits)?;
        g.softmax(l, 0)
    }
}

/// `h* = Σ w_l a_l` with softmax-normalized weights.
pub fn aggregate<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, weights: &LayerWeights, adapted: &[Var]) -> Result<Var> {
    if adapted.len() != weights.count {
        return Err(Error::config(format!(
            "{} adapted layers for {} layer weights",
            adapted.len(),
            weights.count
        )));
    }
    let w = weights.forward(g, store)?;
    g.weighted_sum(w, adapted)
}

#[cfg(test)]
mod tests;
