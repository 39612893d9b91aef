//! The assembled downstream model: frozen backbone, the adapters a
//! strategy attaches, the layer weighting and a head.

use serde::{Deserialize, Serialize};

use crate::adapters::{
    aggregate, apply_strategy, AdaptationStrategy, Bottleneck, EAdapterConfig, LAdapter, LAdapterConfig,
    LAdapterVariant, LayerWeights, TrainableSet,
};
use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, LayerHooks};
use crate::heads::{ctc_loss, ClsOutput, Head, HeadConfig};
use crate::nn::{Activation, ParamSink, ShapeInventory, StoreSink};
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub strategy: AdaptationStrategy,
    pub l_adapter: LAdapterConfig,
    pub e_adapter: EAdapterConfig,
    /// Width and activation of the conventional baseline's adapters.
    pub conventional: EAdapterConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn toy(strategy: AdaptationStrategy, head: HeadConfig) -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            strategy,
            l_adapter: LAdapterConfig::toy(LAdapterVariant::Base),
            e_adapter: EAdapterConfig::toy(),
            conventional: EAdapterConfig {
                activation: Activation::Gelu,
                ..EAdapterConfig::toy()
            },
            head,
        }
    }

    pub fn wavlm_base(strategy: AdaptationStrategy, variant: LAdapterVariant, head: HeadConfig) -> Self {
        ModelConfig {
            backbone: BackboneConfig::wavlm_base(),
            strategy,
            l_adapter: LAdapterConfig::wavlm_base(variant),
            e_adapter: EAdapterConfig::wavlm_base(),
            conventional: EAdapterConfig::wavlm_base(),
            head,
        }
    }

    /// Width of the representation the head sees.
    pub fn head_input_dim(&self) -> usize {
        if self.strategy.has_layer_weights() {
            self.l_adapter.output_dim(self.backbone.d_model)
        } else {
            self.backbone.d_model
        }
    }

    /// Sets the task activation on every adapter (ReLU for speaker and
    /// emotion style tasks, GELU for content tasks).
    pub fn with_activation(mut self, act: Activation) -> Self {
        self.l_adapter.activation = act;
        self.e_adapter.activation = act;
        self
    }
}

#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// One slot per encoder layer.
    pub l_adapters: Vec<Option<LAdapter>>,
    pub layer_weights: Option<LayerWeights>,
    pub e_adapters: Vec<Option<Bottleneck>>,
    /// (after MHSA, after FFN) per layer.
    pub conventional: Vec<Option<(Bottleneck, Bottleneck)>>,
    pub head: Head,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    /// `a_l` for the tapped layers, bottom to top.
    pub adapted: Vec<Var>,
    /// Representation handed to the head (`h*`, or `h_L` without L-adapters).
    pub hidden: Var,
}

impl AdaptedModel {
    /// Declares backbone, adapters and head in one go.
    pub fn declare(config: ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        let backbone = Backbone::declare(config.backbone.clone(), sink)?;
        Self::attach(backbone, config, sink)
    }

    /// Declares the adapters and head for an existing backbone.
    pub fn attach(backbone: Backbone, config: ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        if backbone.config != config.backbone {
            return Err(Error::config("backbone does not match model configuration"));
        }
        let n = backbone.num_layers();
        let d = backbone.config.d_model;
        config.strategy.validate(n)?;

        let mut l_adapters: Vec<Option<LAdapter>> = (0..n).map(|_| None).collect();
        for i in config.strategy.l_adapter_layers(n) {
            l_adapters[i] = Some(LAdapter::declare(sink, &format!("l_adapters.{i}"), d, &config.l_adapter)?);
        }
        let tapped = config.strategy.l_adapter_layers(n).len();
        let layer_weights = if config.strategy.has_layer_weights() {
            Some(LayerWeights::declare(sink, "layer_weights", tapped)?)
        } else {
            None
        };
        let mut e_adapters: Vec<Option<Bottleneck>> = (0..n).map(|_| None).collect();
        for i in config.strategy.e_adapter_layers(n) {
            let e = &config.e_adapter;
            e_adapters[i] = Some(Bottleneck::declare(sink, &format!("e_adapters.{i}"), d, e.bottleneck_dim, e.activation)?);
        }
        let mut conventional: Vec<Option<(Bottleneck, Bottleneck)>> = (0..n).map(|_| None).collect();
        for i in config.strategy.conventional_layers(n) {
            let c = &config.conventional;
            conventional[i] = Some((
                Bottleneck::declare(sink, &format!("conventional.{i}.attn"), d, c.bottleneck_dim, c.activation)?,
                Bottleneck::declare(sink, &format!("conventional.{i}.ffn"), d, c.bottleneck_dim, c.activation)?,
            ));
        }
        let head = Head::declare(sink, config.head_input_dim(), &config.head)?;
        Ok(AdaptedModel {
            config,
            backbone,
            l_adapters,
            layer_weights,
            e_adapters,
            conventional,
            head,
        })
    }

    /// Attaches adapters and head to a copy of a (pretrained) backbone store
    /// and applies the strategy's freeze mask.
    pub fn build<S: Scalar>(
        backbone: &Backbone,
        backbone_store: &ParamStore<S>,
        config: ModelConfig,
        seed: u64,
    ) -> Result<(Self, ParamStore<S>, TrainableSet)> {
        let mut store = backbone_store.clone();
        let mut rng = SeedStream::new(seed).rng("adapters");
        let model = AdaptedModel::attach(
            backbone.clone(),
            config,
            &mut StoreSink {
                store: &mut store,
                rng: &mut rng,
            },
        )?;
        let set = apply_strategy(&model, &mut store)?;
        Ok((model, store, set))
    }

    /// Shape-only instantiation, for presets too large to allocate.
    pub fn inventory(config: ModelConfig) -> Result<(Self, ShapeInventory)> {
        let mut inv = ShapeInventory::default();
        let model = AdaptedModel::declare(config, &mut inv)?;
        Ok((model, inv))
    }

    pub fn hooks(&self) -> Vec<LayerHooks<'_>> {
        (0..self.backbone.num_layers())
            .map(|i| LayerHooks {
                after_attention: self.conventional[i].as_ref().map(|(a, _)| a),
                after_ffn: self.e_adapters[i]
                    .as_ref()
                    .or_else(|| self.conventional[i].as_ref().map(|(_, b)| b)),
            })
            .collect()
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, features: Var) -> Result<ModelOutput> {
        let hooks = self.hooks();
        let out = self.backbone.forward(g, store, features, &hooks)?;
        let mut adapted = Vec::new();
        for (i, slot) in self.l_adapters.iter().enumerate() {
            if let Some(a) = slot {
                adapted.push(a.forward(g, store, out.layers[i])?);
            }
        }
        let hidden = match &self.layer_weights {
            Some(w) => aggregate(g, store, w, &adapted)?,
            None => out.top(),
        };
        Ok(ModelOutput {
            backbone: out,
            adapted,
            hidden,
        })
    }

    /// Per-frame CTC logits.
    pub fn ctc_logits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, features: &Tensor<S>) -> Result<Var> {
        let Head::Ctc(head) = &self.head else {
            return Err(Error::config("model has no CTC head"));
        };
        let x = g.constant(features.clone())?;
        let out = self.forward(g, store, x)?;
        head.forward(g, store, out.hidden)
    }

    pub fn classify<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, features: &Tensor<S>) -> Result<ClsOutput> {
        let Head::Cls(head) = &self.head else {
            return Err(Error::config("model has no classification head"));
        };
        let x = g.constant(features.clone())?;
        let out = self.forward(g, store, x)?;
        head.forward(g, store, out.hidden)
    }

    /// Per-utterance loss: CTC against a label sequence, or cross-entropy
    /// against a class index.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, features: &Tensor<S>, target: &Target) -> Result<Var> {
        match (&self.head, target) {
            (Head::Ctc(_), Target::Sequence(labels)) => {
                let logits = self.ctc_logits(g, store, features)?;
                ctc_loss(g, logits, labels)
            }
            (Head::Cls(_), Target::Class(c)) => {
                let out = self.classify(g, store, features)?;
                g.cross_entropy(out.logits, *c)
            }
            _ => Err(Error::config("target kind does not match the model head")),
        }
    }

    /// Normalized layer weights, if the strategy has them.
    pub fn layer_weights<S: Scalar>(&self, store: &ParamStore<S>) -> Option<Vec<f64>> {
        self.layer_weights.as_ref().map(|w| w.normalized(store))
    }

    /// 1-based encoder layer index of each layer weight.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.l_adapters
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_some())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Sequence(Vec<usize>),
    Class(usize),
}

#[cfg(test)]
mod tests;
