//! Closed-form parameter counts. These are computed from the configuration
//! alone and are cross-checked against enumeration of instantiated models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdaptationStrategy, Bottleneck, Component, LAdapterConfig, LAdapterVariant};
use crate::backbone::BackboneConfig;
use crate::model::ModelConfig;
use crate::nn::Linear;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub strategy: String,
    /// Trainable scalars per component.
    pub trainable_by_component: BTreeMap<Component, usize>,
    pub trainable: usize,
    pub total: usize,
    pub head: usize,
    pub ratio: f64,
    /// `(trainable − head) / (total − head)`.
    pub ratio_excluding_head: f64,
}

/// Learnable parameters attributable to one L-adapter configuration over
/// every encoder layer: the per-layer transforms, or for `Weight` (which
/// has no transform) the layer weights themselves.
pub fn l_adapter_config_params(cfg: &LAdapterConfig, backbone: &BackboneConfig) -> usize {
    let layers = backbone.num_layers;
    match cfg.variant {
        LAdapterVariant::Weight => layers,
        _ => layers * cfg.param_count(backbone.d_model),
    }
}

pub fn count_learnable_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let bb = &cfg.backbone;
    bb.validate()?;
    let strategy = cfg.strategy;
    strategy.validate(bb.num_layers)?;
    let layers = bb.num_layers;
    let d = bb.d_model;

    let k = strategy.l_adapter_layers(layers).len();
    let e = strategy.e_adapter_layers(layers).len();
    let c = strategy.conventional_layers(layers).len();
    let f = strategy.fine_tuned_layers(layers).len();

    let l_adapters = k * cfg.l_adapter.param_count(d);
    let weights = if strategy.has_layer_weights() { k } else { 0 };
    let e_adapters = e * Bottleneck::param_count(d, cfg.e_adapter.bottleneck_dim);
    let conventional = c * 2 * Bottleneck::param_count(d, cfg.conventional.bottleneck_dim);
    let head = cfg.head.param_count(cfg.head_input_dim());

    let norms_per_layer = bb.layer_norm_param_count();
    let mut by = BTreeMap::new();
    if f > 0 {
        by.insert(Component::EncoderLayers, f * (bb.layer_param_count() - norms_per_layer));
    }
    let norm_layers = if strategy.trains_encoder_norms() { layers } else { f };
    if norm_layers > 0 {
        by.insert(Component::EncoderNorms, norm_layers * norms_per_layer);
    }
    for (comp, n) in [
        (Component::LAdapters, l_adapters),
        (Component::LayerWeights, weights),
        (Component::EAdapters, e_adapters),
        (Component::ConventionalAdapters, conventional),
        (Component::Head, head),
    ] {
        if n > 0 {
            by.insert(comp, n);
        }
    }
    let trainable: usize = by.values().sum();
    let total = bb.param_count() + l_adapters + weights + e_adapters + conventional + head;
    debug_assert_eq!(Linear::param_count(bb.input_dim, d) + layers * bb.layer_param_count(), bb.param_count());
    let excl = |a: usize, b: usize| if b == head { 0.0 } else { (a - head) as f64 / (b - head) as f64 };
    Ok(ParamReport {
        strategy: strategy_label(&strategy),
        trainable_by_component: by,
        trainable,
        total,
        head,
        ratio: trainable as f64 / total as f64,
        ratio_excluding_head: excl(trainable, total),
    })
}

fn strategy_label(s: &AdaptationStrategy) -> String {
    s.to_string()
}
