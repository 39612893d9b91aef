use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar};
use crate::model::AdaptedModel;
use crate::{Error, Result};

/// Which parameters a downstream run trains. Layer counts are taken from
/// the top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptationStrategy {
    /// Unfreeze the top `l` encoder layers.
    FineTuneTop { l: usize },
    /// Paired adapters after MHSA and after the FFN in the top `l` layers.
    Conventional { l: usize },
    /// L-adapters on the top `k` layers, E-adapters on `l` layers starting
    /// from the second layer from the top.
    Proposed { k: usize, l: usize },
    LAdaptersOnly,
    EAdaptersOnly,
}

impl AdaptationStrategy {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |what: String| Err(Error::config(what));
        match *self {
            AdaptationStrategy::FineTuneTop { l } | AdaptationStrategy::Conventional { l } if l > num_layers => {
                bad(format!("{self}: l must be at most {num_layers}"))
            }
            AdaptationStrategy::Proposed { k, .. } if k == 0 || k > num_layers => {
                bad(format!("{self}: k must lie in 1..={num_layers}"))
            }
            AdaptationStrategy::Proposed { l, .. } if l + 1 > num_layers => {
                bad(format!("{self}: l must lie in 0..={}", num_layers - 1))
            }
            _ => Ok(()),
        }
    }

    /// Encoder layers (0-based) feeding L-adapters.
    pub fn l_adapter_layers(&self, num_layers: usize) -> Range<usize> {
        match *self {
            AdaptationStrategy::Proposed { k, .. } => num_layers - k..num_layers,
            AdaptationStrategy::LAdaptersOnly => 0..num_layers,
            _ => 0..0,
        }
    }

    /// Encoder layers (0-based) holding an E-adapter.
    pub fn e_adapter_layers(&self, num_layers: usize) -> Range<usize> {
        match *self {
            // second-from-top downwards: L-1-l ..= L-2
            AdaptationStrategy::Proposed { l, .. } => num_layers - 1 - l..num_layers - 1,
            AdaptationStrategy::EAdaptersOnly => 0..num_layers,
            _ => 0..0,
        }
    }

    pub fn conventional_layers(&self, num_layers: usize) -> Range<usize> {
        match *self {
            AdaptationStrategy::Conventional { l } => num_layers - l..num_layers,
            _ => 0..0,
        }
    }

    pub fn fine_tuned_layers(&self, num_layers: usize) -> Range<usize> {
        match *self {
            AdaptationStrategy::FineTuneTop { l } => num_layers - l..num_layers,
            _ => 0..0,
        }
    }

    pub fn has_layer_weights(&self) -> bool {
        matches!(self, AdaptationStrategy::Proposed { .. } | AdaptationStrategy::LAdaptersOnly)
    }

    /// Encoder LayerNorms are trainable for every adapter-based strategy.
    pub fn trains_encoder_norms(&self) -> bool {
        !matches!(self, AdaptationStrategy::FineTuneTop { .. })
    }

    pub fn family(&self) -> &'static str {
        match self {
            AdaptationStrategy::FineTuneTop { .. } => "finetune",
            AdaptationStrategy::Conventional { .. } => "conventional",
            AdaptationStrategy::Proposed { .. } => "proposed",
            AdaptationStrategy::LAdaptersOnly => "l_adapters_only",
            AdaptationStrategy::EAdaptersOnly => "e_adapters_only",
        }
    }

    /// `(k, l)` columns for reports; `None` where the axis does not apply.
    pub fn axes(&self) -> (Option<usize>, Option<usize>) {
        match *self {
            AdaptationStrategy::FineTuneTop { l } | AdaptationStrategy::Conventional { l } => (None, Some(l)),
            AdaptationStrategy::Proposed { k, l } => (Some(k), Some(l)),
            _ => (None, None),
        }
    }

    /// The full proposed configuration: L-adapters everywhere, E-adapters on
    /// all but the top layer.
    pub fn proposed_full(num_layers: usize) -> Self {
        AdaptationStrategy::Proposed {
            k: num_layers,
            l: num_layers - 1,
        }
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AdaptationStrategy::FineTuneTop { l } => write!(f, "finetune:{l}"),
            AdaptationStrategy::Conventional { l } => write!(f, "conventional:{l}"),
            AdaptationStrategy::Proposed { k, l } => write!(f, "proposed:{k}:{l}"),
            AdaptationStrategy::LAdaptersOnly => f.write_str("l_adapters_only"),
            AdaptationStrategy::EAdaptersOnly => f.write_str("e_adapters_only"),
        }
    }
}

impl std::str::FromStr for AdaptationStrategy {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `proposed:4:3`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::Parse(format!("strategy {s} is missing a layer count")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad layer count in {s}")))
        };
        let st = match parts[0] {
            "finetune" => AdaptationStrategy::FineTuneTop { l: num(1)? },
            "conventional" => AdaptationStrategy::Conventional { l: num(1)? },
            "proposed" => AdaptationStrategy::Proposed { k: num(1)?, l: num(2)? },
            "l_adapters_only" | "l-adapters-only" => AdaptationStrategy::LAdaptersOnly,
            "e_adapters_only" | "e-adapters-only" => AdaptationStrategy::EAdaptersOnly,
            other => return Err(Error::Parse(format!("unknown strategy {other}"))),
        };
        Ok(st)
    }
}

/// Parameter groups used for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Frontend,
    /// Attention and FFN weights of encoder layers.
    EncoderLayers,
    EncoderNorms,
    LAdapters,
    LayerWeights,
    EAdapters,
    ConventionalAdapters,
    Head,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Frontend => "frontend",
            Component::EncoderLayers => "encoder_layers",
            Component::EncoderNorms => "encoder_norms",
            Component::LAdapters => "l_adapters",
            Component::LayerWeights => "layer_weights",
            Component::EAdapters => "e_adapters",
            Component::ConventionalAdapters => "conventional_adapters",
            Component::Head => "head",
        }
    }
}

/// The parameters a strategy trains, grouped by component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainableSet {
    pub ids: BTreeSet<ParamId>,
    pub by_component: BTreeMap<Component, Vec<ParamId>>,
}

impl TrainableSet {
    fn add(&mut self, c: Component, ids: impl IntoIterator<Item = ParamId>) {
        let entry = self.by_component.entry(c).or_default();
        for id in ids {
            if self.ids.insert(id) {
                entry.push(id);
            }
        }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.ids.contains(&id)
    }
}

/// Component of every parameter in the assembled model.
pub fn components(model: &AdaptedModel) -> BTreeMap<ParamId, Component> {
    let mut m = BTreeMap::new();
    for id in model.backbone.frontend.ids() {
        m.insert(id, Component::Frontend);
    }
    for layer in &model.backbone.layers {
        for id in layer.ids() {
            m.insert(id, Component::EncoderLayers);
        }
        for id in layer.norm_ids() {
            m.insert(id, Component::EncoderNorms);
        }
    }
    for a in model.l_adapters.iter().flatten() {
        for id in a.ids() {
            m.insert(id, Component::LAdapters);
        }
    }
    if let Some(w) = &model.layer_weights {
        m.insert(w.logits, Component::LayerWeights);
    }
    for e in model.e_adapters.iter().flatten() {
        for id in e.ids() {
            m.insert(id, Component::EAdapters);
        }
    }
    for (a, b) in model.conventional.iter().flatten() {
        for id in a.ids().into_iter().chain(b.ids()) {
            m.insert(id, Component::ConventionalAdapters);
        }
    }
    for id in model.head.ids() {
        m.insert(id, Component::Head);
    }
    m
}

/// The exact trainable set implied by the model's strategy.
pub fn trainable_set(model: &AdaptedModel) -> TrainableSet {
    let strategy = model.config.strategy;
    let bb = &model.backbone;
    let mut set = TrainableSet::default();
    for i in strategy.fine_tuned_layers(bb.num_layers()) {
        let layer = &bb.layers[i];
        let norms: BTreeSet<ParamId> = layer.norm_ids().into_iter().collect();
        set.add(Component::EncoderLayers, layer.ids().into_iter().filter(|id| !norms.contains(id)));
        set.add(Component::EncoderNorms, norms);
    }
    if strategy.trains_encoder_norms() {
        for layer in &bb.layers {
            set.add(Component::EncoderNorms, layer.norm_ids());
        }
    }
    for a in model.l_adapters.iter().flatten() {
        set.add(Component::LAdapters, a.ids());
    }
    if let Some(w) = &model.layer_weights {
        set.add(Component::LayerWeights, [w.logits]);
    }
    for e in model.e_adapters.iter().flatten() {
        set.add(Component::EAdapters, e.ids());
    }
    for (a, b) in model.conventional.iter().flatten() {
        set.add(Component::ConventionalAdapters, a.ids().into_iter().chain(b.ids()));
    }
    set.add(Component::Head, model.head.ids());
    set.by_component.retain(|_, v| !v.is_empty());
    set
}

/// Freezes everything, then unfreezes exactly the strategy's trainable set.
pub fn apply_strategy<S: Scalar>(model: &AdaptedModel, store: &mut ParamStore<S>) -> Result<TrainableSet> {
    model.config.strategy.validate(model.backbone.num_layers())?;
    let set = trainable_set(model);
    store.freeze_all();
    for &id in &set.ids {
        if id.index() >= store.len() {
            return Err(Error::UnknownParam(format!("#{}", id.index())));
        }
        store.set_trainable(id, true);
    }
    Ok(set)
}
