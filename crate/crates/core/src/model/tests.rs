use super::*;
use crate::autodiff::{grad_check, GradCheck};
use crate::backbone::BackboneConfig;
use crate::testutil::{random, randomize, with_sink};

fn small_config(strategy: AdaptationStrategy, head: HeadConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            num_layers: 3,
            d_model: 8,
            num_heads: 2,
            d_ffn: 12,
            input_dim: 5,
            max_seq_len: 32,
        },
        l_adapter: LAdapterConfig {
            embed_dim: 6,
            bottleneck_dim: 3,
            ..LAdapterConfig::toy(LAdapterVariant::Base)
        },
        e_adapter: EAdapterConfig {
            bottleneck_dim: 3,
            activation: Activation::Gelu,
        },
        conventional: EAdapterConfig {
            bottleneck_dim: 4,
            activation: Activation::Gelu,
        },
        strategy,
        head,
    }
}

fn top_layer(model: &AdaptedModel, store: &ParamStore<f64>, feats: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let x = g.constant(feats.clone()).unwrap();
    let out = model.forward(&mut g, store, x).unwrap();
    g.value(out.backbone.top()).clone()
}

#[test]
fn fresh_adapters_leave_the_backbone_output_unchanged() {
    let feats = random::<f64>(&[6, 16], 1);
    let (bb, store) = Backbone::init::<f64>(BackboneConfig::toy(), 2).unwrap();
    let mut g = Graph::new();
    let x = g.constant(feats.clone()).unwrap();
    let plain = bb.forward(&mut g, &store, x, &[]).unwrap();
    let plain = g.value(plain.top()).clone();
    for s in [
        AdaptationStrategy::EAdaptersOnly,
        AdaptationStrategy::Conventional { l: 4 },
        AdaptationStrategy::proposed_full(4),
    ] {
        let cfg = ModelConfig::toy(s, HeadConfig::Ctc { vocab: 4 });
        let (m, st, _) = AdaptedModel::build(&bb, &store, cfg, 3).unwrap();
        assert_eq!(top_layer(&m, &st, &feats), plain, "{s}");
    }
}

#[test]
fn removing_adapters_recovers_the_plain_backbone() {
    let cfg = small_config(AdaptationStrategy::proposed_full(3), HeadConfig::Ctc { vocab: 3 });
    let (mut m, mut store) = with_sink(4, |s| AdaptedModel::declare(cfg, s).unwrap());
    randomize(&mut store, 5, 0.3);
    let feats = random::<f64>(&[5, 5], 6);
    let adapted = top_layer(&m, &store, &feats);

    let mut g = Graph::new();
    let x = g.constant(feats.clone()).unwrap();
    let plain = m.backbone.forward(&mut g, &store, x, &[]).unwrap();
    let plain = g.value(plain.top()).clone();
    assert!(adapted.max_abs_diff(&plain) > 1e-6);

    m.e_adapters.iter_mut().for_each(|e| *e = None);
    m.conventional.iter_mut().for_each(|c| *c = None);
    assert_eq!(top_layer(&m, &store, &feats), plain);
}

#[test]
fn hidden_is_the_top_layer_without_layer_weights() {
    for s in [AdaptationStrategy::FineTuneTop { l: 1 }, AdaptationStrategy::EAdaptersOnly] {
        let cfg = small_config(s, HeadConfig::Ctc { vocab: 3 });
        let (m, store) = with_sink(1, |sk| AdaptedModel::declare(cfg, sk).unwrap());
        let mut g = Graph::new();
        let x = g.constant(random::<f64>(&[4, 5], 2)).unwrap();
        let out = m.forward(&mut g, &store, x).unwrap();
        assert_eq!(out.hidden, out.backbone.top());
        assert!(out.adapted.is_empty());
    }
}

#[test]
fn proposed_taps_the_top_k_layers() {
    let cfg = small_config(AdaptationStrategy::Proposed { k: 2, l: 1 }, HeadConfig::Ctc { vocab: 3 });
    let (m, store) = with_sink(1, |s| AdaptedModel::declare(cfg, s).unwrap());
    assert_eq!(m.weighted_layers(), vec![2, 3]);
    assert_eq!(m.layer_weights(&store).unwrap(), vec![0.5, 0.5]);
    assert_eq!(m.e_adapters.iter().map(Option::is_some).collect::<Vec<_>>(), vec![false, true, false]);
    assert!(store.id("e_adapters.1.up.w").is_some());
    assert!(store.id("l_adapters.0.fc.w").is_none());
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for (s, head, target) in [
        (AdaptationStrategy::proposed_full(3), HeadConfig::Ctc { vocab: 3 }, Target::Sequence(vec![1, 3, 3])),
        (AdaptationStrategy::Conventional { l: 2 }, HeadConfig::Cls { hidden: 5, classes: 3 }, Target::Class(2)),
    ] {
        let cfg = small_config(s, head);
        let (m, mut store) = with_sink(7, |sk| AdaptedModel::declare(cfg, sk).unwrap());
        randomize(&mut store, 8, 0.3);
        apply_strategy(&m, &mut store).unwrap();
        let feats = random::<f64>(&[6, 5], 9);
        let r = grad_check(
            &store,
            |g, st| m.loss(g, st, &feats, &target),
            &GradCheck {
                max_coords: Some(400),
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{s}: {r:?}");
    }
}

#[test]
fn loss_requires_a_matching_target() {
    let cfg = small_config(AdaptationStrategy::LAdaptersOnly, HeadConfig::Ctc { vocab: 3 });
    let (m, store) = with_sink(1, |s| AdaptedModel::declare(cfg, s).unwrap());
    let feats = random::<f64>(&[4, 5], 0);
    let mut g = Graph::new();
    assert!(m.loss(&mut g, &store, &feats, &Target::Class(0)).is_err());
    assert!(m.classify(&mut g, &store, &feats).is_err());
    assert!(m.loss(&mut g, &store, &feats, &Target::Sequence(vec![2])).is_ok());
}

#[test]
fn attach_rejects_mismatched_backbones_and_ranges() {
    let (bb, _) = Backbone::init::<f64>(BackboneConfig::toy(), 0).unwrap();
    let cfg = small_config(AdaptationStrategy::EAdaptersOnly, HeadConfig::Ctc { vocab: 3 });
    assert!(with_sink(0, |s| AdaptedModel::attach(bb.clone(), cfg, s).map(|_| ())).0.is_err());
    let cfg = ModelConfig::toy(AdaptationStrategy::Proposed { k: 5, l: 0 }, HeadConfig::Ctc { vocab: 3 });
    assert!(with_sink(0, |s| AdaptedModel::attach(bb, cfg, s).map(|_| ())).0.is_err());
}

#[test]
fn build_freezes_the_backbone() {
    let (bb, store) = Backbone::init::<f32>(BackboneConfig::toy(), 0).unwrap();
    let cfg = ModelConfig::toy(AdaptationStrategy::proposed_full(4), HeadConfig::Ctc { vocab: 4 });
    let (m, st, set) = AdaptedModel::build(&bb, &store, cfg.clone(), 1).unwrap();
    for id in bb.ids() {
        let is_norm = bb.layers.iter().any(|l| l.norm_ids().contains(&id));
        assert_eq!(st.is_trainable(id), is_norm);
    }
    assert_eq!(st.trainable_numel(), crate::adapters::count_learnable_params(&cfg).unwrap().trainable);
    assert_eq!(set.ids.len(), st.trainable_ids().len());
    assert_eq!(m.head_input_dim_check(), cfg.head_input_dim());
}

impl AdaptedModel {
    fn head_input_dim_check(&self) -> usize {
        match &self.head {
            Head::Ctc(h) => h.fc.in_dim,
            Head::Cls(h) => h.fc1.in_dim,
        }
    }
}

#[test]
fn config_serializes() {
    let cfg = ModelConfig::toy(AdaptationStrategy::Proposed { k: 3, l: 2 }, HeadConfig::Cls { hidden: 32, classes: 4 })
        .with_activation(Activation::Relu);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    assert_eq!(cfg.conventional.activation, Activation::Gelu);
}

#[test]
fn toy_proposed_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig::toy(AdaptationStrategy::proposed_full(4), HeadConfig::Ctc { vocab: 5 });
    let (m, mut store) = with_sink(21, |sk| AdaptedModel::declare(cfg, sk).unwrap());
    randomize(&mut store, 22, 0.2);
    apply_strategy(&m, &mut store).unwrap();
    let feats = random::<f64>(&[12, 16], 23);
    let target = Target::Sequence(vec![2, 5, 5, 1]);
    let r = grad_check(
        &store,
        |g, st| m.loss(g, st, &feats, &target),
        &GradCheck {
            max_coords: Some(250),
            ..GradCheck::default()
        },
    )
    .unwrap();
    assert!(r.coords_checked >= 200);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}
