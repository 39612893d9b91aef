use proptest::prelude::*;

use super::*;
use crate::autodiff::{grad_check, GradCheck, Tensor};
use crate::backbone::BackboneConfig;
use crate::heads::HeadConfig;
use crate::model::{AdaptedModel, ModelConfig};
use crate::testutil::{probe, random, randomize, unfreeze, with_sink};

fn all_strategies(layers: usize) -> Vec<AdaptationStrategy> {
    let mut v = vec![AdaptationStrategy::LAdaptersOnly, AdaptationStrategy::EAdaptersOnly];
    for l in 0..=layers {
        v.push(AdaptationStrategy::FineTuneTop { l });
        v.push(AdaptationStrategy::Conventional { l });
    }
    for k in 1..=layers {
        for l in 0..layers {
            v.push(AdaptationStrategy::Proposed { k, l });
        }
    }
    v
}

#[test]
fn weight_variant_is_identity() {
    let cfg = LAdapterConfig::toy(LAdapterVariant::Weight);
    let (a, store) = with_sink(0, |s| LAdapter::declare(s, "l", 32, &cfg).unwrap());
    assert!(a.ids().is_empty());
    let h = random::<f64>(&[5, 32], 1);
    let mut g = Graph::new();
    let x = g.constant(h.clone()).unwrap();
    let y = a.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y), &h);
}

#[test]
fn ln_variant_on_constant_rows_gives_beta() {
    let cfg = LAdapterConfig::toy(LAdapterVariant::Ln);
    let (a, mut store) = with_sink(0, |s| LAdapter::declare(s, "l", 4, &cfg).unwrap());
    let beta = store.id("l.ln.beta").unwrap();
    *store.value_mut(beta) = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![3.0; 4], vec![-7.0; 4]]).unwrap()).unwrap();
    let y = a.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.0, 0.5, -1.0, 2.0, 0.0]);
}

#[test]
fn variant_output_widths_and_counts() {
    for v in LAdapterVariant::ALL {
        let cfg = LAdapterConfig::toy(v);
        let (a, store) = with_sink(2, |s| LAdapter::declare(s, "l", 32, &cfg).unwrap());
        assert_eq!(store.total_numel(), cfg.param_count(32), "{v}");
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[3, 32], 3)).unwrap();
        let y = a.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, cfg.output_dim(32)], "{v}");
    }
}

#[test]
fn variant_names_round_trip() {
    for v in LAdapterVariant::ALL {
        assert_eq!(v.name().parse::<LAdapterVariant>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<LAdapterVariant>(&json).unwrap(), v);
    }
    assert_eq!("fc_ln".parse::<LAdapterVariant>().unwrap(), LAdapterVariant::FcLn);
    assert!("conv".parse::<LAdapterVariant>().is_err());
}

#[test]
fn variant_gradients_match_finite_differences() {
    for v in LAdapterVariant::ALL {
        let cfg = LAdapterConfig {
            embed_dim: 5,
            bottleneck_dim: 3,
            ..LAdapterConfig::toy(v)
        };
        let (a, mut store) = with_sink(4, |s| LAdapter::declare(s, "l", 6, &cfg).unwrap());
        randomize(&mut store, 5, 0.5);
        unfreeze(&mut store);
        let h = random::<f64>(&[4, 6], 6);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.leaf(h.clone())?;
            let y = a.forward(g, s, x)?;
            probe(g, y, 7)
        };
        if store.is_empty() {
            continue;
        }
        let r = grad_check(&store, f, &GradCheck::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{v}: {r:?}");
    }
}

#[test]
fn fresh_bottleneck_is_an_exact_identity() {
    let (b, store) = with_sink(9, |s| Bottleneck::declare(s, "e", 32, 16, Activation::Gelu).unwrap());
    let h = random::<f32>(&[7, 32], 10);
    let mut g = Graph::new();
    let x = g.constant(h.clone()).unwrap();
    let y = b.forward(&mut g, &store.cast::<f32>(), x).unwrap();
    assert_eq!(g.value(y), &h);
    // but not a constant function of its parameters
    assert!(store.value(b.down.w).data().iter().any(|v| *v != 0.0));
}

#[test]
fn bottleneck_width_is_validated() {
    for bad in [0, 32, 40] {
        let (r, _) = with_sink(0, |s| Bottleneck::declare(s, "e", 32, bad, Activation::Relu).map(|_| ()));
        assert!(r.is_err(), "{bad}");
    }
    let cfg = LAdapterConfig {
        bottleneck_dim: 32,
        ..LAdapterConfig::toy(LAdapterVariant::Skip)
    };
    assert!(cfg.validate(32).is_err());
}

#[test]
fn bottleneck_gradient_through_residual() {
    let (b, mut store) = with_sink(1, |s| Bottleneck::declare(s, "e", 6, 3, Activation::Relu).unwrap());
    randomize(&mut store, 2, 0.7);
    unfreeze(&mut store);
    let h = random::<f64>(&[5, 6], 3);
    let r = grad_check(
        &store,
        |g, s| {
            let x = g.constant(h.clone())?;
            let y = b.forward(g, s, x)?;
            probe(g, y, 4)
        },
        &GradCheck::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    // the residual contributes an identity term to dy/dh
    let mut g = Graph::<f64>::new();
    let x = g.leaf(h.clone()).unwrap();
    let y = b.forward(&mut g, &store, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap().shape(), &[5, 6]);
}

#[test]
fn aggregate_closed_form_weights() {
    let (w, mut store) = with_sink(0, |s| LayerWeights::declare(s, "w", 2).unwrap());
    *store.value_mut(w.logits) = Tensor::vector(vec![3f64.ln(), 0.0]);
    let n = w.normalized(&store);
    assert!((n[0] - 0.75).abs() < 1e-15 && (n[1] - 0.25).abs() < 1e-15);

    let a1 = random::<f64>(&[3, 4], 1);
    let a2 = random::<f64>(&[3, 4], 2);
    let mut g = Graph::new();
    let v1 = g.constant(a1.clone()).unwrap();
    let v2 = g.constant(a2.clone()).unwrap();
    let h = aggregate(&mut g, &store, &w, &[v1, v2]).unwrap();
    for ((y, p), q) in g.value(h).data().iter().zip(a1.data()).zip(a2.data()) {
        assert!((y - (0.75 * p + 0.25 * q)).abs() < 1e-12);
    }
}

#[test]
fn zero_logits_are_uniform_and_counts_must_match() {
    let (w, store) = with_sink(0, |s| LayerWeights::declare(s, "w", 5).unwrap());
    for x in w.normalized(&store) {
        assert!((x - 0.2).abs() < 1e-15);
    }
    let mut g = Graph::new();
    let v = g.constant(random::<f64>(&[2, 2], 0)).unwrap();
    assert!(aggregate(&mut g, &store, &w, &[v, v]).is_err());
    assert!(with_sink(0, |s| LayerWeights::declare(s, "w", 0)).0.is_err());
}

proptest! {
    #[test]
    fn layer_weights_form_a_distribution(logits in prop::collection::vec(-20.0f64..20.0, 1..13), shift in -50.0f64..50.0) {
        let n = logits.len();
        let (w, mut store) = with_sink(0, |s| LayerWeights::declare(s, "w", n).unwrap());
        *store.value_mut(w.logits) = Tensor::vector(logits.clone());
        let a = w.normalized(&store);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(a.iter().all(|x| *x > 0.0));

        *store.value_mut(w.logits) = Tensor::vector(logits.iter().map(|x| x + shift).collect());
        let b = w.normalized(&store);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_are_a_fixed_point(logits in prop::collection::vec(-5.0f64..5.0, 1..6), seed in 0u64..1000) {
        let n = logits.len();
        let (w, mut store) = with_sink(0, |s| LayerWeights::declare(s, "w", n).unwrap());
        *store.value_mut(w.logits) = Tensor::vector(logits);
        let a = random::<f64>(&[3, 4], seed);
        let mut g = Graph::new();
        let v = g.constant(a.clone()).unwrap();
        let h = aggregate(&mut g, &store, &w, &vec![v; n]).unwrap();
        prop_assert!(g.value(h).max_abs_diff(&a) < 1e-12);
    }
}

#[test]
fn strategy_layer_ranges() {
    let s = AdaptationStrategy::Proposed { k: 2, l: 1 };
    assert_eq!(s.l_adapter_layers(4), 2..4);
    assert_eq!(s.e_adapter_layers(4), 2..3);
    let full = AdaptationStrategy::proposed_full(4);
    assert_eq!(full.l_adapter_layers(4), 0..4);
    assert_eq!(full.e_adapter_layers(4), 0..3);
    assert_eq!(AdaptationStrategy::Proposed { k: 1, l: 0 }.e_adapter_layers(4), 3..3);
    assert_eq!(AdaptationStrategy::Conventional { l: 3 }.conventional_layers(4), 1..4);
    assert_eq!(AdaptationStrategy::FineTuneTop { l: 1 }.fine_tuned_layers(4), 3..4);
}

#[test]
fn strategy_text_forms_round_trip() {
    for s in all_strategies(4) {
        assert_eq!(s.to_string().parse::<AdaptationStrategy>().unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<AdaptationStrategy>(&json).unwrap(), s);
    }
    assert!("proposed:4".parse::<AdaptationStrategy>().is_err());
    assert!("lora:2".parse::<AdaptationStrategy>().is_err());
}

fn toy_model(strategy: AdaptationStrategy, head: HeadConfig) -> (AdaptedModel, ParamStore<f64>, TrainableSet) {
    let cfg = ModelConfig::toy(strategy, head);
    let (m, mut store) = with_sink(3, |s| AdaptedModel::declare(cfg, s).unwrap());
    let set = apply_strategy(&m, &mut store).unwrap();
    (m, store, set)
}

#[test]
fn strategy_partitions_parameters() {
    for s in all_strategies(4) {
        let (m, store, set) = toy_model(s, HeadConfig::Ctc { vocab: 5 });
        let trainable: std::collections::BTreeSet<_> = store.trainable_ids().into_iter().collect();
        let frozen: std::collections::BTreeSet<_> = store.frozen_ids().into_iter().collect();
        assert_eq!(trainable, set.ids, "{s}");
        assert!(trainable.is_disjoint(&frozen));
        assert_eq!(trainable.len() + frozen.len(), store.len());
        // every parameter has exactly one component
        assert_eq!(components(&m).len(), store.len());
        // the head is always trainable, the frontend never
        assert!(m.head.ids().iter().all(|id| set.contains(*id)));
        assert!(m.backbone.frontend.ids().iter().all(|id| !set.contains(*id)));
    }
}

#[test]
fn finetune_zero_leaves_only_the_head() {
    let (m, store, set) = toy_model(AdaptationStrategy::FineTuneTop { l: 0 }, HeadConfig::Cls { hidden: 32, classes: 4 });
    assert_eq!(set.by_component.keys().copied().collect::<Vec<_>>(), vec![Component::Head]);
    let head: usize = m.head.ids().iter().map(|id| store.value(*id).numel()).sum();
    assert_eq!(store.trainable_numel(), head);
}

#[test]
fn l_adapters_only_keeps_encoder_weights_frozen() {
    let (m, _, set) = toy_model(AdaptationStrategy::LAdaptersOnly, HeadConfig::Ctc { vocab: 5 });
    for layer in &m.backbone.layers {
        let norms = layer.norm_ids();
        for id in layer.ids() {
            assert_eq!(set.contains(id), norms.contains(&id));
        }
    }
    assert!(!set.by_component.contains_key(&Component::EncoderLayers));
    assert!(!set.by_component.contains_key(&Component::EAdapters));
}

#[test]
fn proposed_full_matches_the_closed_form_sum() {
    let layers = 4;
    let cfg = ModelConfig::toy(AdaptationStrategy::proposed_full(layers), HeadConfig::Ctc { vocab: 5 });
    let d = cfg.backbone.d_model;
    let expected = layers * cfg.l_adapter.param_count(d)
        + (layers - 1) * Bottleneck::param_count(d, cfg.e_adapter.bottleneck_dim)
        + layers
        + layers * 4 * d
        + cfg.head.param_count(cfg.l_adapter.embed_dim);
    let (_, store, _) = toy_model(cfg.strategy, cfg.head.clone());
    assert_eq!(store.trainable_numel(), expected);
    assert_eq!(count_learnable_params(&cfg).unwrap().trainable, expected);
}

fn enumerate(cfg: &ModelConfig) -> (usize, usize, std::collections::BTreeMap<Component, usize>) {
    let (m, inv) = AdaptedModel::inventory(cfg.clone()).unwrap();
    let set = trainable_set(&m);
    let trainable = set.ids.iter().map(|id| inv.numel(*id)).sum();
    let by = set
        .by_component
        .iter()
        .map(|(c, ids)| (*c, ids.iter().map(|id| inv.numel(*id)).sum()))
        .collect();
    (trainable, inv.total_numel(), by)
}

#[test]
fn closed_form_count_matches_enumeration_on_both_presets() {
    let heads = [HeadConfig::Ctc { vocab: 5 }, HeadConfig::Cls { hidden: 32, classes: 7 }];
    for s in all_strategies(4) {
        for head in &heads {
            for v in LAdapterVariant::ALL {
                let mut cfg = ModelConfig::toy(s, head.clone());
                cfg.l_adapter.variant = v;
                let r = count_learnable_params(&cfg).unwrap();
                let (t, total, by) = enumerate(&cfg);
                assert_eq!((r.trainable, r.total), (t, total), "{s} {v}");
                assert_eq!(r.trainable_by_component, by, "{s} {v}");
            }
        }
    }
    let head = HeadConfig::Ctc { vocab: 31 };
    for s in all_strategies(12).into_iter().step_by(7) {
        for v in [LAdapterVariant::Weight, LAdapterVariant::Base, LAdapterVariant::Skip] {
            let cfg = ModelConfig::wavlm_base(s, v, head.clone());
            let r = count_learnable_params(&cfg).unwrap();
            let (t, total, _) = enumerate(&cfg);
            assert_eq!((r.trainable, r.total), (t, total), "{s} {v}");
        }
    }
}

#[test]
fn wavlm_base_proposed_ratio() {
    let cfg = ModelConfig::wavlm_base(AdaptationStrategy::proposed_full(12), LAdapterVariant::Base, HeadConfig::Ctc { vocab: 31 });
    let r = count_learnable_params(&cfg).unwrap();
    assert_eq!(r.trainable - r.head, 9_127_436);
    assert_eq!(r.total - r.head, 94_539_020);
    assert!((0.08..=0.13).contains(&r.ratio_excluding_head));
}

#[test]
fn l_adapter_columns_equal_instantiated_counts() {
    let bb = BackboneConfig::wavlm_base();
    for v in LAdapterVariant::ALL {
        let cfg = LAdapterConfig::wavlm_base(v);
        let mut inv = crate::nn::ShapeInventory::default();
        let mut ids = Vec::new();
        for i in 0..bb.num_layers {
            ids.extend(LAdapter::declare(&mut inv, &format!("l.{i}"), bb.d_model, &cfg).unwrap().ids());
        }
        let transforms: usize = ids.iter().map(|id| inv.numel(*id)).sum();
        let expected = if v == LAdapterVariant::Weight { bb.num_layers } else { transforms };
        assert_eq!(l_adapter_config_params(&cfg, &bb), expected, "{v}");
    }
}
