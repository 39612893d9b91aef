//! Shared fixtures for the benchmarks.

use ladapt::adapters::AdaptationStrategy;
use ladapt::autodiff::{ParamStore, Tensor};
use ladapt::backbone::{Backbone, BackboneConfig};
use ladapt::heads::HeadConfig;
use ladapt::model::{AdaptedModel, ModelConfig};
use ladapt::rng::{normal, SeedStream};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = SeedStream::new(seed).rng("bench");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut r) as f32).collect()).expect("shape matches data")
}

/// Toy backbone with adapters attached for `strategy` and a CTC head.
pub fn toy_model(strategy: AdaptationStrategy) -> (AdaptedModel, ParamStore<f32>) {
    let (bb, store) = Backbone::init::<f32>(BackboneConfig::toy(), 0).expect("toy backbone");
    let cfg = ModelConfig::toy(strategy, HeadConfig::Ctc { vocab: 6 });
    let (model, store, _) = AdaptedModel::build(&bb, &store, cfg, 0).expect("toy model");
    (model, store)
}
