//! Helpers shared by unit tests.

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::nn::StoreSink;
use crate::rng::{normal, SeedStream};
use crate::Result;

pub fn random<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut r = SeedStream::new(seed).rng("tensor");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::of(normal(&mut r))).collect()).unwrap()
}

/// Weighted sum of every output coordinate with fixed random coefficients.
pub fn probe<S: Scalar>(g: &mut Graph<S>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&shape, seed))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Overwrites every parameter with `scale·N(0,1)` noise (plus one for
/// LayerNorm gains), so no gradient is identically zero.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = SeedStream::new(seed).rng("randomize");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let gain = store.path(id).ends_with(".gamma");
        for v in store.value_mut(id).data_mut() {
            *v = scale * normal(&mut r) + if gain { 1.0 } else { 0.0 };
        }
    }
}

/// Fresh f64 store and rng-backed sink builder.
pub fn with_sink<T>(seed: u64, f: impl FnOnce(&mut StoreSink<'_, f64, rand_chacha::ChaCha8Rng>) -> T) -> (T, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = SeedStream::new(seed).rng("init");
    let out = f(&mut StoreSink {
        store: &mut store,
        rng: &mut rng,
    });
    (out, store)
}

/// Marks every parameter trainable.
pub fn unfreeze(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.set_trainable(id, true);
    }
}
