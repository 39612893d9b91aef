use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Adam without weight decay or schedule.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let step_size = S::of(self.lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(self.eps);
        let mut ids: Vec<(ParamId, &Tensor<S>)> = grads.params().collect();
        ids.sort_by_key(|(id, _)| *id);
        for (id, g) in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
