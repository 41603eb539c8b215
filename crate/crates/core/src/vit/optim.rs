use crate::error::{Result, VcaError};
use crate::tensor::{ParamStore, Real, Tensor};

/// Adam with decoupled weight decay. Decay applies to trainable entries of
/// rank 2 or more; vectors (norm gains, biases, lambda vectors) are not
/// decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(VcaError::Usage(format!(
                "optimizer holds {} moments, store has {} entries, {} grads given",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let lr = T::lit(self.lr);
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);

        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let decay = if entry.value.rank() >= 2 {
                T::lit(self.weight_decay)
            } else {
                T::zero()
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            for (((p, m), v), &g) in entry.value.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() * inv_bc2_sqrt + eps;
                *p = *p - lr * decay * *p - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
