use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VcaError};
use crate::tensor::{ParamStore, Real, Tape, Tensor};

use super::{AdamW, BackboneConfig, VitModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B x Hi x Wi x ch]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Everything that evolves during training. Single-worker; same seed gives
/// the same trajectory bit for bit.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: VitModel,
    pub store: ParamStore<T>,
    pub optim: AdamW<T>,
    pub step: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &BackboneConfig, seed: u64, lr: f64, weight_decay: f64) -> Result<Self> {
        let (model, store) = VitModel::new(cfg, seed)?;
        let optim = AdamW::new(&store, lr, weight_decay);
        Ok(TrainState {
            model,
            store,
            optim,
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Next `batch` sample indices out of `samples`, drawn by reshuffled
    /// passes over the data.
    pub fn next_indices(&mut self, samples: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() || self.order.len() != samples {
                self.order = (0..samples).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One forward, cross-entropy, backward and AdamW update. Returns the
    /// loss before the update.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape);
        let step = self.step;
        let diverged = |e: VcaError| match e {
            VcaError::NonFinite { .. } => VcaError::Divergence { step, loss: f64::NAN },
            other => other,
        };
        let logits = self
            .model
            .forward(&mut tape, &binding, &batch.images)
            .map_err(diverged)?;
        let loss = tape.cross_entropy(logits, &batch.labels).map_err(diverged)?;
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(VcaError::Divergence { step, loss: loss_value });
        }
        tape.backward(loss)?;
        let grads = binding.grads(&tape);
        drop(tape);
        self.optim.update(&mut self.store, &grads)?;
        self.step += 1;
        Ok(loss_value)
    }
}

/// Fraction of `labels` the model predicts correctly (argmax of logits),
/// scored in chunks of `chunk` samples with frozen parameters.
pub fn accuracy<T: Real>(
    model: &VitModel,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    chunk: usize,
) -> Result<f64> {
    let per_image: usize = images.shape()[1..].iter().product();
    let samples = labels.len();
    if samples == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..samples).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(samples);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(shape, images.data()[start * per_image..end * per_image].to_vec())?;
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let logits = model.forward(&mut tape, &b, &part)?;
        let k = tape.value(logits).last_dim();
        for (row, &label) in tape.value(logits).data().chunks(k).zip(&labels[start..end]) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples as f64)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, T::neg_infinity()),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::tensor::init::Initializer;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: (8, 8, 1),
            patch_size: 2,
            depth: 1,
            width: 8,
            heads: 2,
            pool: Some((2, 2)),
            num_classes: 3,
            ..Default::default()
        }
    }

    fn batch(seed: u64) -> Batch<f32> {
        let mut init = Initializer::new(seed);
        Batch {
            images: init.uniform(&[6, 8, 8, 1], 0.0, 1.0),
            labels: vec![0, 1, 2, 0, 1, 2],
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut st = TrainState::<f32>::new(&tiny(), 1, 0.0, 0.05).unwrap();
        let before = st.store.clone();
        st.train_step(&batch(2)).unwrap();
        assert_eq!(st.store, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn same_seed_same_losses() {
        let run = || {
            let mut st = TrainState::<f32>::new(&tiny(), 7, 1e-3, 0.05).unwrap();
            let b = batch(3);
            (0..5).map(|_| st.train_step(&b).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn indices_cover_each_pass() {
        let mut st = TrainState::<f32>::new(&tiny(), 0, 1e-3, 0.0).unwrap();
        let mut seen = st.next_indices(10, 10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn param_count_is_stable() {
        for kind in AttentionKind::ALL {
            let cfg = BackboneConfig {
                attention_kind: kind,
                ..tiny()
            };
            let mut st = TrainState::<f32>::new(&cfg, 0, 1e-3, 0.05).unwrap();
            let n = st.param_count();
            st.train_step(&batch(1)).unwrap();
            assert_eq!(st.param_count(), n);
        }
    }
}
