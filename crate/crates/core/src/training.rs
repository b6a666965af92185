//! L1 loss, Adam, the step-decay schedule and the mini-batch training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, PatchSet};
use crate::model::{Model, ModelConfig};
use crate::ops::ConvParams;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Mean absolute error over all elements, and its gradient
/// `sign(pred - target) / count` with `sign(0) = 0`.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.ensure_same_shape(target, "l1_loss")?;
    if pred.is_empty() {
        return Err(Error::contract("l1_loss of empty tensors"));
    }
    let n = pred.len() as f64;
    let step = T::from_f64(1.0 / n);
    let mut sum = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        sum += d.abs();
        *g = if d > 0.0 {
            step
        } else if d < 0.0 {
            T::ZERO - step
        } else {
            T::ZERO
        };
    }
    Ok((sum / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_every_epochs: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Schedule and optimizer defaults; the epoch count has none.
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr0: 5e-4,
            decay_every_epochs: 10,
            decay_factor: 0.1,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::contract(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::contract(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::contract("decay_every_epochs must be at least 1"));
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 || !(self.decay_factor > 0.0) {
            return Err(Error::contract(
                "epsilon and decay_factor must be positive, weight_decay non-negative",
            ));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every_epochs)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.decay_every_epochs.max(1)) as f64;
    config.lr0 * libm::pow(config.decay_factor, k)
}

/// Adam moments per parameter slice and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::ZERO; n]).collect();
        OptimizerState { v: m.clone(), m, t: 0 }
    }

    /// Zero moments shaped like `model`'s weight and bias slices.
    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.params().iter().flat_map(|p| [p.weights().len(), p.bias().len()]))
    }
}

/// One Adam update with bias correction. Weight decay is added to the
/// gradient (`g + weight_decay * theta`) before the moments are updated.
pub fn adam_step<T: Scalar>(
    theta: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if theta.len() != grads.len() || theta.len() != state.m.len() || theta.len() != state.v.len() {
        return Err(Error::contract(format!(
            "adam_step: {} parameter slices, {} gradients, {} moment slots",
            theta.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((p, g), m)) in theta.iter().zip(grads).zip(&state.m).enumerate() {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} values in slice {i}", p.len()),
                found: format!("{} gradients, {} moments", g.len(), m.len()),
            });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
    let (c1, c2) = (T::from_f64(1.0 - config.beta1), T::from_f64(1.0 - config.beta2));
    let bc1 = T::from_f64(1.0 - libm::pow(config.beta1, t));
    let bc2 = T::from_f64(1.0 - libm::pow(config.beta2, t));
    let (lr, eps, wd) = (
        T::from_f64(lr),
        T::from_f64(config.epsilon),
        T::from_f64(config.weight_decay),
    );
    for (((p, g), m), v) in theta.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g + wd * *p;
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Patches stacked into `N x C x 48 x 48` input and target tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

impl TrainingData {
    pub fn from_patches(set: &PatchSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::contract("empty patch set"));
        }
        let stack = |images: Vec<&Image>| -> Result<Tensor<f32>> {
            let items: Vec<Tensor<f32>> = images.iter().map(|img| img.to_tensor()).collect();
            Tensor::stack(&items.iter().collect::<Vec<_>>())
        };
        Ok(TrainingData {
            inputs: stack(set.patches.iter().map(|p| &p.ilr).collect())?,
            targets: stack(set.patches.iter().map(|p| &p.hr).collect())?,
        })
    }

    pub fn new(inputs: Tensor<f32>, targets: Tensor<f32>) -> Result<Self> {
        inputs.ensure_same_shape(&targets, "TrainingData::new")?;
        if inputs.shape().n == 0 {
            return Err(Error::contract("empty training data"));
        }
        Ok(TrainingData { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input and target batches for the given item indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let s = self.inputs.shape();
        let shape = Shape::new(indices.len(), s.c, s.h, s.w);
        let gather = |t: &Tensor<f32>| {
            let mut data = Vec::with_capacity(shape.len());
            for &i in indices {
                data.extend_from_slice(t.item(i));
            }
            Tensor::from_vec(shape, data).expect("sizes agree")
        };
        (gather(&self.inputs), gather(&self.targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss of the epoch, weighted by batch size.
    pub loss: f64,
    /// Optimizer steps taken when the epoch ended.
    pub steps: u64,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<ConvParams<f32>>,
    pub optimizer: OptimizerState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Owns the model and optimizer state while training.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model<f32>,
    config: TrainConfig,
    state: OptimizerState<f32>,
    epoch: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::for_model(&model);
        Ok(Trainer {
            model,
            config,
            state,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = Model::with_params(&ckpt.model_config, ckpt.params)?;
        let expected = OptimizerState::<f32>::for_model(&model);
        let sizes = |s: &OptimizerState<f32>| -> Vec<(usize, usize)> {
            s.m.iter().zip(&s.v).map(|(m, v)| (m.len(), v.len())).collect()
        };
        if sizes(&ckpt.optimizer) != sizes(&expected) {
            return Err(Error::contract("optimizer moments do not match the model parameters"));
        }
        if ckpt.history.len() != ckpt.epoch {
            return Err(Error::contract(format!(
                "checkpoint at epoch {} carries {} history rows",
                ckpt.epoch,
                ckpt.history.len()
            )));
        }
        Ok(Trainer {
            model,
            config: ckpt.train_config,
            state: ckpt.optimizer,
            epoch: ckpt.epoch,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: self.model.params().to_vec(),
            optimizer: self.state.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.state
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Forward, L1 loss, backward and one Adam update on a batch. Returns the
    /// loss before the update.
    pub fn step(&mut self, inputs: &Tensor<f32>, targets: &Tensor<f32>, lr: f64) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = self.model.tape();
            let x = tape.constant(inputs.clone());
            let y = self.model.forward_on_tape(&mut tape, x)?;
            let (loss, seed) = l1_loss(tape.value(y), targets)?;
            (loss, tape.backward(y, seed)?)
        };
        let flat: Vec<&[f32]> = grads
            .params
            .iter()
            .flat_map(|g| [g.weights.data(), g.bias.as_slice()])
            .collect();
        let mut theta = self.model.param_slices_mut();
        adam_step(&mut theta, &flat, &mut self.state, lr, &self.config)?;
        Ok(loss)
    }

    /// Item order for `epoch`: a shuffle keyed by the seed and the epoch, so
    /// resuming needs no generator state.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `data` in shuffled batches, the last one possibly
    /// partial. `on_step(step, loss)` sees every batch loss.
    pub fn run_epoch(&mut self, data: &TrainingData, mut on_step: impl FnMut(u64, f64)) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::contract("empty training data"));
        }
        let lr = lr_at(self.epoch, &self.config);
        let order = self.epoch_order(self.epoch, data.len());
        let mut weighted = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = data.batch(chunk);
            let loss = self.step(&x, &y, lr)?;
            on_step(self.state.t, loss);
            weighted += loss * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            loss: weighted / data.len() as f64,
            steps: self.state.t,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `config.epochs` are complete.
    pub fn train(&mut self, data: &TrainingData, mut on_epoch: impl FnMut(&Trainer, &EpochRecord)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(data, |_, _| {})?;
            on_epoch(self, &record);
        }
        Ok(())
    }

    /// Mean L1 loss of the current model over `data`, without updating it.
    pub fn evaluate_loss(&self, data: &TrainingData) -> Result<f64> {
        mean_loss(&self.model, data, self.config.batch_size)
    }
}

/// Mean L1 loss of `model` over `data` in batches of `batch_size`.
pub fn mean_loss(model: &Model<f32>, data: &TrainingData, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("empty training data"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut weighted = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let (loss, _) = l1_loss(&model.forward(&x)?, &y)?;
        weighted += loss * chunk.len() as f64;
    }
    Ok(weighted / data.len() as f64)
}

/// A short description of a config for logs.
pub fn describe(config: &TrainConfig) -> String {
    format!(
        "lr0 {} x{} every {} epochs, batch {}, {} epochs, seed {}",
        config.lr0, config.decay_factor, config.decay_every_epochs, config.batch_size, config.epochs, config.seed
    )
}
