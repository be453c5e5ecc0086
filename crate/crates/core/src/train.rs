//! MSE objective, Adam, learning-rate schedule and the training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{build_hgsrcnn, ArchError, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::graph::{init_parameters, Graph, GraphError, ParameterStore};
use crate::tensor::{Real, Tensor4, TensorError};

pub const LR0: f64 = 1e-4;
pub const SCHEDULE_ANCHOR: u64 = 553_000;
pub const HALVING_PERIOD: u64 = 400_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("no training samples for scale {0}")]
    NoSamples(u32),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("adam step index must be >= 1 (got {0})")]
    StepIndex(u64),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub anchor_step: u64,
    pub halving_period: u64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Last step to run; steps are numbered from 1 and resumed runs continue
    /// the numbering.
    pub max_steps: u64,
    pub seed: u64,
    pub patch_size: usize,
    /// Scales visited round-robin, one per step.
    pub scales: Vec<u32>,
    /// Emit a checkpoint every this many steps; 0 emits only the final one.
    pub checkpoint_every: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: LR0,
            anchor_step: SCHEDULE_ANCHOR,
            halving_period: HALVING_PERIOD,
            batch: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 1_000,
            seed: 0,
            patch_size: 81,
            scales: vec![2, 3, 4],
            checkpoint_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.anchor_step == 0 || self.halving_period == 0 {
            return bad("schedule anchor and halving period must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.patch_size == 0 {
            return bad("patch size must be positive");
        }
        if self.scales.is_empty() {
            return bad("at least one training scale is required");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.anchor_step {
            return self.lr0;
        }
        let halvings = 1 + (step - self.anchor_step) / self.halving_period;
        self.lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }

    /// Scale trained at `step` (numbered from 1).
    pub fn scale_at(&self, step: u64) -> u32 {
        self.scales[((step.max(1) - 1) % self.scales.len() as u64) as usize]
    }
}

/// Learning rate at `step` under the default schedule.
pub fn lr_at(step: u64) -> f64 {
    TrainConfig::default().lr_at(step)
}

/// `(1/2N) * sum ||pred_j - target_j||^2` over the batch and its gradient
/// `(pred - target) / N`.
pub fn mse_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>), TensorError> {
    pred.dims().expect_eq(&target.dims(), "mse_loss")?;
    let n = pred.dims().n.max(1) as f64;
    let mut sum = 0.0f64;
    let inv = T::from_f64(1.0 / n);
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d.to_f64() * d.to_f64();
        grad.push(d * inv);
    }
    Ok((sum / (2.0 * n), Tensor4::from_vec(pred.dims(), grad)?))
}

/// One Adam update with bias correction, using the gradients in `store`.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, t: u64, lr: f64, config: &TrainConfig) -> Result<(), TrainError> {
    if t < 1 {
        return Err(TrainError::StepIndex(t));
    }
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - config.beta1.powf(t as f64));
    let c2 = T::from_f64(1.0 - config.beta2.powf(t as f64));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(config.epsilon);
    let update = |theta: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for (_, slot) in store.iter_mut() {
        update(
            slot.weights.data_mut(),
            slot.grad_weights.data(),
            slot.m_weights.data_mut(),
            slot.v_weights.data_mut(),
        );
        update(&mut slot.bias, &slot.grad_bias, &mut slot.m_bias, &mut slot.v_bias);
    }
    Ok(())
}

/// One training example: batch-of-one LR and HR tensors scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub lr: Tensor4<f32>,
    pub hr: Tensor4<f32>,
    pub scale: u32,
}

/// Training examples grouped by scale.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    samples: Vec<TrainSample>,
}

impl TrainSet {
    pub fn new(samples: Vec<TrainSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    fn indices_for(&self, scale: u32) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].scale == scale).collect()
    }
}

/// One line of the progress log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub scale: u32,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:?}\t{:?}", self.step, self.scale, self.loss, self.lr)
    }
}

#[derive(Debug)]
pub enum TrainEvent {
    Step(StepRecord),
    Checkpoint(Checkpoint),
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless epoch sampler: the `k`-th draw for a scale is position `k` of
/// a concatenation of seeded per-epoch permutations, so any step can be
/// reproduced without replaying earlier ones.
fn draw(pool: &[usize], seed: u64, scale: u32, k: u64) -> usize {
    let n = pool.len() as u64;
    let epoch = k / n;
    let mut perm = pool.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, scale as u64, epoch)));
    perm[(k % n) as usize]
}

/// Model, parameters and optimizer state for a training run.
pub struct Trainer<T: Real> {
    pub graph: Graph,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub store: ParameterStore<T>,
    /// Last completed step.
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let graph = build_hgsrcnn(&model)?;
        let store = init_parameters(&graph, config.seed);
        Self::check_scales(&graph, &config)?;
        Ok(Self {
            graph,
            model,
            config,
            store,
            step: 0,
        })
    }

    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let graph = build_hgsrcnn(&checkpoint.model)?;
        checkpoint.params.check_against(&graph)?;
        Self::check_scales(&graph, &config)?;
        Ok(Self {
            graph,
            model: checkpoint.model,
            config,
            store: checkpoint.params.cast(),
            step: checkpoint.step,
        })
    }

    fn check_scales(graph: &Graph, config: &TrainConfig) -> Result<(), TrainError> {
        let available = graph.scales();
        match config.scales.iter().find(|s| !available.contains(s)) {
            Some(s) => Err(TrainError::Config(format!("training scale {s} has no branch in the model (branches: {available:?})"))),
            None => Ok(()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            params: self.store.cast(),
        }
    }

    /// Batch for `step`: sample indices plus augmentation codes.
    fn batch_plan(&self, data: &TrainSet, step: u64) -> Result<(u32, Vec<(usize, u8)>), TrainError> {
        let scale = self.config.scale_at(step);
        let pool = data.indices_for(scale);
        if pool.is_empty() {
            return Err(TrainError::NoSamples(scale));
        }
        // batches previously drawn for this scale under round-robin rotation
        let per_cycle = self.config.scales.iter().filter(|&&s| s == scale).count() as u64;
        let cycle = self.config.scales.len() as u64;
        let pos_in_cycle = (step - 1) % cycle;
        let earlier_in_cycle = self.config.scales[..pos_in_cycle as usize].iter().filter(|&&s| s == scale).count() as u64;
        let batch_index = (step - 1) / cycle * per_cycle + earlier_in_cycle;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, step, 0xA06));
        let plan = (0..self.config.batch as u64)
            .map(|j| {
                let idx = draw(&pool, self.config.seed, scale, batch_index * self.config.batch as u64 + j);
                let code = if self.config.augment { aug_rng.random_range(0..8u8) } else { 0 };
                (idx, code)
            })
            .collect();
        Ok((scale, plan))
    }

    fn assemble(data: &TrainSet, plan: &[(usize, u8)]) -> Result<(Tensor4<T>, Tensor4<T>), TrainError> {
        let mut lrs = Vec::with_capacity(plan.len());
        let mut hrs = Vec::with_capacity(plan.len());
        for &(idx, code) in plan {
            let s = &data.samples[idx];
            lrs.push(crate::data::augment_tensor(&s.lr, code).cast::<T>());
            hrs.push(crate::data::augment_tensor(&s.hr, code).cast::<T>());
        }
        Ok((Tensor4::stack(&lrs)?, Tensor4::stack(&hrs)?))
    }

    /// Runs step `self.step + 1`.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let step = self.step + 1;
        let (scale, plan) = self.batch_plan(data, step)?;
        let (lr_batch, hr_batch) = Self::assemble(data, &plan)?;
        let trace = self.graph.forward_scale(&self.store, &lr_batch, scale)?;
        let pred = trace.output(scale).expect("selected branch evaluated");
        let (loss, grad) = mse_loss(pred, &hr_batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        self.graph.backward(&mut self.store, &trace, &[(scale, grad)])?;
        let lr = self.config.lr_at(step);
        adam_step(&mut self.store, step, lr, &self.config)?;
        self.step = step;
        Ok(StepRecord { step, scale, loss, lr })
    }

    /// Trains until `config.max_steps`, reporting every step and each
    /// checkpoint (periodic and final) to `sink`.
    pub fn run(&mut self, data: &TrainSet, mut sink: impl FnMut(TrainEvent) -> Result<(), TrainError>) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = self.step;
        while self.step < self.config.max_steps {
            let record = self.train_step(data)?;
            sink(TrainEvent::Step(record))?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.max_steps {
                sink(TrainEvent::Checkpoint(self.checkpoint()))?;
            }
        }
        if self.step > start {
            sink(TrainEvent::Checkpoint(self.checkpoint()))?;
        }
        Ok(())
    }

    /// Mean loss over every sample of `scale` without updating parameters.
    pub fn evaluate_loss(&self, data: &TrainSet, scale: u32) -> Result<f64, TrainError> {
        let pool = data.indices_for(scale);
        if pool.is_empty() {
            return Err(TrainError::NoSamples(scale));
        }
        let plan: Vec<(usize, u8)> = pool.into_iter().map(|i| (i, 0)).collect();
        let (x, y) = Self::assemble(data, &plan)?;
        let trace = self.graph.forward_scale(&self.store, &x, scale)?;
        Ok(mse_loss(trace.output(scale).expect("selected branch evaluated"), &y)?.0)
    }
}
