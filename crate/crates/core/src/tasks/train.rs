use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::decoding::greedy_decode;
use crate::model::{Model, TrainExample};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each batch drawn from the instruction-tuning set.
    pub tuning_fraction: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            learning_rate: 3e-3,
            batch_size: 32,
            tuning_fraction: 0.1,
            warmup_steps: 100,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.batch_size == 0 {
            return Err(TaskError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TaskError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tuning_fraction) {
            return Err(TaskError::Config("tuning_fraction must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(TaskError::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to a tenth of the peak rate.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        let floor = 0.1;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    /// Greedy exact-match rate of the first target token over the pretrain set.
    pub memorization_accuracy: f64,
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::lit(lr);
        let eps = T::lit(ADAM_EPS);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn clip<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) {
    if max_norm == 0.0 {
        return;
    }
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = T::lit(max_norm / total);
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Shuffled pass over `pool`, reshuffled at the end of each epoch.
struct Sampler<'a> {
    pool: &'a [TrainExample],
    order: Vec<usize>,
    next: usize,
}

impl<'a> Sampler<'a> {
    fn new(pool: &'a [TrainExample]) -> Self {
        Self {
            pool,
            order: (0..pool.len()).collect(),
            next: pool.len(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> &'a TrainExample {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        &self.pool[self.order[self.next - 1]]
    }
}

/// Share of `examples` whose first target token is the greedy first output.
pub fn memorization_accuracy<T: Scalar>(
    model: &Model<T>,
    examples: &[TrainExample],
) -> Result<f64, TaskError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let enc = model.encode(&ex.input)?;
        let out = greedy_decode(model, &enc, 1)?;
        if out.tokens.first() == ex.target.first() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Adam on the joint pretrain / instruction-tuning mixture. Each batch takes
/// `round(batch_size · tuning_fraction)` tuning examples and fills the rest from
/// the pretrain set.
pub fn train_memorizer<T: Scalar>(
    model: &mut Model<T>,
    pretrain: &[TrainExample],
    tuning: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TaskError> {
    cfg.validate()?;
    let mut n_tune = (cfg.batch_size as f64 * cfg.tuning_fraction).round() as usize;
    if tuning.is_empty() {
        n_tune = 0;
    }
    if pretrain.is_empty() && cfg.steps > 0 {
        n_tune = cfg.batch_size;
        if tuning.is_empty() {
            return Err(TaskError::Config("no training data".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pre = Sampler::new(pretrain);
    let mut tune = Sampler::new(tuning);
    let mut adam = AdamState::new(model.params().tensors());
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            batch.push(if i < n_tune {
                tune.draw(&mut rng).clone()
            } else {
                pre.draw(&mut rng).clone()
            });
        }
        let (loss, mut grads) = {
            let record = model.training_loss(&batch).map_err(|e| match e {
                crate::model::ModelError::Numerics(_) => TaskError::Diverged(step),
                other => other.into(),
            })?;
            (record.value().as_f64(), record.param_gradients()?)
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TaskError::Diverged(step));
        }
        loss_curve.push(loss);
        clip(&mut grads, cfg.grad_clip);
        adam.step(model.params_mut().tensors_mut(), &grads, cfg.learning_rate_at(step));
    }
    let memorization_accuracy = memorization_accuracy(model, pretrain)?;
    Ok(TrainReport {
        loss_curve,
        memorization_accuracy,
    })
}
