//! Optimizers, the training loop and evaluation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layers::stiefel_step;
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{
    batch_loss_and_grad, forward_all, LossParts, ModelConfig, ModelOutput, ModelParams, PreparedTrial, TrialTrace,
    STIEFEL_TENSORS,
};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep the attention BiMaps on the Stiefel manifold. Off is the ablation
    /// where they receive plain Adam updates.
    pub meta_optimizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 150,
            seed: 0,
            meta_optimizer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and per-tensor moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every tensor for which `select(name)` holds.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, select: impl Fn(&str) -> bool) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in tensors {
            if !select(name) {
                continue;
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Adam on the Euclidean tensors plus, when the meta-optimizer is on, a
/// Riemannian step with QR retraction on the Stiefel tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f64,
    pub meta_optimizer: bool,
    adam: Adam,
}

impl Optimizer {
    pub fn new(params: &ModelParams, lr: f64, meta_optimizer: bool) -> Self {
        Self {
            lr,
            meta_optimizer,
            adam: Adam::new(params),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        let meta = self.meta_optimizer;
        self.adam
            .update(params, grads, self.lr, |name| !(meta && STIEFEL_TENSORS.contains(&name)));
        if meta {
            let stiefel: Vec<(&str, DMatrix<f64>)> = grads
                .tensors()
                .into_iter()
                .filter(|(n, _)| STIEFEL_TENSORS.contains(n))
                .map(|(n, g)| (n, g.clone()))
                .collect();
            for (name, w) in params.tensors_mut() {
                if let Some((_, g)) = stiefel.iter().find(|(n, _)| *n == name) {
                    *w = stiefel_step(w, g, self.lr)?;
                }
            }
        }
        Ok(())
    }
}

/// One forward/backward on the batch mean loss followed by one optimizer
/// update. On error the parameters are left untouched.
pub fn meta_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    config: &ModelConfig,
    batch: &[&PreparedTrial],
    labels: &[usize],
    observer: Option<&mut dyn FnMut(&TrialTrace)>,
) -> Result<LossParts> {
    let (loss, grads) = batch_loss_and_grad(params, config, batch, labels, observer)?;
    let mut next = params.clone();
    optimizer.apply(&mut next, &grads)?;
    *params = next;
    Ok(loss)
}

/// Sample-weighted mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub geotop: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Whether [`TrainObserver::on_trace`] should receive every trial's
    /// intermediate matrices.
    fn wants_traces(&self) -> bool {
        false
    }

    fn on_trace(&mut self, _trace: &TrialTrace) {}

    fn on_epoch(&mut self, _stats: &EpochStats, _params: &ModelParams) -> Result<Flow> {
        Ok(Flow::Continue)
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains `params` in place for `train.epochs` epochs of seeded shuffled
/// mini-batches. Returns per-epoch statistics. If a step fails, `params`
/// holds the last good values.
pub fn train(
    params: &mut ModelParams,
    config: &ModelConfig,
    train: &TrainConfig,
    trials: &[PreparedTrial],
    labels: &[usize],
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochStats>> {
    train.validate()?;
    config.validate()?;
    if trials.is_empty() || trials.len() != labels.len() {
        return Err(invalid("training set must be non-empty with one label per trial"));
    }
    let batch_size = train.batch_size.min(trials.len());
    let mut optimizer = Optimizer::new(params, train.lr, train.meta_optimizer);
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut epoch_rng(train.seed, epoch));
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&PreparedTrial> = chunk.iter().map(|&i| &trials[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = if observer.wants_traces() {
                let mut sink = |t: &TrialTrace| observer.on_trace(t);
                meta_step(params, &mut optimizer, config, &batch, &ys, Some(&mut sink))?
            } else {
                meta_step(params, &mut optimizer, config, &batch, &ys, None)?
            };
            let w = chunk.len() as f64;
            sums.0 += loss.total * w;
            sums.1 += loss.ce * w;
            sums.2 += loss.geotop * w;
            steps += 1;
        }
        let n = trials.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: sums.0 / n,
            ce: sums.1 / n,
            geotop: sums.2 / n,
            steps,
        };
        log::debug!("epoch {} loss {:.6} ce {:.6} geotop {:.6}", stats.epoch, stats.loss, stats.ce, stats.geotop);
        history.push(stats);
        if observer.on_epoch(&stats, params)? == Flow::Stop {
            break;
        }
    }
    Ok(history)
}

/// Softmax class probabilities, one row per trial.
pub fn predict(params: &ModelParams, config: &ModelConfig, trials: &[&PreparedTrial]) -> Result<DMatrix<f64>> {
    let outputs = forward_all(params, config, trials)?;
    Ok(probabilities(&outputs, config.num_classes))
}

pub fn probabilities(outputs: &[ModelOutput], classes: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(outputs.len(), classes);
    for (i, o) in outputs.iter().enumerate() {
        let max = o.logits.max();
        let e = o.logits.map(|v| (v - max).exp());
        let z = e.sum();
        for j in 0..classes {
            p[(i, j)] = e[j] / z;
        }
    }
    p
}

pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    trials: &[&PreparedTrial],
    labels: &[usize],
) -> Result<Metrics> {
    if trials.is_empty() {
        return Err(invalid("evaluate: empty dataset"));
    }
    compute_metrics(&predict(params, config, trials)?, labels)
}
