//! Adam training loop, held-out metrics and accuracy evaluation.

use std::ops::ControlFlow;

use cmfn_tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, OptimState};
use crate::config::{LrSchedule, ModelConfig};
use crate::datagen::dataset::sample_seed;
use crate::datagen::Sample;
use crate::error::{CmfnError, Result};
use crate::language::RefineOptions;
use crate::loss::{total_loss, LossWeights};
use crate::model::Cmfn;
use crate::params::ParamStore;
use crate::par;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &ModelConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_state(cfg: &ModelConfig, store: &ParamStore, state: OptimState) -> Result<Self> {
        let fits = |moments: &[Tensor]| {
            moments.len() == store.len() && moments.iter().zip(store.iter()).all(|(t, p)| t.shape() == p.value.shape())
        };
        if !fits(&state.m) || !fits(&state.v) {
            return Err(CmfnError::config("optimizer state does not match the model parameters"));
        }
        Ok(Self {
            step: state.step,
            m: state.m,
            v: state.v,
            ..Self::new(cfg, &ParamStore::new())
        })
    }

    pub fn state(&self, epochs_done: usize) -> OptimState {
        OptimState {
            step: self.step,
            epochs_done,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn learning_rate(cfg: &ModelConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::StepDecay => {
            let decays = epoch.saturating_sub(1) / cfg.decay_after.max(1);
            cfg.lr * 0.1f64.powi(decays as i32)
        }
    }
}

/// Sequence accuracies of the three heads (final iteration) plus the fused
/// head after every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub samples: usize,
    pub visual: f64,
    pub language: f64,
    pub fused: f64,
    pub fused_per_iteration: Vec<f64>,
}

pub fn evaluate(model: &Cmfn, samples: &[Sample], opts: RefineOptions) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(CmfnError::EmptyDataset);
    }
    let preds = par::map(samples, |s| model.predict(&s.image(), opts));
    let n = samples.len() as f64;
    let iters = model.config().iterations;
    let (mut v, mut l, mut f) = (0usize, 0usize, 0usize);
    let mut per_iter = vec![0usize; iters];
    for (s, pred) in samples.iter().zip(preds) {
        let pred = pred?;
        let truth = s.text.to_lowercase();
        v += usize::from(pred.visual == truth);
        l += usize::from(pred.language == truth);
        f += usize::from(pred.fused == truth);
        for (k, p) in pred.fused_per_iteration.iter().enumerate() {
            per_iter[k] += usize::from(*p == truth);
        }
    }
    Ok(Accuracy {
        samples: samples.len(),
        visual: v as f64 / n,
        language: l as f64 / n,
        fused: f as f64 / n,
        fused_per_iteration: per_iter.into_iter().map(|c| c as f64 / n).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Held-out accuracies; `None` without a held-out split.
    pub accuracy: Option<Accuracy>,
}

impl EpochMetrics {
    /// `epoch\tloss\tacc_TV\tacc_TL\tacc_TF`.
    pub fn log_line(&self) -> String {
        let (v, l, f) = match &self.accuracy {
            Some(a) => (a.visual, a.language, a.fused),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        format!("{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}", self.epoch, self.loss, v, l, f)
    }
}

/// Splits off the trailing `fraction` of samples as the held-out set.
pub fn split_holdout(samples: &[Sample], fraction: f64) -> (&[Sample], &[Sample]) {
    let held = ((samples.len() as f64) * fraction).round() as usize;
    let held = held.min(samples.len().saturating_sub(1));
    samples.split_at(samples.len() - held)
}

pub struct Trainer {
    pub model: Cmfn,
    adam: Adam,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = Cmfn::new(cfg)?;
        let adam = Adam::new(cfg, &model.store);
        Ok(Self {
            model,
            adam,
            epochs_done: 0,
        })
    }

    /// Continues from a checkpoint; without stored optimizer state the
    /// moments start at zero.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let (model, state) = checkpoint.into_model()?;
        let (adam, epochs_done) = match state {
            Some(s) => {
                let done = s.epochs_done;
                (Adam::from_state(model.config(), &model.store, s)?, done)
            }
            None => (Adam::new(model.config(), &model.store), 0),
        };
        Ok(Self {
            model,
            adam,
            epochs_done,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.adam.state(self.epochs_done)))
    }

    /// Loss and parameter gradients for one sample on its own tape.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
        let cfg = self.model.config();
        let label = sample.label(cfg.max_len)?;
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape, true);
        let pass = self.model.forward(&mut tape, &bound, &sample.image(), RefineOptions::default())?;
        let loss = total_loss(&mut tape, pass.vision.visual_logits, &pass.iterations, &label, LossWeights::from(cfg))?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        Ok((value, bound.gradients(&tape)))
    }

    fn param_norms(&self) -> String {
        self.model
            .store
            .iter()
            .map(|p| format!("{}={:.3e}", p.name, p.value.l2_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn non_finite(&self, epoch: usize, batch: usize) -> CmfnError {
        CmfnError::NonFiniteLoss {
            epoch,
            batch,
            norms: self.param_norms(),
        }
    }

    /// One Adam step on the mean gradient of `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[Sample], epoch: usize, batch_index: usize) -> Result<f64> {
        let results = par::map(batch, |s| self.sample_gradients(s));
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = match r {
                Ok(v) => v,
                Err(CmfnError::Tensor(TensorError::NonFinite { .. })) => return Err(self.non_finite(epoch, batch_index)),
                Err(e) => return Err(e),
            };
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(sum) => {
                    for (s, g) in sum.iter_mut().zip(&grads) {
                        s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let mut grads = acc.ok_or(CmfnError::EmptyDataset)?;
        let scale = 1.0 / batch.len() as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let norm = clip_global_norm(&mut grads, self.model.config().grad_clip);
        let mean = total * scale;
        if !mean.is_finite() || !norm.is_finite() {
            return Err(self.non_finite(epoch, batch_index));
        }
        let lr = learning_rate(self.model.config(), epoch);
        self.adam.update(&mut self.model.store, &grads, lr);
        Ok(mean)
    }

    /// Trains epoch `epochs_done + 1` over a seeded shuffle of `train`.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(CmfnError::EmptyDataset);
        }
        let epoch = self.epochs_done + 1;
        let cfg = self.model.config().clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            total += self.step(&batch, epoch, b)? * batch.len() as f64;
        }
        self.epochs_done = epoch;
        Ok(total / train.len() as f64)
    }

    /// Runs until `config.epochs` epochs are done or `on_epoch` breaks.
    pub fn run(
        &mut self,
        train: &[Sample],
        holdout: &[Sample],
        mut on_epoch: impl FnMut(&EpochMetrics, &Trainer) -> ControlFlow<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut metrics = Vec::new();
        while self.epochs_done < self.model.config().epochs {
            let loss = self.train_epoch(train)?;
            let accuracy = if holdout.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, holdout, RefineOptions::default())?)
            };
            let m = EpochMetrics {
                epoch: self.epochs_done,
                loss,
                accuracy,
            };
            let flow = on_epoch(&m, self);
            metrics.push(m);
            if flow.is_break() {
                break;
            }
        }
        Ok(metrics)
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains on `dataset`, holding out `config.holdout_fraction` for metrics.
pub fn train(cfg: &ModelConfig, dataset: &[Sample]) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(CmfnError::EmptyDataset);
    }
    let (fit, holdout) = split_holdout(dataset, cfg.holdout_fraction);
    let mut trainer = Trainer::new(cfg)?;
    let metrics = trainer.run(fit, holdout, |_, _| ControlFlow::Continue(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}
