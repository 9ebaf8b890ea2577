use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{argmax, Network};
use super::{real, FeatureMap, Real};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::parallel::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// `f32` arithmetic.
    #[default]
    Standard,
    /// `f64` arithmetic; the stored model is still `f32`.
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            lr: 1e-3,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::Standard,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with the network's trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

fn trainable<T: Real>(net: &Network<T>) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    net.visit(&mut |_, role, _, t| {
        if role.trainable() {
            out.push(t.to_vec())
        }
    });
    out
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Real>(
    net: &mut Network<T>,
    grads: &Network<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    let g = trainable(grads);
    if state.m.is_empty() {
        state.m = g.iter().map(|t| vec![T::zero(); t.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2): (T, T) = (real(cfg.beta1), real(cfg.beta2));
    let c1: T = real(1.0 - cfg.beta1.powi(state.step as i32));
    let c2: T = real(1.0 - cfg.beta2.powi(state.step as i32));
    let lr: T = real(cfg.lr);
    let eps: T = real(cfg.eps);
    let mut idx = 0;
    net.visit_mut(&mut |_, role, p| {
        if !role.trainable() {
            return;
        }
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(&g[idx])
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
        idx += 1;
    });
}

/// Cross-entropy of one logit vector against a 1-based label, as
/// `logsumexp(z) - z[label]`. Non-finite logits give a non-finite loss.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = logits.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln() - logits[label - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the returned snapshot, `0` for the untrained network.
    pub best_epoch: usize,
}

fn to_inputs<T: Real>(ds: &Dataset) -> Vec<FeatureMap<T>> {
    ds.beats
        .iter()
        .map(|b| FeatureMap::from_signal(&b.samples))
        .collect()
}

fn evaluate<T: Real>(
    net: &Network<T>,
    xs: &[FeatureMap<T>],
    labels: &[usize],
    exec: Execution,
) -> Result<(f64, f64, f64)> {
    let logits = net.forward_batch(xs, exec)?;
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| cross_entropy(l, y).to_f64().unwrap())
        .sum::<f64>()
        / labels.len() as f64;
    let preds: Vec<usize> = logits.iter().map(|l| argmax(l) + 1).collect();
    let cm = data::confusion(&preds, labels, net.arch.n_classes)?;
    Ok((loss, data::accuracy(&cm)?, data::balanced_accuracy(&cm)?))
}

/// Mini-batch Adam training with per-epoch reshuffling.
///
/// Returns the snapshot with the highest validation accuracy (lower
/// validation loss breaks ties, then the earlier epoch).
pub fn train(
    net: Network<f32>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Usage(
            "training and validation sets must be nonempty".into(),
        ));
    }
    match cfg.precision {
        Precision::Standard => train_impl(net, train_ds, val_ds, cfg),
        Precision::High => {
            let out = train_impl(net.cast::<f64>(), train_ds, val_ds, cfg)?;
            Ok(TrainOutcome {
                network: out.network.cast(),
                history: out.history,
                best_epoch: out.best_epoch,
            })
        }
    }
}

struct Generic<T> {
    network: Network<T>,
    history: Vec<EpochStats>,
    best_epoch: usize,
}

impl<T: Real> From<Generic<T>> for TrainOutcome {
    fn from(g: Generic<T>) -> Self {
        TrainOutcome {
            network: g.network.cast(),
            history: g.history,
            best_epoch: g.best_epoch,
        }
    }
}

fn train_impl<T: Real>(
    mut net: Network<T>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let xs: Vec<FeatureMap<T>> = to_inputs(train_ds);
    let ys = train_ds.labels();
    let vxs: Vec<FeatureMap<T>> = to_inputs(val_ds);
    let vys = val_ds.labels();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, Network<T>)> = None;
    let mut order: Vec<usize> = (0..xs.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx: Vec<FeatureMap<T>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, grads, tape) = net.loss_and_grad(&bx, &by, &mut rng, cfg.exec)?;
            let loss = loss.to_f64().unwrap();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi + 1,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            net.update_running_stats(&tape);
            adam_step(&mut net, &grads, &mut adam, cfg);
        }
        let (val_loss, val_acc, val_bal) = evaluate(&net, &vxs, &vys, cfg.exec)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / xs.len() as f64,
            val_loss,
            val_accuracy: val_acc,
            val_balanced_accuracy: val_bal,
        });
        let better = match &best {
            None => true,
            Some((acc, l, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *l),
        };
        if better {
            best = Some((val_acc, val_loss, epoch, net.clone()));
        }
    }

    Ok(match best {
        Some((_, _, epoch, snapshot)) => Generic {
            network: snapshot,
            history,
            best_epoch: epoch,
        },
        None => Generic {
            network: net,
            history,
            best_epoch: 0,
        },
    }
    .into())
}
