use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{CombinedObjective, LossBreakdown, Objective};
use super::model::RegressorModel;
use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::kde::WeightScheme;
use crate::metrics::{self, Observation};

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    /// Exponent on the inverse target density.
    pub lambda2: f64,
    pub lambda3: f64,
    /// Kernel bandwidth for the target density.
    pub bandwidth: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Divide weights by their training-set mean (otherwise raw `rho^-lambda2`).
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 1e-4,
            bandwidth: 1.0,
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            epochs: 20,
            batch_size: 64,
            seed: 0,
            normalize_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda1 + self.lambda3 > 0.0) {
            return Err(Error::Config("lambda1 + lambda3 must be positive".into()));
        }
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> CombinedObjective {
        CombinedObjective {
            lambda1: self.lambda1,
            lambda3: self.lambda3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weighted_l1: f64,
    pub gauss_nll: f64,
    pub total: f64,
    pub val_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation-NLL parameters when a validation set was given,
    /// otherwise the final parameters.
    pub model: RegressorModel,
    pub history: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    pub batch_history: Vec<LossBreakdown>,
    pub best_epoch: usize,
}

fn mean_breakdown(sum: LossBreakdown, n: usize) -> LossBreakdown {
    let n = n as f64;
    LossBreakdown {
        weighted_l1: sum.weighted_l1 / n,
        gauss_nll: sum.gauss_nll / n,
        total: sum.total / n,
    }
}

fn add(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.weighted_l1 += b.weighted_l1;
    acc.gauss_nll += b.gauss_nll;
    acc.total += b.total;
}

/// Mean objective over a batch and the gradient of that mean w.r.t. every
/// parameter.
pub fn backward(
    model: &RegressorModel,
    batch: &[&TimeSeriesSample],
    weights: &[f64],
    objective: &dyn Objective,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("cannot differentiate an empty batch".into()));
    }
    let mut grads = vec![0.0; model.n_params()];
    let mut sum = LossBreakdown::default();
    let inv_n = 1.0 / batch.len() as f64;
    for (s, &w) in batch.iter().zip(weights) {
        let trace = model.trace(&s.series)?;
        let l = objective.sample(trace.y_hat, trace.sigma, s.target, w);
        add(&mut sum, &l.breakdown);
        model.backward(&trace, l.d_yhat * inv_n, l.d_sigma * inv_n, &mut grads);
    }
    Ok((mean_breakdown(sum, batch.len()), grads))
}

/// Mean objective over a batch without gradients.
pub fn batch_loss(
    model: &RegressorModel,
    batch: &[&TimeSeriesSample],
    weights: &[f64],
    objective: &dyn Objective,
) -> Result<LossBreakdown> {
    let mut sum = LossBreakdown::default();
    for (s, &w) in batch.iter().zip(weights) {
        let (y_hat, sigma) = model.forward(&s.series)?;
        add(&mut sum, &objective.sample(y_hat, sigma, s.target, w).breakdown);
    }
    Ok(mean_breakdown(sum, batch.len().max(1)))
}

/// `(y_hat, sigma_hat)` for every sample of a dataset.
pub fn predict_dataset(model: &RegressorModel, ds: &Dataset) -> Result<Vec<(f64, f64)>> {
    ds.samples.iter().map(|s| model.forward(&s.series)).collect()
}

fn validation_nll(model: &RegressorModel, valid: &Dataset) -> Result<f64> {
    let preds = predict_dataset(model, valid)?;
    let records: Vec<Observation> = preds
        .iter()
        .zip(&valid.samples)
        .map(|(&(y_hat, sigma), s)| Observation::new(y_hat, sigma, s.target))
        .collect();
    metrics::gaussian_nll(&records)
}

/// Trains with the combined objective; weights come from `ws` evaluated once
/// per training target.
pub fn train(
    model: RegressorModel,
    train_ds: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    ws: &WeightScheme,
) -> Result<TrainOutcome> {
    let weights = ws.weights_for(&train_ds.targets());
    fit(model, train_ds, valid, cfg, &weights, &cfg.objective())
}

/// Adam training loop over an arbitrary per-sample objective. Only the
/// optimizer, batching and seed fields of `cfg` are used here.
pub fn fit(
    mut model: RegressorModel,
    train_ds: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    weights: &[f64],
    objective: &dyn Objective,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if weights.len() != train_ds.len() {
        return Err(Error::Shape {
            expected: train_ds.len(),
            got: weights.len(),
        });
    }
    if train_ds.series_len != model.input_len() {
        return Err(Error::Shape {
            expected: model.input_len(),
            got: train_ds.series_len,
        });
    }
    let valid = valid.filter(|v| !v.is_empty());

    let mut opt = Adam::new(
        model.n_params(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TimeSeriesSample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let (loss, grads) = backward(&model, &batch, &w, objective)?;
            let bad_term = loss
                .non_finite_term()
                .or_else(|| grads.iter().any(|g| !g.is_finite()).then_some("gradient"));
            if let Some(term) = bad_term {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    term,
                });
            }
            opt.step(model.params_mut(), &grads);
            let n = chunk.len() as f64;
            epoch_sum.weighted_l1 += loss.weighted_l1 * n;
            epoch_sum.gauss_nll += loss.gauss_nll * n;
            epoch_sum.total += loss.total * n;
            batch_history.push(loss);
        }
        let mean = mean_breakdown(epoch_sum, train_ds.len());
        let val_nll = valid.map(|v| validation_nll(&model, v)).transpose()?;
        if let Some(v) = val_nll {
            let improved = best.as_ref().map_or(true, |(b, _, _)| v < *b);
            if v.is_finite() && improved {
                best = Some((v, epoch, model.params().to_vec()));
            }
        }
        log::debug!(
            "epoch {epoch}: total {:.6} l1 {:.6} nll {:.6} val_nll {:?}",
            mean.total,
            mean.weighted_l1,
            mean.gauss_nll,
            val_nll
        );
        history.push(EpochRecord {
            epoch,
            weighted_l1: mean.weighted_l1,
            gauss_nll: mean.gauss_nll,
            total: mean.total,
            val_nll,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params_mut().copy_from_slice(&params);
            epoch
        }
        None => cfg.epochs.saturating_sub(1),
    };
    Ok(TrainOutcome {
        model,
        history,
        batch_history,
        best_epoch,
    })
}
