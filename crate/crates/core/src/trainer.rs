//! Optimizers and the epoch loop.
//!
//! Each epoch first refreshes the uncertainty `ū` over the full unlabeled set,
//! then walks a seeded shuffle of all rows in mini-batches: forward, pair
//! construction, combined loss, backward, optimizer step. The loop is
//! single-threaded so a run is a pure function of its inputs and seed.

use serde::{Deserialize, Serialize};

use crate::datasets::OpenWorldDataset;
use crate::error::{Error, Result};
use crate::eval::{open_world_report, EvalConfig, EvalReport};
use crate::model::{predict_heads, ForwardMode, Gradients, Model};
use crate::numerics::{Matrix, Rng};
use crate::objective::{combined_loss, estimate_uncertainty, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd_default() -> Self {
        OptimizerConfig::SgdMomentum {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn adam_default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::SgdMomentum { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::usage(format!("momentum must lie in [0, 1), got {momentum}")));
                }
                if !(weight_decay >= 0.0) {
                    return Err(Error::usage("weight_decay must be >= 0"));
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::usage("adam betas must lie in [0, 1)"));
                }
                if !(eps > 0.0) {
                    return Err(Error::usage("adam eps must be > 0"));
                }
                if !(weight_decay >= 0.0) {
                    return Err(Error::usage("weight_decay must be >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub base_lr: f64,
    /// Epoch indices (0-based) at which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            optimizer: OptimizerConfig::adam_default(),
            base_lr: 1e-3,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::usage(format!(
                "batch_size ≥ 2 required, got {}",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::usage(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::usage(format!(
                "lr_decay_factor must be > 1, got {}",
                self.lr_decay_factor
            )));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::usage("lr_decay_epochs must be strictly increasing"));
        }
        self.optimizer.validate()
    }
}

/// Step schedule: `base_lr / factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.base_lr / cfg.lr_decay_factor.powi(decays as i32)
}

fn check_shapes(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::usage(format!(
            "optimizer shape mismatch: params {a}, grads {b}, state {c}"
        )));
    }
    Ok(())
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params.len(), grads.len(), velocity.len())?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    lr: f64,
    hyper: AdamHyper,
    step: u64,
) -> Result<()> {
    check_shapes(params.len(), grads.len(), first.len())?;
    check_shapes(params.len(), grads.len(), second.len())?;
    if step == 0 {
        return Err(Error::usage("adam step index starts at 1"));
    }
    let c1 = 1.0 - hyper.beta1.powi(step as i32);
    let c2 = 1.0 - hyper.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Per-parameter optimizer state matching [`Model::param_slices_mut`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &mut Model) -> Self {
        let sizes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.values.len()).collect();
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            first: zeros(),
            second,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let grad_slices = grads.slices();
        let mut params = model.param_slices_mut();
        if params.len() != grad_slices.len() {
            return Err(Error::usage("gradient layout does not match model"));
        }
        for (i, (p, g)) in params.iter_mut().zip(&grad_slices).enumerate() {
            if !p.trainable {
                continue;
            }
            match self.config {
                OptimizerConfig::SgdMomentum { momentum, weight_decay } => {
                    sgd_momentum_step(p.values, g, &mut self.first[i], lr, momentum, weight_decay)?;
                }
                OptimizerConfig::Adam { beta1, beta2, eps, weight_decay } => {
                    let decayed;
                    let g: &[f64] = if weight_decay > 0.0 {
                        decayed = g
                            .iter()
                            .zip(p.values.iter())
                            .map(|(g, w)| g + weight_decay * w)
                            .collect::<Vec<_>>();
                        &decayed
                    } else {
                        g
                    };
                    let hyper = AdamHyper { beta1, beta2, eps };
                    adam_step(p.values, g, &mut self.first[i], &mut self.second[i], lr, hyper, self.step)?;
                }
            }
        }
        Ok(())
    }
}

/// One record per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Uncertainty estimated before the epoch's batch loop.
    pub u_bar: f64,
    /// Margin actually added to target logits this epoch.
    pub margin: f64,
    /// Row-weighted means over the epoch's batches.
    pub loss_supervised: f64,
    pub loss_pairwise: f64,
    pub loss_regularizer: f64,
    pub loss_total: f64,
    /// Fraction of pseudo pairs joining two rows of the same true class.
    pub pseudo_label_accuracy: Option<f64>,
    pub batches: usize,
    /// Batches without labeled rows (supervised term skipped).
    pub unsupervised_batches: usize,
    /// Rows left out because the final batch had fewer than 2 rows.
    pub dropped_rows: usize,
    pub eval: EvalReport,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub logs: Vec<EpochLog>,
}

/// RNG stream used for batch shuffling and dropout masks.
pub const TRAIN_RNG_STREAM: u64 = 4;

/// Eval-mode predictions on the unlabeled rows, scored with [`open_world_report`].
pub fn evaluate(model: &Model, ds: &OpenWorldDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    check_compatible(model, ds)?;
    let idx = ds.unlabeled_indices();
    if idx.is_empty() {
        return Err(Error::usage("evaluation needs at least one unlabeled row"));
    }
    let preds = predict_rows(model, &ds.features, &idx, 1024)?;
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    open_world_report(&preds, &labels, &ds.seen_classes, model.num_heads(), cfg)
}

fn predict_rows(model: &Model, x: &Matrix, idx: &[usize], chunk: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for part in idx.chunks(chunk) {
        let trace = model.forward(&x.select_rows(part), ForwardMode::Eval)?;
        out.extend(predict_heads(&trace));
    }
    Ok(out)
}

fn check_compatible(model: &Model, ds: &OpenWorldDataset) -> Result<()> {
    ds.validate()?;
    if model.config.input_dim != ds.num_features() {
        return Err(Error::usage(format!(
            "model expects {} features, dataset has {}",
            model.config.input_dim,
            ds.num_features()
        )));
    }
    if model.num_seen_heads() != ds.seen_classes.len() {
        return Err(Error::usage(format!(
            "model has {} seen heads, dataset has {} seen classes",
            model.num_seen_heads(),
            ds.seen_classes.len()
        )));
    }
    Ok(())
}

/// Trains `model` on `ds`; `on_epoch` sees each log as soon as it is produced.
pub fn fit(
    mut model: Model,
    ds: &OpenWorldDataset,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutput> {
    check_compatible(&model, ds)?;
    loss_cfg.validate()?;
    loss_cfg.prior_vector(model.num_heads())?;
    train_cfg.validate()?;

    let mut rng = Rng::with_stream(train_cfg.seed, TRAIN_RNG_STREAM);
    let mut optimizer = Optimizer::new(train_cfg.optimizer, &mut model);
    let unlabeled = ds.features.select_rows(&ds.unlabeled_indices());
    let targets = ds.training_targets();
    let mut logs = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let u_bar = estimate_uncertainty(&model, &unlabeled, train_cfg.batch_size, loss_cfg)?.u_bar;
        let lr = lr_at_epoch(train_cfg, epoch);

        let mut order: Vec<usize> = (0..ds.num_rows()).collect();
        rng.shuffle(&mut order);

        let mut sums = [0.0f64; 4];
        let mut rows_seen = 0usize;
        let mut batches = 0usize;
        let mut unsupervised_batches = 0usize;
        let mut dropped_rows = 0usize;
        let mut pseudo = (0usize, 0usize);

        for batch in order.chunks(train_cfg.batch_size) {
            if batch.len() < 2 {
                dropped_rows += batch.len();
                log::debug!("epoch {epoch}: dropped a final batch of {} row(s)", batch.len());
                continue;
            }
            let x = ds.features.select_rows(batch);
            let batch_targets: Vec<Option<usize>> = batch.iter().map(|&i| targets[i]).collect();
            let trace = model.forward(&x, ForwardMode::Train(&mut rng))?;
            let loss = combined_loss(&trace, &batch_targets, model.num_seen_heads(), u_bar, loss_cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = model.backward(&trace, &loss.grad)?;
            optimizer.step(&mut model, &grads, lr)?;
            debug_assert!(model.is_finite(), "non-finite parameter after step");

            let w = batch.len() as f64;
            sums[0] += w * loss.supervised;
            sums[1] += w * loss.pairwise;
            sums[2] += w * loss.regularizer;
            sums[3] += w * loss.total;
            rows_seen += batch.len();
            batches += 1;
            if loss.labeled_rows == 0 {
                unsupervised_batches += 1;
            }
            let batch_labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let (c, t) = loss.pairs.pseudo_label_hits(&batch_labels);
            pseudo.0 += c;
            pseudo.1 += t;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}")));
        }

        let denom = rows_seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            u_bar,
            margin: loss_cfg.margin(u_bar),
            loss_supervised: sums[0] / denom,
            loss_pairwise: sums[1] / denom,
            loss_regularizer: sums[2] / denom,
            loss_total: sums[3] / denom,
            pseudo_label_accuracy: (pseudo.1 > 0).then(|| pseudo.0 as f64 / pseudo.1 as f64),
            batches,
            unsupervised_batches,
            dropped_rows,
            eval: evaluate(&model, ds, eval_cfg)?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(FitOutput { model, logs })
}
