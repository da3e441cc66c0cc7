//! Mini-batch Adam training with best-validation checkpoint selection and
//! early stopping, shared by the TFT-lite experts and DeepAR-lite.

use autodiff::{AdamState, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureTensor;
use crate::tftlite::{TftBatch, TftModel};
use crate::util::mix_seed;
use crate::windows::{Condition, WindowSlice};
use crate::{Error, Result};

/// A model the trainer can fit.
pub trait Trainable {
    type Batch;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn make_batch(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<Self::Batch>;
    fn batch_loss(&self, g: &mut Graph, batch: &Self::Batch) -> Result<Var>;
}

impl Trainable for TftModel {
    type Batch = TftBatch;

    fn params(&self) -> &ParamStore {
        TftModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        TftModel::params_mut(self)
    }

    fn make_batch(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<TftBatch> {
        self.batch(ft, slices)
    }

    fn batch_loss(&self, g: &mut Graph, batch: &TftBatch) -> Result<Var> {
        self.loss(g, batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Cap on optimizer steps per epoch (random batches from the shuffled set).
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on validation batches (an evenly spaced, fixed subset).
    pub max_val_batches: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            patience: 5,
            max_batches_per_epoch: None,
            max_val_batches: None,
            grad_clip: Some(1.0),
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("batch_size must be positive and lr non-negative".into()));
        }
        Ok(())
    }
}

/// Counts slices read by training, per condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub recurrent: usize,
    pub nonrecurrent: usize,
}

impl AccessAudit {
    fn record(&mut self, slices: &[WindowSlice]) {
        for s in slices {
            match s.condition {
                Condition::Recurrent => self.recurrent += 1,
                Condition::NonRecurrent => self.nonrecurrent += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training (index 0) and after each epoch.
    pub val_loss: Vec<f64>,
    /// Index into `val_loss` of the selected parameters.
    pub best_index: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub audit: AccessAudit,
}

fn evenly_spaced(slices: &[WindowSlice], max: Option<usize>) -> Vec<WindowSlice> {
    match max {
        Some(m) if m < slices.len() => (0..m).map(|i| slices[i * slices.len() / m]).collect(),
        _ => slices.to_vec(),
    }
}

/// Mean loss over `slices` (weighted by batch size).
pub fn evaluate_loss<M: Trainable>(
    model: &M,
    ft: &FeatureTensor,
    slices: &[WindowSlice],
    batch_size: usize,
    audit: &mut AccessAudit,
) -> Result<f64> {
    if slices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in slices.chunks(batch_size.max(1)) {
        audit.record(chunk);
        let batch = model.make_batch(ft, chunk)?;
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &batch)?;
        total += g.value(loss).item().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(total / slices.len() as f64)
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Fits `model` on `train`, keeping the parameters with the lowest
/// validation loss (the initial parameters included). Without validation
/// slices the final parameters are kept.
pub fn fit<M: Trainable>(
    model: &mut M,
    ft: &FeatureTensor,
    train: &[WindowSlice],
    val: &[WindowSlice],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let mut report = TrainReport::default();
    let val_set = evenly_spaced(val, cfg.max_val_batches.map(|b| b * cfg.batch_size));
    let val_loss = |m: &M, audit: &mut AccessAudit| -> Result<f64> {
        evaluate_loss(m, ft, &val_set, cfg.batch_size, audit)
    };
    let mut audit = AccessAudit::default();
    let initial = val_loss(model, &mut audit)?;
    report.val_loss.push(initial);
    let mut best = (0usize, initial, model.params().clone());
    let mut since_best = 0;

    let trainable: Vec<bool> = model
        .params()
        .iter()
        .map(|(_, p)| !cfg.freeze.iter().any(|pre| p.name.starts_with(pre.as_str())))
        .collect();
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0074_7261_696e));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        let n_batches = cfg.max_batches_per_epoch.map_or(n_batches, |m| m.min(n_batches));
        let mut epoch_loss = 0.0;
        for bi in 0..n_batches {
            let idx = &order[bi * cfg.batch_size..((bi + 1) * cfg.batch_size).min(order.len())];
            let slices: Vec<WindowSlice> = idx.iter().map(|&i| train[i]).collect();
            audit.record(&slices);
            let batch = model.make_batch(ft, &slices)?;
            let mut g = Graph::training(mix_seed(seed, report.steps as u64 + 1));
            let loss = model.batch_loss(&mut g, &batch)?;
            let lv = g.value(loss).item().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(autodiff::AutodiffError::NonFinite { op: "training loss" }.into());
            }
            epoch_loss += lv;
            let mut grads = g.backward(loss)?.for_store(model.params());
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            adam.step_masked(model.params_mut(), &grads, |i| trainable[i]);
            report.steps += 1;
        }
        report.train_loss.push(epoch_loss / n_batches.max(1) as f64);
        let v = val_loss(model, &mut audit)?;
        report.val_loss.push(v);
        log::debug!("epoch {epoch}: train {:.5} val {v:.5}", report.train_loss[epoch - 1]);
        if val_set.is_empty() || v < best.1 {
            best = (epoch, v, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    report.best_index = best.0;
    report.best_val_loss = best.1;
    *model.params_mut() = best.2;
    report.audit = audit;
    Ok(report)
}
