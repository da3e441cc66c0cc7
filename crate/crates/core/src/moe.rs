//! Mixture of two TFT-lite experts: a recurrent expert trained on
//! incident-free windows and a non-recurrent expert pretrained on them and
//! finetuned on incident windows. A gate `p` picks between them per slice:
//! `y = (1 - p) * recurrent + p * nonrecurrent`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::FeatureTensor;
use crate::tftlite::{QuantileForecast, TftInterpretation, TftModel};
use crate::train::{fit, TrainConfig, TrainReport};
use crate::windows::{filter_condition, label_condition, Condition, WindowSlice, NETWORK_INCIDENT};
use crate::{util, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Uses the slice's own condition label (prediction-window incidents).
    #[default]
    LabelOracle,
    /// Uses only the network incident indicator at the final context step.
    Causal,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LabelOracle => "label_oracle",
            Self::Causal => "causal",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::LabelOracle => "p = 1 iff an incident is active anywhere in the prediction window",
            Self::Causal => "p = 1 iff an incident is active at the final context step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatePolicy {
    pub mode: GateMode,
}

/// Gate value of one slice under `policy`.
pub fn gate(ft: &FeatureTensor, slice: &WindowSlice, policy: GatePolicy, c: usize, h: usize) -> Result<f64> {
    let net = ft
        .var_index(NETWORK_INCIDENT)
        .ok_or_else(|| Error::Data(format!("feature tensor lacks the {NETWORK_INCIDENT} variable")))?;
    let p = match policy.mode {
        GateMode::LabelOracle => {
            let ind = slice.series(ft, net, c + h);
            label_condition(&ind, c) == Condition::NonRecurrent
        }
        GateMode::Causal => ft.value(slice.link, slice.context_flat(ft) + c - 1, net) > 0.5,
    };
    Ok(if p { 1.0 } else { 0.0 })
}

/// `(1 - p) * r + p * n` per step and quantile; the endpoints return one
/// expert's forecast unchanged.
pub fn combine(p: f64, r: &QuantileForecast, n: &QuantileForecast) -> QuantileForecast {
    if p == 0.0 {
        return r.clone();
    }
    if p == 1.0 {
        return n.clone();
    }
    let values = r
        .values
        .iter()
        .zip(&n.values)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - p) * x + p * y).collect())
        .collect();
    QuantileForecast { values }
}

#[derive(Debug, Clone)]
pub struct MoeModel {
    pub recurrent: TftModel,
    pub nonrecurrent: TftModel,
    pub policy: GatePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GateFile {
    mode: GateMode,
    description: String,
}

pub const RECURRENT_STEM: &str = "recurrent";
pub const NONRECURRENT_STEM: &str = "nonrecurrent";
pub const GATE_FILE: &str = "gate.json";

impl MoeModel {
    pub fn new(recurrent: TftModel, nonrecurrent: TftModel, policy: GatePolicy) -> Result<Self> {
        if recurrent.config() != nonrecurrent.config() {
            return Err(Error::Config("the two experts must share one TFT configuration".into()));
        }
        Ok(Self { recurrent, nonrecurrent, policy })
    }

    pub fn gates(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<Vec<f64>> {
        let cfg = self.recurrent.config();
        slices.iter().map(|s| gate(ft, s, self.policy, cfg.c, cfg.h)).collect()
    }

    /// Gated forecasts with the interpretation of the expert that produced
    /// each one (the recurrent expert's when `p < 1`).
    pub fn forecast(
        &self,
        ft: &FeatureTensor,
        slices: &[WindowSlice],
    ) -> Result<Vec<(QuantileForecast, TftInterpretation)>> {
        let gates = self.gates(ft, slices)?;
        let need_r: Vec<WindowSlice> = slices.iter().zip(&gates).filter(|(_, &p)| p < 1.0).map(|(s, _)| *s).collect();
        let need_n: Vec<WindowSlice> = slices.iter().zip(&gates).filter(|(_, &p)| p > 0.0).map(|(s, _)| *s).collect();
        let mut r = self.recurrent.forecast(ft, &need_r)?.into_iter();
        let mut n = self.nonrecurrent.forecast(ft, &need_n)?.into_iter();
        let mut out = Vec::with_capacity(slices.len());
        for &p in &gates {
            let fr = if p < 1.0 { r.next() } else { None };
            let fnr = if p > 0.0 { n.next() } else { None };
            out.push(match (fr, fnr) {
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (Some(a), Some(b)) => (combine(p, &a.0, &b.0), a.1),
                (None, None) => unreachable!("every gate value selects an expert"),
            });
        }
        Ok(out)
    }

    /// Writes both expert checkpoints and `gate.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.recurrent.save(dir, RECURRENT_STEM)?;
        self.nonrecurrent.save(dir, NONRECURRENT_STEM)?;
        let gate = GateFile {
            mode: self.policy.mode,
            description: self.policy.mode.description().to_string(),
        };
        util::write(&dir.join(GATE_FILE), serde_json::to_vec_pretty(&gate)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gate: GateFile = serde_json::from_str(&util::read_to_string(&dir.join(GATE_FILE))?)?;
        let recurrent = TftModel::load(dir, RECURRENT_STEM)?;
        let nonrecurrent = TftModel::load(dir, NONRECURRENT_STEM)?;
        Self::new(recurrent, nonrecurrent, GatePolicy { mode: gate.mode })
    }
}

/// Trains the recurrent expert on recurrent slices only.
pub fn train_recurrent(
    model: &mut TftModel,
    ft: &FeatureTensor,
    train: &[WindowSlice],
    val: &[WindowSlice],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let tr = filter_condition(train, Condition::Recurrent);
    if tr.is_empty() {
        return Err(Error::Training("recurrent training set is empty".into()));
    }
    let va = filter_condition(val, Condition::Recurrent);
    let report = fit(model, ft, &tr, &va, cfg, seed)?;
    if report.audit.nonrecurrent != 0 {
        return Err(Error::Training(format!(
            "recurrent expert read {} non-recurrent slices",
            report.audit.nonrecurrent
        )));
    }
    Ok(report)
}

/// Finetuning settings derived from the pretraining ones.
pub fn finetune_config(pretrain: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lr: pretrain.lr / 10.0,
        patience: 5,
        ..pretrain.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonRecurrentReport {
    pub pretrain: TrainReport,
    /// `None` when there were no non-recurrent training slices.
    pub finetune: Option<TrainReport>,
}

/// Finetunes an already pretrained model on non-recurrent slices, selecting
/// on non-recurrent validation loss. Without non-recurrent training slices
/// the pretrained weights are kept.
pub fn finetune(
    model: &mut TftModel,
    ft: &FeatureTensor,
    train: &[WindowSlice],
    val: &[WindowSlice],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<TrainReport>> {
    let tr = filter_condition(train, Condition::NonRecurrent);
    if tr.is_empty() {
        log::warn!("no non-recurrent training slices; keeping the pretrained weights");
        return Ok(None);
    }
    let va = filter_condition(val, Condition::NonRecurrent);
    fit(model, ft, &tr, &va, cfg, util::mix_seed(seed, 1)).map(Some)
}

/// Pretrains on recurrent slices, then finetunes on non-recurrent ones.
pub fn train_nonrecurrent(
    model: &mut TftModel,
    ft: &FeatureTensor,
    train: &[WindowSlice],
    val: &[WindowSlice],
    pretrain: &TrainConfig,
    finetune_cfg: &TrainConfig,
    seed: u64,
) -> Result<NonRecurrentReport> {
    let pre = train_recurrent(model, ft, train, val, pretrain, seed)?;
    let fin = finetune(model, ft, train, val, finetune_cfg, seed)?;
    Ok(NonRecurrentReport { pretrain: pre, finetune: fin })
}
