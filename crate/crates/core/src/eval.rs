//! SMAPE and RMSE over forecast origins `t`, horizon steps `h` and links
//! `n`, with per-horizon, per-condition and incident-segment breakdowns.
//!
//! Both metrics average in nested order: over links within one
//! `(origin, step)` pair, then over steps, then over origins. RMSE takes the
//! square root per `(origin, step)` pair before averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::features::FeatureTensor;
use crate::windows::{Condition, WindowSlice, LINK_INCIDENT};
use crate::{Error, Result};

/// One predicted value: forecast origin, horizon step (0-based), link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub origin: usize,
    pub step: usize,
    pub link: usize,
    pub pred: f64,
    pub truth: f64,
}

fn smape_term(pred: f64, truth: f64) -> f64 {
    let denom = (pred.abs() + truth.abs()) / 2.0;
    if denom == 0.0 {
        0.0
    } else {
        (pred - truth).abs() / denom * 100.0
    }
}

/// Groups cells by origin, then step.
fn nest(cells: &[Cell]) -> BTreeMap<usize, BTreeMap<usize, Vec<(f64, f64)>>> {
    let mut m: BTreeMap<usize, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for c in cells {
        m.entry(c.origin).or_default().entry(c.step).or_default().push((c.pred, c.truth));
    }
    m
}

fn nested_mean(cells: &[Cell], inner: impl Fn(&[(f64, f64)]) -> f64) -> Option<f64> {
    if cells.is_empty() {
        return None;
    }
    let by_origin = nest(cells);
    let mut total = 0.0;
    for steps in by_origin.values() {
        let s: f64 = steps.values().map(|v| inner(v)).sum();
        total += s / steps.len() as f64;
    }
    Some(total / by_origin.len() as f64)
}

/// Percent; `None` for an empty cell set.
pub fn smape(cells: &[Cell]) -> Option<f64> {
    nested_mean(cells, |v| v.iter().map(|&(p, y)| smape_term(p, y)).sum::<f64>() / v.len() as f64)
}

/// Same unit as the data; `None` for an empty cell set.
pub fn rmse(cells: &[Cell]) -> Option<f64> {
    nested_mean(cells, |v| {
        (v.iter().map(|&(p, y)| (p - y) * (p - y)).sum::<f64>() / v.len() as f64).sqrt()
    })
}

/// Cells of a dense `[t][h][n]` cube pair.
pub fn cube_cells(pred: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>]) -> Vec<Cell> {
    let mut out = Vec::new();
    for (t, (pt, yt)) in pred.iter().zip(truth).enumerate() {
        for (h, (ph, yh)) in pt.iter().zip(yt).enumerate() {
            for (n, (&p, &y)) in ph.iter().zip(yh).enumerate() {
                out.push(Cell { origin: t, step: h, link: n, pred: p, truth: y });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub smape: f64,
    pub rmse: f64,
    pub count: usize,
}

impl Metrics {
    pub fn of(cells: &[Cell]) -> Option<Self> {
        Some(Self {
            smape: smape(cells)?,
            rmse: rmse(cells)?,
            count: cells.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub overall: Metrics,
    /// Entry `k` covers horizon step `k + 1`; `None` when that step has no cells.
    pub horizon: Vec<Option<Metrics>>,
}

/// Per-horizon metrics for steps `0..h`.
pub fn horizon_profile(cells: &[Cell], h: usize) -> Vec<Option<Metrics>> {
    (0..h)
        .map(|k| {
            let sub: Vec<Cell> = cells.iter().filter(|c| c.step == k).copied().collect();
            Metrics::of(&sub)
        })
        .collect()
}

impl Breakdown {
    pub fn of(cells: &[Cell], h: usize) -> Option<Self> {
        Some(Self {
            overall: Metrics::of(cells)?,
            horizon: horizon_profile(cells, h),
        })
    }
}

/// Point forecast (mph) of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    pub slice: WindowSlice,
    pub point: Vec<f64>,
}

/// Cells of a set of slice predictions against the tensor's speed.
pub fn prediction_cells(ft: &FeatureTensor, preds: &[SlicePrediction], c: usize) -> Vec<Cell> {
    let mut out = Vec::new();
    for p in preds {
        let t0 = p.slice.t0_flat(ft, c);
        for (k, &v) in p.point.iter().enumerate() {
            out.push(Cell {
                origin: t0,
                step: k,
                link: p.slice.link,
                pred: v,
                truth: ft.speed_mph(p.slice.link, t0 + k),
            });
        }
    }
    out
}

/// Restricts cells to (link, time) pairs whose denoised incident indicator is set.
pub fn incident_segment_cells(ft: &FeatureTensor, cells: &[Cell]) -> Result<Vec<Cell>> {
    let v = ft
        .var_index(LINK_INCIDENT)
        .ok_or_else(|| Error::Data(format!("feature tensor lacks the {LINK_INCIDENT} variable")))?;
    Ok(cells
        .iter()
        .filter(|c| ft.value(c.link, c.origin + c.step, v) > 0.5)
        .copied()
        .collect())
}

/// Incident-segment metrics; `None` when no test cell is an incident cell.
pub fn incident_segment_eval(ft: &FeatureTensor, cells: &[Cell], h: usize) -> Result<Option<Breakdown>> {
    Ok(Breakdown::of(&incident_segment_cells(ft, cells)?, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub h: usize,
    pub all: Option<Breakdown>,
    pub recurrent: Option<Breakdown>,
    pub nonrecurrent: Option<Breakdown>,
    pub incident_segments: Option<Breakdown>,
}

pub const SPLITS: [&str; 4] = ["all", "recurrent", "nonrecurrent", "incident_segments"];

impl EvalReport {
    pub fn build(model: &str, ft: &FeatureTensor, preds: &[SlicePrediction], c: usize, h: usize) -> Result<Self> {
        let by = |cond: Option<Condition>| -> Vec<SlicePrediction> {
            preds
                .iter()
                .filter(|p| cond.is_none_or(|k| p.slice.condition == k))
                .cloned()
                .collect()
        };
        let all = prediction_cells(ft, preds, c);
        let rec = prediction_cells(ft, &by(Some(Condition::Recurrent)), c);
        let nr = prediction_cells(ft, &by(Some(Condition::NonRecurrent)), c);
        Ok(Self {
            model: model.to_string(),
            h,
            all: Breakdown::of(&all, h),
            recurrent: Breakdown::of(&rec, h),
            nonrecurrent: Breakdown::of(&nr, h),
            incident_segments: incident_segment_eval(ft, &all, h)?,
        })
    }

    pub fn split(&self, name: &str) -> Option<&Breakdown> {
        match name {
            "all" => self.all.as_ref(),
            "recurrent" => self.recurrent.as_ref(),
            "nonrecurrent" => self.nonrecurrent.as_ref(),
            "incident_segments" => self.incident_segments.as_ref(),
            _ => None,
        }
    }
}

pub const CSV_HEADER: &str = "model,split,metric,horizon,value,count,status\n";

/// Tidy rows (one per model, split, metric and horizon). Absent splits get
/// one row per metric with status `absent`.
pub fn tidy_csv(reports: &[EvalReport], splits: &[&str]) -> String {
    let mut s = String::from(CSV_HEADER);
    for r in reports {
        for &split in splits {
            match r.split(split) {
                None => {
                    for metric in ["smape", "rmse"] {
                        let _ = writeln!(s, "{},{split},{metric},all,,0,absent", r.model);
                    }
                }
                Some(b) => {
                    let mut row = |metric: &str, horizon: String, m: Option<&Metrics>| {
                        let _ = match m {
                            Some(m) => {
                                let v = if metric == "smape" { m.smape } else { m.rmse };
                                writeln!(s, "{},{split},{metric},{horizon},{v:.6},{},ok", r.model, m.count)
                            }
                            None => writeln!(s, "{},{split},{metric},{horizon},,0,absent", r.model),
                        };
                    };
                    for metric in ["smape", "rmse"] {
                        row(metric, "all".into(), Some(&b.overall));
                        for (k, m) in b.horizon.iter().enumerate() {
                            row(metric, (k + 1).to_string(), m.as_ref());
                        }
                    }
                }
            }
        }
    }
    s
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Number of adjacent decreases in `v`.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}
