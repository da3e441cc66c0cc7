//! Model-ready features: slowdown speed, denoised incident indicators, cyclic
//! time encodings and the assembled, standardized [`FeatureTensor`].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::ingest::{LinkGraph, Panel, TimeGrid, WeatherPanels, WEATHER_NUMERIC};
use crate::util::{self, f64_from_le_bytes, f64_to_le_bytes};
use crate::{Error, Result};

/// Slowdown speed: the positive part of the upstream mean speed minus the
/// link's own speed. Links without upstream neighbours get zero.
pub fn slowdown_speed(speed: &Panel, graph: &LinkGraph) -> Panel {
    let total = speed.grid().total_steps();
    let mut values = vec![0.0; speed.n_links() * total];
    for link in 0..speed.n_links() {
        let ups = graph.upstream(link);
        if ups.is_empty() {
            continue;
        }
        let own = speed.row(link);
        let out = &mut values[link * total..(link + 1) * total];
        for (t, o) in out.iter_mut().enumerate() {
            let mean = ups.iter().map(|&u| speed.get(u, t)).sum::<f64>() / ups.len() as f64;
            *o = (mean - own[t]).max(0.0);
        }
    }
    Panel::from_values(speed.links().to_vec(), speed.grid().clone(), values)
        .expect("shape matches the speed panel")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseParams {
    /// Initial share (percent) of the largest slowdown speeds treated as anomalous.
    pub n_init: f64,
    /// Step (percent) applied to `n` between iterations.
    pub alpha: f64,
    /// Maximum tolerated fraction of reported cells removed.
    pub theta1: f64,
    /// Maximum tolerated fraction of cells added, relative to reported cells.
    pub theta2: f64,
    /// Added anomaly runs shorter than this many steps are discarded.
    pub theta_t: usize,
    pub max_iters: usize,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            n_init: 5.0,
            alpha: 0.5,
            theta1: 0.5,
            theta2: 0.2,
            theta_t: 2,
            max_iters: 50,
        }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> std::result::Result<(), DenoiseError> {
        let bad = |m: &str| Err(DenoiseError::InvalidParams(m.to_string()));
        if !(self.n_init > 0.0 && self.n_init < 100.0) {
            return bad("n_init must lie in (0, 100)");
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if !(self.theta1 > 0.0 && self.theta1 <= 1.0) {
            return bad("theta1 must lie in (0, 1]");
        }
        if !(self.theta2 > 0.0 && self.theta2.is_finite()) {
            return bad("theta2 must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DenoiseError {
    #[error("invalid denoising parameters: {0}")]
    InvalidParams(String),
    #[error("denoising thresholds are infeasible: removal {rm_pct:.4} exceeds theta1 and addition {add_pct:.4} exceeds theta2")]
    InfeasibleThresholds { rm_pct: f64, add_pct: f64 },
    #[error("denoising did not converge in {iterations} iterations (last n = {n}, removal {rm_pct:.4}, addition {add_pct:.4})")]
    NonConvergent {
        iterations: usize,
        n: f64,
        rm_pct: f64,
        add_pct: f64,
    },
    #[error("denoising input shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseIteration {
    pub n: f64,
    pub theta_sd: f64,
    pub rm_pct: f64,
    pub add_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseAudit {
    pub iterations: usize,
    pub final_n: f64,
    pub theta_sd: f64,
    pub rm_pct: f64,
    pub add_pct: f64,
    pub reported_cells: usize,
    pub kept_cells: usize,
    pub added_cells: usize,
    pub history: Vec<DenoiseIteration>,
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Maximal runs `[start, end)` of ones in `mask`, never crossing day boundaries.
fn runs(mask: &[bool], steps_per_day: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for day_start in (0..mask.len()).step_by(steps_per_day) {
        let day_end = day_start + steps_per_day;
        let mut t = day_start;
        while t < day_end {
            if mask[t] {
                let s = t;
                while t < day_end && mask[t] {
                    t += 1;
                }
                out.push(s..t);
            } else {
                t += 1;
            }
        }
    }
    out
}

/// Denoises one link's incident reports against its slowdown speed.
///
/// `inc` and `sd` are `days x steps_per_day` row-major matrices. Each
/// iteration thresholds SD at the `(100 - n)`-th percentile, keeps every
/// reported interval containing an anomalous cell, and labels the remaining
/// anomalous runs of at least `theta_t` steps as added incidents. `n` moves by
/// `alpha` until the removal and addition fractions are both within bounds.
pub fn denoise_incidents(
    inc: &[f64],
    sd: &[f64],
    steps_per_day: usize,
    params: &DenoiseParams,
) -> std::result::Result<(Vec<f64>, DenoiseAudit), DenoiseError> {
    params.validate()?;
    if inc.len() != sd.len() || steps_per_day == 0 || !inc.len().is_multiple_of(steps_per_day) {
        return Err(DenoiseError::Shape(format!(
            "INC has {} cells, SD has {}, steps per day {steps_per_day}",
            inc.len(),
            sd.len()
        )));
    }
    let reported: Vec<bool> = inc.iter().map(|&v| v > 0.5).collect();
    let intervals = runs(&reported, steps_per_day);
    let total_inc = reported.iter().filter(|&&r| r).count();
    let mut sorted = sd.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut n = params.n_init;
    let mut history = Vec::new();
    let mut last = (0.0, 0.0);
    for iter in 1..=params.max_iters {
        let theta_sd = percentile_sorted(&sorted, 100.0 - n);
        let asd: Vec<bool> = sd.iter().map(|&s| theta_sd > 0.0 && s > theta_sd).collect();

        let mut sir = vec![false; inc.len()];
        for iv in &intervals {
            if iv.clone().any(|t| asd[t]) {
                sir[iv.clone()].fill(true);
            }
        }
        let raw_add: Vec<bool> = asd.iter().zip(&sir).map(|(&a, &s)| a && !s).collect();
        let mut add = vec![false; inc.len()];
        for run in runs(&raw_add, steps_per_day) {
            if run.len() >= params.theta_t {
                add[run].fill(true);
            }
        }

        let kept = sir.iter().filter(|&&s| s).count();
        let added = add.iter().filter(|&&a| a).count();
        let (rm_pct, add_pct) = if total_inc == 0 {
            (0.0, 0.0)
        } else {
            (
                1.0 - kept as f64 / total_inc as f64,
                added as f64 / total_inc as f64,
            )
        };
        history.push(DenoiseIteration { n, theta_sd, rm_pct, add_pct });
        last = (rm_pct, add_pct);

        let rm_ok = rm_pct <= params.theta1;
        let add_ok = add_pct <= params.theta2;
        match (rm_ok, add_ok) {
            (false, true) => n += params.alpha,
            (true, false) => n -= params.alpha,
            (true, true) => {
                let dii = sir
                    .iter()
                    .zip(&add)
                    .map(|(&s, &a)| if s || a { 1.0 } else { 0.0 })
                    .collect();
                let audit = DenoiseAudit {
                    iterations: iter,
                    final_n: n,
                    theta_sd,
                    rm_pct,
                    add_pct,
                    reported_cells: total_inc,
                    kept_cells: kept,
                    added_cells: added,
                    history,
                };
                return Ok((dii, audit));
            }
            (false, false) => {
                return Err(DenoiseError::InfeasibleThresholds { rm_pct, add_pct });
            }
        }
    }
    Err(DenoiseError::NonConvergent {
        iterations: params.max_iters,
        n,
        rm_pct: last.0,
        add_pct: last.1,
    })
}

/// Per-link audit entry in the denoising report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkAudit {
    pub link_id: String,
    #[serde(flatten)]
    pub audit: DenoiseAudit,
}

/// Runs the denoiser on every link. The first failing link aborts the run.
pub fn denoise_panel(
    inc: &Panel,
    sd: &Panel,
    params: &DenoiseParams,
) -> Result<(Panel, Vec<LinkAudit>)> {
    if !inc.aligned_with(sd) {
        return Err(Error::Alignment("INC and SD panels differ in links or grid".into()));
    }
    let spd = inc.grid().steps_per_day();
    let mut values = Vec::with_capacity(inc.values().len());
    let mut audits = Vec::new();
    for (link, id) in inc.links().iter().enumerate() {
        let (dii, audit) = denoise_incidents(inc.row(link), sd.row(link), spd, params).map_err(
            |e| {
                log::error!("denoising failed on link {id}: {e}");
                e
            },
        )?;
        values.extend(dii);
        audits.push(LinkAudit { link_id: id.clone(), audit });
    }
    Ok((
        Panel::from_values(inc.links().to_vec(), inc.grid().clone(), values)?,
        audits,
    ))
}

/// Segment, network and count incident features derived from DII.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidentFeatures {
    pub segment: Panel,
    pub network: Panel,
    pub count: Panel,
}

pub fn incident_features(dii: &Panel) -> IncidentFeatures {
    let total = dii.grid().total_steps();
    let n_links = dii.n_links();
    let mut count_t = vec![0.0f64; total];
    for link in 0..n_links {
        for (t, c) in count_t.iter_mut().enumerate() {
            if dii.get(link, t) > 0.5 {
                *c += 1.0;
            }
        }
    }
    let network_t: Vec<f64> = count_t.iter().map(|&c| c.min(1.0)).collect();
    let broadcast = |row: &[f64]| {
        let values = row.repeat(n_links);
        Panel::from_values(dii.links().to_vec(), dii.grid().clone(), values)
            .expect("broadcast shape")
    };
    IncidentFeatures {
        segment: dii.clone(),
        network: broadcast(&network_t),
        count: broadcast(&count_t),
    }
}

/// Calendar features per grid step (identical for every link).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFeatures {
    pub hour_sin: Vec<f64>,
    pub hour_cos: Vec<f64>,
    pub dow_sin: Vec<f64>,
    pub dow_cos: Vec<f64>,
    pub month_sin: Vec<f64>,
    pub month_cos: Vec<f64>,
    pub holiday: Vec<f64>,
}

/// `(sin(2 pi i / T), cos(2 pi i / T))` for a zero-based index `i`.
pub fn cyclic(i: u32, period: u32) -> (f64, f64) {
    let a = 2.0 * PI * i as f64 / period as f64;
    (a.sin(), a.cos())
}

/// US federal holidays of one year on their calendar dates (no observed-day
/// shifting).
pub fn us_holidays(year: i32) -> Vec<NaiveDate> {
    use chrono::Weekday::{Mon, Thu};
    let nth = |month: u32, wd, n: u8| NaiveDate::from_weekday_of_month_opt(year, month, wd, n);
    let last_monday_may = (25..=31)
        .rev()
        .filter_map(|d| NaiveDate::from_ymd_opt(year, 5, d))
        .find(|d| d.weekday() == Mon);
    let fixed = |m, d| NaiveDate::from_ymd_opt(year, m, d);
    let mut out: Vec<NaiveDate> = [
        fixed(1, 1),
        nth(1, Mon, 3),
        nth(2, Mon, 3),
        last_monday_may,
        fixed(6, 19),
        fixed(7, 4),
        nth(9, Mon, 1),
        nth(10, Mon, 2),
        fixed(11, 11),
        nth(11, Thu, 4),
        fixed(12, 25),
    ]
    .into_iter()
    .flatten()
    .collect();
    out.sort();
    out
}

/// Hour of day (T = 24), day of week with Monday = 0 (T = 7) and month with
/// January = 0 (T = 12), plus a holiday flag.
pub fn time_features(grid: &TimeGrid, holidays: &BTreeSet<NaiveDate>) -> TimeFeatures {
    let total = grid.total_steps();
    let mut tf = TimeFeatures {
        hour_sin: Vec::with_capacity(total),
        hour_cos: Vec::with_capacity(total),
        dow_sin: Vec::with_capacity(total),
        dow_cos: Vec::with_capacity(total),
        month_sin: Vec::with_capacity(total),
        month_cos: Vec::with_capacity(total),
        holiday: Vec::with_capacity(total),
    };
    for flat in 0..total {
        let ts = grid.timestamp(flat);
        let (hs, hc) = cyclic(ts.hour(), 24);
        let (ds, dc) = cyclic(ts.weekday().num_days_from_monday(), 7);
        let (ms, mc) = cyclic(ts.month0(), 12);
        tf.hour_sin.push(hs);
        tf.hour_cos.push(hc);
        tf.dow_sin.push(ds);
        tf.dow_cos.push(dc);
        tf.month_sin.push(ms);
        tf.month_cos.push(mc);
        tf.holiday.push(if holidays.contains(&ts.date()) { 1.0 } else { 0.0 });
    }
    tf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    ObservedPast,
    KnownFuture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Numeric,
    /// Cyclic sine/cosine component, kept unscaled.
    Cyclic,
    Binary,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub kind: VarKind,
    pub dtype: DType,
    /// Train-split mean and standard deviation for standardized numerics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<(f64, f64)>,
    /// Category names; index 0 is the unknown category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

impl VariableMeta {
    pub fn cardinality(&self) -> usize {
        self.vocabulary.as_ref().map_or(0, Vec::len)
    }
}

pub const TARGET: &str = "speed";
pub const UNKNOWN_CATEGORY: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    links: Vec<String>,
    grid: TimeGrid,
    train_days: Range<usize>,
    variables: Vec<VariableMeta>,
}

/// Aligned `links x steps x variables` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    links: Vec<String>,
    grid: TimeGrid,
    train_days: Range<usize>,
    variables: Vec<VariableMeta>,
    data: Vec<f64>,
}

/// Inputs to [`assemble_features`].
pub struct FeatureSources<'a> {
    pub speed: &'a Panel,
    pub sd: &'a Panel,
    pub incidents: &'a IncidentFeatures,
    pub time: &'a TimeFeatures,
    pub weather: &'a WeatherPanels,
}

fn standardize(values: &mut [f64], train: &[usize]) -> (f64, f64) {
    let n = train.len() as f64;
    let mean = if train.is_empty() {
        0.0
    } else {
        train.iter().map(|&i| values[i]).sum::<f64>() / n
    };
    let var = if train.is_empty() {
        0.0
    } else {
        train.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / n
    };
    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    (mean, sd)
}

/// Stacks every feature into a [`FeatureTensor`].
///
/// Numeric variables are z-scored with statistics from the `train_days`
/// range (σ falls back to 1 when degenerate); cyclic and binary variables are
/// left unscaled. The weather condition becomes a vocabulary index built from
/// the training days, with index 0 reserved for unseen or missing values.
pub fn assemble_features(src: &FeatureSources<'_>, train_days: Range<usize>) -> Result<FeatureTensor> {
    let speed = src.speed;
    let mut panels = vec![
        src.sd,
        &src.incidents.segment,
        &src.incidents.network,
        &src.incidents.count,
    ];
    panels.extend(src.weather.numeric.iter());
    for p in panels {
        if !speed.aligned_with(p) {
            return Err(Error::Alignment(
                "feature panels do not share links and grid with the speed panel".into(),
            ));
        }
    }
    let grid = speed.grid().clone();
    let total = grid.total_steps();
    let n_links = speed.n_links();
    let time_len_ok = [
        &src.time.hour_sin,
        &src.time.hour_cos,
        &src.time.dow_sin,
        &src.time.dow_cos,
        &src.time.month_sin,
        &src.time.month_cos,
        &src.time.holiday,
    ]
    .iter()
    .all(|v| v.len() == total);
    if !time_len_ok || src.weather.condition.len() != total {
        return Err(Error::Alignment("time or weather features do not match the grid".into()));
    }
    if train_days.is_empty() || train_days.end > grid.n_days() {
        return Err(Error::Split(format!(
            "training days {train_days:?} are not within the {} grid days",
            grid.n_days()
        )));
    }
    let spd = grid.steps_per_day();
    let train_steps: Vec<usize> = (train_days.start * spd..train_days.end * spd).collect();
    let train_cells: Vec<usize> = (0..n_links)
        .flat_map(|l| train_steps.iter().map(move |&t| l * total + t))
        .collect();

    let mut metas = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut push = |name: &str, kind, dtype, mut col: Vec<f64>, train: &[usize]| {
        let scaling = if dtype == DType::Numeric {
            Some(standardize(&mut col, train))
        } else {
            None
        };
        metas.push(VariableMeta {
            name: name.to_string(),
            kind,
            dtype,
            scaling,
            vocabulary: None,
        });
        columns.push(col);
    };
    use DType::*;
    use VarKind::*;

    push(TARGET, ObservedPast, Numeric, speed.values().to_vec(), &train_cells);
    push("slowdown_speed", ObservedPast, Numeric, src.sd.values().to_vec(), &train_cells);
    for (name, panel) in WEATHER_NUMERIC.iter().zip(&src.weather.numeric) {
        let mut col = panel.values().to_vec();
        let observed: Vec<f64> = train_cells
            .iter()
            .map(|&i| col[i])
            .filter(|v| v.is_finite())
            .collect();
        let fill = if observed.is_empty() {
            log::warn!("weather variable {name} has no training values; using a neutral constant");
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for v in col.iter_mut().filter(|v| !v.is_finite()) {
            *v = fill;
        }
        push(name, ObservedPast, Numeric, col, &train_cells);
    }

    let mut vocab: Vec<String> = train_steps
        .iter()
        .filter_map(|&t| src.weather.condition[t].as_ref())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    vocab.insert(0, UNKNOWN_CATEGORY.to_string());
    let cond_t: Vec<f64> = src
        .weather
        .condition
        .iter()
        .map(|c| {
            c.as_ref()
                .and_then(|c| vocab.iter().position(|v| v == c))
                .unwrap_or(0) as f64
        })
        .collect();
    push("condition", ObservedPast, Categorical, cond_t.repeat(n_links), &[]);

    let t = src.time;
    for (name, row, dtype) in [
        ("hour_sin", &t.hour_sin, Cyclic),
        ("hour_cos", &t.hour_cos, Cyclic),
        ("dow_sin", &t.dow_sin, Cyclic),
        ("dow_cos", &t.dow_cos, Cyclic),
        ("month_sin", &t.month_sin, Cyclic),
        ("month_cos", &t.month_cos, Cyclic),
        ("holiday", &t.holiday, Binary),
    ] {
        push(name, KnownFuture, dtype, row.repeat(n_links), &[]);
    }
    push("link_incident", KnownFuture, Binary, src.incidents.segment.values().to_vec(), &[]);
    push("network_incident", KnownFuture, Binary, src.incidents.network.values().to_vec(), &[]);
    push("incident_count", KnownFuture, Numeric, src.incidents.count.values().to_vec(), &train_cells);

    if let Some(m) = metas.iter_mut().find(|m| m.dtype == Categorical) {
        m.vocabulary = Some(vocab);
    }
    let n_vars = columns.len();
    let mut data = vec![0.0; n_links * total * n_vars];
    for (v, col) in columns.iter().enumerate() {
        for (cell, &x) in col.iter().enumerate() {
            data[cell * n_vars + v] = x;
        }
    }
    Ok(FeatureTensor {
        links: speed.links().to_vec(),
        grid,
        train_days,
        variables: metas,
        data,
    })
}

impl FeatureTensor {
    pub fn links(&self) -> &[String] {
        &self.links
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn train_days(&self) -> Range<usize> {
        self.train_days.clone()
    }

    pub fn variables(&self) -> &[VariableMeta] {
        &self.variables
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn target_index(&self) -> usize {
        self.var_index(TARGET).expect("feature tensor always carries the target")
    }

    /// Indices of variables of one kind, in tensor order.
    pub fn indices_of(&self, kind: VarKind) -> Vec<usize> {
        (0..self.variables.len())
            .filter(|&i| self.variables[i].kind == kind)
            .collect()
    }

    pub fn value(&self, link: usize, flat: usize, var: usize) -> f64 {
        self.data[(link * self.grid.total_steps() + flat) * self.variables.len() + var]
    }

    /// All variables at one cell.
    pub fn cell(&self, link: usize, flat: usize) -> &[f64] {
        let v = self.variables.len();
        let i = (link * self.grid.total_steps() + flat) * v;
        &self.data[i..i + v]
    }

    /// One variable as a `links x steps` matrix.
    pub fn column(&self, var: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(var)
            .step_by(self.variables.len())
            .copied()
            .collect()
    }

    /// Target mean and standard deviation used for standardization.
    pub fn target_scaling(&self) -> (f64, f64) {
        self.variables[self.target_index()]
            .scaling
            .expect("target is a standardized numeric")
    }

    pub fn to_mph(&self, z: f64) -> f64 {
        let (m, s) = self.target_scaling();
        z * s + m
    }

    /// Raw target speed in mph at one cell.
    pub fn speed_mph(&self, link: usize, flat: usize) -> f64 {
        self.to_mph(self.value(link, flat, self.target_index()))
    }

    /// Writes `variables.json` plus one little-endian f64 matrix per variable.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let header = TensorHeader {
            links: self.links.clone(),
            grid: self.grid.clone(),
            train_days: self.train_days.clone(),
            variables: self.variables.clone(),
        };
        util::write(&dir.join("variables.json"), serde_json::to_vec_pretty(&header)?)?;
        for (i, meta) in self.variables.iter().enumerate() {
            util::write(
                &dir.join(format!("{}.bin", meta.name)),
                f64_to_le_bytes(&self.column(i)),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: TensorHeader =
            serde_json::from_str(&util::read_to_string(&dir.join("variables.json"))?)?;
        let n_vars = header.variables.len();
        let cells = header.links.len() * header.grid.total_steps();
        let mut data = vec![0.0; cells * n_vars];
        for (v, meta) in header.variables.iter().enumerate() {
            let col = f64_from_le_bytes(&util::read_bytes(&dir.join(format!("{}.bin", meta.name)))?)?;
            if col.len() != cells {
                return Err(Error::Data(format!(
                    "feature matrix {} has {} cells, expected {cells}",
                    meta.name,
                    col.len()
                )));
            }
            for (cell, x) in col.into_iter().enumerate() {
                data[cell * n_vars + v] = x;
            }
        }
        Ok(Self {
            links: header.links,
            grid: header.grid,
            train_days: header.train_days,
            variables: header.variables,
            data,
        })
    }
}
