//! In-memory pipeline stages shared by the file-based commands and the
//! end-to-end experiment.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::baselines::{lob_forecast, DeepArConfig, DeepArModel};
use crate::eval::{EvalReport, SlicePrediction};
use crate::features::{
    assemble_features, denoise_panel, incident_features, slowdown_speed, time_features, FeatureSources,
    FeatureTensor, LinkAudit,
};
use crate::ingest::{
    self, load_incidents, load_speed, load_weather, IncidentLoadReport, IncidentReport, IncidentRow, LinkGraph,
    Panel, SpeedLoadReport, SpeedRow, TimeGrid, WeatherPanels, WeatherRecord,
};
use crate::interpret::{attention_profile, variable_importance, ConditionInterpretation};
use crate::moe::{combine, finetune, gate, train_recurrent, GateMode, GatePolicy};
use crate::synth::Scenario;
use crate::tftlite::{TftConfig, TftInterpretation, TftModel};
use crate::train::{fit, TrainReport};
use crate::util::{self, mix_seed};
use crate::windows::{
    chronological_split, filter_condition, slice_windows, Condition, DaySplit, Partitions, SplitManifest,
    WindowSlice,
};
use crate::{Error, Result};

use super::Config;

/// Seed streams.
const INIT: u64 = 1;
const TRAIN_R: u64 = 2;
const TRAIN_FT: u64 = 3;
const TRAIN_NR: u64 = 4;
const TRAIN_ALL: u64 = 5;
const TRAIN_DEEPAR: u64 = 6;
const SAMPLE_DEEPAR: u64 = 7;

pub const LOB: &str = "LOb";
pub const TFT_R: &str = "TFT-R";
pub const TFT_NR: &str = "TFT-NR";
pub const TFT_FT: &str = "TFT-FT";
pub const TFT_ALL: &str = "TFT-ALL";
pub const MOE: &str = "MoE";
pub const MOE_CAUSAL: &str = "MoE-causal";
pub const DEEPAR: &str = "DeepAR";

#[derive(Debug, Clone)]
pub struct RawData {
    pub graph: LinkGraph,
    pub speed: Vec<SpeedRow>,
    pub incidents: Vec<IncidentRow>,
    pub weather: Vec<WeatherRecord>,
    pub weather_rejected: usize,
}

impl RawData {
    pub fn from_scenario(sc: &Scenario) -> Self {
        Self {
            graph: sc.graph.clone(),
            speed: sc.speed_rows.clone(),
            incidents: sc.incident_rows.clone(),
            weather: sc.weather.clone(),
            weather_rejected: 0,
        }
    }

    pub fn read(cfg: &Config, workdir: &Path) -> Result<Self> {
        let open = |p: &Path| -> Result<Vec<u8>> {
            let full = workdir.join(p);
            if !full.exists() {
                return Err(Error::Prerequisite {
                    artifact: full.display().to_string(),
                    producer: "synth".into(),
                });
            }
            util::read_bytes(&full)
        };
        let graph = LinkGraph::from_csv(open(&cfg.data.network)?.as_slice())?;
        let speed = ingest::read_speed_csv(open(&cfg.data.speed)?.as_slice())?;
        let incidents = ingest::read_incident_csv(open(&cfg.data.incidents)?.as_slice())?;
        let (weather, weather_rejected) = ingest::read_weather_csv(open(&cfg.data.weather)?.as_slice())?;
        Ok(Self { graph, speed, incidents, weather, weather_rejected })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub days: usize,
    pub first_day: NaiveDate,
    pub steps_per_day: usize,
    pub links: usize,
    pub speed: SpeedLoadReport,
    pub incidents: IncidentLoadReport,
    pub weather_rows: usize,
    pub weather_rejected: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub graph: LinkGraph,
    pub grid: TimeGrid,
    pub holidays: BTreeSet<NaiveDate>,
    pub speed: Panel,
    pub reports: Vec<IncidentReport>,
    pub inc: Panel,
    pub weather: WeatherPanels,
    pub report: IngestReport,
}

pub fn build_grid(cfg: &Config, speed: &[SpeedRow]) -> Result<TimeGrid> {
    let (start, end) = cfg.grid.window()?;
    let first = match cfg.grid.first_day {
        Some(d) => d,
        None => speed
            .iter()
            .map(|r| r.ts.date())
            .min()
            .ok_or_else(|| Error::Data("speed data is empty".into()))?,
    };
    let n = match cfg.grid.days {
        Some(n) => n,
        None => {
            let last = speed.iter().map(|r| r.ts.date()).max().unwrap_or(first);
            ((last - first).num_days() + 1).max(1) as usize
        }
    };
    TimeGrid::new(TimeGrid::consecutive_days(first, n), start, end, cfg.grid.step_minutes)
}

pub fn ingest_raw(raw: &RawData, cfg: &Config) -> Result<Ingested> {
    let grid = build_grid(cfg, &raw.speed)?;
    let (speed, speed_report) = load_speed(&raw.speed, &grid, &raw.graph)?;
    let (reports, inc, inc_report) = load_incidents(&raw.incidents, &grid, &raw.graph, &cfg.data.incident_kinds);
    let weather = load_weather(&raw.weather, &grid, raw.graph.links());
    let holidays = cfg.grid.holiday_set(grid.days());
    let report = IngestReport {
        days: grid.n_days(),
        first_day: grid.days()[0],
        steps_per_day: grid.steps_per_day(),
        links: raw.graph.len(),
        speed: speed_report,
        incidents: inc_report,
        weather_rows: raw.weather.len(),
        weather_rejected: raw.weather_rejected,
    };
    Ok(Ingested {
        graph: raw.graph.clone(),
        grid,
        holidays,
        speed,
        reports,
        inc,
        weather,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct Denoised {
    pub sd: Panel,
    pub dii: Panel,
    pub audits: Vec<LinkAudit>,
}

pub fn denoise(ing: &Ingested, cfg: &Config) -> Result<Denoised> {
    let sd = slowdown_speed(&ing.speed, &ing.graph);
    let (dii, audits) = denoise_panel(&ing.inc, &sd, &cfg.denoise)?;
    Ok(Denoised { sd, dii, audits })
}

#[derive(Debug, Clone)]
pub struct Featurized {
    pub ft: FeatureTensor,
    pub split: DaySplit,
    pub parts: Partitions,
    pub manifest: SplitManifest,
}

pub fn featurize(ing: &Ingested, den: &Denoised, cfg: &Config) -> Result<FeatureTensor> {
    let split = cfg.windows.split().split_days(ing.grid.n_days())?;
    let incf = incident_features(&den.dii);
    let tf = time_features(&ing.grid, &ing.holidays);
    let src = FeatureSources {
        speed: &ing.speed,
        sd: &den.sd,
        incidents: &incf,
        time: &tf,
        weather: &ing.weather,
    };
    assemble_features(&src, split.train)
}

/// Slices and partitions of a feature tensor.
pub fn partition(ft: FeatureTensor, cfg: &Config) -> Result<Featurized> {
    let (c, h) = (cfg.windows.c, cfg.windows.h);
    let split = cfg.windows.split().split_days(ft.grid().n_days())?;
    let slices = slice_windows(&ft, c, h)?;
    let parts = chronological_split(&slices, &split);
    let manifest = SplitManifest::new(&ft, c, h, &split, &parts);
    Ok(Featurized { ft, split, parts, manifest })
}

pub fn tft_config(f: &Featurized, cfg: &Config) -> Result<TftConfig> {
    TftConfig::for_tensor(&f.ft, &cfg.tft, cfg.windows.c, cfg.windows.h)
}

fn new_tft(f: &Featurized, cfg: &Config) -> Result<TftModel> {
    TftModel::new(tft_config(f, cfg)?, mix_seed(cfg.seed, INIT))
}

/// Recurrent expert (TFT-R).
pub fn train_tft_recurrent(f: &Featurized, cfg: &Config) -> Result<(TftModel, TrainReport)> {
    let mut m = new_tft(f, cfg)?;
    let r = train_recurrent(&mut m, &f.ft, &f.parts.train, &f.parts.val, &cfg.train, mix_seed(cfg.seed, TRAIN_R))?;
    Ok((m, r))
}

/// Non-recurrent expert (TFT-FT): the recurrent expert finetuned on
/// non-recurrent slices.
pub fn train_tft_finetuned(pretrained: &TftModel, f: &Featurized, cfg: &Config) -> Result<(TftModel, Option<TrainReport>)> {
    let mut m = pretrained.clone();
    let r = finetune(
        &mut m,
        &f.ft,
        &f.parts.train,
        &f.parts.val,
        &cfg.finetune_config(),
        mix_seed(cfg.seed, TRAIN_FT),
    )?;
    Ok((m, r))
}

/// Ablation trained on non-recurrent slices only (TFT-NR).
pub fn train_tft_nr_only(f: &Featurized, cfg: &Config) -> Result<(TftModel, TrainReport)> {
    let mut m = new_tft(f, cfg)?;
    let tr = filter_condition(&f.parts.train, Condition::NonRecurrent);
    let va = filter_condition(&f.parts.val, Condition::NonRecurrent);
    if tr.is_empty() {
        return Err(Error::Training("non-recurrent training set is empty".into()));
    }
    let r = fit(&mut m, &f.ft, &tr, &va, &cfg.train, mix_seed(cfg.seed, TRAIN_NR))?;
    Ok((m, r))
}

/// Single model on all slices (TFT-ALL).
pub fn train_tft_all(f: &Featurized, cfg: &Config) -> Result<(TftModel, TrainReport)> {
    let mut m = new_tft(f, cfg)?;
    let r = fit(&mut m, &f.ft, &f.parts.train, &f.parts.val, &cfg.train, mix_seed(cfg.seed, TRAIN_ALL))?;
    Ok((m, r))
}

pub fn train_deepar(f: &Featurized, cfg: &Config) -> Result<(DeepArModel, TrainReport)> {
    let dcfg = DeepArConfig::for_tensor(&f.ft, &cfg.deepar, cfg.windows.c, cfg.windows.h)?;
    let mut m = DeepArModel::new(dcfg, mix_seed(cfg.seed, INIT))?;
    let r = fit(&mut m, &f.ft, &f.parts.train, &f.parts.val, &cfg.train, mix_seed(cfg.seed, TRAIN_DEEPAR))?;
    Ok((m, r))
}

pub fn deepar_predictions(m: &DeepArModel, f: &Featurized, cfg: &Config) -> Result<Vec<SlicePrediction>> {
    let points = m.forecast(&f.ft, &f.parts.test, mix_seed(cfg.seed, SAMPLE_DEEPAR))?;
    Ok(f.parts.test.iter().zip(points).map(|(s, point)| SlicePrediction { slice: *s, point }).collect())
}

pub fn lob_predictions(f: &Featurized, cfg: &Config) -> Vec<SlicePrediction> {
    f.parts
        .test
        .iter()
        .map(|s| SlicePrediction {
            slice: *s,
            point: lob_forecast(&f.ft, s, cfg.windows.c, cfg.windows.h),
        })
        .collect()
}

/// Quantile forecasts of a TFT model on `slices`.
#[derive(Debug, Clone)]
pub struct TftRun {
    pub slices: Vec<WindowSlice>,
    pub quantiles: Vec<crate::tftlite::QuantileForecast>,
    pub interp: Vec<TftInterpretation>,
    pub median: usize,
}

impl TftRun {
    pub fn new(m: &TftModel, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<Self> {
        let (quantiles, interp) = m.forecast(ft, slices)?.into_iter().unzip();
        Ok(Self {
            slices: slices.to_vec(),
            quantiles,
            interp,
            median: m.config().median_index(),
        })
    }

    pub fn points(&self) -> Vec<SlicePrediction> {
        self.slices
            .iter()
            .zip(&self.quantiles)
            .map(|(s, q)| SlicePrediction { slice: *s, point: q.point(self.median) })
            .collect()
    }

    /// Interpretations of the slices with condition `cond`.
    pub fn interp_for(&self, cond: Condition) -> Vec<TftInterpretation> {
        self.slices
            .iter()
            .zip(&self.interp)
            .filter(|(s, _)| s.condition == cond)
            .map(|(_, i)| i.clone())
            .collect()
    }
}

/// Gated combination of two expert runs over the same slices.
pub fn moe_predictions(f: &Featurized, cfg: &Config, mode: GateMode, r: &TftRun, n: &TftRun) -> Result<Vec<SlicePrediction>> {
    if r.slices != n.slices {
        return Err(Error::Data("expert runs cover different slices".into()));
    }
    let policy = GatePolicy { mode };
    r.slices
        .iter()
        .zip(r.quantiles.iter().zip(&n.quantiles))
        .map(|(s, (qr, qn))| {
            let p = gate(&f.ft, s, policy, cfg.windows.c, cfg.windows.h)?;
            Ok(SlicePrediction { slice: *s, point: combine(p, qr, qn).point(r.median) })
        })
        .collect()
}

/// Each expert on its own condition's test slices.
pub fn moe_interpretation(cfg: &TftConfig, r: &TftRun, n: &TftRun) -> [ConditionInterpretation; 2] {
    let one = |run: &TftRun, cond: Condition, expert: &str| {
        let interps = run.interp_for(cond);
        ConditionInterpretation {
            condition: cond,
            expert: expert.to_string(),
            slices: interps.len(),
            attention: attention_profile(&interps, cfg.c, cfg.h),
            importance: variable_importance(cfg, &interps),
        }
    };
    [
        one(r, Condition::Recurrent, "recurrent"),
        one(n, Condition::NonRecurrent, "nonrecurrent"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub recurrent: TrainReport,
    pub finetune: Option<TrainReport>,
    pub nr_only: TrainReport,
    pub all: TrainReport,
    pub deepar: TrainReport,
}

/// Everything the end-to-end experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<EvalReport>,
    pub interpretation: [ConditionInterpretation; 2],
    pub audits: Vec<LinkAudit>,
    pub training: TrainingSummary,
    pub manifest: SplitManifest,
}

impl ExperimentResult {
    pub fn report(&self, model: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.model == model)
    }
}

/// Runs ingest through interpretation on in-memory raw data.
pub fn run_experiment(raw: &RawData, cfg: &Config) -> Result<ExperimentResult> {
    let (c, h) = (cfg.windows.c, cfg.windows.h);
    let ing = ingest_raw(raw, cfg)?;
    let den = denoise(&ing, cfg)?;
    let f = partition(featurize(&ing, &den, cfg)?, cfg)?;
    log::info!(
        "slices: train {} val {} test {}",
        f.parts.train.len(),
        f.parts.val.len(),
        f.parts.test.len()
    );

    let (tft_r, rep_r) = train_tft_recurrent(&f, cfg)?;
    let (tft_ft, rep_ft) = train_tft_finetuned(&tft_r, &f, cfg)?;
    let (tft_nr, rep_nr) = train_tft_nr_only(&f, cfg)?;
    let (tft_all, rep_all) = train_tft_all(&f, cfg)?;
    let (deepar, rep_deepar) = train_deepar(&f, cfg)?;

    let test = &f.parts.test;
    let run_r = TftRun::new(&tft_r, &f.ft, test)?;
    let run_ft = TftRun::new(&tft_ft, &f.ft, test)?;
    let run_all = TftRun::new(&tft_all, &f.ft, test)?;
    let run_nr = TftRun::new(&tft_nr, &f.ft, &filter_condition(test, Condition::NonRecurrent))?;

    let mut reports = Vec::new();
    let mut add = |name: &str, preds: &[SlicePrediction]| -> Result<()> {
        reports.push(EvalReport::build(name, &f.ft, preds, c, h)?);
        Ok(())
    };
    add(LOB, &lob_predictions(&f, cfg))?;
    add(DEEPAR, &deepar_predictions(&deepar, &f, cfg)?)?;
    add(TFT_R, &run_r.points())?;
    add(TFT_NR, &run_nr.points())?;
    add(TFT_FT, &run_ft.points())?;
    add(TFT_ALL, &run_all.points())?;
    add(MOE, &moe_predictions(&f, cfg, GateMode::LabelOracle, &run_r, &run_ft)?)?;
    add(MOE_CAUSAL, &moe_predictions(&f, cfg, GateMode::Causal, &run_r, &run_ft)?)?;

    Ok(ExperimentResult {
        reports,
        interpretation: moe_interpretation(tft_r.config(), &run_r, &run_ft),
        audits: den.audits,
        training: TrainingSummary {
            recurrent: rep_r,
            finetune: rep_ft,
            nr_only: rep_nr,
            all: rep_all,
            deepar: rep_deepar,
        },
        manifest: f.manifest,
    })
}
