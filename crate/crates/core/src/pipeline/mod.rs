//! File-based pipeline: each command reads earlier artifacts from the
//! working directory and writes its own outputs plus a manifest.
//!
//! Every manifest records a hash of the configuration sections its stage
//! depends on, together with content hashes of its inputs and outputs.
//! Re-running a command whose manifest still matches is a no-op; a
//! prerequisite produced under a different configuration is reported as
//! stale.

mod config;
pub mod stages;
pub mod store;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{Config, DataConfig, GridConfig, WindowConfig};
use stages::*;
use store::{hash_map, list_files, load_panel, require, save_panel, Manifest};

use crate::baselines::DeepArModel;
use crate::eval::{tidy_csv, EvalReport, SPLITS};
use crate::features::{FeatureTensor, LinkAudit};
use crate::ingest::{IncidentReport, LinkGraph, WeatherPanels, WEATHER_NUMERIC};
use crate::interpret::{ConditionInterpretation, AVERAGING_NOTE};
use crate::moe::{GateMode, MoeModel};
use crate::synth;
use crate::tftlite::TftModel;
use crate::windows::{filter_condition, Condition};
use crate::{util, Error, Result};

pub const RAW_DIR: &str = "raw";
pub const INGEST_DIR: &str = "ingest";
pub const DENOISE_DIR: &str = "denoise";
pub const FEATURES_DIR: &str = "features";
pub const RECURRENT_DIR: &str = "models/recurrent";
pub const NONRECURRENT_DIR: &str = "models/nonrecurrent";
pub const MOE_DIR: &str = "models/moe";
pub const TFT_ALL_DIR: &str = "models/tft_all";
pub const DEEPAR_DIR: &str = "models/deepar";
pub const LOB_DIR: &str = "models/lob";
pub const EVAL_DIR: &str = "eval";
pub const INTERPRET_DIR: &str = "interpret";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Recurrent,
    Nonrecurrent,
    Moe,
    TftAll,
    Deepar,
    LobNoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    All,
    Recurrent,
    Nonrecurrent,
    IncidentSegments,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Recurrent => "recurrent",
            Self::Nonrecurrent => "nonrecurrent",
            Self::IncidentSegments => "incident_segments",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Ingest,
    Denoise,
    Featurize,
    Train(TrainTarget),
    Evaluate(EvalSplit),
    Interpret,
    Report,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Self::Synth => "synth".into(),
            Self::Ingest => "ingest".into(),
            Self::Denoise => "denoise".into(),
            Self::Featurize => "featurize".into(),
            Self::Train(t) => format!(
                "train {}",
                match t {
                    TrainTarget::Recurrent => "recurrent",
                    TrainTarget::Nonrecurrent => "nonrecurrent",
                    TrainTarget::Moe => "moe",
                    TrainTarget::TftAll => "tft-all",
                    TrainTarget::Deepar => "deepar",
                    TrainTarget::LobNoop => "lob-noop",
                }
            ),
            Self::Evaluate(s) => format!("evaluate {}", s.as_str().replace('_', "-")),
            Self::Interpret => "interpret".into(),
            Self::Report => "report".into(),
        }
    }

    /// Output directory, relative to the working directory.
    pub fn dir(self) -> String {
        match self {
            Self::Synth => RAW_DIR.into(),
            Self::Ingest => INGEST_DIR.into(),
            Self::Denoise => DENOISE_DIR.into(),
            Self::Featurize => FEATURES_DIR.into(),
            Self::Train(t) => match t {
                TrainTarget::Recurrent => RECURRENT_DIR,
                TrainTarget::Nonrecurrent => NONRECURRENT_DIR,
                TrainTarget::Moe => MOE_DIR,
                TrainTarget::TftAll => TFT_ALL_DIR,
                TrainTarget::Deepar => DEEPAR_DIR,
                TrainTarget::LobNoop => LOB_DIR,
            }
            .into(),
            Self::Evaluate(s) => format!("{EVAL_DIR}/{}", s.as_str()),
            Self::Interpret => INTERPRET_DIR.into(),
            Self::Report => REPORT_DIR.into(),
        }
    }

    /// Hash of the configuration sections this command depends on,
    /// including those of its prerequisites.
    pub fn config_hash(self, cfg: &Config) -> String {
        let ft = cfg.finetune_config();
        let base = || {
            json!({
                "data": cfg.data, "grid": cfg.grid, "denoise": cfg.denoise, "windows": cfg.windows,
            })
        };
        let model = |extra: serde_json::Value| {
            json!({ "base": base(), "seed": cfg.seed, "train": cfg.train, "model": extra })
        };
        let v = match self {
            Self::Synth => json!({ "seed": cfg.seed, "scenario": cfg.scenario }),
            Self::Ingest => json!({ "data": cfg.data, "grid": cfg.grid }),
            Self::Denoise => json!({ "data": cfg.data, "grid": cfg.grid, "denoise": cfg.denoise }),
            Self::Featurize | Self::Train(TrainTarget::LobNoop) => base(),
            Self::Train(TrainTarget::Recurrent) => model(json!({ "tft": cfg.tft })),
            Self::Train(TrainTarget::Nonrecurrent) => model(json!({ "tft": cfg.tft, "finetune": ft })),
            Self::Train(TrainTarget::Moe) | Self::Interpret => {
                model(json!({ "tft": cfg.tft, "finetune": ft, "gate": cfg.gate }))
            }
            Self::Train(TrainTarget::TftAll) => model(json!({ "tft_all": cfg.tft })),
            Self::Train(TrainTarget::Deepar) => model(json!({ "deepar": cfg.deepar })),
            Self::Evaluate(_) | Self::Report => json!({ "config": cfg }),
        };
        let mut h = util::sha256_hex(&serde_json::to_vec(&v).expect("config serializes"));
        if matches!(self, Self::Train(TrainTarget::LobNoop)) {
            h.insert_str(0, "lob-");
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub command: String,
    pub up_to_date: bool,
    pub outputs: Vec<String>,
}

/// Runs one command in `workdir`.
pub fn run(cmd: Command, cfg: &Config, workdir: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let ctx = Ctx { cfg, workdir, cmd };
    match cmd {
        Command::Synth => ctx.stage(&[], |dir| {
            let sc = synth::generate(&cfg.scenario_config())?;
            sc.write(dir)
        }),
        Command::Ingest => {
            let inputs: Vec<PathBuf> = [&cfg.data.network, &cfg.data.speed, &cfg.data.incidents, &cfg.data.weather]
                .iter()
                .map(|p| workdir.join(p))
                .collect();
            for p in &inputs {
                if !p.exists() {
                    return Err(Error::Prerequisite {
                        artifact: p.display().to_string(),
                        producer: "synth".into(),
                    });
                }
            }
            ctx.stage_with_files(&inputs, |dir| {
                let raw = RawData::read(cfg, workdir)?;
                let ing = ingest_raw(&raw, cfg)?;
                save_ingested(dir, &ing)
            })
        }
        Command::Denoise => ctx.stage(&[(Command::Ingest, "ingest")], |dir| {
            let ing = load_ingested(&workdir.join(INGEST_DIR))?;
            let den = denoise(&ing, cfg)?;
            save_panel(dir, "sd", &den.sd)?;
            save_panel(dir, "dii", &den.dii)?;
            write_json(&dir.join("audit.json"), &den.audits)
        }),
        Command::Featurize => ctx.stage(&[(Command::Ingest, "ingest"), (Command::Denoise, "denoise")], |dir| {
            let ing = load_ingested(&workdir.join(INGEST_DIR))?;
            let den = load_denoised(&workdir.join(DENOISE_DIR))?;
            let ft = featurize(&ing, &den, cfg)?;
            let f = partition(ft, cfg)?;
            f.ft.save(dir)?;
            write_json(&dir.join("split.json"), &f.manifest)
        }),
        Command::Train(t) => train(&ctx, t),
        Command::Evaluate(split) => evaluate(&ctx, split),
        Command::Interpret => ctx.stage(&[P_FEATURES, P_MOE], |dir| {
            let f = load_featurized(workdir, cfg)?;
            let moe = MoeModel::load(&workdir.join(MOE_DIR))?;
            let test = &f.parts.test;
            let r = TftRun::new(&moe.recurrent, &f.ft, &filter_condition(test, Condition::Recurrent))?;
            let n = TftRun::new(&moe.nonrecurrent, &f.ft, &filter_condition(test, Condition::NonRecurrent))?;
            let interp = moe_interpretation(moe.recurrent.config(), &r, &n);
            for ci in &interp {
                ci.write(dir)?;
            }
            write_json(
                &dir.join("summary.json"),
                &json!({ "averaging": AVERAGING_NOTE, "conditions": interp }),
            )
        }),
        Command::Report => ctx.stage(
            &[(Command::Evaluate(EvalSplit::All), "evaluate all"), (Command::Interpret, "interpret")],
            |dir| report(workdir, dir),
        ),
    }
}

const P_FEATURES: (Command, &str) = (Command::Featurize, "featurize");
const P_RECURRENT: (Command, &str) = (Command::Train(TrainTarget::Recurrent), "train recurrent");
const P_NONRECURRENT: (Command, &str) = (Command::Train(TrainTarget::Nonrecurrent), "train nonrecurrent");
const P_MOE: (Command, &str) = (Command::Train(TrainTarget::Moe), "train moe");

struct Ctx<'a> {
    cfg: &'a Config,
    workdir: &'a Path,
    cmd: Command,
}

impl Ctx<'_> {
    /// Runs `body` unless the command's manifest is current. Prerequisite
    /// manifests must exist and match the current configuration; their
    /// outputs become this command's recorded inputs.
    fn stage(&self, prereqs: &[(Command, &str)], body: impl FnOnce(&Path) -> Result<()>) -> Result<Outcome> {
        let mut files = Vec::new();
        for &(c, producer) in prereqs {
            let m = require(self.workdir, &c.dir(), producer, &c.config_hash(self.cfg))?;
            files.extend(m.outputs.keys().map(|k| self.workdir.join(k)));
        }
        self.stage_with_files(&files, body)
    }

    fn stage_with_files(&self, inputs: &[PathBuf], body: impl FnOnce(&Path) -> Result<()>) -> Result<Outcome> {
        let dir = self.workdir.join(self.cmd.dir());
        let hash = self.cmd.config_hash(self.cfg);
        let inputs = hash_map(self.workdir, inputs)?;
        if let Some(m) = Manifest::load(&dir)? {
            if m.is_current(self.workdir, &hash, &inputs) {
                log::info!("{}: up to date", self.cmd.name());
                return Ok(Outcome {
                    command: self.cmd.name(),
                    up_to_date: true,
                    outputs: m.outputs.into_keys().collect(),
                });
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
        }
        util::create_dir_all(&dir)?;
        body(&dir)?;
        let outputs = hash_map(self.workdir, &list_files(&dir)?)?;
        let m = Manifest {
            command: self.cmd.name(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: hash,
            inputs,
            outputs,
        };
        m.write(&dir)?;
        log::info!("{}: wrote {} files to {}", self.cmd.name(), m.outputs.len(), dir.display());
        Ok(Outcome {
            command: self.cmd.name(),
            up_to_date: false,
            outputs: m.outputs.into_keys().collect(),
        })
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    util::write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&util::read_to_string(path)?)?)
}

fn save_ingested(dir: &Path, ing: &Ingested) -> Result<()> {
    util::write(&dir.join("network.csv"), ing.graph.to_csv())?;
    save_panel(dir, "speed", &ing.speed)?;
    save_panel(dir, "incidents", &ing.inc)?;
    for (name, p) in WEATHER_NUMERIC.iter().zip(&ing.weather.numeric) {
        save_panel(dir, &format!("weather_{name}"), p)?;
    }
    write_json(&dir.join("weather_condition.json"), &ing.weather.condition)?;
    write_json(&dir.join("incident_reports.json"), &ing.reports)?;
    write_json(&dir.join("holidays.json"), &ing.holidays)?;
    write_json(&dir.join("report.json"), &ing.report)
}

fn load_ingested(dir: &Path) -> Result<Ingested> {
    let graph = LinkGraph::from_csv(util::read_bytes(&dir.join("network.csv"))?.as_slice())?;
    let speed = load_panel(dir, "speed")?;
    let inc = load_panel(dir, "incidents")?;
    let numeric = WEATHER_NUMERIC
        .iter()
        .map(|n| load_panel(dir, &format!("weather_{n}")))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<IncidentReport> = read_json(&dir.join("incident_reports.json"))?;
    Ok(Ingested {
        graph,
        grid: speed.grid().clone(),
        holidays: read_json(&dir.join("holidays.json"))?,
        speed,
        reports,
        inc,
        weather: WeatherPanels {
            numeric,
            condition: read_json(&dir.join("weather_condition.json"))?,
        },
        report: read_json(&dir.join("report.json"))?,
    })
}

fn load_denoised(dir: &Path) -> Result<Denoised> {
    Ok(Denoised {
        sd: load_panel(dir, "sd")?,
        dii: load_panel(dir, "dii")?,
        audits: read_json::<Vec<LinkAudit>>(&dir.join("audit.json"))?,
    })
}

fn load_featurized(workdir: &Path, cfg: &Config) -> Result<Featurized> {
    partition(FeatureTensor::load(&workdir.join(FEATURES_DIR))?, cfg)
}

fn train(ctx: &Ctx<'_>, t: TrainTarget) -> Result<Outcome> {
    let (cfg, wd) = (ctx.cfg, ctx.workdir);
    match t {
        TrainTarget::Recurrent => ctx.stage(&[P_FEATURES], |dir| {
            let f = load_featurized(wd, cfg)?;
            let (m, rep) = train_tft_recurrent(&f, cfg)?;
            m.save(dir, "recurrent")?;
            write_json(&dir.join("train_report.json"), &rep)
        }),
        TrainTarget::Nonrecurrent => ctx.stage(&[P_FEATURES, P_RECURRENT], |dir| {
            let f = load_featurized(wd, cfg)?;
            let pre = TftModel::load(&wd.join(RECURRENT_DIR), "recurrent")?;
            let (ft_model, ft_rep) = train_tft_finetuned(&pre, &f, cfg)?;
            ft_model.save(dir, "nonrecurrent")?;
            let (nr, nr_rep) = train_tft_nr_only(&f, cfg)?;
            nr.save(dir, "tft_nr")?;
            write_json(&dir.join("train_report.json"), &json!({ "finetune": ft_rep, "nr_only": nr_rep }))
        }),
        TrainTarget::Moe => ctx.stage(&[P_RECURRENT, P_NONRECURRENT], |dir| {
            let r = TftModel::load(&wd.join(RECURRENT_DIR), "recurrent")?;
            let n = TftModel::load(&wd.join(NONRECURRENT_DIR), "nonrecurrent")?;
            MoeModel::new(r, n, cfg.gate)?.save(dir)
        }),
        TrainTarget::TftAll => ctx.stage(&[P_FEATURES], |dir| {
            let f = load_featurized(wd, cfg)?;
            let (m, rep) = train_tft_all(&f, cfg)?;
            m.save(dir, "tft_all")?;
            write_json(&dir.join("train_report.json"), &rep)
        }),
        TrainTarget::Deepar => ctx.stage(&[P_FEATURES], |dir| {
            let f = load_featurized(wd, cfg)?;
            let (m, rep) = train_deepar(&f, cfg)?;
            m.save(dir, "deepar")?;
            write_json(&dir.join("train_report.json"), &rep)
        }),
        TrainTarget::LobNoop => ctx.stage(&[P_FEATURES], |dir| {
            write_json(
                &dir.join("lob.json"),
                &json!({ "model": LOB, "parameters": 0, "rule": "repeat the last observed speed" }),
            )
        }),
    }
}

/// Optional trained model: `None` when never trained, an error when stale.
fn optional(wd: &Path, cfg: &Config, c: (Command, &str)) -> Result<Option<PathBuf>> {
    let dir = wd.join(c.0.dir());
    if Manifest::load(&dir)?.is_none() {
        return Ok(None);
    }
    require(wd, &c.0.dir(), c.1, &c.0.config_hash(cfg))?;
    Ok(Some(dir))
}

/// Predictions of every available model on the test slices.
fn all_reports(wd: &Path, cfg: &Config) -> Result<Vec<EvalReport>> {
    let (c, h) = (cfg.windows.c, cfg.windows.h);
    let f = load_featurized(wd, cfg)?;
    let moe = MoeModel::load(&wd.join(MOE_DIR))?;
    let test = &f.parts.test;
    let run_r = TftRun::new(&moe.recurrent, &f.ft, test)?;
    let run_ft = TftRun::new(&moe.nonrecurrent, &f.ft, test)?;
    let mut reports = Vec::new();
    let mut add = |name: &str, preds: &[crate::eval::SlicePrediction]| -> Result<()> {
        reports.push(EvalReport::build(name, &f.ft, preds, c, h)?);
        Ok(())
    };
    add(LOB, &lob_predictions(&f, cfg))?;
    if let Some(d) = optional(wd, cfg, (Command::Train(TrainTarget::Deepar), "train deepar"))? {
        add(DEEPAR, &deepar_predictions(&DeepArModel::load(&d, "deepar")?, &f, cfg)?)?;
    }
    add(TFT_R, &run_r.points())?;
    if let Some(d) = optional(wd, cfg, P_NONRECURRENT)? {
        let nr = TftModel::load(&d, "tft_nr")?;
        add(TFT_NR, &TftRun::new(&nr, &f.ft, &filter_condition(test, Condition::NonRecurrent))?.points())?;
    }
    add(TFT_FT, &run_ft.points())?;
    if let Some(d) = optional(wd, cfg, (Command::Train(TrainTarget::TftAll), "train tft-all"))? {
        add(TFT_ALL, &TftRun::new(&TftModel::load(&d, "tft_all")?, &f.ft, test)?.points())?;
    }
    for (name, mode) in [(MOE, GateMode::LabelOracle), (MOE_CAUSAL, GateMode::Causal)] {
        add(name, &moe_predictions(&f, cfg, mode, &run_r, &run_ft)?)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitEntry {
    model: String,
    metrics: Option<crate::eval::Breakdown>,
}

fn evaluate(ctx: &Ctx<'_>, split: EvalSplit) -> Result<Outcome> {
    let (cfg, wd) = (ctx.cfg, ctx.workdir);
    let mut prereqs = vec![P_FEATURES, P_MOE];
    for opt in [
        (Command::Train(TrainTarget::Deepar), "train deepar"),
        P_NONRECURRENT,
        (Command::Train(TrainTarget::TftAll), "train tft-all"),
    ] {
        if Manifest::load(&wd.join(opt.0.dir()))?.is_some() {
            prereqs.push(opt);
        }
    }
    ctx.stage(&prereqs, |dir| {
        let reports = all_reports(wd, cfg)?;
        if split == EvalSplit::All {
            write_json(&dir.join("metrics.json"), &reports)?;
            util::write(&dir.join("metrics.csv"), tidy_csv(&reports, &SPLITS))
        } else {
            let name = split.as_str();
            let entries: Vec<SplitEntry> = reports
                .iter()
                .map(|r| SplitEntry {
                    model: r.model.clone(),
                    metrics: r.split(name).cloned(),
                })
                .collect();
            write_json(&dir.join("metrics.json"), &json!({ "split": name, "models": entries }))?;
            util::write(&dir.join("metrics.csv"), tidy_csv(&reports, &[name]))
        }
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn report(wd: &Path, dir: &Path) -> Result<()> {
    let reports: Vec<EvalReport> = read_json(&wd.join(EVAL_DIR).join("all").join("metrics.json"))?;
    let get = |m: &str| reports.iter().find(|r| r.model == m);

    let table = |models: &[&str], split: &str| {
        let mut s = String::from("model,smape,rmse,count,status\n");
        for &m in models {
            let Some(r) = get(m) else { continue };
            match r.split(split) {
                Some(b) => {
                    let _ = writeln!(s, "{m},{:.6},{:.6},{},ok", b.overall.smape, b.overall.rmse, b.overall.count);
                }
                None => {
                    let _ = writeln!(s, "{m},,,0,absent");
                }
            }
        }
        s
    };
    let t2 = [LOB, DEEPAR, TFT_R, TFT_NR, TFT_FT];
    let t3 = [LOB, DEEPAR, TFT_ALL, MOE, MOE_CAUSAL];
    util::write(&dir.join("table2_nonrecurrent.csv"), table(&t2, "nonrecurrent"))?;
    util::write(&dir.join("table3_overall.csv"), table(&t3, "all"))?;
    util::write(&dir.join("fig5_incident_segments.csv"), table(&t3, "incident_segments"))?;

    let mut fig4 = String::from("model,horizon,smape,rmse,count\n");
    for r in &reports {
        if let Some(b) = r.split("all") {
            for (k, m) in b.horizon.iter().enumerate() {
                let _ = writeln!(
                    fig4,
                    "{},{},{},{},{}",
                    r.model,
                    k + 1,
                    fmt_opt(m.map(|m| m.smape)),
                    fmt_opt(m.map(|m| m.rmse)),
                    m.map_or(0, |m| m.count)
                );
            }
        }
    }
    util::write(&dir.join("fig4_horizon.csv"), fig4)?;

    let interp: serde_json::Value = read_json(&wd.join(INTERPRET_DIR).join("summary.json"))?;
    let conditions: Vec<ConditionInterpretation> = serde_json::from_value(interp["conditions"].clone())?;
    let mut imp = String::from("condition,expert,table,variable,percent\n");
    let mut att = String::from("condition,position,mass\n");
    for ci in &conditions {
        if let Some(i) = &ci.importance {
            for (table, rows) in [("encoder", &i.encoder), ("decoder", &i.decoder)] {
                for r in rows {
                    let _ = writeln!(
                        imp,
                        "{},{},{table},{},{:.6}",
                        ci.condition.as_str(),
                        ci.expert,
                        r.variable,
                        r.percent
                    );
                }
            }
        }
        if let Some(a) = &ci.attention {
            for (k, w) in a.per_position.iter().enumerate() {
                let _ = writeln!(
                    att,
                    "{},{},{w:.8}",
                    ci.condition.as_str(),
                    crate::interpret::position_label(k, a.c)
                );
            }
        }
    }
    util::write(&dir.join("fig6_attention.csv"), att)?;
    util::write(&dir.join("fig7_importance.csv"), imp)?;

    let overall: BTreeMap<&str, Option<f64>> = reports
        .iter()
        .map(|r| (r.model.as_str(), r.all.as_ref().map(|b| b.overall.smape)))
        .collect();
    write_json(
        &dir.join("report.json"),
        &json!({
            "overall_smape": overall,
            "evaluation": reports,
            "interpretation": conditions,
        }),
    )
}
