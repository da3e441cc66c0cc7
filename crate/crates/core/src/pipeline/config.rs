use std::collections::BTreeSet;
use std::path::PathBuf;

use chrono::{Datelike, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::baselines::DeepArHyper;
use crate::features::{us_holidays, DenoiseParams};
use crate::ingest::IncidentKind;
use crate::moe::{finetune_config, GatePolicy};
use crate::synth::{self, ScenarioConfig};
use crate::tftlite::TftHyper;
use crate::train::TrainConfig;
use crate::windows::SplitSpec;
use crate::{util, Error, Result};

/// Raw input locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub network: PathBuf,
    pub speed: PathBuf,
    pub incidents: PathBuf,
    pub weather: PathBuf,
    pub incident_kinds: Vec<IncidentKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let raw = PathBuf::from(super::RAW_DIR);
        Self {
            network: raw.join(synth::NETWORK_FILE),
            speed: raw.join(synth::SPEED_FILE),
            incidents: raw.join(synth::INCIDENT_FILE),
            weather: raw.join(synth::WEATHER_FILE),
            incident_kinds: IncidentKind::default_kept(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// `HH:MM`, inclusive.
    pub daily_start: String,
    /// `HH:MM`, inclusive.
    pub daily_end: String,
    pub step_minutes: u32,
    /// First grid day; defaults to the first date in the speed data.
    pub first_day: Option<NaiveDate>,
    /// Number of consecutive days; defaults to the speed data's date span.
    pub days: Option<usize>,
    /// Holiday dates; `None` uses US federal holidays.
    pub holidays: Option<Vec<NaiveDate>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            daily_start: "05:30".into(),
            daily_end: "20:59".into(),
            step_minutes: 5,
            first_day: None,
            days: None,
            holidays: None,
        }
    }
}

fn parse_hm(s: &str) -> Result<NaiveTime> {
    NaiveTime::parse_from_str(s, "%H:%M").map_err(|e| Error::Config(format!("bad time of day {s:?}: {e}")))
}

impl GridConfig {
    pub fn window(&self) -> Result<(NaiveTime, NaiveTime)> {
        Ok((parse_hm(&self.daily_start)?, parse_hm(&self.daily_end)?))
    }

    pub fn holiday_set(&self, days: &[NaiveDate]) -> BTreeSet<NaiveDate> {
        match &self.holidays {
            Some(list) => list.iter().copied().collect(),
            None => {
                let years: BTreeSet<i32> = days.iter().map(|d| d.year()).collect();
                years.into_iter().flat_map(us_holidays).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub c: usize,
    pub h: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            c: 12,
            h: 6,
            train_frac: s.train_frac,
            val_frac: s.val_frac,
            test_frac: s.test_frac,
        }
    }
}

impl WindowConfig {
    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            test_frac: self.test_frac,
        }
    }
}

/// The whole pipeline configuration. One `seed` drives data generation,
/// initialisation, shuffling, dropout and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub scenario: ScenarioConfig,
    pub denoise: DenoiseParams,
    pub windows: WindowConfig,
    pub tft: TftHyper,
    pub train: TrainConfig,
    /// Finetuning of the non-recurrent expert; defaults to `train` at a
    /// tenth of the learning rate with patience 5.
    pub finetune: Option<TrainConfig>,
    pub deepar: DeepArHyper,
    pub gate: GatePolicy,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            grid: GridConfig::default(),
            scenario: ScenarioConfig::default(),
            denoise: DenoiseParams::default(),
            windows: WindowConfig::default(),
            tft: TftHyper::default(),
            train: TrainConfig::default(),
            finetune: None,
            deepar: DeepArHyper::default(),
            gate: GatePolicy::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.window()?;
        self.denoise.validate()?;
        self.windows.split().split_days(3).map(|_| ())?;
        self.train.validate()?;
        self.finetune_config().validate()?;
        if self.windows.c == 0 || self.windows.h == 0 {
            return Err(Error::Config("context and horizon lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.finetune.clone().unwrap_or_else(|| finetune_config(&self.train))
    }

    /// The scenario actually generated: `scenario` with the pipeline seed.
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            ..self.scenario.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
