//! Seeded synthetic traffic scenarios written in the ingest CSV contracts,
//! together with the ground truth needed to score the denoiser and models.
//!
//! Links form corridors; within a corridor each link's upstream neighbour is
//! the previous link, and with `ring` enabled each corridor head is fed by the
//! tail of the previous corridor. Speed is a per-link free-flow level scaled
//! by rush-hour dips (damped on weekends and holidays), minus incident drops
//! (with a linear recovery tail and a damped drop on upstream links), minus a
//! rain penalty, plus Gaussian noise, clipped at 1 mph.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::features::us_holidays;
use crate::ingest::{
    format_timestamp, write_incident_csv, write_speed_csv, write_weather_csv, IncidentRow, LinkGraph,
    SpeedRow, TimeGrid, WeatherRecord,
};
use crate::util::{self, f64_from_le_bytes, f64_to_le_bytes, mix_seed};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub links: usize,
    pub corridors: usize,
    pub ring: bool,
    pub start_date: NaiveDate,
    pub days: usize,
    /// Holidays; `None` uses the US federal holidays of the covered years.
    pub holidays: Option<Vec<NaiveDate>>,
    pub free_flow_mph: f64,
    pub free_flow_spread_mph: f64,
    pub am_peak_hour: f64,
    pub pm_peak_hour: f64,
    pub am_dip: f64,
    pub pm_dip: f64,
    pub peak_width_hours: f64,
    /// Rush-hour dip multiplier on weekends and holidays.
    pub offpeak_day_factor: f64,
    /// Probability that a dry hour turns rainy.
    pub rain_start_prob: f64,
    /// Probability that a rainy hour turns dry.
    pub rain_stop_prob: f64,
    pub rain_max_in: f64,
    pub rain_penalty_mph_per_in: f64,
    pub incident_rate_per_link_day: f64,
    pub incident_min_steps: usize,
    pub incident_max_steps: usize,
    /// Speed drop as a fraction of the link's free-flow speed.
    pub incident_drop_frac: f64,
    pub incident_recovery_steps: usize,
    /// Fraction of the drop felt on each upstream link.
    pub upstream_factor: f64,
    pub noise_sigma: f64,
    /// Probability that an observed speed cell is absent from the CSV.
    pub speed_missing_prob: f64,
    pub report_miss_prob: f64,
    /// Expected impact-free reports per link-day.
    pub spurious_rate_per_link_day: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            links: 12,
            corridors: 2,
            ring: true,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date"),
            days: 60,
            holidays: None,
            free_flow_mph: 62.0,
            free_flow_spread_mph: 1.0,
            am_peak_hour: 8.0,
            pm_peak_hour: 17.25,
            am_dip: 0.22,
            pm_dip: 0.28,
            peak_width_hours: 0.9,
            offpeak_day_factor: 0.25,
            rain_start_prob: 0.04,
            rain_stop_prob: 0.35,
            rain_max_in: 0.3,
            rain_penalty_mph_per_in: 25.0,
            incident_rate_per_link_day: 0.4,
            incident_min_steps: 4,
            incident_max_steps: 14,
            incident_drop_frac: 0.45,
            incident_recovery_steps: 3,
            upstream_factor: 0.2,
            noise_sigma: 1.0,
            speed_missing_prob: 0.001,
            report_miss_prob: 0.1,
            spurious_rate_per_link_day: 0.02,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {p}")))
            }
        };
        prob("rain_start_prob", self.rain_start_prob)?;
        prob("rain_stop_prob", self.rain_stop_prob)?;
        prob("report_miss_prob", self.report_miss_prob)?;
        prob("speed_missing_prob", self.speed_missing_prob)?;
        prob("offpeak_day_factor", self.offpeak_day_factor)?;
        prob("upstream_factor", self.upstream_factor)?;
        prob("incident_drop_frac", self.incident_drop_frac)?;
        if self.links == 0 || self.corridors == 0 || self.corridors > self.links {
            return Err(Error::Config("need at least one link per corridor".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("scenario needs at least one day".into()));
        }
        if self.incident_min_steps == 0 || self.incident_min_steps > self.incident_max_steps {
            return Err(Error::Config("incident duration range is empty".into()));
        }
        let rates = [
            self.incident_rate_per_link_day,
            self.spurious_rate_per_link_day,
            self.noise_sigma,
            self.rain_max_in,
            self.rain_penalty_mph_per_in,
        ];
        if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("rates, noise and rain settings must be non-negative".into()));
        }
        if self.free_flow_mph - self.free_flow_spread_mph <= 1.0 {
            return Err(Error::Config("free-flow speed must exceed 1 mph".into()));
        }
        Ok(())
    }

    pub fn holiday_set(&self) -> BTreeSet<NaiveDate> {
        match &self.holidays {
            Some(h) => h.iter().copied().collect(),
            None => {
                let last = self.start_date + Duration::days(self.days as i64);
                (self.start_date.year()..=last.year()).flat_map(us_holidays).collect()
            }
        }
    }

    pub fn link_ids(&self) -> Vec<String> {
        (0..self.links).map(|i| format!("L{i:02}")).collect()
    }

    /// Corridor topology as `(link, upstream links)` pairs.
    pub fn network(&self) -> Result<LinkGraph> {
        let ids = self.link_ids();
        let per = self.links.div_ceil(self.corridors);
        let corridors: Vec<Vec<usize>> = (0..self.links)
            .collect::<Vec<_>>()
            .chunks(per)
            .map(<[usize]>::to_vec)
            .collect();
        let mut ups = vec![Vec::new(); self.links];
        for (ci, cor) in corridors.iter().enumerate() {
            for w in cor.windows(2) {
                ups[w[1]].push(ids[w[0]].clone());
            }
            if self.ring && corridors.len() > 1 {
                let prev = &corridors[(ci + corridors.len() - 1) % corridors.len()];
                ups[cor[0]].push(ids[*prev.last().expect("non-empty corridor")].clone());
            } else if self.ring && cor.len() > 1 {
                ups[cor[0]].push(ids[*cor.last().expect("non-empty corridor")].clone());
            }
        }
        LinkGraph::new(ids.into_iter().zip(ups).collect())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_default_window(TimeGrid::consecutive_days(self.start_date, self.days))
    }
}

/// Rush-hour dip fraction at a time of day (hours), before day-type damping.
fn rush_dip(cfg: &ScenarioConfig, hour: f64) -> f64 {
    let bump = |peak: f64| (-0.5 * ((hour - peak) / cfg.peak_width_hours).powi(2)).exp();
    cfg.am_dip * bump(cfg.am_peak_hour) + cfg.pm_dip * bump(cfg.pm_peak_hour)
}

/// Incident- and weather-free speed of a link with free-flow `ff` at `ts`.
pub fn base_speed(cfg: &ScenarioConfig, ff: f64, ts: NaiveDateTime, holidays: &BTreeSet<NaiveDate>) -> f64 {
    let date = ts.date();
    let offpeak = matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || holidays.contains(&date);
    let damp = if offpeak { cfg.offpeak_day_factor } else { 1.0 };
    let hour = ts.time().signed_duration_since(chrono::NaiveTime::MIN).num_seconds() as f64 / 3600.0;
    ff * (1.0 - damp * rush_dip(cfg, hour))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueIncident {
    pub id: String,
    pub link: usize,
    pub day: usize,
    /// In-day step range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub reported: bool,
}

/// Everything a scenario produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: LinkGraph,
    pub grid: TimeGrid,
    pub free_flow: Vec<f64>,
    pub speed_rows: Vec<SpeedRow>,
    pub incident_rows: Vec<IncidentRow>,
    pub weather: Vec<WeatherRecord>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub links: Vec<String>,
    pub grid: TimeGrid,
    /// `links x total_steps`, 1 inside a true incident.
    pub incident_matrix: Vec<f64>,
    /// `links x total_steps` speed before observation noise.
    pub noiseless_speed: Vec<f64>,
    pub incidents: Vec<TrueIncident>,
    pub spurious_reports: usize,
}

const KINDS: [&str; 3] = ["accident", "road_closure", "hazard_flood"];

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let graph = cfg.network()?;
    let grid = cfg.grid()?;
    let holidays = cfg.holiday_set();
    let n = cfg.links;
    let spd = grid.steps_per_day();
    let total = grid.total_steps();
    let ids = graph.links().to_vec();

    let mut link_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
    let free_flow: Vec<f64> = (0..n)
        .map(|_| cfg.free_flow_mph + cfg.free_flow_spread_mph * (2.0 * link_rng.random::<f64>() - 1.0))
        .collect();
    let mut truth_m = vec![0.0; n * total];
    let mut noiseless = vec![0.0; n * total];
    let mut speed_rows = Vec::with_capacity(n * total);
    let mut incident_rows = Vec::new();
    let mut weather = Vec::new();
    let mut incidents = Vec::new();
    let mut spurious = 0;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    for day in 0..cfg.days {
        let date = grid.days()[day];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, day as u64));

        // hourly weather 05:00..=20:00
        let mut raining = false;
        let mut precip_by_hour = [0.0f64; 24];
        let season = (2.0 * std::f64::consts::PI * (date.ordinal0() as f64 - 20.0) / 365.0).cos();
        for hour in 5..=20u32 {
            raining = if raining {
                rng.random::<f64>() >= cfg.rain_stop_prob
            } else {
                rng.random::<f64>() < cfg.rain_start_prob
            };
            let precip = if raining {
                (cfg.rain_max_in * rng.random::<f64>() * 100.0).round() / 100.0
            } else {
                0.0
            };
            precip_by_hour[hour as usize] = precip;
            let diurnal = -((hour as f64 - 15.0) / 5.0).powi(2);
            let temp = (45.0 - 15.0 * season + 6.0 * diurnal + 3.0 * rng.random::<f64>()).round();
            let wind = (4.0 + 8.0 * rng.random::<f64>()).round();
            let condition = if precip >= 0.15 {
                "Rain"
            } else if precip > 0.0 {
                "Light Rain"
            } else if rng.random::<f64>() < 0.4 {
                "Cloudy"
            } else {
                "Fair"
            };
            weather.push(WeatherRecord {
                ts: date.and_hms_opt(hour, 0, 0).expect("valid hour"),
                temperature_f: Some(temp),
                dew_point_f: Some(temp - (4.0 + 8.0 * rng.random::<f64>()).round()),
                humidity_pct: Some(if raining { 90.0 } else { (45.0 + 30.0 * rng.random::<f64>()).round() }),
                wind_speed_mph: Some(wind),
                wind_gust_mph: Some(wind + (6.0 * rng.random::<f64>()).round()),
                precipitation_in: Some(precip),
                condition: Some(condition.to_string()),
            });
        }

        // incidents and their speed impact per in-day step
        let mut drop = vec![0.0f64; n * spd];
        let add_drop = |l: usize, s: usize, mph: f64, drop: &mut Vec<f64>| {
            let cell = &mut drop[l * spd + s];
            *cell = cell.max(mph);
        };
        for l in 0..n {
            let count = if cfg.incident_rate_per_link_day > 0.0 {
                Poisson::new(cfg.incident_rate_per_link_day)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng) as usize
            } else {
                0
            };
            for k in 0..count {
                let dur = rng.random_range(cfg.incident_min_steps..=cfg.incident_max_steps).min(spd);
                let start = rng.random_range(0..=spd - dur);
                let end = start + dur;
                let reported = rng.random::<f64>() >= cfg.report_miss_prob;
                let kind = KINDS[rng.random_range(0..KINDS.len())];
                let full = cfg.incident_drop_frac * free_flow[l];
                let rec = cfg.incident_recovery_steps;
                for s in start..(end + rec).min(spd) {
                    let mph = if s < end {
                        full
                    } else {
                        full * (1.0 - (s - end + 1) as f64 / (rec + 1) as f64)
                    };
                    add_drop(l, s, mph, &mut drop);
                    for &u in graph.upstream(l) {
                        add_drop(u, s, cfg.upstream_factor * mph, &mut drop);
                    }
                }
                for s in start..end {
                    truth_m[l * total + grid.flat(day, s)] = 1.0;
                }
                let id = format!("I{day:03}-{l:02}-{k}");
                if reported {
                    incident_rows.push(IncidentRow {
                        id: id.clone(),
                        link_id: ids[l].clone(),
                        kind: kind.to_string(),
                        start: grid.timestamp(grid.flat(day, start)),
                        end: grid.timestamp(grid.flat(day, end - 1)),
                    });
                }
                incidents.push(TrueIncident { id, link: l, day, start, end, reported });
            }
            let n_spurious = if cfg.spurious_rate_per_link_day > 0.0 {
                Poisson::new(cfg.spurious_rate_per_link_day)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(&mut rng) as usize
            } else {
                0
            };
            for k in 0..n_spurious {
                let dur = rng.random_range(2..=6).min(spd);
                let start = rng.random_range(0..=spd - dur);
                incident_rows.push(IncidentRow {
                    id: format!("S{day:03}-{l:02}-{k}"),
                    link_id: ids[l].clone(),
                    kind: KINDS[rng.random_range(0..KINDS.len())].to_string(),
                    start: grid.timestamp(grid.flat(day, start)),
                    end: grid.timestamp(grid.flat(day, start + dur - 1)),
                });
                spurious += 1;
            }
        }

        for l in 0..n {
            for s in 0..spd {
                let flat = grid.flat(day, s);
                let ts = grid.timestamp(flat);
                let rain = (precip_by_hour[ts.hour() as usize] * cfg.rain_penalty_mph_per_in).min(0.5 * free_flow[l]);
                let clean = (base_speed(cfg, free_flow[l], ts, &holidays) - drop[l * spd + s] - rain).max(1.0);
                noiseless[l * total + flat] = clean;
                let observed = (clean + noise.sample(&mut rng)).max(1.0);
                let missing = cfg.speed_missing_prob > 0.0 && rng.random::<f64>() < cfg.speed_missing_prob;
                if !missing {
                    speed_rows.push(SpeedRow {
                        link_id: ids[l].clone(),
                        ts,
                        speed_mph: (observed * 100.0).round() / 100.0,
                    });
                }
            }
        }
    }

    Ok(Scenario {
        truth: GroundTruth {
            links: ids,
            grid: grid.clone(),
            incident_matrix: truth_m,
            noiseless_speed: noiseless,
            incidents,
            spurious_reports: spurious,
        },
        graph,
        grid,
        free_flow,
        speed_rows,
        incident_rows,
        weather,
    })
}

pub const NETWORK_FILE: &str = "network.csv";
pub const SPEED_FILE: &str = "speed.csv";
pub const INCIDENT_FILE: &str = "incidents.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const TRUTH_DIR: &str = "ground_truth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthHeader {
    links: Vec<String>,
    grid: TimeGrid,
    spurious_reports: usize,
}

impl Scenario {
    /// Writes the four raw CSVs and the `ground_truth/` directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        util::write(&dir.join(NETWORK_FILE), self.graph.to_csv())?;
        util::write(&dir.join(SPEED_FILE), write_speed_csv(&self.speed_rows))?;
        util::write(&dir.join(INCIDENT_FILE), write_incident_csv(&self.incident_rows))?;
        util::write(&dir.join(WEATHER_FILE), write_weather_csv(&self.weather))?;
        self.truth.write(&dir.join(TRUTH_DIR))
    }
}

impl GroundTruth {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let header = TruthHeader {
            links: self.links.clone(),
            grid: self.grid.clone(),
            spurious_reports: self.spurious_reports,
        };
        util::write(&dir.join("meta.json"), serde_json::to_vec_pretty(&header)?)?;
        util::write(&dir.join("incident_matrix.bin"), f64_to_le_bytes(&self.incident_matrix))?;
        util::write(&dir.join("noiseless_speed.bin"), f64_to_le_bytes(&self.noiseless_speed))?;
        let mut csv = String::from("id,link_id,start_ts,end_ts,reported\n");
        for i in &self.incidents {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                i.id,
                self.links[i.link],
                format_timestamp(self.grid.timestamp(self.grid.flat(i.day, i.start))),
                format_timestamp(self.grid.timestamp(self.grid.flat(i.day, i.end - 1))),
                i.reported
            ));
        }
        util::write(&dir.join("true_incidents.csv"), csv)
    }

    /// Reads the matrices back (the incident list is not reloaded).
    pub fn load(dir: &Path) -> Result<Self> {
        let header: TruthHeader = serde_json::from_str(&util::read_to_string(&dir.join("meta.json"))?)?;
        Ok(Self {
            incident_matrix: f64_from_le_bytes(&util::read_bytes(&dir.join("incident_matrix.bin"))?)?,
            noiseless_speed: f64_from_le_bytes(&util::read_bytes(&dir.join("noiseless_speed.bin"))?)?,
            links: header.links,
            grid: header.grid,
            incidents: Vec::new(),
            spurious_reports: header.spurious_reports,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Cell-level precision and recall of a binary indicator against the true
/// incident matrix. Precision is 1 when nothing is flagged and recall is 1
/// when there is nothing to find.
pub fn oracle_label_coverage(truth: &[f64], labels: &[f64]) -> Coverage {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&t, &l) in truth.iter().zip(labels) {
        match (t > 0.5, l > 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    Coverage {
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        precision: ratio(tp, fp),
        recall: ratio(tp, fn_),
    }
}
