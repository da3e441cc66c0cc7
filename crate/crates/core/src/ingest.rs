//! Raw source ingestion and spatio-temporal alignment.
//!
//! Speed, incident and weather records are read from their CSV contracts and
//! aligned to a [`TimeGrid`]: a per-day window of fixed-width steps (05:30 to
//! 20:59 in 5-minute steps by default, 186 steps per day). All panels are
//! `links x total_steps` matrices in day-major order.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::util::median;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    days: Vec<NaiveDate>,
    daily_start: NaiveTime,
    daily_end: NaiveTime,
    step_minutes: u32,
    steps_per_day: usize,
}

/// Builds the grid. The daily window is inclusive of the `daily_end` minute,
/// so 05:30–20:59 spans 930 minutes and holds 186 five-minute steps.
pub fn build_time_grid(
    days: Vec<NaiveDate>,
    daily_start: NaiveTime,
    daily_end: NaiveTime,
    step_minutes: u32,
) -> Result<TimeGrid> {
    TimeGrid::new(days, daily_start, daily_end, step_minutes)
}

impl TimeGrid {
    pub fn new(
        days: Vec<NaiveDate>,
        daily_start: NaiveTime,
        daily_end: NaiveTime,
        step_minutes: u32,
    ) -> Result<Self> {
        if daily_start >= daily_end {
            return Err(Error::Config(format!(
                "daily window start {daily_start} must precede end {daily_end}"
            )));
        }
        if step_minutes == 0 {
            return Err(Error::Config("grid step must be positive".into()));
        }
        if days.is_empty() {
            return Err(Error::Config("time grid needs at least one day".into()));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid days must be strictly increasing".into()));
        }
        let span = (daily_end - daily_start).num_minutes() + 1;
        if span % step_minutes as i64 != 0 {
            return Err(Error::Config(format!(
                "daily window of {span} minutes is not divisible by the {step_minutes}-minute step"
            )));
        }
        Ok(Self {
            days,
            daily_start,
            daily_end,
            step_minutes,
            steps_per_day: (span / step_minutes as i64) as usize,
        })
    }

    /// 05:30–20:59 in 5-minute steps.
    pub fn with_default_window(days: Vec<NaiveDate>) -> Result<Self> {
        Self::new(
            days,
            NaiveTime::from_hms_opt(5, 30, 0).expect("valid time"),
            NaiveTime::from_hms_opt(20, 59, 0).expect("valid time"),
            5,
        )
    }

    /// Consecutive calendar days starting at `first`.
    pub fn consecutive_days(first: NaiveDate, count: usize) -> Vec<NaiveDate> {
        (0..count)
            .map(|i| first + Duration::days(i as i64))
            .collect()
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn total_steps(&self) -> usize {
        self.days.len() * self.steps_per_day
    }

    pub fn step_minutes(&self) -> u32 {
        self.step_minutes
    }

    pub fn daily_start(&self) -> NaiveTime {
        self.daily_start
    }

    pub fn daily_end(&self) -> NaiveTime {
        self.daily_end
    }

    pub fn flat(&self, day: usize, step: usize) -> usize {
        day * self.steps_per_day + step
    }

    pub fn split(&self, flat: usize) -> (usize, usize) {
        (flat / self.steps_per_day, flat % self.steps_per_day)
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.days.binary_search(&date).ok()
    }

    pub fn step_time(&self, step: usize) -> NaiveTime {
        self.daily_start + Duration::minutes(step as i64 * self.step_minutes as i64)
    }

    /// Start timestamp of a grid cell.
    pub fn timestamp(&self, flat: usize) -> NaiveDateTime {
        let (d, s) = self.split(flat);
        self.days[d].and_time(self.step_time(s))
    }

    fn step_duration(&self) -> Duration {
        Duration::minutes(self.step_minutes as i64)
    }

    /// Snaps a timestamp to the nearest step of its day. Timestamps more than
    /// half a step outside the daily window, or on days not in the grid, map
    /// to `None`.
    pub fn snap(&self, ts: NaiveDateTime) -> Option<usize> {
        let day = self.day_index(ts.date())?;
        let offset = (ts - self.days[day].and_time(self.daily_start)).num_seconds() as f64;
        let step_secs = self.step_minutes as f64 * 60.0;
        let idx = (offset / step_secs).round();
        if idx < 0.0 || idx >= self.steps_per_day as f64 {
            return None;
        }
        Some(self.flat(day, idx as usize))
    }

    /// Every grid cell `[cell_start, cell_start + step)` intersecting the
    /// closed interval `[start, end]`.
    pub fn overlapping_cells(&self, start: NaiveDateTime, end: NaiveDateTime) -> Vec<usize> {
        let mut out = Vec::new();
        let step = self.step_duration();
        for (d, date) in self.days.iter().enumerate() {
            if *date < start.date() || *date > end.date() {
                continue;
            }
            let day_start = date.and_time(self.daily_start);
            for s in 0..self.steps_per_day {
                let cell_start = day_start + step * s as i32;
                let cell_end = cell_start + step;
                if start < cell_end && end >= cell_start {
                    out.push(self.flat(d, s));
                }
            }
        }
        out
    }

    pub fn weekday(&self, day: usize) -> Weekday {
        self.days[day].weekday()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkGraph {
    links: Vec<String>,
    upstream: Vec<Vec<usize>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LinkGraph {
    /// Builds the graph from `(link, upstream links)` pairs in declaration order.
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("link {id} declared twice")));
            }
        }
        let mut upstream = Vec::with_capacity(entries.len());
        for (id, ups) in &entries {
            let mut resolved = Vec::new();
            for u in ups {
                let j = *index.get(u).ok_or_else(|| {
                    Error::Data(format!("upstream link {u} of {id} is not a declared link"))
                })?;
                if u == id {
                    return Err(Error::Data(format!("link {id} lists itself as upstream")));
                }
                if !resolved.contains(&j) {
                    resolved.push(j);
                }
            }
            upstream.push(resolved);
        }
        Ok(Self {
            links: entries.into_iter().map(|(id, _)| id).collect(),
            upstream,
            index,
        })
    }

    /// Parses the network file: `link_id,upstream_ids` with semicolon-separated
    /// upstream IDs (possibly empty).
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or("").trim().to_string();
            if id.is_empty() {
                return Err(Error::Data("network row without link_id".into()));
            }
            let ups = rec
                .get(1)
                .unwrap_or("")
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            entries.push((id, ups));
        }
        Self::new(entries)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("link_id,upstream_ids\n");
        for (i, id) in self.links.iter().enumerate() {
            let ups: Vec<&str> = self.upstream[i].iter().map(|&j| self.links[j].as_str()).collect();
            out.push_str(&format!("{id},{}\n", ups.join(";")));
        }
        out
    }

    pub fn links(&self) -> &[String] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        if self.index.is_empty() && !self.links.is_empty() {
            return self.links.iter().position(|l| l == id);
        }
        self.index.get(id).copied()
    }

    pub fn upstream(&self, link: usize) -> &[usize] {
        &self.upstream[link]
    }
}

/// One variable over `links x total_steps`, day-major within each link row.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    links: Vec<String>,
    grid: TimeGrid,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl Panel {
    pub fn filled(links: Vec<String>, grid: TimeGrid, value: f64) -> Self {
        let n = links.len() * grid.total_steps();
        Self {
            links,
            grid,
            values: vec![value; n],
            missing: vec![false; n],
        }
    }

    pub fn from_values(links: Vec<String>, grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let n = links.len() * grid.total_steps();
        if values.len() != n {
            return Err(Error::Alignment(format!(
                "panel expects {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            links,
            grid,
            missing: vec![false; n],
            values,
        })
    }

    /// Values with an explicit missing-cell mask.
    pub fn with_missing(links: Vec<String>, grid: TimeGrid, values: Vec<f64>, missing: Vec<bool>) -> Result<Self> {
        let mut p = Self::from_values(links, grid, values)?;
        if missing.len() != p.values.len() {
            return Err(Error::Alignment(format!(
                "panel expects {} mask entries, got {}",
                p.values.len(),
                missing.len()
            )));
        }
        p.missing = missing;
        Ok(p)
    }

    pub fn links(&self) -> &[String] {
        &self.links
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn get(&self, link: usize, flat: usize) -> f64 {
        self.values[link * self.grid.total_steps() + flat]
    }

    pub fn set(&mut self, link: usize, flat: usize, v: f64) {
        let n = self.grid.total_steps();
        self.values[link * n + flat] = v;
    }

    pub fn is_missing(&self, link: usize, flat: usize) -> bool {
        self.missing[link * self.grid.total_steps() + flat]
    }

    pub fn row(&self, link: usize) -> &[f64] {
        let n = self.grid.total_steps();
        &self.values[link * n..(link + 1) * n]
    }

    pub fn row_mut(&mut self, link: usize) -> &mut [f64] {
        let n = self.grid.total_steps();
        &mut self.values[link * n..(link + 1) * n]
    }

    /// Same links and grid.
    pub fn aligned_with(&self, other: &Panel) -> bool {
        self.links == other.links && self.grid == other.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    Accident,
    RoadClosure,
    HazardFlood,
    Other,
}

impl IncidentKind {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "accident" => Self::Accident,
            "road_closure" | "road_closed" => Self::RoadClosure,
            "hazard_flood" | "flood" => Self::HazardFlood,
            _ => Self::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Accident => "accident",
            Self::RoadClosure => "road_closure",
            Self::HazardFlood => "hazard_flood",
            Self::Other => "other",
        }
    }

    /// The critical kinds kept by default.
    pub fn default_kept() -> Vec<IncidentKind> {
        vec![Self::Accident, Self::RoadClosure, Self::HazardFlood]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentReport {
    pub id: String,
    pub link: usize,
    pub kind: IncidentKind,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub ts: NaiveDateTime,
    pub temperature_f: Option<f64>,
    pub dew_point_f: Option<f64>,
    pub humidity_pct: Option<f64>,
    pub wind_speed_mph: Option<f64>,
    pub wind_gust_mph: Option<f64>,
    pub precipitation_in: Option<f64>,
    pub condition: Option<String>,
}

/// Parses `YYYY-MM-DDTHH:MM[:SS]` (a space separator is also accepted).
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S%.f",
    ] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(ts);
        }
    }
    Err(Error::Data(format!("unparseable timestamp {s:?}")))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn opt_f64(field: Option<&str>) -> Result<Option<f64>> {
    match field.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::Data(format!("invalid number {s:?}"))),
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn required(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    header_index(headers, name)
        .ok_or_else(|| Error::Data(format!("{file} CSV is missing column {name}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub link_id: String,
    pub ts: NaiveDateTime,
    pub speed_mph: f64,
}

/// Reads the speed CSV. Only `link_id`, `timestamp_iso8601` and `speed_mph`
/// are used; the optional average/reference/confidence columns are ignored.
pub fn read_speed_csv<R: Read>(reader: R) -> Result<Vec<SpeedRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let li = required(&headers, "link_id", "speed")?;
    let ti = required(&headers, "timestamp_iso8601", "speed")?;
    let si = required(&headers, "speed_mph", "speed")?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let speed = opt_f64(rec.get(si))?
            .ok_or_else(|| Error::Data("speed row without speed_mph".into()))?;
        rows.push(SpeedRow {
            link_id: rec.get(li).unwrap_or("").trim().to_string(),
            ts: parse_timestamp(rec.get(ti).unwrap_or(""))?,
            speed_mph: speed,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidentRow {
    pub id: String,
    pub link_id: String,
    pub kind: String,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
}

pub fn read_incident_csv<R: Read>(reader: R) -> Result<Vec<IncidentRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = ["id", "link_id", "kind", "start_ts", "end_ts"]
        .iter()
        .map(|c| required(&headers, c, "incident"))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(idx[i]).unwrap_or("").trim().to_string();
        rows.push(IncidentRow {
            id: f(0),
            link_id: f(1),
            kind: f(2),
            start: parse_timestamp(&f(3))?,
            end: parse_timestamp(&f(4))?,
        });
    }
    Ok(rows)
}

/// Reads the weather CSV. Rows with humidity outside `[0, 100]` or negative
/// precipitation are rejected and counted in the returned total.
pub fn read_weather_csv<R: Read>(reader: R) -> Result<(Vec<WeatherRecord>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = [
        "ts",
        "temp_f",
        "dew_point_f",
        "humidity",
        "wind_speed_mph",
        "wind_gust_mph",
        "precip_in",
        "condition",
    ];
    let idx: Vec<usize> = cols
        .iter()
        .map(|c| required(&headers, c, "weather"))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut rejected = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let g = |i: usize| rec.get(idx[i]);
        let record = WeatherRecord {
            ts: parse_timestamp(g(0).unwrap_or(""))?,
            temperature_f: opt_f64(g(1))?,
            dew_point_f: opt_f64(g(2))?,
            humidity_pct: opt_f64(g(3))?,
            wind_speed_mph: opt_f64(g(4))?,
            wind_gust_mph: opt_f64(g(5))?,
            precipitation_in: opt_f64(g(6))?,
            condition: g(7).map(str::trim).filter(|s| !s.is_empty()).map(String::from),
        };
        let humidity_ok = record.humidity_pct.is_none_or(|h| (0.0..=100.0).contains(&h));
        let precip_ok = record.precipitation_in.is_none_or(|p| p >= 0.0);
        if humidity_ok && precip_ok {
            out.push(record);
        } else {
            rejected += 1;
        }
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} weather rows with out-of-range humidity or precipitation");
    }
    Ok((out, rejected))
}

pub fn write_speed_csv(rows: &[SpeedRow]) -> String {
    let mut out = String::from("link_id,timestamp_iso8601,speed_mph\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.link_id, format_timestamp(r.ts), r.speed_mph));
    }
    out
}

/// Writes the observed (non-imputed) cells of a speed panel as speed rows.
pub fn panel_to_speed_rows(panel: &Panel) -> Vec<SpeedRow> {
    let mut rows = Vec::new();
    for (l, id) in panel.links().iter().enumerate() {
        for flat in 0..panel.grid().total_steps() {
            if !panel.is_missing(l, flat) {
                rows.push(SpeedRow {
                    link_id: id.clone(),
                    ts: panel.grid().timestamp(flat),
                    speed_mph: panel.get(l, flat),
                });
            }
        }
    }
    rows
}

pub fn write_incident_csv(rows: &[IncidentRow]) -> String {
    let mut out = String::from("id,link_id,kind,start_ts,end_ts\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.link_id,
            r.kind,
            format_timestamp(r.start),
            format_timestamp(r.end)
        ));
    }
    out
}

pub fn write_weather_csv(records: &[WeatherRecord]) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "ts,temp_f,dew_point_f,humidity,wind_speed_mph,wind_gust_mph,precip_in,condition\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            format_timestamp(r.ts),
            f(r.temperature_f),
            f(r.dew_point_f),
            f(r.humidity_pct),
            f(r.wind_speed_mph),
            f(r.wind_gust_mph),
            f(r.precipitation_in),
            r.condition.clone().unwrap_or_default()
        ));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedLoadReport {
    pub rows_used: usize,
    pub rejected_unknown_link: usize,
    pub rejected_off_grid: usize,
    pub rejected_non_finite: usize,
    pub averaged_cells: usize,
    pub imputed_cells: usize,
    /// `(link_id, date)` pairs with no observations, filled from the link's
    /// day-of-week median profile.
    pub flagged_link_days: Vec<(String, NaiveDate)>,
}

/// Aligns speed rows to the grid.
///
/// Rows are snapped to the nearest step; several rows landing on one cell are
/// averaged. Within each day, interior gaps are filled by linear
/// interpolation and leading/trailing gaps by the nearest observation. Days
/// are never bridged. Link-days with no data at all are filled from the
/// link's day-of-week median profile.
pub fn load_speed(rows: &[SpeedRow], grid: &TimeGrid, graph: &LinkGraph) -> Result<(Panel, SpeedLoadReport)> {
    let n_links = graph.len();
    let total = grid.total_steps();
    let spd = grid.steps_per_day();
    let mut sum = vec![0.0; n_links * total];
    let mut count = vec![0u32; n_links * total];
    let mut report = SpeedLoadReport::default();

    for r in rows {
        let Some(link) = graph.index_of(&r.link_id) else {
            report.rejected_unknown_link += 1;
            continue;
        };
        if !r.speed_mph.is_finite() {
            report.rejected_non_finite += 1;
            continue;
        }
        let Some(flat) = grid.snap(r.ts) else {
            report.rejected_off_grid += 1;
            continue;
        };
        sum[link * total + flat] += r.speed_mph;
        count[link * total + flat] += 1;
        report.rows_used += 1;
    }
    if report.rejected_unknown_link > 0 {
        log::warn!("rejected {} speed rows on unknown links", report.rejected_unknown_link);
    }

    let mut values = vec![f64::NAN; n_links * total];
    let mut missing = vec![true; n_links * total];
    for i in 0..values.len() {
        if count[i] > 0 {
            values[i] = sum[i] / count[i] as f64;
            missing[i] = false;
            if count[i] > 1 {
                report.averaged_cells += 1;
            }
        }
    }

    let mut empty_days: Vec<(usize, usize)> = Vec::new();
    for link in 0..n_links {
        for day in 0..grid.n_days() {
            let base = link * total + day * spd;
            let day_vals = &mut values[base..base + spd];
            let day_missing = &missing[base..base + spd];
            if !fill_day(day_vals, day_missing) {
                empty_days.push((link, day));
            }
        }
    }

    for &(link, day) in &empty_days {
        let weekday = grid.weekday(day);
        let observed_days: Vec<usize> = (0..grid.n_days())
            .filter(|&d| !empty_days.contains(&(link, d)))
            .collect();
        let same_weekday: Vec<usize> = observed_days
            .iter()
            .copied()
            .filter(|&d| grid.weekday(d) == weekday)
            .collect();
        let donors = if same_weekday.is_empty() { observed_days } else { same_weekday };
        if donors.is_empty() {
            return Err(Error::Data(format!(
                "link {} has no speed observations at all",
                graph.links()[link]
            )));
        }
        for s in 0..spd {
            let mut col: Vec<f64> = donors
                .iter()
                .map(|&d| values[link * total + d * spd + s])
                .collect();
            values[link * total + day * spd + s] = median(&mut col);
        }
        report
            .flagged_link_days
            .push((graph.links()[link].clone(), grid.days()[day]));
    }
    if !report.flagged_link_days.is_empty() {
        log::warn!(
            "{} link-days without speed data filled from day-of-week profiles",
            report.flagged_link_days.len()
        );
    }
    report.imputed_cells = missing.iter().filter(|&&m| m).count();

    Ok((
        Panel {
            links: graph.links().to_vec(),
            grid: grid.clone(),
            values,
            missing,
        },
        report,
    ))
}

/// Fills one day in place. Returns false when the day has no observation.
fn fill_day(vals: &mut [f64], missing: &[bool]) -> bool {
    let observed: Vec<usize> = (0..vals.len()).filter(|&i| !missing[i]).collect();
    let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
        return false;
    };
    let lead = vals[first];
    vals[..first].fill(lead);
    let trail = vals[last];
    vals[last + 1..].fill(trail);
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (vals[a], vals[b]);
        for (i, v) in vals.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / (b - a) as f64;
            *v = va + w * (vb - va);
        }
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidentLoadReport {
    pub accepted: usize,
    pub rejected_end_before_start: usize,
    pub rejected_unknown_link: usize,
    pub dropped_kind: usize,
}

/// Reads incident rows into reports and the binary report matrix: a cell is 1
/// iff some kept report on that link overlaps it. Reports are clipped to the
/// daily windows. Rows whose kind is not in `kept_kinds` are dropped.
pub fn load_incidents(
    rows: &[IncidentRow],
    grid: &TimeGrid,
    graph: &LinkGraph,
    kept_kinds: &[IncidentKind],
) -> (Vec<IncidentReport>, Panel, IncidentLoadReport) {
    let mut panel = Panel::filled(graph.links().to_vec(), grid.clone(), 0.0);
    let mut reports = Vec::new();
    let mut report = IncidentLoadReport::default();
    for r in rows {
        if r.end < r.start {
            report.rejected_end_before_start += 1;
            continue;
        }
        let Some(link) = graph.index_of(&r.link_id) else {
            report.rejected_unknown_link += 1;
            continue;
        };
        let kind = IncidentKind::parse(&r.kind);
        if !kept_kinds.contains(&kind) {
            report.dropped_kind += 1;
            continue;
        }
        for flat in grid.overlapping_cells(r.start, r.end) {
            panel.set(link, flat, 1.0);
        }
        reports.push(IncidentReport {
            id: r.id.clone(),
            link,
            kind,
            start: r.start,
            end: r.end,
        });
        report.accepted += 1;
    }
    let rejected = report.rejected_end_before_start + report.rejected_unknown_link;
    if rejected > 0 {
        log::warn!("rejected {rejected} incident rows");
    }
    (reports, panel, report)
}

pub const WEATHER_NUMERIC: [&str; 6] = [
    "temperature",
    "dew_point",
    "humidity",
    "wind_speed",
    "wind_gust",
    "precipitation",
];

/// Weather aligned to the grid. Values are identical for every link.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherPanels {
    /// One panel per entry of [`WEATHER_NUMERIC`].
    pub numeric: Vec<Panel>,
    /// Condition text per grid step (shared by all links).
    pub condition: Vec<Option<String>>,
}

impl WeatherPanels {
    pub fn is_all_missing(&self) -> bool {
        self.numeric.iter().all(|p| p.missing_mask().iter().all(|&m| m))
    }
}

/// Step-replicates hourly weather onto the grid.
///
/// Each grid cell takes the record of the clock hour it starts in (the last
/// record when an hour has several). Hours without a value are forward-filled
/// along the grid and any leading gap is back-filled. With no records at all
/// every panel is marked missing.
pub fn load_weather(records: &[WeatherRecord], grid: &TimeGrid, links: &[String]) -> WeatherPanels {
    let mut by_hour: BTreeMap<(NaiveDate, u32), &WeatherRecord> = BTreeMap::new();
    let mut sorted: Vec<&WeatherRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.ts);
    for r in sorted {
        by_hour.insert((r.ts.date(), r.ts.hour()), r);
    }
    let total = grid.total_steps();
    let hour_of = |flat: usize| {
        let ts = grid.timestamp(flat);
        (ts.date(), ts.hour())
    };
    let getters: [fn(&WeatherRecord) -> Option<f64>; 6] = [
        |r| r.temperature_f,
        |r| r.dew_point_f,
        |r| r.humidity_pct,
        |r| r.wind_speed_mph,
        |r| r.wind_gust_mph,
        |r| r.precipitation_in,
    ];

    let mut numeric = Vec::with_capacity(6);
    for get in getters {
        let raw: Vec<Option<f64>> = (0..total)
            .map(|f| by_hour.get(&hour_of(f)).and_then(|r| get(r)))
            .collect();
        let (vals, miss) = fill_forward_backward(&raw);
        let mut values = Vec::with_capacity(links.len() * total);
        let mut missing = Vec::with_capacity(links.len() * total);
        for _ in links {
            values.extend_from_slice(&vals);
            missing.extend_from_slice(&miss);
        }
        numeric.push(Panel {
            links: links.to_vec(),
            grid: grid.clone(),
            values,
            missing,
        });
    }
    let raw_cond: Vec<Option<String>> = (0..total)
        .map(|f| by_hour.get(&hour_of(f)).and_then(|r| r.condition.clone()))
        .collect();
    let condition = fill_forward_backward_generic(&raw_cond);
    if records.is_empty() {
        log::warn!("no weather records; weather features will use neutral values");
    }
    WeatherPanels { numeric, condition }
}

/// Returns filled values and a mask of cells that had no value of their own.
/// Cells that stay unfilled (no value anywhere) are NaN and marked missing.
fn fill_forward_backward(raw: &[Option<f64>]) -> (Vec<f64>, Vec<bool>) {
    let filled = fill_forward_backward_generic(raw);
    let missing = raw.iter().map(Option::is_none).collect();
    (filled.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(), missing)
}

fn fill_forward_backward_generic<T: Clone>(raw: &[Option<T>]) -> Vec<Option<T>> {
    let mut out: Vec<Option<T>> = Vec::with_capacity(raw.len());
    let mut last: Option<T> = None;
    for v in raw {
        if v.is_some() {
            last = v.clone();
        }
        out.push(last.clone());
    }
    if let Some(first) = raw.iter().flatten().next() {
        for v in out.iter_mut() {
            if v.is_some() {
                break;
            }
            *v = Some(first.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn t(h: u32, m: u32) -> NaiveTime {
        NaiveTime::from_hms_opt(h, m, 0).unwrap()
    }

    fn ts(day: u32, h: u32, m: u32) -> NaiveDateTime {
        d(2022, 5, day).and_time(t(h, m))
    }

    fn graph(n: usize) -> LinkGraph {
        LinkGraph::new((0..n).map(|i| (format!("L{i}"), vec![])).collect()).unwrap()
    }

    #[test]
    fn default_window_has_186_steps() {
        let g = build_time_grid(vec![d(2022, 5, 2)], t(5, 30), t(20, 59), 5).unwrap();
        assert_eq!(g.steps_per_day(), 186);
        assert_eq!(g.total_steps(), 186);
    }

    #[test]
    fn four_minute_window_is_one_step() {
        let g = build_time_grid(vec![d(2022, 5, 2)], t(0, 0), t(0, 4), 5).unwrap();
        assert_eq!(g.steps_per_day(), 1);
    }

    #[test]
    fn two_days_have_372_steps() {
        let g = TimeGrid::with_default_window(TimeGrid::consecutive_days(d(2022, 5, 2), 2)).unwrap();
        assert_eq!(g.total_steps(), 372);
        assert!(g.timestamp(185) < g.timestamp(186));
    }

    #[test]
    fn non_divisible_window_is_a_config_error() {
        let e = build_time_grid(vec![d(2022, 5, 2)], t(5, 30), t(20, 57), 5).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(build_time_grid(vec![d(2022, 5, 2)], t(6, 0), t(5, 0), 5).is_err());
    }

    #[test]
    fn graph_rejects_bad_upstream() {
        assert!(LinkGraph::new(vec![("a".into(), vec!["b".into()])]).is_err());
        assert!(LinkGraph::new(vec![("a".into(), vec!["a".into()])]).is_err());
        let g = LinkGraph::from_csv("link_id,upstream_ids\na,\nb,a\nc,a;b\n".as_bytes()).unwrap();
        assert_eq!(g.upstream(2), &[0, 1]);
        assert_eq!(LinkGraph::from_csv(g.to_csv().as_bytes()).unwrap(), g);
    }

    fn tiny_grid() -> TimeGrid {
        // 05:30..05:44 -> 3 steps per day
        TimeGrid::new(vec![d(2022, 5, 2), d(2022, 5, 3)], t(5, 30), t(5, 44), 5).unwrap()
    }

    #[test]
    fn interior_gap_is_interpolated() {
        let grid = tiny_grid();
        let rows = vec![
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 30), speed_mph: 60.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 40), speed_mph: 50.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(3, 5, 30), speed_mph: 1.0 },
        ];
        let (p, rep) = load_speed(&rows, &grid, &graph(1)).unwrap();
        assert_eq!(&p.row(0)[..3], &[60.0, 55.0, 50.0]);
        assert!(p.is_missing(0, 1));
        assert!(!p.is_missing(0, 0));
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert_eq!(rep.imputed_cells, 3);
    }

    #[test]
    fn leading_gap_takes_nearest_value() {
        let grid = tiny_grid();
        let rows = vec![
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 35), speed_mph: 40.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 40), speed_mph: 42.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(3, 5, 35), speed_mph: 1.0 },
        ];
        let (p, _) = load_speed(&rows, &grid, &graph(1)).unwrap();
        assert_eq!(p.get(0, 0), 40.0);
    }

    #[test]
    fn sub_interval_duplicates_are_averaged() {
        let grid = tiny_grid();
        let rows = vec![
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 29), speed_mph: 58.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 31), speed_mph: 62.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(3, 5, 30), speed_mph: 1.0 },
            SpeedRow { link_id: "nope".into(), ts: ts(3, 5, 30), speed_mph: 1.0 },
        ];
        let (p, rep) = load_speed(&rows, &grid, &graph(1)).unwrap();
        assert_eq!(p.get(0, 0), 60.0);
        assert_eq!(rep.rejected_unknown_link, 1);
        assert_eq!(rep.averaged_cells, 1);
    }

    #[test]
    fn empty_link_day_uses_profile_and_is_flagged() {
        let days = TimeGrid::consecutive_days(d(2022, 5, 2), 8);
        let grid = TimeGrid::new(days, t(5, 30), t(5, 44), 5).unwrap();
        let mut rows = Vec::new();
        for day in 0..7u32 {
            for s in 0..3u32 {
                rows.push(SpeedRow {
                    link_id: "L0".into(),
                    ts: ts(2 + day, 5, 30 + 5 * s),
                    speed_mph: 50.0 + day as f64,
                });
            }
        }
        // day 7 (Monday 2022-05-09) is empty; the only other Monday is day 0
        let (p, rep) = load_speed(&rows, &grid, &graph(1)).unwrap();
        assert_eq!(rep.flagged_link_days, vec![("L0".to_string(), d(2022, 5, 9))]);
        assert_eq!(p.get(0, grid.flat(7, 1)), 50.0);
    }

    #[test]
    fn days_are_not_bridged() {
        let grid = tiny_grid();
        let rows = vec![
            SpeedRow { link_id: "L0".into(), ts: ts(2, 5, 40), speed_mph: 10.0 },
            SpeedRow { link_id: "L0".into(), ts: ts(3, 5, 40), speed_mph: 30.0 },
        ];
        let (p, _) = load_speed(&rows, &grid, &graph(1)).unwrap();
        assert_eq!(&p.row(0)[3..], &[30.0, 30.0, 30.0]);
    }

    fn inc(start: NaiveDateTime, end: NaiveDateTime) -> IncidentRow {
        IncidentRow {
            id: "1".into(),
            link_id: "L0".into(),
            kind: "accident".into(),
            start,
            end,
        }
    }

    #[test]
    fn incident_sets_overlapping_cells() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let (_, p, _) = load_incidents(
            &[inc(ts(2, 10, 0), ts(2, 10, 12))],
            &grid,
            &graph(1),
            &IncidentKind::default_kept(),
        );
        let set: Vec<NaiveTime> = (0..grid.total_steps())
            .filter(|&f| p.get(0, f) == 1.0)
            .map(|f| grid.timestamp(f).time())
            .collect();
        assert_eq!(set, vec![t(10, 0), t(10, 5), t(10, 10)]);
    }

    #[test]
    fn no_reports_gives_zero_matrix() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let (r, p, _) = load_incidents(&[], &grid, &graph(2), &IncidentKind::default_kept());
        assert!(r.is_empty());
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overnight_report_is_clipped_to_daily_windows() {
        let grid = TimeGrid::with_default_window(TimeGrid::consecutive_days(d(2022, 5, 2), 2)).unwrap();
        let (_, p, _) = load_incidents(
            &[inc(ts(2, 20, 55), ts(3, 5, 35))],
            &grid,
            &graph(1),
            &IncidentKind::default_kept(),
        );
        let set: Vec<NaiveDateTime> = (0..grid.total_steps())
            .filter(|&f| p.get(0, f) == 1.0)
            .map(|f| grid.timestamp(f))
            .collect();
        assert_eq!(set, vec![ts(2, 20, 55), ts(3, 5, 30), ts(3, 5, 35)]);
    }

    #[test]
    fn bad_incident_rows_are_rejected() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let mut backwards = inc(ts(2, 11, 0), ts(2, 10, 0));
        backwards.id = "b".into();
        let mut off = inc(ts(2, 10, 0), ts(2, 10, 5));
        off.link_id = "X9".into();
        let mut police = inc(ts(2, 10, 0), ts(2, 10, 5));
        police.kind = "police".into();
        let (r, p, rep) = load_incidents(
            &[backwards, off, police],
            &grid,
            &graph(1),
            &IncidentKind::default_kept(),
        );
        assert!(r.is_empty());
        assert_eq!(rep.rejected_end_before_start, 1);
        assert_eq!(rep.rejected_unknown_link, 1);
        assert_eq!(rep.dropped_kind, 1);
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    fn wx(h: u32, temp: f64) -> WeatherRecord {
        WeatherRecord {
            ts: ts(2, h, 0),
            temperature_f: Some(temp),
            dew_point_f: Some(30.0),
            humidity_pct: Some(50.0),
            wind_speed_mph: Some(5.0),
            wind_gust_mph: None,
            precipitation_in: Some(0.0),
            condition: Some("Fair".into()),
        }
    }

    #[test]
    fn weather_is_step_replicated_and_forward_filled() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let links: Vec<String> = vec!["a".into(), "b".into()];
        let w = load_weather(&[wx(9, 40.0), wx(11, 44.0)], &grid, &links);
        let temp = &w.numeric[0];
        let at = |h: u32, m: u32| temp.get(1, grid.snap(ts(2, h, m)).unwrap());
        assert_eq!(at(9, 0), 40.0);
        assert_eq!(at(9, 55), 40.0);
        assert_eq!(at(10, 0), 40.0);
        assert_eq!(at(10, 55), 40.0);
        assert_eq!(at(11, 0), 44.0);
        // leading hours are back-filled
        assert_eq!(at(5, 30), 40.0);
        assert_eq!(temp.row(0), temp.row(1));
        // wind gust was never observed
        assert!(w.numeric[4].missing_mask().iter().all(|&m| m));
    }

    #[test]
    fn single_weather_record_gives_constant_panel() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let w = load_weather(&[wx(12, 70.0)], &grid, &["a".to_string()]);
        assert!(w.numeric[0].values().iter().all(|&v| v == 70.0));
        assert!(w.condition.iter().all(|c| c.as_deref() == Some("Fair")));
    }

    #[test]
    fn empty_weather_is_all_missing() {
        let grid = TimeGrid::with_default_window(vec![d(2022, 5, 2)]).unwrap();
        let w = load_weather(&[], &grid, &["a".to_string()]);
        assert!(w.is_all_missing());
        assert!(w.condition.iter().all(Option::is_none));
    }

    #[test]
    fn weather_csv_rejects_out_of_range_rows() {
        let csv = "ts,temp_f,dew_point_f,humidity,wind_speed_mph,wind_gust_mph,precip_in,condition\n\
                   2022-05-02T09:00:00,40,30,50,5,,0,Fair\n\
                   2022-05-02T10:00:00,40,30,150,5,,0,Fair\n\
                   2022-05-02T11:00:00,40,30,50,5,,-1,Rain\n";
        let (recs, rejected) = read_weather_csv(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(rejected, 2);
        assert_eq!(recs[0].wind_gust_mph, None);
    }

    #[test]
    fn speed_csv_accepts_optional_columns() {
        let csv = "link_id,timestamp_iso8601,speed_mph,average_speed_mph,reference_speed_mph,confidence_score,confidence_value\n\
                   L0,2022-05-02T05:30:00,61.5,60,65,30,100\n";
        let rows = read_speed_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows[0].speed_mph, 61.5);
    }
}
