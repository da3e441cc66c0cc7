//! CSV round trips, incident overlap and weather replication.

use chrono::{Duration, NaiveDate, NaiveTime};
use proptest::prelude::*;
use trafficmoe::ingest::{
    load_incidents, load_speed, load_weather, panel_to_speed_rows, read_incident_csv, read_speed_csv,
    write_incident_csv, write_speed_csv, IncidentKind, IncidentRow, LinkGraph, Panel, TimeGrid, WeatherRecord,
};

fn grid(days: usize, steps: usize) -> TimeGrid {
    let start = NaiveTime::from_hms_opt(7, 0, 0).unwrap();
    let end = start + Duration::minutes(5 * steps as i64 - 1);
    TimeGrid::new(TimeGrid::consecutive_days(NaiveDate::from_ymd_opt(2022, 5, 2).unwrap(), days), start, end, 5)
        .unwrap()
}

fn graph() -> LinkGraph {
    LinkGraph::new(vec![
        ("x1".into(), vec![]),
        ("x2".into(), vec!["x1".into()]),
        ("x3".into(), vec!["x2".into()]),
    ])
    .unwrap()
}

proptest! {
    #[test]
    fn speed_panel_round_trips_through_csv(
        values in prop::collection::vec(1.0f64..90.0, 3 * 2 * 8),
        holes in prop::collection::vec(prop::bool::weighted(0.2), 3 * 2 * 8),
    ) {
        let g = grid(2, 8);
        // keep at least one observation per link-day so no day needs the profile fill
        let missing: Vec<bool> = holes.iter().enumerate().map(|(i, &h)| h && i % 8 != 0).collect();
        let panel = Panel::with_missing(graph().links().to_vec(), g.clone(), values, missing).unwrap();
        let csv = write_speed_csv(&panel_to_speed_rows(&panel));
        let rows = read_speed_csv(csv.as_bytes()).unwrap();
        let (back, report) = load_speed(&rows, &g, &graph()).unwrap();
        prop_assert!(report.flagged_link_days.is_empty());
        for l in 0..3 {
            for t in 0..g.total_steps() {
                prop_assert!(back.get(l, t).is_finite());
                if !panel.is_missing(l, t) {
                    prop_assert_eq!(back.get(l, t).to_bits(), panel.get(l, t).to_bits());
                    prop_assert!(!back.is_missing(l, t));
                } else {
                    prop_assert!(back.is_missing(l, t));
                }
            }
        }
    }

    #[test]
    fn incident_cells_match_an_interval_scan(
        reports in prop::collection::vec((0usize..3, 0i64..3 * 24 * 60, 0i64..300), 0..6)
    ) {
        let g = grid(2, 10);
        let base = g.days()[0].and_hms_opt(0, 0, 0).unwrap();
        let rows: Vec<IncidentRow> = reports
            .iter()
            .enumerate()
            .map(|(i, &(link, off, len))| IncidentRow {
                id: format!("r{i}"),
                link_id: graph().links()[link].clone(),
                kind: "accident".into(),
                start: base + Duration::minutes(off),
                end: base + Duration::minutes(off + len),
            })
            .collect();
        let rows = read_incident_csv(write_incident_csv(&rows).as_bytes()).unwrap();
        let (_, panel, rep) = load_incidents(&rows, &g, &graph(), &IncidentKind::default_kept());
        prop_assert_eq!(rep.accepted, rows.len());
        for l in 0..3 {
            for t in 0..g.total_steps() {
                let cell_start = g.timestamp(t);
                let cell_end = cell_start + Duration::minutes(5);
                let hit = rows.iter().any(|r| {
                    r.link_id == graph().links()[l] && r.start < cell_end && r.end >= cell_start
                });
                prop_assert_eq!(panel.get(l, t), if hit { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn weather_is_identical_across_links(temps in prop::collection::vec(prop::option::of(-10.0f64..100.0), 1..30)) {
        let g = grid(2, 24);
        let base = g.days()[0].and_hms_opt(6, 0, 0).unwrap();
        let records: Vec<WeatherRecord> = temps
            .iter()
            .enumerate()
            .map(|(i, &t)| WeatherRecord {
                ts: base + Duration::minutes(50 * i as i64),
                temperature_f: t,
                dew_point_f: t.map(|x| x - 5.0),
                humidity_pct: Some(50.0),
                wind_speed_mph: Some(3.0),
                wind_gust_mph: None,
                precipitation_in: Some(0.0),
                condition: Some("Fair".into()),
            })
            .collect();
        let w = load_weather(&records, &g, graph().links());
        prop_assert_eq!(w.condition.len(), g.total_steps());
        for p in &w.numeric {
            for t in 0..g.total_steps() {
                for l in 1..3 {
                    prop_assert_eq!(p.get(l, t).to_bits(), p.get(0, t).to_bits());
                    prop_assert_eq!(p.is_missing(l, t), p.is_missing(0, t));
                }
            }
        }
    }
}
