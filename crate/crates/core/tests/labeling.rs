//! Condition labels, slicing and the chronological split.

mod common;

use common::*;
use trafficmoe::windows::{chronological_split, label_condition, slice_windows, Condition, SplitSpec};

fn pattern(bits: u32, len: usize) -> Vec<bool> {
    (0..len).map(|i| bits >> i & 1 == 1).collect()
}

fn as_f64(p: &[bool]) -> Vec<f64> {
    p.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

#[test]
fn all_32_patterns_match_the_case_analysis() {
    let (c, h) = (3, 2);
    for bits in 0..1u32 << (c + h) {
        let p = pattern(bits, c + h);
        assert_eq!(label_condition(&as_f64(&p), c), brute_force_label(&p, c), "pattern {p:?}");
    }
}

#[test]
fn the_four_canonical_cases() {
    let c = 3;
    // no incident
    assert_eq!(label_condition(&[0.0, 0.0, 0.0, 0.0, 0.0], c), Condition::Recurrent);
    // incident ends before the prediction window
    assert_eq!(label_condition(&[1.0, 1.0, 0.0, 0.0, 0.0], c), Condition::Recurrent);
    // incident happens in the prediction window
    assert_eq!(label_condition(&[0.0, 0.0, 0.0, 0.0, 1.0], c), Condition::NonRecurrent);
    // incident starts in the context and persists into the prediction window
    assert_eq!(label_condition(&[0.0, 1.0, 1.0, 1.0, 0.0], c), Condition::NonRecurrent);
}

#[test]
fn slice_counts_and_split_invariants() {
    let f = featurized(&smoke_config());
    let ft = &f.ft;
    let spd = ft.grid().steps_per_day();
    let (c, h) = (6, 3);
    let slices = slice_windows(ft, c, h).unwrap();
    assert_eq!(slices.len(), ft.n_links() * ft.grid().n_days() * (spd - c - h + 1));
    assert_eq!(slice_windows(ft, c, spd - c).unwrap().len(), ft.n_links() * ft.grid().n_days());
    assert!(slice_windows(ft, c, spd).is_err());

    // deterministic ordering
    assert_eq!(slices, slice_windows(ft, c, h).unwrap());

    let days = SplitSpec::default().split_days(ft.grid().n_days()).unwrap();
    let parts = chronological_split(&slices, &days);
    assert_eq!(parts.train.len() + parts.val.len() + parts.test.len(), slices.len());
    let day = |s: &trafficmoe::windows::WindowSlice| ft.grid().split(s.t0_flat(ft, c)).0;
    let last_train = parts.train.iter().map(day).max().unwrap();
    let first_val = parts.val.iter().map(day).min().unwrap();
    let last_val = parts.val.iter().map(day).max().unwrap();
    let first_test = parts.test.iter().map(day).min().unwrap();
    assert!(last_train < first_val && last_val < first_test);
    // the whole window lies inside one day
    for s in &slices {
        let (d0, _) = ft.grid().split(s.context_flat(ft));
        let (d1, _) = ft.grid().split(s.context_flat(ft) + c + h - 1);
        assert_eq!(d0, d1);
    }
}

#[test]
fn labels_use_the_network_indicator() {
    let f = featurized(&smoke_config());
    let ft = &f.ft;
    let net = ft.var_index("network_incident").unwrap();
    let (c, h) = (6, 3);
    for s in slice_windows(ft, c, h).unwrap() {
        let series = s.series(ft, net, c + h);
        assert_eq!(s.condition, label_condition(&series, c));
    }
}
