mod common;

use common::{featurized, smoke_config};
use trafficmoe::features::{cyclic, DType, VarKind, TARGET};

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[test]
fn cyclic_pairs_lie_on_the_unit_circle() {
    let f = featurized(&smoke_config());
    let ft = &f.ft;
    for (s, c) in [("hour_sin", "hour_cos"), ("dow_sin", "dow_cos"), ("month_sin", "month_cos")] {
        let (si, ci) = (ft.var_index(s).unwrap(), ft.var_index(c).unwrap());
        let (sv, cv) = (ft.column(si), ft.column(ci));
        for (a, b) in sv.iter().zip(&cv) {
            assert!((a * a + b * b - 1.0).abs() < 1e-12, "{s}/{c}: {a}, {b}");
        }
    }
}

#[test]
fn binary_variables_are_zero_or_one() {
    let f = featurized(&smoke_config());
    for (i, v) in f.ft.variables().iter().enumerate() {
        if v.dtype == DType::Binary {
            assert!(f.ft.column(i).iter().all(|&x| x == 0.0 || x == 1.0), "{}", v.name);
        }
    }
}

#[test]
fn variable_roles() {
    let f = featurized(&smoke_config());
    let vars = f.ft.variables();
    let kind = |n: &str| vars[f.ft.var_index(n).unwrap()].kind;
    assert_eq!(kind(TARGET), VarKind::ObservedPast);
    assert_eq!(kind("slowdown_speed"), VarKind::ObservedPast);
    assert_eq!(kind("hour_sin"), VarKind::KnownFuture);
    assert_eq!(kind("link_incident"), VarKind::KnownFuture);
    assert_eq!(f.ft.target_index(), f.ft.var_index(TARGET).unwrap());
    let cat = vars.iter().find(|v| v.dtype == DType::Categorical).unwrap();
    assert_eq!(cat.vocabulary.as_ref().unwrap()[0], trafficmoe::features::UNKNOWN_CATEGORY);
}

#[test]
fn cyclic_hour_wraps_around_midnight() {
    let h0 = cyclic(0, 24);
    assert!(dist(cyclic(23, 24), h0) < dist(cyclic(12, 24), h0));
    assert!((dist(cyclic(23, 24), h0) - dist(cyclic(1, 24), h0)).abs() < 1e-12);
}

#[test]
fn featurization_is_deterministic() {
    let cfg = smoke_config();
    let (a, b) = (featurized(&cfg), featurized(&cfg));
    assert_eq!(a.ft, b.ft);
    assert_eq!(a.parts.train, b.parts.train);
    assert_eq!(a.parts.test, b.parts.test);
}

#[test]
fn standardized_target_uses_training_days() {
    let f = featurized(&smoke_config());
    let ft = &f.ft;
    let ti = ft.target_index();
    let steps = ft.grid().steps_per_day();
    let mut vals = Vec::new();
    for link in 0..ft.n_links() {
        for d in ft.train_days() {
            for s in 0..steps {
                vals.push(ft.value(link, d * steps + s, ti));
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 1e-9, "train mean {mean}");
}
