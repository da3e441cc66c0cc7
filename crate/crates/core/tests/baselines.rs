mod common;

use common::{featurized, smoke_config};
use proptest::prelude::*;
use trafficmoe::baselines::{lob_forecast, sample_median};
use trafficmoe::pipeline::stages::{deepar_predictions, lob_predictions, train_deepar};

#[test]
fn lob_repeats_the_last_observed_speed() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let (c, h) = (cfg.windows.c, cfg.windows.h);
    for s in &f.parts.test {
        let past = s.past_target(&f.ft, c);
        let want = f.ft.to_mph(*past.last().unwrap());
        let got = lob_forecast(&f.ft, s, c, h);
        assert_eq!(got.len(), h);
        assert!(got.iter().all(|&x| (x - want).abs() < 1e-9));
    }
    assert_eq!(lob_predictions(&f, &cfg), lob_predictions(&f, &cfg));
}

#[test]
fn deepar_forecasts_are_reproducible() {
    let mut cfg = smoke_config();
    cfg.train.epochs = 1;
    let f = featurized(&cfg);
    let (m, _) = train_deepar(&f, &cfg).unwrap();
    let a = deepar_predictions(&m, &f, &cfg).unwrap();
    assert_eq!(a, deepar_predictions(&m, &f, &cfg).unwrap());
    assert!(a.iter().flat_map(|p| &p.point).all(|x| x.is_finite()));
}

#[test]
fn median_examples() {
    assert_eq!(sample_median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(sample_median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}

proptest! {
    #[test]
    fn median_ignores_sample_order(mut v in prop::collection::vec(-100.0f64..100.0, 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut w = v.clone();
        w.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(sample_median(&mut v).to_bits(), sample_median(&mut w).to_bits());
    }
}
