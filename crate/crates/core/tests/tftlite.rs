mod common;

use autodiff::{AdamState, Graph};
use common::{featurized, smoke_config};
use trafficmoe::pipeline::stages::{tft_config, train_tft_recurrent};
use trafficmoe::tftlite::{Attention, TftInterpretation, TftModel};

fn check_interpretation(it: &TftInterpretation, c: usize, h: usize) {
    let t = c + h;
    assert_eq!(it.attention.len(), h * t);
    for j in 0..h {
        let row = &it.attention[j * t..(j + 1) * t];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (k, &w) in row.iter().enumerate() {
            assert!(w >= 0.0);
            if k > c + j {
                assert_eq!(w, 0.0, "query {j} attends to future key {k}");
            }
        }
    }
    for w in [&it.encoder_weights, &it.decoder_weights] {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn untrained_model_is_causal_and_normalized() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let tc = tft_config(&f, &cfg).unwrap();
    let m = TftModel::new(tc.clone(), 5).unwrap();
    for (q, it) in m.forecast(&f.ft, &f.parts.test[..40]).unwrap() {
        check_interpretation(&it, tc.c, tc.h);
        for row in &q.values {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn trained_model_is_causal_and_normalized() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let (m, _) = train_tft_recurrent(&f, &cfg).unwrap();
    let (c, h) = (m.config().c, m.config().h);
    for (q, it) in m.forecast(&f.ft, &f.parts.test).unwrap() {
        check_interpretation(&it, c, h);
        for row in &q.values {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn causal_mask_blocks_exactly_the_future() {
    let (c, h) = (4, 3);
    let m = Attention::causal_mask(c, h);
    for j in 0..h {
        for k in 0..c + h {
            let v = m.row_slice(j)[k];
            assert_eq!(v == 0.0, k <= c + j, "query {j} key {k}");
        }
    }
}

#[test]
fn small_adam_step_reduces_loss() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let mut m = TftModel::new(tft_config(&f, &cfg).unwrap(), 9).unwrap();
    let batch = m.batch(&f.ft, &f.parts.train[..1]).unwrap();
    let loss_of = |m: &TftModel| {
        let mut g = Graph::new();
        let l = m.loss(&mut g, &batch).unwrap();
        g.value(l).item().unwrap()
    };
    let before = loss_of(&m);
    let mut g = Graph::new();
    let l = m.loss(&mut g, &batch).unwrap();
    let grads = g.backward(l).unwrap().for_store(m.params());
    let mut adam = AdamState::new(m.params(), 1e-4);
    adam.step(m.params_mut(), &grads);
    let after = loss_of(&m);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn checkpoint_round_trip_preserves_forecasts() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let m = TftModel::new(tft_config(&f, &cfg).unwrap(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path(), "m").unwrap();
    let back = TftModel::load(dir.path(), "m").unwrap();
    assert!(back.params().bit_eq(m.params()));
    let s = &f.parts.test[..8];
    assert_eq!(m.forecast(&f.ft, s).unwrap(), back.forecast(&f.ft, s).unwrap());
}
