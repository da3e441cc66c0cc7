mod common;

use common::{featurized, smoke_config};
use trafficmoe::moe::{finetune, gate, train_recurrent, GateMode, GatePolicy, MoeModel};
use trafficmoe::pipeline::stages::{tft_config, train_tft_recurrent};
use trafficmoe::tftlite::TftModel;
use trafficmoe::train::{fit, TrainConfig};
use trafficmoe::windows::{filter_condition, Condition};

#[test]
fn label_oracle_gate_follows_the_condition_label() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let policy = GatePolicy { mode: GateMode::LabelOracle };
    for s in f.parts.train.iter().chain(&f.parts.test) {
        let p = gate(&f.ft, s, policy, cfg.windows.c, cfg.windows.h).unwrap();
        let want = if s.condition == Condition::NonRecurrent { 1.0 } else { 0.0 };
        assert_eq!(p, want);
    }
}

#[test]
fn gates_are_binary_and_deterministic() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let m = TftModel::new(tft_config(&f, &cfg).unwrap(), 1).unwrap();
    for mode in [GateMode::LabelOracle, GateMode::Causal] {
        let moe = MoeModel::new(m.clone(), m.clone(), GatePolicy { mode }).unwrap();
        let a = moe.gates(&f.ft, &f.parts.test).unwrap();
        assert_eq!(a, moe.gates(&f.ft, &f.parts.test).unwrap());
        assert!(a.iter().all(|&p| p == 0.0 || p == 1.0));
    }
}

#[test]
fn endpoints_return_each_expert_unchanged() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let tc = tft_config(&f, &cfg).unwrap();
    let (r, n) = (TftModel::new(tc.clone(), 1).unwrap(), TftModel::new(tc, 2).unwrap());
    let moe = MoeModel::new(r.clone(), n.clone(), GatePolicy::default()).unwrap();
    for (cond, expert) in [(Condition::Recurrent, &r), (Condition::NonRecurrent, &n)] {
        let s = filter_condition(&f.parts.test, cond);
        assert!(!s.is_empty());
        let got = moe.forecast(&f.ft, &s).unwrap();
        let want = expert.forecast(&f.ft, &s).unwrap();
        for (a, b) in got.iter().zip(&want) {
            let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.0.values), bits(&b.0.values));
        }
    }
}

#[test]
fn recurrent_training_never_reads_nonrecurrent_slices() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let (_, report) = train_tft_recurrent(&f, &cfg).unwrap();
    assert_eq!(report.audit.nonrecurrent, 0);
    assert!(report.audit.recurrent > 0);
}

#[test]
fn zero_finetune_epochs_keep_the_pretrained_weights() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let mut m = TftModel::new(tft_config(&f, &cfg).unwrap(), 3).unwrap();
    train_recurrent(&mut m, &f.ft, &f.parts.train, &f.parts.val, &cfg.train, 4).unwrap();
    let pre = m.params().clone();
    let zero = TrainConfig { epochs: 0, ..cfg.finetune_config() };
    let rep = finetune(&mut m, &f.ft, &f.parts.train, &f.parts.val, &zero, 4).unwrap();
    assert!(rep.is_some());
    assert!(m.params().bit_eq(&pre));
}

#[test]
fn frozen_parameters_do_not_move() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let mut m = TftModel::new(tft_config(&f, &cfg).unwrap(), 3).unwrap();
    let before = m.params().clone();
    let tc = TrainConfig {
        epochs: 1,
        max_batches_per_epoch: Some(2),
        freeze: vec!["vsn_".into(), "lstm_enc".into()],
        ..cfg.train.clone()
    };
    fit(&mut m, &f.ft, &f.parts.train, &[], &tc, 5).unwrap();
    let mut moved = 0;
    for ((_, a), (_, b)) in before.iter().zip(m.params().iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.name.starts_with("vsn_") || a.name.starts_with("lstm_enc") {
            assert!(same, "{} moved while frozen", a.name);
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn moe_checkpoint_round_trip() {
    let cfg = smoke_config();
    let f = featurized(&cfg);
    let tc = tft_config(&f, &cfg).unwrap();
    let moe = MoeModel::new(
        TftModel::new(tc.clone(), 1).unwrap(),
        TftModel::new(tc, 2).unwrap(),
        GatePolicy { mode: GateMode::Causal },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    moe.save(dir.path()).unwrap();
    let back = MoeModel::load(dir.path()).unwrap();
    assert_eq!(back.policy, moe.policy);
    assert!(back.recurrent.params().bit_eq(moe.recurrent.params()));
    assert!(back.nonrecurrent.params().bit_eq(moe.nonrecurrent.params()));
}
