//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficmoe::pipeline::stages::{self, Featurized, RawData};
use trafficmoe::pipeline::Config;
use trafficmoe::synth;
use trafficmoe::tftlite::{Attention, Grn, Lstm, TftConfig, TftModel, VarSpec};
use trafficmoe::windows::{Condition, WindowSlice};

pub const SMOKE_TOML: &str = include_str!("../../../../configs/smoke.toml");
pub const DEFAULT_TOML: &str = include_str!("../../../../configs/default.toml");

pub fn smoke_config() -> Config {
    Config::from_toml(SMOKE_TOML).expect("smoke config parses")
}

pub fn default_config() -> Config {
    Config::from_toml(DEFAULT_TOML).expect("default config parses")
}

pub fn raw_for(cfg: &Config) -> RawData {
    RawData::from_scenario(&synth::generate(&cfg.scenario_config()).expect("scenario generates"))
}

/// Scenario through featurization and the day split.
pub fn featurized(cfg: &Config) -> Featurized {
    let raw = raw_for(cfg);
    let ing = stages::ingest_raw(&raw, cfg).expect("ingest");
    let den = stages::denoise(&ing, cfg).expect("denoise");
    let ft = stages::featurize(&ing, &den, cfg).expect("featurize");
    stages::partition(ft, cfg).expect("partition")
}

// ---------------------------------------------------------------- metrics

/// SMAPE by explicit loops over origins, steps and links.
pub fn naive_smape(pred: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>]) -> f64 {
    let t_len = pred.len() as f64;
    let mut outer = 0.0;
    for t in 0..pred.len() {
        let h_len = pred[t].len() as f64;
        let mut mid = 0.0;
        for h in 0..pred[t].len() {
            let n_len = pred[t][h].len() as f64;
            let mut inner = 0.0;
            for n in 0..pred[t][h].len() {
                let (p, y) = (pred[t][h][n], truth[t][h][n]);
                let d = (p.abs() + y.abs()) / 2.0;
                inner += if d == 0.0 { 0.0 } else { 100.0 * (p - y).abs() / d };
            }
            mid += inner / n_len;
        }
        outer += mid / h_len;
    }
    outer / t_len
}

pub fn naive_rmse(pred: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>]) -> f64 {
    let t_len = pred.len() as f64;
    let mut outer = 0.0;
    for t in 0..pred.len() {
        let h_len = pred[t].len() as f64;
        let mut mid = 0.0;
        for h in 0..pred[t].len() {
            let n_len = pred[t][h].len() as f64;
            let mut sq = 0.0;
            for n in 0..pred[t][h].len() {
                sq += (pred[t][h][n] - truth[t][h][n]).powi(2);
            }
            mid += (sq / n_len).sqrt();
        }
        outer += mid / h_len;
    }
    outer / t_len
}

pub fn random_cube(rng: &mut ChaCha8Rng, t: usize, h: usize, n: usize) -> Vec<Vec<Vec<f64>>> {
    (0..t)
        .map(|_| (0..h).map(|_| (0..n).map(|_| rng.random_range(0.0..80.0)).collect()).collect())
        .collect()
}

// --------------------------------------------------------------- labeling

/// Case-based labeling read off the four canonical conditions: find each
/// incident episode (a maximal run of set steps) and decide by where it lies.
pub fn brute_force_label(pattern: &[bool], c: usize) -> Condition {
    let mut start = None;
    for (t, &on) in pattern.iter().chain(std::iter::once(&false)).enumerate() {
        match (on, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                let end = t; // exclusive
                let ends_before_prediction = end <= c;
                if !ends_before_prediction {
                    // starts in prediction window, or persists into it
                    return Condition::NonRecurrent;
                }
                let _ = s;
                start = None;
            }
            _ => {}
        }
    }
    Condition::Recurrent
}

// ---------------------------------------------------------- finite differences

pub const FD_EPS: f64 = 1e-5;

/// Largest relative error between analytic and central-difference gradients.
pub fn gradcheck(store: &ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let analytic = g.backward(loss).expect("backward").for_store(store);
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, s);
        g.value(l).item().expect("scalar loss")
    };
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (id, a) in ids.iter().zip(&analytic) {
        for k in 0..store.get(*id).len() {
            let orig = work.get(*id).data()[k];
            work.get_mut(*id).data_mut()[k] = orig + FD_EPS;
            let up = value(&work);
            work.get_mut(*id).data_mut()[k] = orig - FD_EPS;
            let down = value(&work);
            work.get_mut(*id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * FD_EPS);
            let x = a.data()[k];
            let denom = x.abs().max(num.abs()).max(1e-6);
            worst = worst.max((x - num).abs() / denom);
        }
    }
    worst
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum of `y`'s entries with fixed random weights, as a scalar.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let w = g.constant(w.clone()).expect("finite");
    let p = g.mul(y, w).expect("shapes");
    g.sum(p).expect("sum")
}

pub fn grn_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let grn = Grn::new(&mut store, "grn", 5, 4, 3, Some(2), &mut rng);
    let x = random_tensor(&mut rng, 6, 5);
    let ctx = random_tensor(&mut rng, 6, 2);
    let w = random_tensor(&mut rng, 6, 3);
    gradcheck(&store, &|g, s| {
        let xv = g.input(x.clone()).unwrap();
        let cv = g.input(ctx.clone()).unwrap();
        let y = grn.forward(g, s, xv, Some(cv), 0.0).unwrap();
        project(g, y, &w)
    })
}

pub fn lstm_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng);
    let x = random_tensor(&mut rng, 2, 3);
    let h0 = random_tensor(&mut rng, 2, 4);
    let c0 = random_tensor(&mut rng, 2, 4);
    let wh = random_tensor(&mut rng, 2, 4);
    let wc = random_tensor(&mut rng, 2, 4);
    gradcheck(&store, &|g, s| {
        let xv = g.input(x.clone()).unwrap();
        let hv = g.input(h0.clone()).unwrap();
        let cv = g.input(c0.clone()).unwrap();
        let xw = lstm.project(g, s, xv).unwrap();
        let (h, c) = lstm.cell(g, s, xw, hv, cv).unwrap();
        let a = project(g, h, &wh);
        let b = project(g, c, &wc);
        g.add(a, b).unwrap()
    })
}

pub fn attention_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (hidden, heads, c, h, batch) = (4, 2, 3, 2, 2);
    let attn = Attention::new(&mut store, "attn", hidden, heads, &mut rng);
    let x = random_tensor(&mut rng, batch * (c + h), hidden);
    let w = random_tensor(&mut rng, batch * h, hidden);
    gradcheck(&store, &|g, s| {
        let xv = g.input(x.clone()).unwrap();
        let (y, _) = attn.forward(g, s, xv, batch, c, h).unwrap();
        project(g, y, &w)
    })
}

/// A tiny TFT-lite on the smoke scenario, checked through its training loss.
pub struct TinyTft {
    pub model: TftModel,
    pub slices: Vec<WindowSlice>,
    pub f: Featurized,
}

/// Hidden 8, two heads, `c = 4`, `h = 2` and three variables: the target,
/// one calendar input and the link incident flag.
pub fn tiny_tft(f: Featurized, seed: u64) -> TinyTft {
    let spec = |name: &str| VarSpec {
        name: name.into(),
        cardinality: None,
    };
    let cfg = TftConfig {
        hidden: 8,
        heads: 2,
        dropout: 0.0,
        quantiles: vec![0.1, 0.5, 0.9],
        c: 4,
        h: 2,
        n_links: f.ft.n_links(),
        observed: vec![spec("speed")],
        known: vec![spec("hour_sin"), spec("link_incident")],
    };
    let model = TftModel::new(cfg, seed).expect("model");
    let slices = trafficmoe::windows::slice_windows(&f.ft, 4, 2).expect("slices");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = (0..3).map(|_| slices[rng.random_range(0..slices.len())]).collect();
    TinyTft { model, slices: picked, f }
}

/// Checks the whole forward pass through a fixed random projection of the
/// quantile outputs; the pinball loss itself is checked separately, and its
/// kinks would make central differences unreliable here.
pub fn tft_error(t: &TinyTft) -> f64 {
    let batch = t.model.batch(&t.f.ft, &t.slices).expect("batch");
    let store = t.model.params().clone();
    let model = std::cell::RefCell::new(t.model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(store.numel() as u64);
    let q = t.model.config().quantiles.len();
    let w = random_tensor(&mut rng, batch.size * t.model.config().h, q);
    gradcheck(&store, &|g, s| {
        let mut m = model.borrow_mut();
        *m.params_mut() = s.clone();
        let out = m.forward(g, &batch).unwrap();
        project(g, out.pred, &w)
    })
}
