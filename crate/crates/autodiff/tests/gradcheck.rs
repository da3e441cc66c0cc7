//! Analytic gradients against central finite differences, plus the small
//! hand-checkable values for each primitive.

use autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-4;

/// Central-difference gradient of `f` with respect to every parameter.
fn numeric_grads(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Vec<f64>> {
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    ids.iter()
        .map(|&id| {
            (0..store.get(id).len())
                .map(|k| {
                    let orig = work.get(id).data()[k];
                    work.get_mut(id).data_mut()[k] = orig + FD_EPS;
                    let up = f(&work);
                    work.get_mut(id).data_mut()[k] = orig - FD_EPS;
                    let down = f(&work);
                    work.get_mut(id).data_mut()[k] = orig;
                    (up - down) / (2.0 * FD_EPS)
                })
                .collect()
        })
        .collect()
}

fn max_rel_err(analytic: &[Tensor], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

fn check(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap().for_store(store);
    let f = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).item().unwrap()
    };
    max_rel_err(&grads, &numeric_grads(store, &f))
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_at_zero_and_its_derivative() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0)).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), Some(0.5));
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), Some(0.25));
}

#[test]
fn square_derivative_at_three() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), Some(6.0));
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![3.0; 5])).unwrap();
    let gamma = g.constant(Tensor::row(vec![1.0; 5])).unwrap();
    let beta = g.constant(Tensor::row(vec![0.0; 5])).unwrap();
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_is_identity_at_inference() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    let mut t = Graph::training(3);
    let x = t.constant(Tensor::row(vec![1.0; 1000])).unwrap();
    let y = t.dropout(x, 0.5).unwrap();
    let zeros = t.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 400 && zeros < 600);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3)).unwrap();
    let b = g.constant(Tensor::zeros(2, 3)).unwrap();
    match g.matmul(a, b) {
        Err(AutodiffError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(2, 2)).unwrap();
    assert!(matches!(g.backward(a), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn nan_is_a_forward_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(800.0)).unwrap();
    let e = g.exp(a).unwrap_err();
    assert!(matches!(e, AutodiffError::NonFinite { op: "exp" }));
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.insert("used", Tensor::scalar(2.0));
    store.insert("unused", Tensor::row(vec![1.0, 1.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.mul(wv, wv).unwrap();
    let grads = g.backward(loss).unwrap().for_store(&store);
    assert_eq!(grads[0].data(), &[4.0]);
    assert_eq!(grads[1].data(), &[0.0, 0.0]);
}

fn mlp_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.uniform("w1", 4, 6, 4, &mut rng);
    s.uniform("b1", 1, 6, 4, &mut rng);
    s.uniform("w2", 6, 3, 6, &mut rng);
    s.uniform("b2", 1, 3, 6, &mut rng);
    s
}

fn mlp_loss(g: &mut Graph, s: &ParamStore, x: &Tensor) -> Var {
    let xv = g.constant(x.clone()).unwrap();
    let w1 = g.param(s, ParamId(0));
    let b1 = g.param(s, ParamId(1));
    let w2 = g.param(s, ParamId(2));
    let b2 = g.param(s, ParamId(3));
    let h = g.matmul(xv, w1).unwrap();
    let h = g.add_row(h, b1).unwrap();
    let h = g.tanh(h).unwrap();
    let o = g.matmul(h, w2).unwrap();
    let o = g.add_row(o, b2).unwrap();
    let o = g.sigmoid(o).unwrap();
    let sq = g.mul(o, o).unwrap();
    g.mean(sq).unwrap()
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..5 {
        let store = mlp_store(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, 5, 4);
        let err = check(&store, |g, s| mlp_loss(g, s, &x));
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    let a = s.insert("a", random(&mut rng, 3, 4));
    let b = s.insert("b", random(&mut rng, 3, 4));
    let row = s.insert("row", random(&mut rng, 1, 4));
    let col = s.insert("col", random(&mut rng, 3, 1));
    let gamma = s.insert("gamma", random(&mut rng, 1, 4));
    let beta = s.insert("beta", random(&mut rng, 1, 4));
    let sq = s.insert("sq", random(&mut rng, 4, 4));
    let target: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

    let err = check(&s, |g, st| {
        let av = g.param(st, a);
        let bv = g.param(st, b);
        let rv = g.param(st, row);
        let cv = g.param(st, col);
        let gv = g.param(st, gamma);
        let be = g.param(st, beta);
        let sqv = g.param(st, sq);
        let x = g.matmul(av, sqv).unwrap();
        let x = g.add_row(x, rv).unwrap();
        let x = g.mul_col(x, cv).unwrap();
        let y = g.matmul_nt(x, bv).unwrap(); // 3x3
        let y = g.softmax(y).unwrap();
        let z = g.matmul(y, bv).unwrap(); // 3x4
        let z = g.elu(z).unwrap();
        let z = g.layer_norm(z, gv, be).unwrap();
        let w = g.sub(z, av).unwrap();
        let w = g.mul(w, bv).unwrap();
        let sp = g.softplus(w).unwrap();
        let left = g.slice_cols(sp, 0, 2).unwrap();
        let right = g.slice_cols(sp, 2, 2).unwrap();
        let cat = g.concat_cols(&[right, left]).unwrap();
        let top = g.slice_rows(cat, 0, 1).unwrap();
        let rest = g.slice_rows(cat, 1, 2).unwrap();
        let stacked = g.concat_rows(&[rest, top]).unwrap();
        let gathered = g.gather_rows(stacked, &[2, 0, 0, 1]).unwrap();
        let tiled = g.tile_rows(gathered, 2).unwrap();
        let e = g.scale(tiled, 0.3).unwrap();
        let e = g.exp(e).unwrap();
        let e = g.add_scalar(e, 0.5).unwrap();
        let q = g.slice_cols(e, 0, 3).unwrap();
        let q = g.slice_rows(q, 0, 3).unwrap();
        let pin = g.pinball_loss(q, &target, &[0.1, 0.5, 0.9]).unwrap();
        let mu = g.slice_cols(x, 0, 1).unwrap();
        let sig = g.slice_cols(e, 1, 1).unwrap();
        let sig = g.slice_rows(sig, 0, 3).unwrap();
        let nll = g.gaussian_nll(mu, sig, &target).unwrap();
        let t = g.tanh(w).unwrap();
        let t = g.sum(t).unwrap();
        let total = g.add(pin, nll).unwrap();
        g.add(total, t).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let store = mlp_store(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x1 = random(&mut rng, 3, 4);
    let x2 = random(&mut rng, 3, 4);
    let single = |x: &Tensor| {
        let mut g = Graph::new();
        let l = mlp_loss(&mut g, &store, x);
        g.backward(l).unwrap().for_store(&store)
    };
    let (g1, g2) = (single(&x1), single(&x2));
    let mut g = Graph::new();
    let l1 = mlp_loss(&mut g, &store, &x1);
    let l2 = mlp_loss(&mut g, &store, &x2);
    let l = g.add(l1, l2).unwrap();
    let both = g.backward(l).unwrap().for_store(&store);
    for ((a, b), c) in g1.iter().zip(&g2).zip(&both) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let run = || {
        let mut store = mlp_store(1);
        let mut adam = autodiff::AdamState::new(&store, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for step in 0..20 {
            let x = random(&mut rng, 4, 4);
            let mut g = Graph::training(step);
            let l = mlp_loss(&mut g, &store, &x);
            let grads = g.backward(l).unwrap().for_store(&store);
            adam.step(&mut store, &grads);
        }
        store
    };
    assert!(run().bit_eq(&run()));
}
