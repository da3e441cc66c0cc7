//! TFT-lite: a compact Temporal Fusion Transformer.
//!
//! Link identity feeds a static covariate encoder whose single context vector
//! conditions variable selection, initialises the encoder LSTM and enriches
//! the temporal features. Encoder inputs are every observed-past and
//! known-future variable over the `c` context steps; decoder inputs are the
//! known-future variables over the `h` prediction steps. An interpretable
//! multi-head attention layer (per-head queries and keys, shared values,
//! head-averaged weights, causal mask) precedes a position-wise GRN and one
//! linear output per quantile.
//!
//! Batches are time-major: row `t * B + b` holds sample `b` at step `t`.

use std::path::Path;

use autodiff::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{DType, FeatureTensor, VarKind};
use crate::windows::WindowSlice;
use crate::{util, Error, Result};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    /// Number of categories for categorical inputs; `None` for numeric ones.
    pub cardinality: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TftConfig {
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    pub c: usize,
    pub h: usize,
    pub n_links: usize,
    pub observed: Vec<VarSpec>,
    pub known: Vec<VarSpec>,
}

/// Model-size hyperparameters, independent of the data layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TftHyper {
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
}

impl Default for TftHyper {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 4,
            dropout: 0.1,
            quantiles: vec![0.1, 0.5, 0.9],
        }
    }
}

impl TftConfig {
    /// Reads the variable layout from a feature tensor.
    pub fn for_tensor(ft: &FeatureTensor, hyper: &TftHyper, c: usize, h: usize) -> Result<Self> {
        let spec = |i: usize| {
            let m = &ft.variables()[i];
            VarSpec {
                name: m.name.clone(),
                cardinality: (m.dtype == DType::Categorical).then(|| m.cardinality().max(1)),
            }
        };
        let cfg = Self {
            hidden: hyper.hidden,
            heads: hyper.heads,
            dropout: hyper.dropout,
            quantiles: hyper.quantiles.clone(),
            c,
            h,
            n_links: ft.n_links(),
            observed: ft.indices_of(VarKind::ObservedPast).into_iter().map(spec).collect(),
            known: ft.indices_of(VarKind::KnownFuture).into_iter().map(spec).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of the {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        let q = &self.quantiles;
        if q.is_empty()
            || q.iter().any(|&x| !(x > 0.0 && x < 1.0))
            || q.windows(2).any(|w| w[0] >= w[1])
            || !q.contains(&0.5)
        {
            return Err(Error::Config(format!(
                "quantiles {q:?} must be strictly increasing in (0, 1) and contain 0.5"
            )));
        }
        if self.c == 0 || self.h == 0 {
            return Err(Error::Config("context and horizon must be positive".into()));
        }
        if self.known.is_empty() {
            return Err(Error::Config("decoder needs at least one known-future variable".into()));
        }
        if self.n_links == 0 {
            return Err(Error::Config("model needs at least one link".into()));
        }
        Ok(())
    }

    pub fn encoder_vars(&self) -> Vec<&VarSpec> {
        self.observed.iter().chain(&self.known).collect()
    }

    pub fn median_index(&self) -> usize {
        self.quantiles
            .iter()
            .position(|&q| q == 0.5)
            .expect("validated quantiles contain the median")
    }
}

/// Dense layer `x W + b`; weights and bias start uniform in
/// `+-1/sqrt(fan_in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.uniform(format!("{name}.w"), inp, out, inp, rng),
            b: store.uniform(format!("{name}.b"), 1, out, inp, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

/// Gated linear unit `sigmoid(x W4 + b4) * (x W5 + b5)`.
#[derive(Debug, Clone)]
pub struct Glu {
    gate: Linear,
    value: Linear,
}

impl Glu {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gate: Linear::new(store, &format!("{name}.gate"), inp, out, rng),
            value: Linear::new(store, &format!("{name}.value"), inp, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.gate.forward(g, store, x)?;
        let a = g.sigmoid(a)?;
        let v = self.value.forward(g, store, x)?;
        Ok(g.mul(a, v)?)
    }
}

/// `LayerNorm(residual + GLU(dropout(x)))`.
#[derive(Debug, Clone)]
pub struct GateAddNorm {
    glu: Glu,
    gamma: ParamId,
    beta: ParamId,
}

impl GateAddNorm {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            glu: Glu::new(store, &format!("{name}.glu"), inp, out, rng),
            gamma: store.filled(format!("{name}.ln.gamma"), 1, out, 1.0),
            beta: store.zeros(format!("{name}.ln.beta"), 1, out),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        residual: Var,
        dropout: f64,
    ) -> Result<Var> {
        let x = g.dropout(x, dropout)?;
        let gated = self.glu.forward(g, store, x)?;
        let sum = g.add(residual, gated)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        Ok(g.layer_norm(sum, gamma, beta)?)
    }
}

/// Gated residual network:
/// `LayerNorm(skip(x) + GLU(W1 ELU(W2 x + W3 ctx + b2) + b1))`.
#[derive(Debug, Clone)]
pub struct Grn {
    fc2: Linear,
    ctx: Option<ParamId>,
    fc1: Linear,
    skip: Option<Linear>,
    gate: GateAddNorm,
    pub input: usize,
    pub output: usize,
}

impl Grn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        context: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc2: Linear::new(store, &format!("{name}.fc2"), input, hidden, rng),
            ctx: context.map(|cd| store.uniform(format!("{name}.ctx"), cd, hidden, cd, rng)),
            fc1: Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng),
            skip: (input != output).then(|| Linear::new(store, &format!("{name}.skip"), input, output, rng)),
            gate: GateAddNorm::new(store, &format!("{name}.out"), hidden, output, rng),
            input,
            output,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: Option<Var>,
        dropout: f64,
    ) -> Result<Var> {
        let mut eta2 = self.fc2.forward(g, store, x)?;
        if let (Some(id), Some(c)) = (self.ctx, ctx) {
            let w = g.param(store, id);
            let cw = g.matmul(c, w)?;
            eta2 = g.add(eta2, cw)?;
        }
        let eta2 = g.elu(eta2)?;
        let eta1 = self.fc1.forward(g, store, eta2)?;
        let residual = match &self.skip {
            Some(l) => l.forward(g, store, x)?,
            None => x,
        };
        self.gate.forward(g, store, eta1, residual, dropout)
    }
}

/// Single-layer LSTM with input projection `wx`, recurrent weights `wh` and
/// bias `b`; gate order is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = store.uniform(format!("{name}.wx"), input, 4 * hidden, hidden, rng);
        let wh = store.uniform(format!("{name}.wh"), hidden, 4 * hidden, hidden, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = store.insert(format!("{name}.b"), Tensor::row(bias));
        Self { wx, wh, b, hidden }
    }

    /// Input projection `x Wx + b` for all rows of `x`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wx = g.param(store, self.wx);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, wx)?;
        Ok(g.add_row(xw, b)?)
    }

    /// One cell update from an already projected input `xw = x Wx + b`.
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let wh = g.param(store, self.wh);
        let hw = g.matmul(h, wh)?;
        let gates = g.add(xw, hw)?;
        let i = g.slice_cols(gates, 0, n)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(gates, n, n)?;
        let f = g.sigmoid(f)?;
        let u = g.slice_cols(gates, 2 * n, n)?;
        let u = g.tanh(u)?;
        let o = g.slice_cols(gates, 3 * n, n)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, c)?;
        let iu = g.mul(i, u)?;
        let c_new = g.add(fc, iu)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs over `steps` time-major blocks of `batch` rows from the initial
    /// `(h, c)`. Returns all hidden states (time-major) and the final `(h, c)`.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        steps: usize,
        batch: usize,
        init: (Var, Var),
    ) -> Result<(Var, Var, Var)> {
        let xw = self.project(g, store, x)?;
        let (mut h, mut c) = init;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(xw, t * batch, batch)?;
            (h, c) = self.cell(g, store, xt, h, c)?;
            outs.push(h);
        }
        Ok((g.concat_rows(&outs)?, h, c))
    }
}

/// Interpretable multi-head attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: ParamId,
    out: Linear,
    head_dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = hidden / heads;
        Self {
            q: (0..heads)
                .map(|i| store.uniform(format!("{name}.q{i}"), hidden, d, hidden, rng))
                .collect(),
            k: (0..heads)
                .map(|i| store.uniform(format!("{name}.k{i}"), hidden, d, hidden, rng))
                .collect(),
            v: store.uniform(format!("{name}.v"), hidden, d, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), d, hidden, rng),
            head_dim: d,
        }
    }

    pub fn heads(&self) -> usize {
        self.q.len()
    }

    /// Additive causal mask for queries at positions `c..c + h` over keys at
    /// `0..c + h`: query `j` sees keys up to `c + j`.
    pub fn causal_mask(c: usize, h: usize) -> Tensor {
        let t = c + h;
        let mut m = vec![0.0; h * t];
        for j in 0..h {
            for k in c + j + 1..t {
                m[j * t + k] = MASKED;
            }
        }
        Tensor::from_matrix(h, t, m)
    }

    /// Attention for sample-major inputs `x` (`batch * (c + h)` rows).
    /// Returns the output for the `h` query positions of every sample
    /// (sample-major, `batch * h x hidden`) and each sample's head-averaged
    /// weights (`h x (c + h)`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        c: usize,
        h: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let t = c + h;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mask = g.constant(Self::causal_mask(c, h))?;
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        for (&qi, &ki) in self.q.iter().zip(&self.k) {
            let wq = g.param(store, qi);
            let wk = g.param(store, ki);
            qs.push(g.matmul(x, wq)?);
            ks.push(g.matmul(x, wk)?);
        }
        let wv = g.param(store, self.v);
        let v = g.matmul(x, wv)?;
        let inv_heads = 1.0 / self.q.len() as f64;
        let mut outs = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut acc: Option<Var> = None;
            for (&qa, &ka) in qs.iter().zip(&ks) {
                let q = g.slice_rows(qa, b * t + c, h)?;
                let k = g.slice_rows(ka, b * t, t)?;
                let s = g.matmul_nt(q, k)?;
                let s = g.scale(s, scale)?;
                let s = g.add(s, mask)?;
                let a = g.softmax(s)?;
                acc = Some(match acc {
                    None => a,
                    Some(p) => g.add(p, a)?,
                });
            }
            let a = g.scale(acc.expect("at least one head"), inv_heads)?;
            let vb = g.slice_rows(v, b * t, t)?;
            outs.push(g.matmul(a, vb)?);
            weights.push(a);
        }
        let o = g.concat_rows(&outs)?;
        Ok((self.out.forward(g, store, o)?, weights))
    }
}

/// Variable selection network over `n` embedded variables.
#[derive(Debug, Clone)]
pub struct VariableSelection {
    flat: Grn,
    per_var: Vec<Grn>,
}

impl VariableSelection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_vars: usize,
        hidden: usize,
        context: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            flat: Grn::new(store, &format!("{name}.flat"), n_vars * hidden, hidden, n_vars, context, rng),
            per_var: (0..n_vars)
                .map(|i| Grn::new(store, &format!("{name}.var{i}"), hidden, hidden, hidden, None, rng))
                .collect(),
        }
    }

    /// Returns the selected representation and the selection weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embs: &[Var],
        ctx: Option<Var>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let flat = g.concat_cols(embs)?;
        let logits = self.flat.forward(g, store, flat, ctx, dropout)?;
        let w = g.softmax(logits)?;
        let mut acc: Option<Var> = None;
        for (v, (grn, &e)) in self.per_var.iter().zip(embs).enumerate() {
            let o = grn.forward(g, store, e, None, dropout)?;
            let wv = g.slice_cols(w, v, 1)?;
            let term = g.mul_col(o, wv)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok((acc.expect("at least one variable"), w))
    }
}

#[derive(Debug, Clone)]
enum Embedder {
    Numeric(Linear),
    Categorical(ParamId),
}

impl Embedder {
    fn forward(&self, g: &mut Graph, store: &ParamStore, values: &[f64]) -> Result<Var> {
        match self {
            Self::Numeric(l) => {
                let x = g.constant(Tensor::column(values.to_vec()))?;
                l.forward(g, store, x)
            }
            Self::Categorical(table) => {
                let t = g.param(store, *table);
                let n = store.get(*table).rows();
                let idx: Vec<usize> = values
                    .iter()
                    .map(|&v| {
                        let i = v.round().max(0.0) as usize;
                        if i < n { i } else { 0 }
                    })
                    .collect();
                Ok(g.embedding(t, &idx)?)
            }
        }
    }
}

/// Model inputs for a batch of slices, time-major per variable.
#[derive(Debug, Clone)]
pub struct TftBatch {
    pub size: usize,
    pub links: Vec<usize>,
    /// One `c * B` column per encoder variable.
    pub encoder: Vec<Vec<f64>>,
    /// One `h * B` column per known-future variable.
    pub decoder: Vec<Vec<f64>>,
    /// Standardized targets, `h * B` time-major.
    pub target: Vec<f64>,
}

impl TftBatch {
    pub fn new(ft: &FeatureTensor, cfg: &TftConfig, slices: &[WindowSlice]) -> Result<Self> {
        let lookup = |name: &str| {
            ft.var_index(name)
                .ok_or_else(|| Error::Data(format!("feature tensor lacks model variable {name}")))
        };
        let enc_idx: Vec<usize> = cfg
            .encoder_vars()
            .iter()
            .map(|v| lookup(&v.name))
            .collect::<Result<_>>()?;
        let dec_idx: Vec<usize> = cfg.known.iter().map(|v| lookup(&v.name)).collect::<Result<_>>()?;
        let target_idx = ft.target_index();
        let b = slices.len();
        let (c, h) = (cfg.c, cfg.h);
        let mut encoder = vec![vec![0.0; c * b]; enc_idx.len()];
        let mut decoder = vec![vec![0.0; h * b]; dec_idx.len()];
        let mut target = vec![0.0; h * b];
        for (bi, s) in slices.iter().enumerate() {
            let base = s.context_flat(ft);
            for t in 0..c {
                let cell = ft.cell(s.link, base + t);
                for (col, &vi) in encoder.iter_mut().zip(&enc_idx) {
                    col[t * b + bi] = cell[vi];
                }
            }
            for t in 0..h {
                let cell = ft.cell(s.link, base + c + t);
                for (col, &vi) in decoder.iter_mut().zip(&dec_idx) {
                    col[t * b + bi] = cell[vi];
                }
                target[t * b + bi] = cell[target_idx];
            }
        }
        Ok(Self {
            size: b,
            links: slices.iter().map(|s| s.link).collect(),
            encoder,
            decoder,
            target,
        })
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct TftOutputs {
    /// `h * B x Q` standardized quantile predictions, time-major.
    pub pred: Var,
    /// Per sample `h x (c + h)` head-averaged attention.
    pub attention: Vec<Var>,
    /// `c * B x n_encoder_vars` selection weights.
    pub encoder_weights: Var,
    /// `h * B x n_known` selection weights.
    pub decoder_weights: Var,
}

#[derive(Debug, Clone)]
pub struct TftModel {
    cfg: TftConfig,
    store: ParamStore,
    static_emb: ParamId,
    static_grn: Grn,
    embed: Vec<Embedder>,
    vsn_enc: VariableSelection,
    vsn_dec: VariableSelection,
    lstm_enc: Lstm,
    lstm_dec: Lstm,
    post_lstm: GateAddNorm,
    enrich: Grn,
    attn: Attention,
    post_attn: GateAddNorm,
    positionwise: Grn,
    final_gate: GateAddNorm,
    head: Linear,
}

/// Per-slice forecast in mph: `values[k][q]` for horizon step `k` and the
/// `q`-th configured quantile, non-decreasing in `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    pub values: Vec<Vec<f64>>,
}

impl QuantileForecast {
    pub fn point(&self, median: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[median]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TftInterpretation {
    /// `h x (c + h)` row-major head-averaged attention.
    pub attention: Vec<f64>,
    /// Mean encoder selection weight per encoder variable.
    pub encoder_weights: Vec<f64>,
    /// Mean decoder selection weight per known-future variable.
    pub decoder_weights: Vec<f64>,
}

impl TftModel {
    pub fn new(cfg: TftConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let hd = cfg.hidden;
        let r = &mut rng;
        let static_emb = st.uniform("static.emb", cfg.n_links, hd, 1, r);
        let static_grn = Grn::new(&mut st, "static.grn", hd, hd, hd, None, r);
        let mut embed = Vec::new();
        for v in cfg.encoder_vars() {
            embed.push(match v.cardinality {
                Some(n) => Embedder::Categorical(st.uniform(format!("embed.{}.table", v.name), n, hd, 1, r)),
                None => Embedder::Numeric(Linear::new(&mut st, &format!("embed.{}", v.name), 1, hd, r)),
            });
        }
        let n_enc = cfg.observed.len() + cfg.known.len();
        let n_dec = cfg.known.len();
        let vsn_enc = VariableSelection::new(&mut st, "vsn_enc", n_enc, hd, Some(hd), r);
        let vsn_dec = VariableSelection::new(&mut st, "vsn_dec", n_dec, hd, Some(hd), r);
        let lstm_enc = Lstm::new(&mut st, "lstm_enc", hd, hd, r);
        let lstm_dec = Lstm::new(&mut st, "lstm_dec", hd, hd, r);
        let post_lstm = GateAddNorm::new(&mut st, "post_lstm", hd, hd, r);
        let enrich = Grn::new(&mut st, "enrich", hd, hd, hd, Some(hd), r);
        let attn = Attention::new(&mut st, "attn", hd, cfg.heads, r);
        let post_attn = GateAddNorm::new(&mut st, "post_attn", hd, hd, r);
        let positionwise = Grn::new(&mut st, "positionwise", hd, hd, hd, None, r);
        let final_gate = GateAddNorm::new(&mut st, "final", hd, hd, r);
        let head = Linear::new(&mut st, "head", hd, cfg.quantiles.len(), r);
        Ok(Self {
            cfg,
            store: st,
            static_emb,
            static_grn,
            embed,
            vsn_enc,
            vsn_dec,
            lstm_enc,
            lstm_dec,
            post_lstm,
            enrich,
            attn,
            post_attn,
            positionwise,
            final_gate,
            head,
        })
    }

    pub fn config(&self) -> &TftConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn batch(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<TftBatch> {
        TftBatch::new(ft, &self.cfg, slices)
    }

    pub fn forward(&self, g: &mut Graph, batch: &TftBatch) -> Result<TftOutputs> {
        let st = &self.store;
        let cfg = &self.cfg;
        let (c, h, b) = (cfg.c, cfg.h, batch.size);
        let p = cfg.dropout;
        let n_obs = cfg.observed.len();

        let table = g.param(st, self.static_emb);
        let s = g.embedding(table, &batch.links)?;
        let cs = self.static_grn.forward(g, st, s, None, p)?;
        let ctx_enc = g.tile_rows(cs, c)?;
        let ctx_dec = g.tile_rows(cs, h)?;

        let mut enc_embs = Vec::with_capacity(self.embed.len());
        for (e, col) in self.embed.iter().zip(&batch.encoder) {
            enc_embs.push(e.forward(g, st, col)?);
        }
        let mut dec_embs = Vec::with_capacity(cfg.known.len());
        for (e, col) in self.embed[n_obs..].iter().zip(&batch.decoder) {
            dec_embs.push(e.forward(g, st, col)?);
        }
        let (enc_sel, enc_w) = self.vsn_enc.forward(g, st, &enc_embs, Some(ctx_enc), p)?;
        let (dec_sel, dec_w) = self.vsn_dec.forward(g, st, &dec_embs, Some(ctx_dec), p)?;

        let (enc_out, hn, cn) = self.lstm_enc.run(g, st, enc_sel, c, b, (cs, cs))?;
        let (dec_out, _, _) = self.lstm_dec.run(g, st, dec_sel, h, b, (hn, cn))?;
        let lstm_out = g.concat_rows(&[enc_out, dec_out])?;
        let selected = g.concat_rows(&[enc_sel, dec_sel])?;
        let temporal = self.post_lstm.forward(g, st, lstm_out, selected, p)?;

        let ctx_all = g.tile_rows(cs, c + h)?;
        let enriched = self.enrich.forward(g, st, temporal, Some(ctx_all), p)?;

        let t = c + h;
        let to_sample_major: Vec<usize> = (0..b).flat_map(|bi| (0..t).map(move |ti| ti * b + bi)).collect();
        let x_sm = g.gather_rows(enriched, &to_sample_major)?;
        let (att_sm, attention) = self.attn.forward(g, st, x_sm, b, c, h)?;
        let to_time_major: Vec<usize> = (0..h).flat_map(|j| (0..b).map(move |bi| bi * h + j)).collect();
        let att = g.gather_rows(att_sm, &to_time_major)?;

        let enriched_dec = g.slice_rows(enriched, c * b, h * b)?;
        let gated = self.post_attn.forward(g, st, att, enriched_dec, p)?;
        let pos = self.positionwise.forward(g, st, gated, None, p)?;
        let temporal_dec = g.slice_rows(temporal, c * b, h * b)?;
        let fin = self.final_gate.forward(g, st, pos, temporal_dec, p)?;
        let pred = self.head.forward(g, st, fin)?;
        Ok(TftOutputs {
            pred,
            attention,
            encoder_weights: enc_w,
            decoder_weights: dec_w,
        })
    }

    /// Mean pinball loss of a batch in standardized space.
    pub fn loss(&self, g: &mut Graph, batch: &TftBatch) -> Result<Var> {
        let out = self.forward(g, batch)?;
        Ok(g.pinball_loss(out.pred, &batch.target, &self.cfg.quantiles)?)
    }

    /// Forecasts (mph, sorted quantiles) and interpretation for each slice.
    pub fn forecast(
        &self,
        ft: &FeatureTensor,
        slices: &[WindowSlice],
    ) -> Result<Vec<(QuantileForecast, TftInterpretation)>> {
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(256) {
            let batch = self.batch(ft, chunk)?;
            let mut g = Graph::new();
            let o = self.forward(&mut g, &batch)?;
            let b = batch.size;
            let (c, h) = (self.cfg.c, self.cfg.h);
            let pred = g.value(o.pred);
            let enc_w = g.value(o.encoder_weights);
            let dec_w = g.value(o.decoder_weights);
            for bi in 0..b {
                let values = (0..h)
                    .map(|k| {
                        let mut row: Vec<f64> = pred.row_slice(k * b + bi).iter().map(|&z| ft.to_mph(z)).collect();
                        row.sort_by(f64::total_cmp);
                        row
                    })
                    .collect();
                let mean_rows = |w: &Tensor, steps: usize| {
                    let mut m = vec![0.0; w.cols()];
                    for t in 0..steps {
                        for (acc, &x) in m.iter_mut().zip(w.row_slice(t * b + bi)) {
                            *acc += x / steps as f64;
                        }
                    }
                    m
                };
                out.push((
                    QuantileForecast { values },
                    TftInterpretation {
                        attention: g.value(o.attention[bi]).data().to_vec(),
                        encoder_weights: mean_rows(enc_w, c),
                        decoder_weights: mean_rows(dec_w, h),
                    },
                ));
            }
        }
        Ok(out)
    }

    /// Writes `<stem>.json`, `<stem>.bin` and the `<stem>.config.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        checkpoint::save(&self.store, dir, stem)?;
        util::write(
            &dir.join(format!("{stem}.config.json")),
            serde_json::to_vec_pretty(&self.cfg)?,
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg: TftConfig =
            serde_json::from_str(&util::read_to_string(&dir.join(format!("{stem}.config.json")))?)?;
        let mut model = Self::new(cfg, 0)?;
        let store = checkpoint::load(dir, stem)?;
        model.replace_params(store)?;
        Ok(model)
    }

    /// Swaps in parameters with identical names and shapes.
    pub fn replace_params(&mut self, store: ParamStore) -> Result<()> {
        let same = store.len() == self.store.len()
            && store.iter().zip(self.store.iter()).all(|((_, a), (_, b))| {
                a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !same {
            return Err(Error::Data("checkpoint does not match the model layout".into()));
        }
        self.store = store;
        Ok(())
    }
}

/// Mean pinball loss over steps and quantiles; `pred[k][q]` against `target[k]`.
pub fn quantile_loss(pred: &[Vec<f64>], target: &[f64], quantiles: &[f64]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in pred.iter().zip(target) {
        for (&yq, &q) in row.iter().zip(quantiles) {
            total += autodiff::pinball(q, y - yq);
        }
    }
    total / (pred.len() * quantiles.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_loss_examples() {
        assert_eq!(quantile_loss(&[vec![8.0]], &[10.0], &[0.5]), 1.0);
        assert_eq!(quantile_loss(&[vec![10.0, 10.0]], &[10.0], &[0.1, 0.9]), 0.0);
        let under = quantile_loss(&[vec![9.0]], &[10.0], &[0.9]);
        let over = quantile_loss(&[vec![11.0]], &[10.0], &[0.9]);
        assert!((under / over - 9.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_shape() {
        let m = Attention::causal_mask(3, 2);
        assert_eq!(m.shape(), &[2, 5]);
        assert_eq!(m.row_slice(0), &[0.0, 0.0, 0.0, 0.0, MASKED]);
        assert_eq!(m.row_slice(1), &[0.0; 5]);
    }

    #[test]
    fn config_rejects_bad_heads_and_quantiles() {
        let base = TftConfig {
            hidden: 8,
            heads: 2,
            dropout: 0.0,
            quantiles: vec![0.1, 0.5, 0.9],
            c: 3,
            h: 2,
            n_links: 1,
            observed: vec![],
            known: vec![VarSpec { name: "x".into(), cardinality: None }],
        };
        assert!(base.validate().is_ok());
        assert!(TftConfig { heads: 3, ..base.clone() }.validate().is_err());
        assert!(TftConfig { quantiles: vec![0.1, 0.9], ..base.clone() }.validate().is_err());
        assert!(TftConfig { quantiles: vec![0.9, 0.5], ..base.clone() }.validate().is_err());
        assert!(TftConfig { h: 0, ..base }.validate().is_err());
    }

    #[test]
    fn grn_with_zero_weights_and_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = ParamStore::new();
        let grn = Grn::new(&mut st, "g", 4, 4, 4, None, &mut rng);
        let ids: Vec<ParamId> = st.ids().collect();
        for id in ids {
            if !st.name(id).ends_with("gamma") {
                st.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 4)).unwrap();
        let y = grn.forward(&mut g, &st, x, None, 0.0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grn_output_width_is_configured() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = ParamStore::new();
        for input in [1, 3, 7] {
            let grn = Grn::new(&mut st, &format!("g{input}"), input, 5, 5, Some(2), &mut rng);
            let mut g = Graph::new();
            let x = g.constant(Tensor::filled(4, input, 0.3)).unwrap();
            let ctx = g.constant(Tensor::filled(4, 2, -0.2)).unwrap();
            let y = grn.forward(&mut g, &st, x, Some(ctx), 0.0).unwrap();
            assert_eq!(g.shape(y), &[4, 5]);
        }
    }

    #[test]
    fn single_variable_selection_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = ParamStore::new();
        let vsn = VariableSelection::new(&mut st, "v", 1, 4, None, &mut rng);
        let mut g = Graph::new();
        let e = g.constant(Tensor::filled(5, 4, 0.7)).unwrap();
        let (_, w) = vsn.forward(&mut g, &st, &[e], None, 0.0).unwrap();
        assert!(g.value(w).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn constant_input_lstm_states_settle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = ParamStore::new();
        let lstm = Lstm::new(&mut st, "l", 3, 4, &mut rng);
        for id in st.ids().collect::<Vec<_>>() {
            let scaled = st.get(id).map(|v| 0.5 * v);
            *st.get_mut(id) = scaled;
        }
        let steps = 40;
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(steps, 3, 0.5)).unwrap();
        let h0 = g.constant(Tensor::zeros(1, 4)).unwrap();
        let (out, _, _) = lstm.run(&mut g, &st, x, steps, 1, (h0, h0)).unwrap();
        let hs = g.value(out);
        let diff = |t: usize| -> f64 {
            hs.row_slice(t)
                .iter()
                .zip(hs.row_slice(t + 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(diff(steps - 2) < 1e-3 * diff(0).max(1e-12) + 1e-9);
        assert!(diff(steps - 2) <= diff(steps / 2));
    }
}
