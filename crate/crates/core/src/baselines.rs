//! Reference forecasters: last observation carried forward (LOb) and
//! DeepAR-lite, an autoregressive LSTM with a Gaussian head.

use std::path::Path;

use autodiff::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureTensor, VarKind};
use crate::tftlite::{Linear, Lstm};
use crate::train::Trainable;
use crate::windows::WindowSlice;
use crate::{util, Error, Result};

/// Repeats the last observed speed (mph) over the `h` prediction steps.
pub fn lob_forecast(ft: &FeatureTensor, slice: &WindowSlice, c: usize, h: usize) -> Vec<f64> {
    let last = ft.speed_mph(slice.link, slice.t0_flat(ft, c) - 1);
    vec![last; h]
}

pub const SIGMA_MIN: f64 = 1e-3;

/// Median of a sample set; the order of `samples` does not matter.
pub fn sample_median(samples: &mut [f64]) -> f64 {
    util::median(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepArHyper {
    pub hidden: usize,
    pub num_layers: usize,
    pub sample_count: usize,
}

impl Default for DeepArHyper {
    fn default() -> Self {
        Self {
            hidden: 32,
            num_layers: 1,
            sample_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepArConfig {
    pub hidden: usize,
    pub num_layers: usize,
    pub sample_count: usize,
    pub c: usize,
    pub h: usize,
    pub n_links: usize,
    /// Known-future covariate names, in input order.
    pub covariates: Vec<String>,
}

impl DeepArConfig {
    pub fn for_tensor(ft: &FeatureTensor, hyper: &DeepArHyper, c: usize, h: usize) -> Result<Self> {
        let cfg = Self {
            hidden: hyper.hidden,
            num_layers: hyper.num_layers,
            sample_count: hyper.sample_count,
            c,
            h,
            n_links: ft.n_links(),
            covariates: ft
                .indices_of(VarKind::KnownFuture)
                .into_iter()
                .map(|i| ft.variables()[i].name.clone())
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_layers == 0 || self.sample_count == 0 || self.n_links == 0 {
            return Err(Error::Config(
                "DeepAR-lite hidden size, layers, sample count and links must be positive".into(),
            ));
        }
        if self.c < 2 || self.h == 0 {
            return Err(Error::Config("DeepAR-lite needs c >= 2 and h >= 1".into()));
        }
        Ok(())
    }
}

/// Time-major inputs for `c + h` steps: row `t * B + b`.
#[derive(Debug, Clone)]
pub struct DeepArBatch {
    pub size: usize,
    pub links: Vec<usize>,
    /// Standardized target, `(c + h) * B`.
    pub y: Vec<f64>,
    /// Covariate rows, `(c + h) * B x n_covariates` row-major.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DeepArModel {
    cfg: DeepArConfig,
    store: ParamStore,
    link_emb: ParamId,
    layers: Vec<Lstm>,
    mu: Linear,
    sigma: Linear,
}

impl DeepArModel {
    pub fn new(cfg: DeepArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut st = ParamStore::new();
        let hd = cfg.hidden;
        let link_emb = st.uniform("link.emb", cfg.n_links, hd, 1, r);
        let mut layers = Vec::new();
        for l in 0..cfg.num_layers {
            let input = if l == 0 { 1 + cfg.covariates.len() } else { hd };
            layers.push(Lstm::new(&mut st, &format!("lstm{l}"), input, hd, r));
        }
        let mu = Linear::new(&mut st, "mu", hd, 1, r);
        let sigma = Linear::new(&mut st, "sigma", hd, 1, r);
        Ok(Self { cfg, store: st, link_emb, layers, mu, sigma })
    }

    pub fn config(&self) -> &DeepArConfig {
        &self.cfg
    }

    pub fn batch(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<DeepArBatch> {
        let idx: Vec<usize> = self
            .cfg
            .covariates
            .iter()
            .map(|n| ft.var_index(n).ok_or_else(|| Error::Data(format!("feature tensor lacks covariate {n}"))))
            .collect::<Result<_>>()?;
        let b = slices.len();
        let t_len = self.cfg.c + self.cfg.h;
        let k = idx.len();
        let target = ft.target_index();
        let mut y = vec![0.0; t_len * b];
        let mut cov = vec![0.0; t_len * b * k];
        for (bi, s) in slices.iter().enumerate() {
            let base = s.context_flat(ft);
            for t in 0..t_len {
                let cell = ft.cell(s.link, base + t);
                y[t * b + bi] = cell[target];
                for (j, &vi) in idx.iter().enumerate() {
                    cov[(t * b + bi) * k + j] = cell[vi];
                }
            }
        }
        Ok(DeepArBatch {
            size: b,
            links: slices.iter().map(|s| s.link).collect(),
            y,
            cov,
        })
    }

    /// Rows `t * B + b` of `[y_{t-1}, cov_t]` for `t` in `from..to`.
    fn inputs(&self, batch: &DeepArBatch, from: usize, to: usize) -> Tensor {
        let b = batch.size;
        let k = self.cfg.covariates.len();
        let mut data = Vec::with_capacity((to - from) * b * (k + 1));
        for t in from..to {
            for bi in 0..b {
                data.push(batch.y[(t - 1) * b + bi]);
                data.extend_from_slice(&batch.cov[(t * b + bi) * k..(t * b + bi + 1) * k]);
            }
        }
        Tensor::from_matrix((to - from) * b, k + 1, data)
    }

    fn initial_state(&self, g: &mut Graph, links: &[usize]) -> Result<(Var, Var)> {
        let table = g.param(&self.store, self.link_emb);
        let h0 = g.embedding(table, links)?;
        let c0 = g.constant(Tensor::zeros(links.len(), self.cfg.hidden))?;
        Ok((h0, c0))
    }

    fn head(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let mu = self.mu.forward(g, &self.store, h)?;
        let s = self.sigma.forward(g, &self.store, h)?;
        let s = g.softplus(s)?;
        let sigma = g.add_scalar(s, SIGMA_MIN)?;
        Ok((mu, sigma))
    }

    /// Teacher-forced Gaussian negative log-likelihood over steps `1..c + h`.
    pub fn loss(&self, g: &mut Graph, batch: &DeepArBatch) -> Result<Var> {
        let b = batch.size;
        let t_len = self.cfg.c + self.cfg.h;
        let x = g.constant(self.inputs(batch, 1, t_len))?;
        let (h0, c0) = self.initial_state(g, &batch.links)?;
        let mut seq = x;
        for layer in &self.layers {
            let (out, _, _) = layer.run(g, &self.store, seq, t_len - 1, b, (h0, c0))?;
            seq = out;
        }
        let (mu, sigma) = self.head(g, seq)?;
        Ok(g.gaussian_nll(mu, sigma, &batch.y[b..])?)
    }

    /// Median of `sample_count` ancestral sample paths per slice, in mph.
    pub fn forecast(&self, ft: &FeatureTensor, slices: &[WindowSlice], seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, s) = (self.cfg.c, self.cfg.h, self.cfg.sample_count);
        let k = self.cfg.covariates.len();
        let mut out = Vec::with_capacity(slices.len());
        let chunk = (4096 / s).max(1);
        let mut warned = false;
        for part in slices.chunks(chunk) {
            let batch = self.batch(ft, part)?;
            let b = batch.size;
            let mut g = Graph::new();
            let (h0, c0) = self.initial_state(&mut g, &batch.links)?;
            let x = g.constant(self.inputs(&batch, 1, c))?;
            let mut states = Vec::new();
            let mut seq = x;
            for layer in &self.layers {
                let (out, hn, cn) = layer.run(&mut g, &self.store, seq, c - 1, b, (h0, c0))?;
                states.push((g.tile_rows(hn, s)?, g.tile_rows(cn, s)?));
                seq = out;
            }
            // Row `j * B + bi` is sample `j` of slice `bi`.
            let mut prev: Vec<f64> = (0..s * b).map(|r| batch.y[(c - 1) * b + r % b]).collect();
            let mut paths = vec![vec![0.0; h * s]; b];
            for step in 0..h {
                let t = c + step;
                let mut data = Vec::with_capacity(s * b * (k + 1));
                for (r, &p) in prev.iter().enumerate() {
                    let bi = r % b;
                    data.push(p);
                    data.extend_from_slice(&batch.cov[(t * b + bi) * k..(t * b + bi + 1) * k]);
                }
                let mut inp = g.constant(Tensor::from_matrix(s * b, k + 1, data))?;
                for (layer, st) in self.layers.iter().zip(states.iter_mut()) {
                    let xw = layer.project(&mut g, &self.store, inp)?;
                    let (hn, cn) = layer.cell(&mut g, &self.store, xw, st.0, st.1)?;
                    *st = (hn, cn);
                    inp = hn;
                }
                let (mu, sigma) = self.head(&mut g, inp)?;
                let (mu, sigma) = (g.value(mu).data().to_vec(), g.value(sigma).data().to_vec());
                for r in 0..s * b {
                    let mut sd = sigma[r];
                    if !sd.is_finite() {
                        if !warned {
                            log::warn!("non-finite DeepAR-lite scale clamped to {SIGMA_MIN}");
                            warned = true;
                        }
                        sd = SIGMA_MIN;
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let y = mu[r] + sd * z;
                    prev[r] = y;
                    paths[r % b][step * s + r / b] = y;
                }
            }
            for mut p in paths {
                out.push(
                    p.chunks_mut(s)
                        .map(|step| ft.to_mph(sample_median(step)))
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        checkpoint::save(&self.store, dir, stem)?;
        util::write(
            &dir.join(format!("{stem}.config.json")),
            serde_json::to_vec_pretty(&self.cfg)?,
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg: DeepArConfig =
            serde_json::from_str(&util::read_to_string(&dir.join(format!("{stem}.config.json")))?)?;
        let mut model = Self::new(cfg, 0)?;
        let store = checkpoint::load(dir, stem)?;
        let same = store.len() == model.store.len()
            && store.iter().zip(model.store.iter()).all(|((_, a), (_, b))| {
                a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !same {
            return Err(Error::Data("checkpoint does not match the DeepAR-lite layout".into()));
        }
        model.store = store;
        Ok(model)
    }
}

impl Trainable for DeepArModel {
    type Batch = DeepArBatch;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn make_batch(&self, ft: &FeatureTensor, slices: &[WindowSlice]) -> Result<DeepArBatch> {
        self.batch(ft, slices)
    }

    fn batch_loss(&self, g: &mut Graph, batch: &DeepArBatch) -> Result<Var> {
        self.loss(g, batch)
    }
}
