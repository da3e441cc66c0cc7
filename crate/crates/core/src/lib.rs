//! Mixture-of-experts traffic speed forecasting.
//!
//! The crate covers the whole pipeline: raw CSV ingestion and alignment to a
//! 5-minute grid ([`ingest`]), feature construction including slowdown speed
//! and incident-report denoising ([`features`]), window slicing with
//! recurrent / non-recurrent labels ([`windows`]), the TFT-lite expert
//! backbone ([`tftlite`]), the gated mixture and its training stages
//! ([`moe`]), baselines, evaluation, interpretation, a seeded synthetic data
//! generator and the file-based command pipeline used by the CLI.

pub mod baselines;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod interpret;
pub mod moe;
pub mod pipeline;
pub mod synth;
pub mod tftlite;
pub mod train;
pub mod windows;

mod util;

pub use features::DenoiseError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("split error: {0}")]
    Split(String),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error("numeric failure: {0}")]
    Numeric(#[from] autodiff::AutodiffError),
    #[error("training error: {0}")]
    Training(String),
    #[error("missing artifact {artifact}: run `{producer}` first")]
    Prerequisite { artifact: String, producer: String },
    #[error("stale artifact {artifact}: produced with config {found}, current config is {expected}; re-run `{producer}`")]
    Stale {
        artifact: String,
        producer: String,
        found: String,
        expected: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
