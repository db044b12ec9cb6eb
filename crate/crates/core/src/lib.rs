//! Volatility modelling and forecasting for energy commodity returns.
//!
//! The crate covers the full workflow: aligning mixed-frequency price and
//! macro series ([`ingest`]), descriptive and residual diagnostics
//! ([`diagnostics`]), univariate GARCH-family models ([`garch`]), the full
//! BEKK(1,1) multivariate model ([`bekk`]), a suite of regressors for
//! next-day squared returns ([`ml`]), exact TreeSHAP attribution ([`shap`]),
//! and a rolling one-step-ahead backtest with asymmetric loss metrics
//! ([`harness`]). [`pipeline`] ties them together behind a JSON run config.

pub mod bekk;
pub mod diagnostics;
pub mod error;
pub mod garch;
pub mod harness;
pub mod ingest;
pub mod ml;
pub mod optim;
pub mod pipeline;
pub mod shap;
pub mod stats;

pub use error::{Error, Result};

// The guide's chapters are compiled here so `cargo test --doc` runs their examples.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/garch.md")]
    mod garch {}
    #[doc = include_str!("../../../book/src/bekk.md")]
    mod bekk {}
    #[doc = include_str!("../../../book/src/ml.md")]
    mod ml {}
    #[doc = include_str!("../../../book/src/shap.md")]
    mod shap {}
    #[doc = include_str!("../../../book/src/backtest.md")]
    mod backtest {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
