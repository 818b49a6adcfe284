//! Probabilistic spatiotemporal inundation forecasting with a conditional
//! denoising diffusion model.
//!
//! Data flows through [`grid`] (windows and standardization), the
//! [`encoder`] and [`denoiser`] networks assembled in [`model`], the
//! [`trainer`] and the autoregressive [`sampler`]; forecasts are scored by
//! [`metrics`] and queried by [`query`].

pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod kvconf;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod query;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
