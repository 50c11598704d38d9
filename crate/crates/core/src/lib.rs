//! Approximate per-layer caches for early-exit inference.
//!
//! The offline phase builds one cache per traced layer from training
//! activations ([`cache`]) after projecting them with a learned reducer
//! ([`reduce`]), then calibrates per-layer thresholds on validation data
//! ([`threshold`]). Online, [`engine`] walks the layers of each request and
//! stops at the first lookup whose confidence beats its layer's threshold.

mod binio;
pub mod cache;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod neighbors;
pub mod nn;
pub mod pipeline;
pub mod reduce;
pub mod threshold;
pub mod trace;

pub use error::{Error, Result};
pub use matrix::Matrix;
