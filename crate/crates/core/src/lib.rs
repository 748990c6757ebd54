//! Desk-scale decoder-only quantile forecaster.
//!
//! Series are patched and instance-normalized, embedded, passed through a
//! causal transformer with rotary positions, and projected to several future
//! patches of quantiles per position. Training minimizes pinball loss;
//! inference rolls the quantiles out autoregressively.

pub mod datagen;
pub mod datapipe;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod series;
pub mod training;

pub use decoding::{DecodeMode, DecodeOptions, QuantileForecast};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ProjectionKind};
pub use series::Series;
