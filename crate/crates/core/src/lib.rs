//! Model-agnostic feature significance via exact randomized sign tests.
//!
//! A [`bundle::PredictionBundle`] holds a model's predictions with and
//! without each feature masked. [`effects`] turns them into per-sample loss
//! differences, [`sign_test`] decides whether the median difference exceeds
//! a threshold, [`intervals`] brackets the median, and [`pipeline`] runs it
//! all per feature and produces a ranked [`report`].

pub mod binom;
pub mod bundle;
pub mod crossfit;
pub mod effects;
pub mod error;
pub mod intervals;
pub mod panel;
pub mod pipeline;
pub mod power;
pub mod report;
pub mod rng;
pub mod synthetic;

pub use error::{AicoError, Result};
