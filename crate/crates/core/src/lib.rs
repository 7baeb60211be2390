//! Incomplete time series classification.
//!
//! A GRU imputer walks each series step by step, predicting the next
//! observation and substituting its prediction wherever a value is missing.
//! The completed series feeds a stack of multi-scale dilated convolution
//! layers whose pooled output is classified with a softmax head. Imputer and
//! classifier are trained jointly: the classification loss backpropagates
//! through the convolutions into the recurrence, and a masked next-step
//! regression loss supervises the imputer directly.
//!
//! Everything is implemented on top of `ndarray` with hand-written backward
//! passes; see [`nn`] for the layer contract.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod imputation;
pub mod model;
pub mod msfl;
pub mod nn;
pub mod training;

pub use config::RunConfig;
pub use data::{DatasetBundle, TimeSeriesSample};
pub use error::{Error, Result};
pub use model::{ItscModel, ModelSpec, Variant};
pub use training::{evaluate, train, EpochReport, LossWeights, MetricsReport, TrainConfig};
