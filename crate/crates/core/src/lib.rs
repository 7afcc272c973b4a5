//! Self-supervised contrastive pretraining for time series.
//!
//! The pipeline: assess each segment's non-stationarity with an ADF unit-root
//! test, build weak/strong augmented views, encode them with a small 1-D CNN,
//! and train with a contrastive objective whose negative pairs are chosen by
//! stationarity state (hard negatives) and down-weighted by temporal
//! proximity (soft negatives). Evaluation is by linear probe on frozen
//! embeddings plus an auditor that measures the false-negative-pair rate of a
//! pair-construction policy against ground-truth labels.
//!
//! All numeric kernels are generic over the scalar type ([`scalar::Real`],
//! `f32` or `f64`); the aliases below fix `f64`, which the CLI uses.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod rng;
pub mod scalar;
pub mod stationarity;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations used by the CLI and most tests.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type AdamConfig64 = adam::AdamConfig<f64>;
pub type AdamState64 = adam::AdamState<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Segment64 = data::Segment<f64>;
pub type ContrastConfig64 = contrast::ContrastConfig<f64>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
