//! Two-stage multi-view report generation: contrastive pretraining of image
//! and text encoders, then indication-conditioned report decoding, on a
//! small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
mod error;
pub mod kgrg;
pub mod layers;
pub mod metrics;
pub mod mvcl;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{ModelDims, RunConfig};
pub use corpus::{Batch, Study, Vocabulary};
pub use error::ModelError;
pub use params::ParamStore;
pub use tensor::{Graph, Tensor, TensorError, Var};
