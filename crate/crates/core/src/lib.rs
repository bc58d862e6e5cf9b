//! Teacher-student knowledge distillation at desk scale.
//!
//! Everything needed to train a small student model against a frozen
//! teacher lives in this crate: a dense `f64` tensor with reverse-mode
//! automatic differentiation ([`graph`]), the layer zoo and architecture
//! presets ([`layers`], [`arch`]), the full distillation loss family
//! ([`losses`]), mini-batch index-set sampling ([`sampling`]), dataset
//! ingestion ([`data`]), SGD training loops ([`trainer`]) and the
//! config-driven experiment harness ([`harness`]).

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
