//! Compound domain generalization: latent-domain discovery from feature
//! style statistics, domain-specific normalization, and prototype graph and
//! contrastive losses, on a synthetic multi-domain image benchmark.

pub mod data;
pub mod discovery;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod proto_contrast;
pub mod proto_graph;
pub mod prototype;
pub mod style_norm;

pub use comen_tensor as tensor;
pub use error::{Error, Result};
