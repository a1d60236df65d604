//! Small neural toolkit with hand-derived gradients.

pub mod gmm;
pub mod gradcheck;
pub mod io;
pub mod lstm;
pub mod ops;
pub mod params;
pub mod tape;
pub mod transformer;

pub use gmm::GmmParams;
pub use lstm::{LstmStack, LstmStackConfig};
pub use params::{AdamConfig, Grads, ParamId, ParamStore};
pub use transformer::TransformerConfig;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("backward called without a forward cache")]
    MissingCache,
    #[error("invalid weight file: {0}")]
    WeightFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
