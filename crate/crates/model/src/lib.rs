//! Model components for the driving world model: a discrete patch tokenizer,
//! a query-transformer scene encoder with a detection head, a causal
//! sequence backbone, a latent-variable trajectory head, and two future-frame
//! decoders (token-autoregressive and flow-matching).

pub mod attention;
pub mod gen_ar;
pub mod gen_fm;
pub mod hungarian;
pub mod layout;
pub mod planner;
pub mod qt;
pub mod reasoner;
pub mod vocab;
pub mod vq;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token index {index} out of range (codebook size {size})")]
    Index { index: usize, size: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("non-finite matching cost at ({row}, {col})")]
    InvalidCost { row: usize, col: usize },
    #[error("flow integration diverged at step {step}")]
    IntegrationDiverged { step: usize },
    #[error("zero-norm embedding in cosine alignment")]
    ZeroEmbedding,
}

pub use layout::{HeadOrder, Mode, SegmentKind, SequenceLayout};
pub use vocab::{TokenKind, Vocab};
pub use vq::TokenGrid;
