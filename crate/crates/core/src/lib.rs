//! Topology-invariant EEG sequence modeling at desk scale.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), a preprocessing and synthetic-data pipeline ([`dsp`],
//! [`synth`]), the model itself (patch encoder with learned-query channel
//! unification in [`encoder`], bidirectional selective state-space blocks in
//! [`mamba`]), three self-supervised objectives ([`ssl`]), training and
//! evaluation loops ([`trainer`]), and an analytic FLOPs/memory cost model
//! ([`flops`]).
//!
//! Arrays are stored as 32-bit floats; the tape computes in 64-bit
//! internally so finite-difference gradient checks stay meaningful.

pub mod array;
pub mod checkpoint;
pub mod config;
pub mod dsp;
pub mod encoder;
pub mod flops;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod montage;
pub mod ops;
pub mod optim;
pub mod recording;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use array::Array;
pub use tape::{Binding, Params, Tape, Var};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
