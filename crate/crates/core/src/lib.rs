//! Desk-scale text-to-video latent diffusion for angiography-like clips.
//!
//! The crate is organized around a small tape-based tensor engine
//! ([`graph`]), on top of which sit the wavelet-flow video VAE ([`wfvae`]),
//! the cross-attention diffusion transformer ([`dit`]), the DDIM sampler
//! ([`diffusion`]), the procedural dataset ([`dataset`]), and the
//! objective-evaluation harness ([`eval`]). Persistence formats and the
//! pipeline configuration live in [`io`] and [`config`].

pub mod graph;
pub mod diffusion;
pub mod dit;
pub mod text;
pub mod wfvae;
pub mod kernels;
pub mod nn;
pub mod tensor;
pub mod util;
pub mod wavelet;

pub use tensor::{LayerParams, Tensor, VideoClip};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
