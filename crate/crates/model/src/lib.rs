//! Learning stack: a length-preserving residual-convolutional VAE over
//! per-bin structure rows, and a conditional latent diffusion transformer
//! driven by contact-map tokens with flow-matching training and
//! rectified-flow sampling.

pub mod dit;
pub mod nn;
pub mod vae;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input conformation is not normalized (mean valid-bead norm {0:.4})")]
    NotNormalized(f64),
    #[error("map has {got} bins but the model was built for {expected}")]
    BinMismatch { got: usize, expected: usize },
    #[error("latent sequence has {got} tokens, expected {expected}")]
    TokenMismatch { got: usize, expected: usize },
    #[error("model parameters contain non-finite values")]
    NonFiniteParams,
    #[error("latent components have zero spread; cannot calibrate a scale")]
    DegenerateLatents,
    #[error(transparent)]
    Geom(#[from] chromoforge_core::geom::GeomError),
}

/// Layer-norm epsilon shared by every normalization site in the stack.
pub const LN_EPS: f64 = 1e-6;
