//! Minimal dense-tensor math with analytic backward passes.
//!
//! Everything is 64-bit, row-major, and deterministic: reductions run in a
//! fixed order so repeated runs produce bit-identical results. Every backward
//! pass here is checked against [`finite_diff_check`] in the tests.

mod adam;
mod gradcheck;
mod layers;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::finite_diff_check;
pub use layers::{
    affine, affine_backward, layer_norm, layer_norm_backward, multi_head_attention,
    multi_head_attention_backward, row_softmax_nll, softmax_rows, AttentionCache,
    AttentionParams, LayerNormCache,
};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Clone)]
pub enum NumericsError {
    #[error("dimension error in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = core::result::Result<T, NumericsError>;
