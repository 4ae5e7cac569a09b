//! Core algorithms for contrastive action verification on a synthetic
//! language-conditioned control world.
//!
//! The crate is `no_std` (with `alloc`) so the math, the world model, the
//! verifier, and the experiment logic stay free of IO. File formats, the
//! CLI, and wall-clock benchmarking live in the companion `veriact-cli`
//! crate.
//!
//! Module map:
//! - [`numerics`]: dense tensors with hand-written backward passes and a
//!   finite-difference gradient oracle
//! - [`world`]: the synthetic manipulation world, oracle controller, and a
//!   phrasing-sensitive stochastic base policy
//! - [`rephrase`]: grammar paraphrasing, k-means curation, boot-time
//!   embedding caches, and the remote-provider protocol
//! - [`sampling`]: the four candidate-generation strategies with budget
//!   accounting
//! - [`verifier`]: the contrastive verifier model, InfoNCE training, and
//!   checkpoint bytes
//! - [`inference`]: hierarchical (rephrase, action) selection and verified
//!   episode rollouts
//! - [`eval`]: scaling curves, power-law fits, retrieval and classification
//!   metrics, compute estimates

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eval;
pub mod inference;
pub mod numerics;
pub mod rephrase;
pub mod rng;
pub mod sampling;
pub mod verifier;
pub mod world;
