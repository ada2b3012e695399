//! Deterministic simulator for speech-generation speaker poisoning.
//!
//! The crate models a zero-shot voice-cloning system at toy scale: speakers are
//! unit identity vectors, utterances are noisy samples of those identities and a
//! small feed-forward generator maps `(reference, content)` to an output whose
//! leading coordinates carry identity. On top of that it implements
//! teacher-guided and encoder-guided poisoning (optionally with a triplet
//! objective), inference-time filtering baselines and the privacy/utility
//! metric suite.
//!
//! Everything here is `no_std` with `alloc`; file formats, configuration and
//! the command-line runner live in the companion `sgsp` crate.
#![no_std]
// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod generator;
pub mod numerics;
pub mod poisoning;
pub mod world;

pub use error::{Error, Result};
pub use numerics::{DenseMatrix, DenseVector, Rng};
