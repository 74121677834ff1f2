//! Semi-supervised multitask speech emotion recognition.
//!
//! A convolutional encoder feeds four heads: an emotion classifier
//! (BLSTM, attention pooling, centre loss), an augmentation-type classifier
//! and a transposed-convolution decoder that reconstructs the input. The
//! auxiliary heads need no emotion labels, so unlabeled speech still trains
//! the encoder.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled; all IO lives in the companion `mtlaug` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attack;
pub mod augment;
pub mod autodiff;
pub mod corpus;
pub mod dsp;
mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
