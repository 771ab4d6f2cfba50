//! Core of the AMES re-ranking engine: dense kernels, the masked-attention
//! similarity model, descriptor codecs, training, ranking and evaluation.
//!
//! The crate is `no_std` (with `alloc`); file formats, the on-disk store and
//! the command-line tool live in the companion `ames` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod codec;
pub mod error;
pub mod eval;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod record;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{AmesError, Result};
