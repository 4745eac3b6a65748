//! Generator-critic training for image classifiers.
//!
//! A classifier (the *generator*) is trained with cross-entropy while a
//! Wasserstein critic learns to separate the generator's features on correctly
//! and incorrectly classified samples. The critic then supplies a
//! semi-supervised loss on unlabeled data and ranks unlabeled samples for
//! active learning.
//!
//! The crate is `no_std` with `alloc`; file IO, configuration files and the
//! labeling service live in the `crtcl` companion crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod active;
pub mod data;
pub mod error;
pub mod eval;
pub mod formats;
pub mod losses;
pub mod models;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use tape::{Tape, Var};
pub use tensor::{clip_weights, Param, ParamSet, Tensor};
