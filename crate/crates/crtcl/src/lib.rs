//! Files, configuration, experiment orchestration and the HTTP labeling
//! service around [`crtcl_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod run;
pub mod service;

pub use error::{Error, Result};
