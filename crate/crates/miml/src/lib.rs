//! Dataset construction, training and evaluation tooling around `miml-core`:
//! image and mask IO, JPEG, deduplication, manifests, checkpoints and the
//! pipeline behind the `miml` command.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod dedup;
pub mod error;
pub mod io;
pub mod manifest;
pub mod models;
pub mod pipeline;

pub use error::{Error, Result};
