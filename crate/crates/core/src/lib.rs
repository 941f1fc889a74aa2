//! Core algorithms for webly-supervised image manipulation localization:
//! pair routing and synthesis, difference-aware segmentation, correlation
//! over frozen features, annotation quality scoring, object jitter
//! synthesis, the rectifying localization network and its metrics.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! `std` feature. File formats, codecs and the command line live in the
//! `miml` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod annotate;
pub mod backbone;
pub mod corrdino;
pub mod dass;
pub mod error;
pub mod image;
pub mod jitter;
pub mod jpeg;
pub mod metrics;
pub mod nn;
pub mod pairs;
pub mod phash;
pub mod qes;
pub mod real;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod webiml;

pub use error::{Error, Result};
pub use real::Real;
