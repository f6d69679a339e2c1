//! Texture classification with dense descriptors, sparse codes pooled over
//! overlapping multi-level grids, and a locality-constrained collaborative
//! representation classifier (LC-CRC).
//!
//! Pipeline: [`descriptor`] extracts dense SIFT-style descriptors,
//! [`sparse`] learns a dictionary and codes them, [`pyramid`] max-pools the
//! codes over overlapping pyramid regions into an orderless
//! [`pyramid::ImageDescriptor`], and [`classifier`] builds a feature pond from
//! training images and labels test images by per-level minimum class
//! reconstruction errors. [`experiment`] wires the stages into a seeded,
//! multi-trial protocol.
//!
//! # Features
//!
//! - `parallel` *(default)*: bulk loops (descriptor extraction, batch coding,
//!   classification of test images) run on rayon. Without it every
//!   [`Exec`] policy runs sequentially; results are identical either way.

pub mod classifier;
pub mod container;
pub mod corpus;
pub mod descriptor;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod image;
pub mod pyramid;
pub mod sparse;

pub use error::{Error, Result};
pub use exec::Exec;
