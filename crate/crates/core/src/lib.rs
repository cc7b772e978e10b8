//! Part-aligned bilinear re-identification.
//!
//! A two-stream network produces an appearance map `a` and a body-part map
//! `p`; their per-location outer products are averaged and L2-normalized into
//! an image descriptor, trained with triplet losses and evaluated by
//! query/gallery retrieval restricted to one action at a time.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod streams;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
