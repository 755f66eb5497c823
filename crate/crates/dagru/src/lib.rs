//! Video activity recognition engine: a dual-attention CNN backbone feeding a
//! stacked bidirectional GRU classifier, built on an in-crate tape-based
//! reverse-mode autodiff core.
//!
//! The crate is self-contained: tensor math, differentiation, training
//! (Adam + categorical cross-entropy), clip ingestion, model serialization
//! and a throughput benchmark harness all live here. Arithmetic is generic
//! over [`Real`] so the training path runs in `f32` while gradient and
//! oracle checks can re-run identical graphs in `f64`.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod pnm;
pub mod recurrent;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
