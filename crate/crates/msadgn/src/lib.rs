//! End-to-end semisupervised domain generalization for 1-D clutter spectra.
//!
//! Trains on one labeled source domain plus several unlabeled ones and
//! predicts categories on an unseen target domain. The pipeline combines
//! domain-related pseudolabeling (probability score, prototype similarity,
//! dynamic threshold), pairwise adversarial feature alignment through a
//! gradient reversal layer, and per-domain classifiers recombined by a
//! learned domain-similarity weight branch.
//!
//! Everything runs on a small deterministic reverse-mode autodiff engine in
//! 64-bit floats; see [`tensor`].

pub mod adversarial;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod pseudolabel;
pub mod specific;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
