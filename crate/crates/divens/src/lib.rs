//! Diverse ensembles under adversarial pressure.
//!
//! `divens` trains small neural-network ensembles whose members are pushed
//! to disagree — not on the correct class, but on how they rank everything
//! else. The training objective augments per-member cross-entropy with an
//! adaptive diversity term: the entropy of the averaged prediction plus the
//! log-volume spanned by the members' non-maximal predictions. Diverse
//! ensembles are measurably harder to attack with gradient-based
//! adversarial examples, and the same geometry yields a cheap detection
//! score.
//!
//! The crate is self-contained: a rank-2 tensor type, a reverse-mode tape,
//! dense LU factorization for small determinants, seven reference attacks,
//! evaluation/detection utilities, and a prediction-space "theory mode"
//! that numerically checks the closed-form optima of the diversity
//! objective. Everything is deterministic given a seed.

pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diversity;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

mod book;

pub use error::{Error, Result};
pub use tensor::Tensor;
