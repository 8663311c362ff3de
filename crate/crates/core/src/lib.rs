//! Provably 1-Lipschitz feed-forward networks built from Convex Potential
//! Layers and orthogonal skew-flow layers.
//!
//! The crate is organised bottom-up:
//! - [`tensor`]: dense tensors and linear operators with exact adjoints
//! - [`spectral`]: power-iteration spectral norm estimation and a dense oracle
//! - [`layers`]: the 1-Lipschitz layer catalog and network composition
//! - [`flows`]: continuous-time residual flows and their discretizations
//! - [`training`]: margin loss, Adam and the training loop
//! - [`robustness`]: certification, PGD attacks, empirical Lipschitz bounds
//! - [`data`], [`checkpoint`], [`report`]: dataset ingestion and persistence

// `!(x >= 0.0)` is how argument checks reject NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flows;
pub mod layers;
pub mod report;
pub mod robustness;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::{ArchSpec, Layer, LayerSpec, Mode, Network};
pub use spectral::SpectralState;
pub use tensor::{LinearOperator, Real, Tensor};
