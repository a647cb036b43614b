//! Noise-robust cross-modal retrieval driven by optimal transport.
//!
//! Noisy training labels are corrected by a partial optimal-transport
//! problem whose cost blends intra-modal neighbor votes weighted by
//! cross-modal consistency; a second, relation-based transport problem
//! supplies soft cross-modal matchings for a contrastive alignment loss.
//!
//! Modules:
//! - [`ot`]: log-domain Sinkhorn and an exhaustive assignment oracle.
//! - [`partial`]: partial OT by slack augmentation and the mass schedule.
//! - [`semantic`]: confident pairs, neighbor cost, target updates.
//! - [`relation`]: relation scores, matching OT, matching-weighted InfoNCE.
//! - [`model`]: projection heads, gradients, Adam, the training loop.
//! - [`data`], [`eval`], [`experiment`], [`checkpoint`]: I/O and drivers.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod ot;
pub mod partial;
pub mod relation;
pub mod semantic;

pub use error::{Error, Result};
