//! Retrieval-primed flow-matching action generation.
//!
//! A conditional flow-matching policy generates action chunks. Its ODE start
//! point comes from a Gaussian prior composed out of retrieved demonstrations
//! (the global prior memory, [`gpm`]) plus a learned residual computed from
//! recent action history (the local consistency memory, [`lcm`]). The
//! confidence of the retrieval sets both the prior noise scale and the number
//! of velocity-network evaluations spent per chunk.

pub mod binio;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gpm;
pub mod lcm;
pub mod nn;
pub mod rng;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
