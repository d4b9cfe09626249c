//! Multiscale model reduction for parabolic problems with random high-contrast
//! coefficients: fine P1 solver, GMsFEM spaces, residual-driven enrichment,
//! Karhunen-Loève fields and POD.

pub mod assembly;
pub mod config;
pub mod enrichment;
pub mod error;
pub mod gmsfem;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod pod;
pub mod randfield;

pub use error::{Error, Result};
