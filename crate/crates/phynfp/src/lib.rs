//! Physics-guided neural flux prediction on directed flow networks.
//!
//! The crate combines four layers that share one graph data model:
//!
//! - [`graph`]: directed flow graphs with per-edge features, CSV ingestion,
//!   and topology reversal.
//! - [`diffops`]: upwind difference operators (base, 1/dx, dz/dx weighted)
//!   and their frequency-response verification on directed rings.
//! - [`pdesim`]: explicit upwind simulators for the simplified Saint-Venant
//!   velocity equation and the Aw-Rascle mass-conservation equation, used as
//!   synthetic data generators and as oracles, plus a backward-reconstruction
//!   demo showing the noise amplification of the inverse problem.
//! - [`tensorad`] / [`models`] / [`traineval`]: a tape-based reverse-mode
//!   autodiff engine, the physics-guided message-passing layers built on it,
//!   and the training / direction-sensitivity evaluation harness.
//!
//! [`presets`] ships the small synthetic benchmarks used by the test suite
//! and the CLI.

pub mod diffops;
pub mod error;
pub mod graph;
pub mod pdesim;
pub mod presets;
pub mod tensorad;
pub mod traineval;

pub mod models;

pub use error::{Error, Result};
