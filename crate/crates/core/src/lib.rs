//! Tool-grounded evidence acquisition for chest CT report generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: CT volumes, binary masks, the MVOL/MMSK containers and a
//!   synthetic ellipsoid phantom generator.
//! - [`radiomics`]: pathology-specific feature tools over masks and HU values.
//! - [`retrieval`]: the standardized feature space and exact L2 k-NN lookup of
//!   reference snippets.
//! - [`llm`]: chat-completion backends (HTTP and scripted replay).
//! - [`agent`]: the sequential evidence-acquisition loop and report synthesis.
//! - [`snippets`]: few-shot snippet extraction and Template-F1 verification.
//! - [`eval`]: label derivation and report metrics.
//!
//! Data-parallel inner loops (distance scans, voxelization, per-case metric
//! evaluation) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise; see [`exec`].

pub mod agent;
pub mod eval;
pub mod exec;
pub mod llm;
pub mod pathology;
pub mod radiomics;
pub mod retrieval;
pub mod snippets;
pub mod volume;

pub use exec::Execution;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
