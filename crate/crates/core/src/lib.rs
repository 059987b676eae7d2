//! Lifelong curation of instruction-tuning data.
//!
//! Each timestep a new dataset bundle joins a growing pool. The pool is
//! clustered on per-sample gradient vectors into pseudo-tasks, every
//! cluster picks the score function whose distribution is most spread
//! out, and a coverage-stratified sample of each cluster's budget share
//! forms the training manifest. Optionally the pool is then compressed
//! back to a fixed size by removing its most redundant samples.
//!
//! ```no_run
//! use curator_core::lifecycle::{Engine, EngineConfig};
//!
//! let engine = Engine::open("state".as_ref())?;
//! let config = EngineConfig { budget: 25_000, seed: 17, ..EngineConfig::default() };
//! let outcome = engine.advance("bundle_t0".as_ref(), &config, None)?;
//! println!("{} samples selected", outcome.manifest.entries.len());
//! # Ok::<(), curator_core::Error>(())
//! ```

pub mod clustering;
pub mod datamodel;
pub mod dedup;
pub mod error;
pub mod lifecycle;
pub mod metrics;
pub mod projection;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod synthgen;

pub use datamodel::bundle::{read_bundle, validate_bundle, write_bundle, Bundle, ValidationReport};
pub use datamodel::{DataPool, PerformanceTable, SampleRecord, ScoreFunction, SelectionManifest, SelectorRegistry};
pub use error::{Error, Result};
