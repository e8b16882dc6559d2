//! Fault-tolerant orchestration of generated APDL simulation scripts.
//!
//! The crate bundles a benchmark corpus, an APDL parser and failure
//! classifier, a deterministic fault-injecting solver, deterministic repair
//! rules, model clients, the orchestrator that runs one case under a
//! recovery strategy, and the scoring and statistics used to compare
//! strategies.

pub mod apdl;
pub mod bench;
pub mod corpus;
pub mod model;
pub mod orchestrator;
pub mod recovery;
pub mod scoring;
pub mod seed;
pub mod solver;
