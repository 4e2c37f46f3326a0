//! Replay-memory toolkit for class-incremental continual learning.
//!
//! The crate implements three streaming memory-management policies behind a
//! single observe-one-instance contract: plain reservoir sampling, a
//! class-balancing variant (CBRS) that evicts only from classes marked
//! full, and a diversity-aware variant (D-CBRS) that additionally clusters
//! each class's memory contents and evicts from the largest cluster. Around
//! them sit dataset ingestion and stream simulation, a from-scratch MLP
//! trained with replay, and an experiment harness that reproduces accuracy
//! tables and memory-composition figures with seeded determinism.

pub mod clustering;
pub mod error;
pub mod harness;
pub mod memory;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod streams;

pub use error::{Error, Result};
pub use memory::{Batch, BatchOrigin, Instance, MemoryBuffer};
pub use samplers::{ClustererKind, DcbrsParams, MemoryEvent, PolicyKind, PolicyState};
pub use streams::{Dataset, RetentionPlan, StreamPlan, SyntheticSpec};
