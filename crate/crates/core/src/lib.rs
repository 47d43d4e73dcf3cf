//! Harness for iterative, agent-driven GPU kernel optimization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`task`], [`suite`], [`log`]: the shared data model and its
//!   on-disk formats.
//! - [`metrics`]: discrepancy, correctness decision, speedup and geometric
//!   mean aggregation.
//! - [`oracles`]: CPU reference implementations that label test cases.
//! - [`executor`]: compile/run/time candidates under a simulated or a
//!   subprocess backend.
//! - [`agents`]: testing, profiling, planning and coding roles over a chat
//!   backend.
//! - [`orchestrator`]: the round loop, best-candidate selection and
//!   summaries.

pub mod agents;
pub mod digest;
pub mod executor;
pub mod log;
pub mod metrics;
pub mod oracles;
pub mod orchestrator;
pub mod suite;
pub mod task;
pub mod tensor;
