//! Discrete-event simulation of the rollout → (inference stages) → train
//! pipeline.
//!
//! The simulator is an integration harness rather than a separate model:
//! each open epoch gets real [`StorageUnit`](crate::storage::StorageUnit)s
//! and [`Controller`](crate::controller::Controller)s, simulated engines
//! pull micro-batches through them, and weight versions move through the
//! [`coordinator`](crate::coordinator) state machines. Only time is fake.
//!
//! Time is an integer nanosecond clock. Events fire in `(time, sequence)`
//! order and idle instances are offered work in a fixed order, so a run is
//! a pure function of its [`SimScenario`].

mod engine;
mod report;
mod scenario;
mod trace;

pub use engine::verify;
pub use report::{
    bubble_ratio, Conservation, Gantt, InstanceInfo, Segment, SegmentKind, SimReport,
};
pub use scenario::{sample_lengths, LengthDist, Mode, Packing, SimScenario, StageSpec};
pub use trace::{export_trace, render_trace, TraceFormat};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("no events left at t={time_ns} ns with {step} steps done")]
    Deadlock { time_ns: u64, step: u64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Runs one scenario to completion.
pub fn run_sim(scenario: &SimScenario) -> Result<SimReport, SimError> {
    engine::Engine::new(scenario.clone())?.run()
}
