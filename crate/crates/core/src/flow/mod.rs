//! Collision-stopped evolution of the anti-diffusive particle system.

pub mod evolve;
pub mod local;
pub mod recorder;
pub mod spectral;
pub mod stepper;
pub mod transform;

use thiserror::Error;

pub use evolve::{evolve, evolve_until, evolve_with, first_collision, first_collision_with, FlowOptions};
pub use local::{LocalEngine, LocalOptions};
pub use recorder::{check_gap_growth, CollisionEvent, InvariantViolation, OccupationCounter, Recorder};
pub use spectral::{propagate_backward, propagate_exact, propagator_volume, SpectralState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow duration must be finite and nonnegative (got {0})")]
    NegativeTime(f64),
    #[error("target time {end} precedes the configuration time {start}")]
    TimeBeforeStart { start: f64, end: f64 },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}
