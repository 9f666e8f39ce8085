pub mod error;
pub mod harness;
pub mod integrators;
pub mod lattice;
pub mod noise;
pub mod potential;
pub mod snapshot;
pub mod state;

pub use error::{NeldError, Result};
pub use integrators::{step, SchemeId, SimParams, SoileBNoise, StepRecord};
pub use lattice::{DeformingLattice, FlowMatrix, ReplicaIndex};
pub use noise::{coarsen, NoisePath, StepNoise};
pub use potential::{ForceField, PositionConvention};
pub use state::{SystemState, Vec3};
pub use harness::{convergence_experiment, equilibrate, truncation_experiment, ConvergenceReport, ExperimentConfig};
