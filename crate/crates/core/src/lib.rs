//! Port-Hamiltonian model of a curling HASEL actuator: geometry, energy,
//! open- and closed-loop dynamics, IDA-PBC control with integral action,
//! and Levenberg–Marquardt identification.

pub mod control;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod hamiltonian;
pub mod identification;
pub mod params;
pub mod solver;
pub mod verify;

pub use dynamics::{PhModel, Trajectory};
pub use error::{ControlError, GeometryError, IdentError, ModelError, ParamError, SolverError};
pub use hamiltonian::State;
pub use params::ActuatorParams;
