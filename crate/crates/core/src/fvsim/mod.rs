//! Finite-volume simulator for incompressible single-phase flow with
//! passive transport of injected-water concentration.

pub mod grid;
pub mod io;
pub mod linalg;
pub mod pressure;
pub mod transport;
pub mod wells;

pub use grid::{Grid2D, PermeabilityField, ScalarField};
pub use pressure::{
    assemble_transmissibilities, mass_balance_residual, solve_pressure, FaceFluxes, LinearSolverKind,
    PressureSystem, Transmissibilities,
};
pub use transport::{
    advance_concentration, simulate_control_step, stable_dt, transport_step, upwind_substep, FlowState,
    TransportOptions,
};
pub use wells::WellSet;
