//! Soft Mumford-Shah segmentation.
//!
//! Every pixel carries a probability vector over `K` patterns (its
//! ownerships) instead of a single label. The ownerships and the smooth
//! pattern fields are estimated jointly by minimizing a Gaussian-mixture
//! data term, a Sobolev smoothness term on the patterns, and a
//! Modica-Mortola double-well term on each ownership, subject to the
//! pixelwise simplex constraint. Hard labels are recovered by argmax.
//!
//! The numerical core is generic over the scalar type: discrete calculus,
//! energies, simplex projection and hardening accept any [`Scalar`]
//! (including exact rationals), while the iterative solvers and the
//! alternating-minimization driver need a floating-point [`Real`].

// `!(x > 0)` is deliberate: it rejects NaN. `Scalar` has no `*Assign` bound.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::assign_op_pattern,
    clippy::result_large_err,
    clippy::needless_range_loop
)]

pub mod driver;
pub mod error;
pub mod grid;
pub mod linsolve;
pub mod model;
pub mod scalar;
pub mod simplex;
pub mod solver;
pub mod stack;
pub mod supervision;
pub mod synthetic;

pub use driver::{
    initialize, run_pc_sms, run_sms, run_with_observer, update_means, InitMode, InitialState,
    ModelKind, RunConfig, RunFailure, RunOutput, RunStatus, RunTrace, TraceRow, UpdateOrder,
};
pub use error::{Error, Result};
pub use grid::{BoundaryField, ScalarField};
pub use model::{
    data_energy, harden, mm_energy, pc_energy, sigmoid_profile, total_energy, EnergyBreakdown,
    LabelMap, ModelParams,
};
pub use scalar::{Real, Scalar};
pub use simplex::{simplex_project, tangent_project, validate_stack, FeasibilityReport};
pub use solver::{
    el_residual, mean_v, ownership_linearized_step, solve_ownerships, solve_pattern_channel,
    ElResidual, SolverOptions,
};
pub use stack::{Image, OwnershipStack, PatternStack, Stack};
pub use supervision::{Patch, Supervision, SupervisionError, SupervisionMask, SupervisionReport};

/// Exact rational scalar for identity checks.
pub type Exact = num_rational::Ratio<i64>;

pub type Field = ScalarField<f64>;
pub type Field32 = ScalarField<f32>;
pub type ExactField = ScalarField<Exact>;
pub type Ownerships = OwnershipStack<f64>;
pub type Patterns = PatternStack<f64>;
pub type GrayImage = Image<f64>;
pub type Params = ModelParams<f64>;
pub type Energy = EnergyBreakdown<f64>;
