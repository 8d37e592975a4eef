//! Strong-constraint 4D-Var data assimilation.
//!
//! The serial solver minimizes the classical cost over the initial state with
//! one adjoint sweep per gradient. The time-parallel solver splits the window
//! into sub-intervals, treats every boundary state as a control and enforces
//! continuity through an augmented Lagrangian; each cost and gradient
//! evaluation then runs the sub-intervals independently on an [`Executor`].

pub mod auglag;
pub mod error;
pub mod exec;
pub mod harness;
pub mod lbfgs;
pub mod linalg;
pub mod models;
pub mod observations;
pub mod outer;
pub mod problem;
pub mod serial;
pub mod stepper;

pub use auglag::{
    parallel_cost, parallel_gradient, AugLagObjective, AugLagParams, ExtendedControl,
    MismatchCache, MultiplierSet, PenaltyScaling,
};
pub use error::{Error, Result};
pub use exec::Executor;
pub use harness::{
    build_twin_problem, gradient_check, make_reference_initial_condition, rmse,
    run_twin_experiment, run_weak_scaling, ExperimentReport, GradientCheckOptions,
    GradientCheckReport, Method, ScalingOptions, ScalingResult, ScalingRow, TwinExperimentSpec,
    WorkersPolicy,
};
pub use lbfgs::{minimize, Objective, OptimizerConfig, SolveReport, TerminationReason};
pub use linalg::{CovarianceOperator, SeededRng, Vector};
pub use models::{Dynamics, LinearModel, Lorenz96, ModelSpec};
pub use observations::{Observation, ObservationOperator, ObservationSet};
pub use outer::{solve_auglag, solve_hybrid, MethodReport, OuterConfig, OuterStatus, UpdateScheme};
pub use problem::AssimilationProblem;
pub use serial::{serial_cost, serial_gradient, solve_serial, SerialObjective};
pub use stepper::{propagate, SubInterval};
