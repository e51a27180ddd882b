//! Total-variation regularized estimation on graphs.
//!
//! The crate covers the plain and square-root analysis estimators, the
//! quantities their oracle inequalities are stated in (antiprojection
//! lengths, the inverse scaling factor, weights, compatibility bounds,
//! tuning parameters) and a seeded Monte Carlo harness that checks the
//! inequalities and the underlying probability lemmas.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod compatibility;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod linalg;
pub mod projections;
pub mod rng;
pub mod solvers;
pub mod tuning;

pub use compatibility::{kappa_bound_cycle, kappa_bound_path, kappa_numeric, KappaBounds, KappaSearch};
pub use error::{Error, Result};
pub use experiments::{
    event_flags, generate_trial, run_experiment, verify_probability_lemmas, write_csv, EventFlags, ExperimentConfig,
    ExperimentSummary, LemmaCheckConfig, LemmaSummary, SignalSpec, TrialRecord,
};
pub use graph::{active_set, build_graph, is_admissible, ActiveSet, DirectedGraph, GraphFamily, IncidenceMatrix};
pub use projections::{gamma_bound, project_nullspace, pseudoinverse, theory_report, BoundFamily, PseudoInverse, TheoryReport};
pub use solvers::{kkt_residual, solve_analysis, solve_sqrt_analysis, EstimateResult, SolverOptions};
pub use tuning::{
    admissible_set_requirements, check_assumption1, lambda0_sqrt, lambda_plain, minimal_r, oracle_rhs, KappaSource, OracleRhs,
    RhsOptions, TheoremId, TuningInputs,
};

/// Empirical norm ‖v‖_n = ‖v‖₂/√n.
pub fn norm_n(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}
