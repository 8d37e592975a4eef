//! Method-of-multipliers driver for the augmented-Lagrangian formulation,
//! and the hybrid parallel-then-serial strategy.
//!
//! Each outer iteration `ℓ` minimizes `L(·, λ^ℓ, μ^ℓ)` with L-BFGS, warm
//! started from the previous minimizer, then sets `μ^{ℓ+1} = ρ μ^ℓ` and
//! `λ^{ℓ+1}_k = λ^ℓ_k − μ^ℓ S_k Δx_k` (`S_k = P_k⁻¹` or `I`), optionally
//! followed by the two-step extrapolation of [`accelerated_update`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::auglag::{
    parallel_cost, AugLagObjective, AugLagParams, ExtendedControl, MismatchCache, MultiplierSet,
    PenaltyScaling,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::lbfgs::{minimize, IterationRecord, Objective, OptimizerConfig, SolveReport};
use crate::linalg::{norm_inf, CovarianceOperator, Vector};
use crate::observations::boundary_trajectory;
use crate::problem::AssimilationProblem;
use crate::serial::solve_serial_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScheme {
    #[default]
    Classical,
    Accelerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    pub mu0: f64,
    pub rho: f64,
    pub max_outer: usize,
    /// Stop once `max_k ‖Δx_k‖₂` falls to this value; `None` means `1e-6 √n`.
    pub constraint_tol: Option<f64>,
    pub inner: OptimizerConfig,
    pub update_scheme: UpdateScheme,
    /// Multiply the multiplier correction by `P_k⁻¹`.
    pub scale_update_by_p: bool,
    pub penalty_scaling: PenaltyScaling,
    /// Inner gradient tolerance at `ℓ = 0`, relative to the initial gradient.
    pub inner_tol_initial: f64,
    /// Factor applied to the relative inner tolerance after every outer iteration.
    pub inner_tol_factor: f64,
    pub inner_tol_floor: f64,
    /// Reset the extrapolation sequence `t` to 1 before every accelerated update.
    pub restart_acceleration: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            mu0: 0.1,
            rho: 4.0,
            max_outer: 12,
            constraint_tol: None,
            inner: OptimizerConfig::default(),
            update_scheme: UpdateScheme::Classical,
            scale_update_by_p: true,
            penalty_scaling: PenaltyScaling::Background,
            inner_tol_initial: 1e-2,
            inner_tol_factor: 0.1,
            inner_tol_floor: 1e-6,
            restart_acceleration: false,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mu0 > 0 violated (mu0 = {})",
                self.mu0
            )));
        }
        if !(self.rho > 1.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rho > 1 violated (rho = {})",
                self.rho
            )));
        }
        if self.max_outer < 1 {
            return Err(Error::InvalidConfig("max_outer >= 1 violated".into()));
        }
        if let Some(t) = self.constraint_tol {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "constraint_tol > 0 violated ({t})"
                )));
            }
        }
        if !(self.inner_tol_initial > 0.0 && self.inner_tol_floor > 0.0) {
            return Err(Error::InvalidConfig("inner tolerances must be > 0".into()));
        }
        if !(self.inner_tol_factor > 0.0 && self.inner_tol_factor <= 1.0) {
            return Err(Error::InvalidConfig(
                "inner_tol_factor must lie in (0, 1]".into(),
            ));
        }
        self.inner.validate()
    }

    pub fn constraint_tolerance(&self, n: usize) -> f64 {
        self.constraint_tol.unwrap_or(1e-6 * (n as f64).sqrt())
    }

    fn inner_tolerance(&self, outer: usize, grad_scale: f64) -> f64 {
        let rel = (self.inner_tol_initial * self.inner_tol_factor.powi(outer as i32))
            .max(self.inner_tol_floor);
        (rel * grad_scale).max(self.inner.grad_tol)
    }
}

/// Background trajectory as the starting control (continuous by
/// construction) and zero multipliers.
pub fn initialize(prob: &AssimilationProblem) -> Result<(ExtendedControl, MultiplierSet)> {
    let traj = boundary_trajectory(prob.model(), prob.background(), prob.partition())?;
    Ok((
        ExtendedControl::new(traj)?,
        MultiplierSet::zeros(prob.state_dim(), prob.intervals()),
    ))
}

/// `μ⁺ = ρ μ` and `λ⁺_k = λ_k − μ S_k Δx_k` for `k = 1..N`.
pub fn classical_update(
    lam: &MultiplierSet,
    mu: f64,
    dx: &[Vector],
    p: &[CovarianceOperator],
    cfg: &OuterConfig,
) -> Result<(MultiplierSet, f64)> {
    let lambdas = lam
        .as_slice()
        .iter()
        .zip(dx)
        .zip(p)
        .map(|((l, d), pk)| {
            let step = if cfg.scale_update_by_p {
                pk.apply_inverse(d)?
            } else {
                d.clone()
            };
            Ok(l - step * mu)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MultiplierSet::new(lambdas)?, cfg.rho * mu))
}

/// Extrapolation state: `t^ℓ` and the previous classical multipliers `λ̃^ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelState {
    pub t: f64,
    pub prev_tilde: Option<MultiplierSet>,
}

impl Default for AccelState {
    fn default() -> Self {
        Self {
            t: 1.0,
            prev_tilde: None,
        }
    }
}

/// `t⁺ = (1 + √(1 + 4t²)) / 2`.
pub fn next_t(t: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
}

/// `λ^{ℓ+1} = λ̃^{ℓ+1} + ((t^ℓ − 1)/t^{ℓ+1})(λ̃^{ℓ+1} − λ̃^ℓ) + (t^ℓ/t^{ℓ+1})(λ̃^{ℓ+1} − λ^ℓ)`.
///
/// Without a stored `λ̃^ℓ` the classical result is returned and `t` is left
/// unchanged.
pub fn accelerated_update(
    state: &AccelState,
    lam_tilde_new: &MultiplierSet,
    lam_prev: &MultiplierSet,
) -> (MultiplierSet, AccelState) {
    let Some(prev_tilde) = &state.prev_tilde else {
        return (
            lam_tilde_new.clone(),
            AccelState {
                t: state.t,
                prev_tilde: Some(lam_tilde_new.clone()),
            },
        );
    };
    let t = state.t;
    let t_next = next_t(t);
    let c1 = (t - 1.0) / t_next;
    let c2 = t / t_next;
    let lambdas = lam_tilde_new
        .as_slice()
        .iter()
        .zip(prev_tilde.as_slice())
        .zip(lam_prev.as_slice())
        .map(|((new, old), prev)| new + (new - old) * c1 + (new - prev) * c2)
        .collect();
    (
        MultiplierSet::new(lambdas).expect("blocks share one dimension"),
        AccelState {
            t: t_next,
            prev_tilde: Some(lam_tilde_new.clone()),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Serial,
    Parallel,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Serial => "serial",
            Phase::Parallel => "parallel",
        }
    }
}

/// One accepted inner iterate, with cumulative counters over the whole solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iter: usize,
    pub phase: Phase,
    pub cost: f64,
    pub grad_norm: f64,
    pub constraint_violation: f64,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub elapsed_s: f64,
}

/// Summary of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub mu: f64,
    pub inner_iterations: usize,
    pub inner_grad_tol: f64,
    pub cost: f64,
    pub grad_norm: f64,
    /// `max_k ‖Δx_k‖₂` at the inner minimizer.
    pub constraint_violation: f64,
    /// `‖x_0^ℓ − x_0^serial‖_∞` when a serial analysis is supplied.
    pub distance_to_serial: Option<f64>,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub wall_time_s: f64,
    /// `‖[x_0..x_N]‖₂` where the inner solve started and ended.
    pub start_norm: f64,
    pub end_norm: f64,
    /// Boundary states `[x_0..x_N]` at the inner minimizer.
    pub control: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum OuterStatus {
    ConstraintsSatisfied,
    MaxOuterIterations,
    Aborted(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub cost: usize,
    pub gradient: usize,
}

/// Result of a serial, augmented-Lagrangian or hybrid solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub analysis: Vec<f64>,
    /// Final `[x_0..x_N]` of the parallel phase.
    pub final_control: Option<Vec<Vec<f64>>>,
    pub rows: Vec<ConvergenceRow>,
    pub outer: Vec<OuterRecord>,
    pub status: Option<OuterStatus>,
    pub parallel_evals: EvalCounts,
    pub serial_evals: EvalCounts,
    /// First `iter` of the serial phase in a hybrid solve.
    pub phase_boundary: Option<usize>,
    pub final_constraint_violation: f64,
    pub wall_time_s: f64,
}

impl MethodReport {
    pub fn analysis(&self) -> Vector {
        Vector::from_column_slice(&self.analysis)
    }

    pub fn total_evals(&self) -> EvalCounts {
        EvalCounts {
            cost: self.parallel_evals.cost + self.serial_evals.cost,
            gradient: self.parallel_evals.gradient + self.serial_evals.gradient,
        }
    }

    pub fn from_serial(report: &SolveReport) -> Self {
        let mut out = Self {
            analysis: report.x_final.clone(),
            final_control: None,
            rows: Vec::new(),
            outer: Vec::new(),
            status: None,
            parallel_evals: EvalCounts::default(),
            serial_evals: EvalCounts::default(),
            phase_boundary: None,
            final_constraint_violation: 0.0,
            wall_time_s: report.wall_time_s,
        };
        out.append_trace(Phase::Serial, &report.trace, true, 0.0);
        out.serial_evals = EvalCounts {
            cost: report.cost_evals,
            gradient: report.grad_evals,
        };
        out
    }

    fn totals(&self) -> (usize, usize, usize) {
        let e = self.total_evals();
        let iter = self.rows.last().map_or(0, |r| r.iter);
        (iter, e.cost, e.gradient)
    }

    /// Append an inner trace; `include_start` keeps its iteration-0 record.
    fn append_trace(
        &mut self,
        phase: Phase,
        trace: &[IterationRecord],
        include_start: bool,
        time_offset: f64,
    ) {
        let (iter0, cost0, grad0) = self.totals();
        let base = if self.rows.is_empty() { 0 } else { iter0 };
        for rec in trace {
            if rec.iteration == 0 && !(include_start && self.rows.is_empty()) {
                continue;
            }
            self.rows.push(ConvergenceRow {
                iter: base + rec.iteration,
                phase,
                cost: rec.cost,
                grad_norm: rec.grad_norm,
                constraint_violation: rec.diagnostic.unwrap_or(0.0),
                cost_evals: cost0 + rec.cost_evals,
                grad_evals: grad0 + rec.grad_evals,
                elapsed_s: time_offset + rec.elapsed_s,
            });
        }
    }
}

/// Cost + gradient evaluation outside the optimizer, counted into `counts`.
fn evaluate_point(
    prob: &AssimilationProblem,
    ctrl: &ExtendedControl,
    lam: &MultiplierSet,
    ap: &AugLagParams,
    exec: &Executor,
    counts: &mut EvalCounts,
) -> Result<(f64, f64, MismatchCache)> {
    let mut obj = AugLagObjective::new(prob, lam, ap, exec);
    let flat = ctrl.to_flat();
    let f = obj.value(&flat)?;
    let g = obj.gradient(&flat)?;
    counts.cost += 1;
    counts.gradient += 1;
    let cache = obj.last_cache().cloned().ok_or(Error::NonFinite(
        "augmented Lagrangian at the starting point",
    ))?;
    Ok((f, norm_inf(&g), cache))
}

/// Augmented-Lagrangian 4D-Var. `serial_analysis`, when given, is used only
/// to fill [`OuterRecord::distance_to_serial`].
pub fn solve_auglag(
    prob: &AssimilationProblem,
    cfg: &OuterConfig,
    exec: &Executor,
    serial_analysis: Option<&Vector>,
) -> Result<MethodReport> {
    cfg.validate()?;
    let started = Instant::now();
    let n = prob.state_dim();
    let tol = cfg.constraint_tolerance(n);
    let p = cfg.penalty_scaling.build(prob)?;
    let (mut ctrl, mut lam) = initialize(prob)?;
    let mut mu = cfg.mu0;
    let mut accel = AccelState::default();

    let mut report = MethodReport {
        analysis: Vec::new(),
        final_control: None,
        rows: Vec::new(),
        outer: Vec::new(),
        status: None,
        parallel_evals: EvalCounts::default(),
        serial_evals: EvalCounts::default(),
        phase_boundary: None,
        final_constraint_violation: 0.0,
        wall_time_s: 0.0,
    };

    let ap0 = AugLagParams::new(mu, p.clone())?;
    let (_, grad_scale, _) =
        evaluate_point(prob, &ctrl, &lam, &ap0, exec, &mut report.parallel_evals)?;
    let grad_scale = grad_scale.max(f64::MIN_POSITIVE);

    let mut status = OuterStatus::MaxOuterIterations;
    let mut retried = false;
    let mut outer = 0;
    while outer < cfg.max_outer {
        let ap = AugLagParams::new(mu, p.clone())?;
        let inner_cfg = OptimizerConfig {
            grad_tol: cfg.inner_tolerance(outer, grad_scale),
            ..cfg.inner
        };
        let start = ctrl.to_flat();
        let mut obj = AugLagObjective::new(prob, &lam, &ap, exec);
        let inner = match minimize(&mut obj, &start, &inner_cfg) {
            Ok(r) => r,
            Err(_) if !retried => {
                retried = true;
                mu *= cfg.rho;
                continue;
            }
            Err(e) => {
                status = OuterStatus::Aborted(format!("inner solve {outer} failed: {e}"));
                break;
            }
        };
        let t_offset = started.elapsed().as_secs_f64() - inner.wall_time_s;
        report.append_trace(Phase::Parallel, &inner.trace, true, t_offset);
        report.parallel_evals.cost += inner.cost_evals;
        report.parallel_evals.gradient += inner.grad_evals;

        let end = inner.x();
        ctrl = ExtendedControl::from_flat(&end, n)?;
        let cache = match obj.cache_at(&end) {
            Some(c) => c.clone(),
            None => {
                report.parallel_evals.cost += 1;
                parallel_cost(prob, &ctrl, &lam, &ap, exec)?.1
            }
        };
        let violation = cache.constraint_violation();
        report.outer.push(OuterRecord {
            outer,
            mu,
            inner_iterations: inner.iterations,
            inner_grad_tol: inner_cfg.grad_tol,
            cost: inner.f_final,
            grad_norm: inner.grad_norm_final,
            constraint_violation: violation,
            distance_to_serial: serial_analysis.map(|s| norm_inf(&(&ctrl.states()[0] - s))),
            cost_evals: report.parallel_evals.cost,
            grad_evals: report.parallel_evals.gradient,
            wall_time_s: started.elapsed().as_secs_f64(),
            start_norm: start.norm(),
            end_norm: end.norm(),
            control: ctrl
                .states()
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect(),
        });
        report.final_constraint_violation = violation;

        if violation <= tol {
            status = OuterStatus::ConstraintsSatisfied;
            break;
        }
        outer += 1;
        if outer == cfg.max_outer {
            break;
        }
        let (lam_tilde, mu_next) = classical_update(&lam, mu, cache.dx(), &p, cfg)?;
        lam = match cfg.update_scheme {
            UpdateScheme::Classical => lam_tilde,
            UpdateScheme::Accelerated => {
                if cfg.restart_acceleration {
                    accel.t = 1.0;
                }
                let (next, state) = accelerated_update(&accel, &lam_tilde, &lam);
                accel = state;
                next
            }
        };
        mu = mu_next;
    }

    report.status = Some(status);
    report.analysis = ctrl.states()[0].iter().copied().collect();
    report.final_control = Some(
        ctrl.states()
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect(),
    );
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// `n_parallel_outer` augmented-Lagrangian outer iterations, then serial
/// 4D-Var started from the resulting `x_0`.
pub fn solve_hybrid(
    prob: &AssimilationProblem,
    cfg: &OuterConfig,
    serial_opts: &OptimizerConfig,
    n_parallel_outer: usize,
    exec: &Executor,
) -> Result<MethodReport> {
    if n_parallel_outer < 1 {
        return Err(Error::InvalidConfig(
            "hybrid needs at least one parallel outer iteration".into(),
        ));
    }
    let started = Instant::now();
    let truncated = OuterConfig {
        max_outer: n_parallel_outer,
        ..cfg.clone()
    };
    let mut report = solve_auglag(prob, &truncated, exec, None)?;
    let serial = solve_serial_from(prob, &report.analysis(), serial_opts)?;
    let boundary = report.rows.last().map_or(0, |r| r.iter) + 1;
    let offset = started.elapsed().as_secs_f64() - serial.wall_time_s;
    report.append_trace(Phase::Serial, &serial.trace, false, offset);
    report.serial_evals = EvalCounts {
        cost: serial.cost_evals,
        gradient: serial.grad_evals,
    };
    report.phase_boundary = Some(boundary);
    report.analysis = serial.x_final.clone();
    report.final_constraint_violation = 0.0;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use nalgebra::dvector;

    fn lam(v: &[&[f64]]) -> MultiplierSet {
        MultiplierSet::new(v.iter().map(|x| Vector::from_column_slice(x)).collect()).unwrap()
    }

    #[test]
    fn classical_update_cases() {
        let cfg = OuterConfig {
            rho: 4.0,
            scale_update_by_p: false,
            ..Default::default()
        };
        let p = vec![CovarianceOperator::identity(2)];
        let (l, mu) =
            classical_update(&lam(&[&[1.0, 1.0]]), 2.0, &[dvector![0.5, -0.5]], &p, &cfg).unwrap();
        assert_eq!(l, lam(&[&[0.0, 2.0]]));
        assert_eq!(mu, 8.0);

        let (_, mu) =
            classical_update(&lam(&[&[0.0, 0.0]]), 10.0, &[dvector![0.0, 0.0]], &p, &cfg).unwrap();
        assert_eq!(mu, 40.0);

        let l0 = lam(&[&[0.3, -1.2]]);
        let scaled = OuterConfig::default();
        let p = vec![CovarianceOperator::diagonal(dvector![0.5, 2.0]).unwrap()];
        let (same, _) = classical_update(&l0, 3.0, &[Vector::zeros(2)], &p, &scaled).unwrap();
        assert_eq!(same, l0);
        let (l1, _) = classical_update(&l0, 2.0, &[dvector![1.0, 1.0]], &p, &scaled).unwrap();
        assert_eq!(l1, lam(&[&[0.3 - 4.0, -1.2 - 1.0]]));
    }

    #[test]
    fn acceleration_sequence() {
        let t1 = next_t(1.0);
        assert!((t1 - 1.618_033_988_7).abs() < 1e-10);
        let t2 = next_t(t1);
        let oracle = 0.5 * (1.0 + (1.0 + 4.0 * t1 * t1).sqrt());
        assert_eq!(t2, oracle);
        assert!((t2 - 2.1935).abs() < 5e-5, "{t2}");
    }

    #[test]
    fn acceleration_first_call_is_classical() {
        let tilde = lam(&[&[1.0, 2.0]]);
        let (out, st) = accelerated_update(&AccelState::default(), &tilde, &lam(&[&[5.0, 5.0]]));
        assert_eq!(out, tilde);
        assert_eq!(st.t, 1.0);
        assert_eq!(st.prev_tilde, Some(tilde));
    }

    #[test]
    fn acceleration_with_stationary_history() {
        let l = lam(&[&[0.4, -0.1], &[2.0, 3.0]]);
        let state = AccelState {
            t: 1.7,
            prev_tilde: Some(l.clone()),
        };
        let (out, st) = accelerated_update(&state, &l, &l);
        assert_eq!(out, l);
        assert!((st.t - next_t(1.7)).abs() < 1e-15);
    }

    #[test]
    fn acceleration_formula() {
        let new = lam(&[&[1.0]]);
        let old = lam(&[&[0.5]]);
        let prev = lam(&[&[0.25]]);
        let state = AccelState {
            t: 2.0,
            prev_tilde: Some(old),
        };
        let (out, _) = accelerated_update(&state, &new, &prev);
        let tn = next_t(2.0);
        let expected = 1.0 + (1.0 / tn) * 0.5 + (2.0 / tn) * 0.75;
        assert!((out.get(1)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_invariant() {
        let cfg = OuterConfig {
            rho: 0.5,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("rho > 1"), "{msg}");
        assert!(OuterConfig {
            mu0: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OuterConfig::default().validate().is_ok());
        assert!(
            (OuterConfig::default().constraint_tolerance(40) - 1e-6 * 40f64.sqrt()).abs() < 1e-18
        );
    }

    #[test]
    fn inner_tolerance_schedule() {
        let cfg = OuterConfig::default();
        assert!((cfg.inner_tolerance(0, 100.0) - 1.0).abs() < 1e-12);
        assert!((cfg.inner_tolerance(1, 100.0) - 0.1).abs() < 1e-12);
        assert!((cfg.inner_tolerance(20, 100.0) - 1e-4).abs() < 1e-12);
        assert_eq!(cfg.inner_tolerance(20, 1e-3), cfg.inner.grad_tol);
    }

    #[test]
    fn random_multiplier_update_is_linear() {
        let mut rng = SeededRng::new(4);
        let l =
            MultiplierSet::new((0..3).map(|_| rng.standard_normal_vector(4)).collect()).unwrap();
        let dx: Vec<Vector> = (0..3).map(|_| rng.standard_normal_vector(4)).collect();
        let p = vec![CovarianceOperator::identity(4); 3];
        let cfg = OuterConfig {
            scale_update_by_p: false,
            ..Default::default()
        };
        let (a, _) = classical_update(&l, 1.0, &dx, &p, &cfg).unwrap();
        let (b, _) = classical_update(&l, 2.0, &dx, &p, &cfg).unwrap();
        // λ − 2Δx = 2(λ − Δx) − λ
        let expected = a.combine(2.0, &l, -1.0);
        for (x, y) in b.as_slice().iter().zip(expected.as_slice()) {
            assert!((x - y).amax() < 1e-14);
        }
    }
}
