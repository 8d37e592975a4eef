use std::path::Path;
use std::time::Instant;

use al4dvar::harness::full_trajectory;
use al4dvar::outer::{EvalCounts, OuterStatus};
use al4dvar::{
    build_twin_problem, gradient_check, propagate, run_twin_experiment, run_weak_scaling, Executor,
    ExperimentReport, Method, Vector, WorkersPolicy,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, write_atomic, write_json};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Evaluation counts reported for the Lorenz-96 case in the original study.
/// Kept for comparison only; they depend on solver settings not given there.
const PUBLISHED_SERIAL: EvalCounts = EvalCounts {
    cost: 574,
    gradient: 230,
};
const PUBLISHED_PARALLEL: EvalCounts = EvalCounts {
    cost: 650,
    gradient: 100,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluations {
    pub serial: EvalCounts,
    pub parallel: EvalCounts,
    pub total: EvalCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterSummary {
    pub outer: usize,
    pub mu: f64,
    pub inner_iterations: usize,
    pub inner_grad_tol: f64,
    pub cost: f64,
    pub grad_norm: f64,
    pub constraint_violation: f64,
    pub distance_to_serial: Option<f64>,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub wall_time_s: f64,
}

/// `report.json`. Keys ending in `_s` are wall-clock timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub method: Method,
    pub seed: u64,
    pub workers: usize,
    pub state_dim: usize,
    pub intervals: usize,
    pub reference_magnitude: f64,
    pub rmse_background: f64,
    pub rmse_analysis: f64,
    pub status: Option<OuterStatus>,
    pub final_constraint_violation: f64,
    pub phase_boundary: Option<usize>,
    pub evaluations: Evaluations,
    pub published_evaluations: Evaluations,
    pub outer: Vec<OuterSummary>,
    pub analysis: Vec<f64>,
    pub background: Vec<f64>,
    pub reference_initial: Vec<f64>,
    pub solve_wall_time_s: f64,
    pub total_wall_time_s: f64,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
struct FailureReport<'a> {
    command: &'a str,
    error: String,
    config: &'a RunConfig,
}

fn executor(workers: usize) -> Result<Executor> {
    Ok(Executor::with_workers(workers)?)
}

fn fail(out: &Path, command: &str, cfg: &RunConfig, err: CliError) -> CliError {
    if let CliError::Numerical(_) = err {
        let failure = FailureReport {
            command,
            error: err.to_string(),
            config: cfg,
        };
        if let Err(e) = write_json(&out.join("report.json"), &failure) {
            eprintln!("warning: {e}");
        }
    }
    err
}

fn rms_error(a: &Vector, b: &Vector) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

fn published_counts() -> Evaluations {
    Evaluations {
        serial: PUBLISHED_SERIAL,
        parallel: PUBLISHED_PARALLEL,
        total: EvalCounts {
            cost: PUBLISHED_SERIAL.cost + PUBLISHED_PARALLEL.cost,
            gradient: PUBLISHED_SERIAL.gradient + PUBLISHED_PARALLEL.gradient,
        },
    }
}

fn write_run_artifacts(cfg: &RunConfig, r: &ExperimentReport, started: Instant) -> Result<()> {
    let out = &cfg.out;
    let spec = &cfg.experiment;
    let partition = spec.partition()?;
    let reference = full_trajectory(
        &spec.model,
        &Vector::from_column_slice(&r.reference_initial),
        &partition,
    )?;
    let background = full_trajectory(
        &spec.model,
        &Vector::from_column_slice(&r.background),
        &partition,
    )?;

    let times: Vec<f64> = r.analysis_trajectory.iter().map(|(t, _)| *t).collect();
    let states: Vec<Vec<f64>> = r
        .analysis_trajectory
        .iter()
        .map(|(_, s)| s.clone())
        .collect();
    let analysis_err: Vec<f64> = states
        .iter()
        .zip(&reference)
        .map(|(a, (_, rf))| rms_error(&Vector::from_column_slice(a), rf))
        .collect();
    let background_err: Vec<f64> = background
        .iter()
        .zip(&reference)
        .map(|((_, b), (_, rf))| rms_error(b, rf))
        .collect();
    write_atomic(
        &out.join("analysis_trajectory.csv"),
        artifacts::trajectory_csv(&times, &background_err, &analysis_err, &states).as_bytes(),
    )?;
    write_atomic(
        &out.join("convergence.csv"),
        artifacts::convergence_csv(&r.solve.rows).as_bytes(),
    )?;

    if !r.solve.outer.is_empty() {
        let mut segments = Vec::new();
        for rec in &r.solve.outer {
            for (k, iv) in partition.iter().enumerate() {
                let (_, traj) =
                    propagate(&spec.model, &Vector::from_column_slice(&rec.control[k]), iv)?;
                for (j, s) in traj.states().iter().enumerate() {
                    segments.push((
                        rec.outer,
                        k,
                        iv.t_start() + j as f64 * iv.step(),
                        s.iter().copied().collect(),
                    ));
                }
            }
        }
        write_atomic(
            &out.join("iterates.csv"),
            artifacts::iterates_csv(&segments).as_bytes(),
        )?;
    }

    let s = &r.solve;
    let report = RunReport {
        command: "run".into(),
        method: r.method,
        seed: r.seed,
        workers: r.workers,
        state_dim: r.state_dim,
        intervals: r.intervals,
        reference_magnitude: r.reference_magnitude,
        rmse_background: r.rmse_background,
        rmse_analysis: r.rmse_analysis,
        status: s.status.clone(),
        final_constraint_violation: s.final_constraint_violation,
        phase_boundary: s.phase_boundary,
        evaluations: Evaluations {
            serial: s.serial_evals,
            parallel: s.parallel_evals,
            total: s.total_evals(),
        },
        published_evaluations: published_counts(),
        outer: s
            .outer
            .iter()
            .map(|o| OuterSummary {
                outer: o.outer,
                mu: o.mu,
                inner_iterations: o.inner_iterations,
                inner_grad_tol: o.inner_grad_tol,
                cost: o.cost,
                grad_norm: o.grad_norm,
                constraint_violation: o.constraint_violation,
                distance_to_serial: o.distance_to_serial,
                cost_evals: o.cost_evals,
                grad_evals: o.grad_evals,
                wall_time_s: o.wall_time_s,
            })
            .collect(),
        analysis: s.analysis.clone(),
        background: r.background.clone(),
        reference_initial: r.reference_initial.clone(),
        solve_wall_time_s: s.wall_time_s,
        total_wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    write_json(&out.join("report.json"), &report)
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let exec = executor(cfg.workers)?;
    let report = run_twin_experiment(&cfg.experiment, &exec)
        .map_err(|e| fail(&cfg.out, "run", cfg, e.into()))?;
    write_run_artifacts(cfg, &report, started)?;
    println!(
        "{} analysis: rmse_background={} rmse_analysis={} cost_evals={} grad_evals={}",
        report.method.as_str(),
        report.rmse_background,
        report.rmse_analysis,
        report.solve.total_evals().cost,
        report.solve.total_evals().gradient
    );
    if let Some(OuterStatus::Aborted(why)) = &report.solve.status {
        return Err(CliError::Numerical(format!("outer loop aborted: {why}")));
    }
    println!("wrote artifacts to {}", cfg.out.display());
    Ok(())
}

pub fn gradient_check_cmd(cfg: &RunConfig, adjoint_scale: f64) -> Result<()> {
    let exec = executor(cfg.workers)?;
    let prob = build_twin_problem(&cfg.experiment)?.problem;
    let opts = al4dvar::GradientCheckOptions {
        adjoint_scale,
        ..cfg.gradient_check
    };
    let report = gradient_check(&prob, &opts, &exec)
        .map_err(|e| fail(&cfg.out, "gradient-check", cfg, e.into()))?;
    write_json(&cfg.out.join("gradient_check.json"), &report)?;
    println!("serial max_rel_err={:e}", report.serial_max_rel_err);
    println!("auglag max_rel_err={:e}", report.auglag_max_rel_err);
    println!(
        "max_rel_err={:e} tolerance={:e}",
        report.max_rel_err(),
        report.tolerance
    );
    if report.passed() {
        return Ok(());
    }
    let w = &report.worst;
    Err(CliError::Numerical(format!(
        "gradient check failed: {} cost, point {}, direction {}: finite difference {} vs adjoint {} (rel err {:e})",
        w.cost, w.point, w.direction, w.finite_difference, w.adjoint, w.rel_err
    )))
}

pub fn bench_scaling(cfg: &RunConfig, k_list: &[usize], policy: WorkersPolicy) -> Result<()> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(CliError::Config("k_list entries must be >= 1".into()));
    }
    let result = run_weak_scaling(&cfg.experiment, k_list, policy, &cfg.scaling.options())
        .map_err(|e| fail(&cfg.out, "bench-scaling", cfg, e.into()))?;
    write_atomic(
        &cfg.out.join("scaling.csv"),
        artifacts::scaling_csv(&result.rows).as_bytes(),
    )?;
    write_json(&cfg.out.join("scaling_report.json"), &result)?;
    println!("available_parallelism={}", result.available_parallelism);
    for ((k, rc, rg), row) in result.ratios().into_iter().zip(&result.rows) {
        println!(
            "k={k} workers={}{} cost_ms={:.4} grad_ms={:.4} cost_ratio={rc:.3} grad_ratio={rg:.3}",
            row.workers,
            if row.oversubscribed {
                " (oversubscribed)"
            } else {
                ""
            },
            row.cost_eval_ms,
            row.grad_eval_ms
        );
    }
    if let Some(row) = result.rows.iter().find(|r| !r.matches_sequential) {
        return Err(CliError::Numerical(format!(
            "k={}: parallel evaluation differs from the single-worker result",
            row.k
        )));
    }
    Ok(())
}
