//! Twin experiments and weak-scaling measurements.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::auglag::{parallel_cost, parallel_gradient, AugLagParams};
use crate::auglag::{ExtendedControl, MultiplierSet};
use crate::error::{check_dim, Error, Result};
use crate::exec::Executor;
use crate::lbfgs::OptimizerConfig;
use crate::linalg::{SeededRng, Vector};
use crate::models::{Dynamics, Lorenz96, ModelSpec};
use crate::observations::{
    average_magnitude, boundary_trajectory, generate_observations, relative_diagonal_covariance,
    ObservationOperator,
};
use crate::outer::{initialize, solve_auglag, solve_hybrid, MethodReport, OuterConfig};
use crate::problem::AssimilationProblem;
use crate::serial::{serial_cost, serial_gradient, solve_serial};
use crate::stepper::{propagate, uniform_partition, SubInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Serial,
    Parallel,
    Hybrid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Serial => "serial",
            Method::Parallel => "parallel",
            Method::Hybrid => "hybrid",
        }
    }
}

/// Everything needed to replay one twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinExperimentSpec {
    pub model: ModelSpec,
    /// Number of sub-intervals `N` (one observation time each).
    pub intervals: usize,
    pub steps_per_interval: usize,
    pub step: f64,
    /// RK4 steps applied to the equidistant start to get the reference state.
    pub spinup_steps: usize,
    /// Observation error standard deviation relative to the average reference magnitude.
    pub obs_noise: f64,
    /// Background error standard deviation relative to the average reference magnitude.
    pub background_noise: f64,
    /// Observed component indices; all components when absent.
    pub observed: Option<Vec<usize>>,
    pub seed: u64,
    pub method: Method,
    pub hybrid_parallel_outer: usize,
    pub outer: OuterConfig,
    pub serial: OptimizerConfig,
    /// Also run serial 4D-Var and report each outer iterate's distance to it.
    pub compare_with_serial: bool,
}

impl Default for TwinExperimentSpec {
    fn default() -> Self {
        Self {
            model: ModelSpec::Lorenz96(Lorenz96::default()),
            intervals: 6,
            steps_per_interval: 2,
            step: 0.05,
            spinup_steps: 200,
            obs_noise: 0.05,
            background_noise: 0.08,
            observed: None,
            seed: 42,
            method: Method::Serial,
            hybrid_parallel_outer: 2,
            outer: OuterConfig::default(),
            serial: OptimizerConfig::default(),
            compare_with_serial: false,
        }
    }
}

impl TwinExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.intervals < 1 {
            return Err(Error::InvalidConfig("intervals >= 1 violated".into()));
        }
        if self.steps_per_interval < 1 {
            return Err(Error::InvalidConfig(
                "steps_per_interval >= 1 violated".into(),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig("step > 0 violated".into()));
        }
        if !(self.obs_noise >= 0.0 && self.background_noise >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise percentages must be >= 0".into(),
            ));
        }
        if self.method == Method::Hybrid && self.hybrid_parallel_outer < 1 {
            return Err(Error::InvalidConfig(
                "hybrid_parallel_outer >= 1 violated".into(),
            ));
        }
        if let Some(idx) = &self.observed {
            ObservationOperator::selection(self.model.dim(), idx.clone())?;
        }
        self.outer.validate()?;
        self.serial.validate()
    }

    pub fn partition(&self) -> Result<Vec<SubInterval>> {
        uniform_partition(0.0, self.step, self.steps_per_interval, self.intervals)
    }

    pub fn observation_operator(&self) -> Result<ObservationOperator> {
        let n = self.model.dim();
        match &self.observed {
            None => Ok(ObservationOperator::identity(n)),
            Some(idx) => ObservationOperator::selection(n, idx.clone()),
        }
    }
}

/// Equidistant components from −2 to 2, propagated `spinup_steps` RK4 steps.
pub fn make_reference_initial_condition(
    model: &dyn Dynamics,
    spinup_steps: usize,
    step: f64,
) -> Result<Vector> {
    let n = model.dim();
    let start = if n == 1 {
        Vector::from_element(1, -2.0)
    } else {
        Vector::from_fn(n, |i, _| -2.0 + 4.0 * i as f64 / (n - 1) as f64)
    };
    if spinup_steps == 0 {
        return Ok(start);
    }
    Ok(propagate(model, &start, &SubInterval::new(0.0, step, spinup_steps)?)?.0)
}

/// `sqrt( (1/N) Σ_k ‖a_k − r_k‖² / n )`.
pub fn rmse(analysis: &[Vector], reference: &[Vector]) -> Result<f64> {
    check_dim("rmse trajectory length", reference.len(), analysis.len())?;
    if analysis.is_empty() {
        return Err(Error::InvalidConfig("rmse of empty trajectories".into()));
    }
    let mut acc = 0.0;
    for (a, r) in analysis.iter().zip(reference) {
        check_dim("rmse state", r.len(), a.len())?;
        acc += (a - r).norm_squared() / a.len() as f64;
    }
    Ok((acc / analysis.len() as f64).sqrt())
}

/// Every RK4 step state over the window, `t_0` included, with its time.
pub fn full_trajectory(
    model: &dyn Dynamics,
    x0: &Vector,
    partition: &[SubInterval],
) -> Result<Vec<(f64, Vector)>> {
    let mut out = vec![(partition[0].t_start(), x0.clone())];
    let mut x = x0.clone();
    for iv in partition {
        let (next, traj) = propagate(model, &x, iv)?;
        for (j, s) in traj.states().iter().enumerate().skip(1) {
            out.push((iv.t_start() + j as f64 * iv.step(), s.clone()));
        }
        x = next;
    }
    Ok(out)
}

/// Reference, background and problem built from a spec.
#[derive(Debug, Clone)]
pub struct TwinSetup {
    pub reference_initial: Vector,
    pub reference_magnitude: f64,
    pub problem: AssimilationProblem,
}

pub fn build_twin_problem(spec: &TwinExperimentSpec) -> Result<TwinSetup> {
    spec.validate()?;
    let model = &spec.model;
    let partition = spec.partition()?;
    let x_ref = make_reference_initial_condition(model, spec.spinup_steps, spec.step)?;
    let reference = boundary_trajectory(model, &x_ref, &partition)?;
    let magnitude = average_magnitude(&reference);
    let hop = spec.observation_operator()?;
    let root = SeededRng::new(spec.seed);
    let obs = generate_observations(
        model,
        &x_ref,
        &partition,
        &hop,
        spec.obs_noise,
        &mut root.derive(1),
    )?;
    let b0 = relative_diagonal_covariance(model.dim(), spec.background_noise, magnitude)?;
    let background = if spec.background_noise > 0.0 {
        b0.sample(&x_ref, &mut root.derive(2))?
    } else {
        x_ref.clone()
    };
    let problem = AssimilationProblem::new(model.clone(), partition, hop, obs, background, b0)?;
    Ok(TwinSetup {
        reference_initial: x_ref,
        reference_magnitude: magnitude,
        problem,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub workers: usize,
    pub state_dim: usize,
    pub intervals: usize,
    pub reference_magnitude: f64,
    pub rmse_background: f64,
    pub rmse_analysis: f64,
    pub reference_initial: Vec<f64>,
    pub background: Vec<f64>,
    /// Analysis propagated over the window: `(time, state)` per RK4 step.
    pub analysis_trajectory: Vec<(f64, Vec<f64>)>,
    pub solve: MethodReport,
    /// Serial analysis used for distance tracking, when requested.
    pub serial_analysis: Option<Vec<f64>>,
    pub wall_time_s: f64,
}

pub fn run_twin_experiment(spec: &TwinExperimentSpec, exec: &Executor) -> Result<ExperimentReport> {
    let started = Instant::now();
    let setup = build_twin_problem(spec)?;
    let prob = &setup.problem;
    let serial_reference = if spec.compare_with_serial && spec.method != Method::Serial {
        Some(solve_serial(prob, &spec.serial)?.x())
    } else {
        None
    };
    let solve = match spec.method {
        Method::Serial => MethodReport::from_serial(&solve_serial(prob, &spec.serial)?),
        Method::Parallel => solve_auglag(prob, &spec.outer, exec, serial_reference.as_ref())?,
        Method::Hybrid => solve_hybrid(
            prob,
            &spec.outer,
            &spec.serial,
            spec.hybrid_parallel_outer,
            exec,
        )?,
    };

    let partition = prob.partition();
    let reference = full_trajectory(&spec.model, &setup.reference_initial, partition)?;
    let background = full_trajectory(&spec.model, prob.background(), partition)?;
    let analysis = full_trajectory(&spec.model, &solve.analysis(), partition)?;
    let states = |t: &[(f64, Vector)]| t.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>();
    let reference_states = states(&reference);

    Ok(ExperimentReport {
        method: spec.method,
        seed: spec.seed,
        workers: exec.workers(),
        state_dim: prob.state_dim(),
        intervals: prob.intervals(),
        reference_magnitude: setup.reference_magnitude,
        rmse_background: rmse(&states(&background), &reference_states)?,
        rmse_analysis: rmse(&states(&analysis), &reference_states)?,
        reference_initial: setup.reference_initial.iter().copied().collect(),
        background: prob.background().iter().copied().collect(),
        analysis_trajectory: analysis
            .into_iter()
            .map(|(t, s)| (t, s.iter().copied().collect()))
            .collect(),
        solve,
        serial_analysis: serial_reference.map(|s| s.iter().copied().collect()),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "workers")]
pub enum WorkersPolicy {
    /// One worker per sub-interval.
    EqualToK,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingOptions {
    /// Timed repetitions per measurement, after one discarded warm-up.
    pub repetitions: usize,
    /// Outer iterations run for the `solve_s` column.
    pub solve_outer_iterations: usize,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            solve_outer_iterations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub k: usize,
    pub workers: usize,
    pub oversubscribed: bool,
    /// Median wall time of one cost evaluation.
    pub cost_eval_ms: f64,
    /// Median wall time of one gradient evaluation.
    pub grad_eval_ms: f64,
    pub cost_eval_mean_ms: f64,
    pub grad_eval_mean_ms: f64,
    pub solve_s: f64,
    pub cost_value: f64,
    /// Cost and gradient agree bitwise with a single-worker evaluation.
    pub matches_sequential: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingResult {
    pub available_parallelism: usize,
    pub rows: Vec<ScalingRow>,
}

impl ScalingResult {
    /// `t_k / t_1` for cost and gradient, against the first row.
    pub fn ratios(&self) -> Vec<(usize, f64, f64)> {
        let Some(base) = self.rows.first() else {
            return Vec::new();
        };
        self.rows
            .iter()
            .map(|r| {
                (
                    r.k,
                    r.cost_eval_ms / base.cost_eval_ms,
                    r.grad_eval_ms / base.grad_eval_ms,
                )
            })
            .collect()
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn available_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Cost and gradient timings at the initialization point for each `k`
/// sub-intervals; the window grows with `k`, one observation per sub-interval.
pub fn run_weak_scaling(
    base: &TwinExperimentSpec,
    k_list: &[usize],
    policy: WorkersPolicy,
    opts: &ScalingOptions,
) -> Result<ScalingResult> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::InvalidConfig("k_list entries must be >= 1".into()));
    }
    if opts.repetitions < 1 {
        return Err(Error::InvalidConfig("repetitions >= 1 violated".into()));
    }
    if let WorkersPolicy::Fixed(0) = policy {
        return Err(Error::InvalidConfig("workers >= 1 violated".into()));
    }
    let cores = available_parallelism();
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let spec = TwinExperimentSpec {
            intervals: k,
            ..base.clone()
        };
        let setup = build_twin_problem(&spec)?;
        let prob = &setup.problem;
        let workers = match policy {
            WorkersPolicy::EqualToK => k,
            WorkersPolicy::Fixed(w) => w,
        };
        let exec = Executor::with_workers(workers)?;
        let (ctrl, lam) = initialize(prob)?;
        let ap = AugLagParams::new(spec.outer.mu0, spec.outer.penalty_scaling.build(prob)?)?;

        let (cost_ref, cache_ref) = parallel_cost(prob, &ctrl, &lam, &ap, &Executor::sequential())?;
        let grad_ref =
            parallel_gradient(prob, &ctrl, &lam, &ap, &cache_ref, &Executor::sequential())?;

        let (mut cost_value, mut cache) = parallel_cost(prob, &ctrl, &lam, &ap, &exec)?;
        let mut grad = parallel_gradient(prob, &ctrl, &lam, &ap, &cache, &exec)?;
        let mut cost_times = Vec::with_capacity(opts.repetitions);
        let mut grad_times = Vec::with_capacity(opts.repetitions);
        for _ in 0..opts.repetitions {
            let t = Instant::now();
            let (c, ch) = parallel_cost(prob, &ctrl, &lam, &ap, &exec)?;
            cost_times.push(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            let g = parallel_gradient(prob, &ctrl, &lam, &ap, &ch, &exec)?;
            grad_times.push(t.elapsed().as_secs_f64() * 1e3);
            cost_value = c;
            cache = ch;
            grad = g;
        }
        let _ = &cache;

        let solve_s = if opts.solve_outer_iterations > 0 {
            let cfg = OuterConfig {
                max_outer: opts.solve_outer_iterations,
                ..spec.outer.clone()
            };
            let t = Instant::now();
            solve_auglag(prob, &cfg, &exec, None)?;
            t.elapsed().as_secs_f64()
        } else {
            0.0
        };

        rows.push(ScalingRow {
            k,
            workers,
            oversubscribed: workers > cores,
            cost_eval_ms: median(cost_times.clone()),
            grad_eval_ms: median(grad_times.clone()),
            cost_eval_mean_ms: mean(&cost_times),
            grad_eval_mean_ms: mean(&grad_times),
            solve_s,
            cost_value,
            matches_sequential: cost_value.to_bits() == cost_ref.to_bits() && grad == grad_ref,
        });
    }
    Ok(ScalingResult {
        available_parallelism: cores,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientCheckOptions {
    /// Unit directions per evaluation point.
    pub directions: usize,
    /// Central-difference step length.
    pub eps: f64,
    /// Random off-manifold points for the augmented-Lagrangian check.
    pub auglag_points: usize,
    pub mu: f64,
    /// Boundary-state perturbation in units of the background error.
    pub perturbation: f64,
    pub lambda_scale: f64,
    pub seed: u64,
    /// Pass threshold on the largest relative error.
    pub tolerance: f64,
    /// Multiplies every adjoint gradient; anything but 1 is a negative control.
    #[serde(skip)]
    pub adjoint_scale: f64,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        Self {
            directions: 20,
            eps: 1e-6,
            auglag_points: 10,
            mu: 1.0,
            perturbation: 0.5,
            lambda_scale: 1.0,
            seed: 7,
            tolerance: 1e-5,
            adjoint_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub cost: String,
    pub point: usize,
    pub direction: usize,
    pub finite_difference: f64,
    pub adjoint: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub serial_max_rel_err: f64,
    pub auglag_max_rel_err: f64,
    pub worst: DirectionCheck,
    pub checks: Vec<DirectionCheck>,
}

impl GradientCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.serial_max_rel_err.max(self.auglag_max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn unit_direction(rng: &mut SeededRng, dim: usize) -> Vector {
    let d = rng.standard_normal_vector(dim);
    let norm = d.norm();
    d / norm
}

/// Central differences of the serial and augmented-Lagrangian costs against
/// their adjoint gradients along random unit directions.
pub fn gradient_check(
    prob: &AssimilationProblem,
    opts: &GradientCheckOptions,
    exec: &Executor,
) -> Result<GradientCheckReport> {
    if opts.directions < 1 || !(opts.eps > 0.0) || !(opts.mu > 0.0) {
        return Err(Error::InvalidConfig(
            "gradient check needs directions >= 1, eps > 0, mu > 0".into(),
        ));
    }
    let n = prob.state_dim();
    let eps = opts.eps;
    let root = SeededRng::new(opts.seed);
    let mut checks = Vec::new();

    let x0 = prob.background().clone();
    let (_, ck) = serial_cost(prob, &x0)?;
    let g = serial_gradient(prob, &x0, &ck)? * opts.adjoint_scale;
    let mut rng = root.derive(0);
    for j in 0..opts.directions {
        let d = unit_direction(&mut rng, n);
        let fp = serial_cost(prob, &(&x0 + &d * eps))?.0;
        let fm = serial_cost(prob, &(&x0 - &d * eps))?.0;
        let fd = (fp - fm) / (2.0 * eps);
        let an = g.dot(&d);
        checks.push(DirectionCheck {
            cost: "serial".into(),
            point: 0,
            direction: j,
            finite_difference: fd,
            adjoint: an,
            rel_err: relative_error(fd, an),
        });
    }

    let ap = AugLagParams::new(
        opts.mu,
        crate::auglag::PenaltyScaling::Background.build(prob)?,
    )?;
    let base = boundary_trajectory(prob.model(), prob.background(), prob.partition())?;
    let zero = Vector::zeros(n);
    for point in 0..opts.auglag_points {
        let mut rng = root.derive(1 + point as u64);
        let mut states = Vec::with_capacity(base.len());
        for x in &base {
            let dev = prob.background_covariance().sample(&zero, &mut rng)?;
            states.push(x + dev * opts.perturbation);
        }
        let ctrl = ExtendedControl::new(states)?;
        let lam = MultiplierSet::new(
            (0..prob.intervals())
                .map(|_| rng.standard_normal_vector(n) * opts.lambda_scale)
                .collect(),
        )?;
        let (_, cache) = parallel_cost(prob, &ctrl, &lam, &ap, exec)?;
        let g =
            parallel_gradient(prob, &ctrl, &lam, &ap, &cache, exec)?.to_flat() * opts.adjoint_scale;
        let flat = ctrl.to_flat();
        for j in 0..opts.directions {
            let d = unit_direction(&mut rng, flat.len());
            let plus = ExtendedControl::from_flat(&(&flat + &d * eps), n)?;
            let minus = ExtendedControl::from_flat(&(&flat - &d * eps), n)?;
            let fp = parallel_cost(prob, &plus, &lam, &ap, exec)?.0;
            let fm = parallel_cost(prob, &minus, &lam, &ap, exec)?.0;
            let fd = (fp - fm) / (2.0 * eps);
            let an = g.dot(&d);
            checks.push(DirectionCheck {
                cost: "auglag".into(),
                point,
                direction: j,
                finite_difference: fd,
                adjoint: an,
                rel_err: relative_error(fd, an),
            });
        }
    }

    let max_of = |name: &str| {
        checks
            .iter()
            .filter(|c| c.cost == name)
            .map(|c| c.rel_err)
            .fold(0.0, f64::max)
    };
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned()
        .expect("at least one direction checked");
    Ok(GradientCheckReport {
        eps,
        tolerance: opts.tolerance,
        serial_max_rel_err: max_of("serial"),
        auglag_max_rel_err: max_of("auglag"),
        worst,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_without_spinup_is_equidistant() {
        let m = Lorenz96::default();
        let x = make_reference_initial_condition(&m, 0, 0.05).unwrap();
        assert_eq!(x[0], -2.0);
        assert_eq!(x[39], 2.0);
        assert!((x[1] - x[0] - 4.0 / 39.0).abs() < 1e-15);
    }

    #[test]
    fn spun_up_reference_on_attractor() {
        let m = Lorenz96::default();
        let a = make_reference_initial_condition(&m, 200, 0.05).unwrap();
        let b = make_reference_initial_condition(&m, 200, 0.05).unwrap();
        assert_eq!(a, b);
        assert!(a.amax() <= 20.0, "{}", a.amax());
    }

    #[test]
    fn rmse_cases() {
        let r = vec![Vector::from_element(3, 1.0), Vector::from_element(3, -2.0)];
        assert_eq!(rmse(&r, &r).unwrap(), 0.0);
        let shifted: Vec<Vector> = r.iter().map(|v| v.add_scalar(-0.75)).collect();
        assert!((rmse(&shifted, &r).unwrap() - 0.75).abs() < 1e-15);
        assert!(rmse(&r[..1], &r).is_err());
        assert!(rmse(&[Vector::zeros(2)], &[Vector::zeros(3)]).is_err());
    }

    #[test]
    fn rmse_matches_scalar_accumulation() {
        let mut rng = SeededRng::new(3);
        let a: Vec<Vector> = (0..3).map(|_| rng.standard_normal_vector(4)).collect();
        let b: Vec<Vector> = (0..3).map(|_| rng.standard_normal_vector(4)).collect();
        let mut acc = 0.0;
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                s += (a[k][i] - b[k][i]) * (a[k][i] - b[k][i]);
            }
            acc += s / 4.0;
        }
        let expected = (acc / 3.0).sqrt();
        assert!((rmse(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn perfect_twin_recovers_truth() {
        let spec = TwinExperimentSpec {
            obs_noise: 0.0,
            background_noise: 0.0,
            intervals: 3,
            ..Default::default()
        };
        let r = run_twin_experiment(&spec, &Executor::sequential()).unwrap();
        assert!(r.rmse_analysis <= 1e-8, "{}", r.rmse_analysis);
        assert_eq!(r.rmse_background, 0.0);
    }

    #[test]
    fn full_trajectory_covers_every_step() {
        let m = Lorenz96::default();
        let part = uniform_partition(0.0, 0.05, 10, 3).unwrap();
        let x0 = make_reference_initial_condition(&m, 0, 0.05).unwrap();
        let t = full_trajectory(&m, &x0, &part).unwrap();
        assert_eq!(t.len(), 31);
        assert!((t[30].0 - 1.5).abs() < 1e-12);
        let bounds = boundary_trajectory(&m, &x0, &part).unwrap();
        assert_eq!(t[10].1, bounds[1]);
        assert_eq!(t[30].1, bounds[3]);
    }

    #[test]
    fn spec_validation() {
        let bad = TwinExperimentSpec {
            intervals: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TwinExperimentSpec {
            observed: Some(vec![0, 40]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(run_weak_scaling(
            &TwinExperimentSpec::default(),
            &[0],
            WorkersPolicy::EqualToK,
            &ScalingOptions::default()
        )
        .is_err());
    }

    #[test]
    fn gradient_check_passes_and_detects_corruption() {
        let prob = build_twin_problem(&TwinExperimentSpec::default())
            .unwrap()
            .problem;
        let opts = GradientCheckOptions {
            directions: 5,
            auglag_points: 2,
            ..Default::default()
        };
        let r = gradient_check(&prob, &opts, &Executor::sequential()).unwrap();
        assert_eq!(r.checks.len(), 15);
        assert!(r.max_rel_err() <= 1e-5, "{:?}", r.worst);
        let bad = GradientCheckOptions {
            adjoint_scale: 1.001,
            ..opts
        };
        let r = gradient_check(&prob, &bad, &Executor::sequential()).unwrap();
        assert!(r.max_rel_err() > 1e-4);
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn scaling_single_row() {
        let base = TwinExperimentSpec::default();
        let opts = ScalingOptions {
            repetitions: 2,
            solve_outer_iterations: 0,
        };
        let r = run_weak_scaling(&base, &[1, 2], WorkersPolicy::EqualToK, &opts).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r
            .rows
            .iter()
            .all(|row| row.matches_sequential && row.cost_eval_ms > 0.0));
        assert_eq!(r.ratios()[0].1, 1.0);
    }
}
