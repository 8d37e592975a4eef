//! Augmented-Lagrangian 4D-Var over the extended control `[x_0..x_N]`.
//!
//! ```text
//! L(x, λ, μ) = ½‖x_0 − x_b‖²_{B0⁻¹}
//!            + Σ_k [ ½‖H(x_{k+1}) − y_{k+1}‖²_{R⁻¹} − λ_{k+1}ᵀΔx_{k+1} + (μ/2)‖Δx_{k+1}‖²_{P_{k+1}⁻¹} ]
//! Δx_{k+1} = x_{k+1} − M_{k,k+1}(x_k)
//! ```
//!
//! The forward runs (cost) and adjoint runs (gradient) of the `N`
//! sub-intervals are independent and go through the [`Executor`]. The
//! per-sub-interval results are reduced serially in ascending `k`, so values
//! do not depend on the worker count.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::Executor;
use crate::lbfgs::Objective;
use crate::linalg::{CovarianceOperator, Vector};
use crate::problem::AssimilationProblem;
use crate::serial::blow_up_on;
use crate::stepper::{adjoint_product, propagate, Trajectory};

/// Boundary states `[x_0..x_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedControl {
    states: Vec<Vector>,
}

impl ExtendedControl {
    pub fn new(states: Vec<Vector>) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(Error::InvalidConfig("extended control is empty".into()));
        };
        let n = first.len();
        for s in &states {
            check_dim("extended control block", n, s.len())?;
        }
        Ok(Self { states })
    }

    /// Split a flat vector of length `(N + 1) n` in boundary order.
    pub fn from_flat(flat: &Vector, n: usize) -> Result<Self> {
        if n == 0 || !flat.len().is_multiple_of(n) || flat.len() < n {
            return Err(Error::DimensionMismatch {
                context: "extended control flat length",
                expected: n,
                actual: flat.len(),
            });
        }
        Self::new(
            flat.as_slice()
                .chunks(n)
                .map(Vector::from_column_slice)
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vector {
        let n = self.block_dim();
        let mut out = Vector::zeros(n * self.states.len());
        for (k, s) in self.states.iter().enumerate() {
            out.rows_mut(k * n, n).copy_from(s);
        }
        out
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn block_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Number of boundaries, `N + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Multipliers `[λ_1..λ_N]`, one per continuity constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSet {
    lambdas: Vec<Vector>,
}

impl MultiplierSet {
    pub fn new(lambdas: Vec<Vector>) -> Result<Self> {
        if let Some(first) = lambdas.first() {
            for l in &lambdas {
                check_dim("multiplier block", first.len(), l.len())?;
            }
        }
        Ok(Self { lambdas })
    }

    pub fn zeros(n: usize, count: usize) -> Self {
        Self {
            lambdas: vec![Vector::zeros(n); count],
        }
    }

    /// `λ_k` for `k` in `1..=N`.
    pub fn get(&self, k: usize) -> &Vector {
        &self.lambdas[k - 1]
    }

    pub fn as_slice(&self) -> &[Vector] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `Σ_k α_k λ_k` blockwise: `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        Self {
            lambdas: self
                .lambdas
                .iter()
                .zip(&other.lambdas)
                .map(|(x, y)| x * a + y * b)
                .collect(),
        }
    }
}

/// Choice of the penalty scaling matrices `P_1..P_N`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyScaling {
    /// `P_k = B0`.
    #[default]
    Background,
    Identity,
    Diagonal {
        variances: Vec<f64>,
    },
}

impl PenaltyScaling {
    pub fn build(&self, prob: &AssimilationProblem) -> Result<Vec<CovarianceOperator>> {
        let n = prob.state_dim();
        let p = match self {
            PenaltyScaling::Background => prob.background_covariance().clone(),
            PenaltyScaling::Identity => CovarianceOperator::identity(n),
            PenaltyScaling::Diagonal { variances } => {
                check_dim("penalty variances", n, variances.len())?;
                CovarianceOperator::diagonal(Vector::from_column_slice(variances))?
            }
        };
        Ok(vec![p; prob.intervals()])
    }
}

/// Penalty `μ > 0` and scaling matrices `P_1..P_N`.
#[derive(Debug, Clone)]
pub struct AugLagParams {
    mu: f64,
    p: Vec<CovarianceOperator>,
}

impl AugLagParams {
    pub fn new(mu: f64, p: Vec<CovarianceOperator>) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("mu must be > 0, got {mu}")));
        }
        Ok(Self { mu, p })
    }

    /// Test hook: `μ = 0` is allowed here to isolate the observation terms.
    pub fn new_unchecked(mu: f64, p: Vec<CovarianceOperator>) -> Self {
        Self { mu, p }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// `P_k` for `k` in `1..=N`.
    pub fn p(&self, k: usize) -> &CovarianceOperator {
        &self.p[k - 1]
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        Self::new(mu, self.p.clone())
    }
}

/// Per-sub-interval forward results from [`parallel_cost`].
#[derive(Debug, Clone)]
pub struct MismatchCache {
    point: Vec<Vector>,
    dx: Vec<Vector>,
    dy: Vec<Option<Vector>>,
    trajectories: Vec<Trajectory>,
}

impl MismatchCache {
    /// `Δx_k` for `k = 1..N` (index `k - 1`).
    pub fn dx(&self) -> &[Vector] {
        &self.dx
    }

    /// `max_k ‖Δx_k‖₂`.
    pub fn constraint_violation(&self) -> f64 {
        self.dx.iter().map(|d| d.norm()).fold(0.0, f64::max)
    }

    /// `M_{k-1,k}(x_{k-1})` for `k = 1..N`: the propagated segment ends.
    pub fn propagated(&self) -> Vec<Vector> {
        self.trajectories
            .iter()
            .map(|t| t.final_state().clone())
            .collect()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    fn matches(&self, ctrl: &ExtendedControl) -> bool {
        self.point.as_slice() == ctrl.states()
    }
}

fn check_shapes(
    prob: &AssimilationProblem,
    ctrl: &ExtendedControl,
    lam: &MultiplierSet,
    ap: &AugLagParams,
) -> Result<()> {
    let n_int = prob.intervals();
    check_dim("extended control boundaries", n_int + 1, ctrl.len())?;
    check_dim("extended control state", prob.state_dim(), ctrl.block_dim())?;
    check_dim("multiplier count", n_int, lam.len())?;
    check_dim("penalty scaling count", n_int, ap.p.len())?;
    for (l, p) in lam.lambdas.iter().zip(&ap.p) {
        check_dim("multiplier", prob.state_dim(), l.len())?;
        check_dim("penalty scaling", prob.state_dim(), p.dim())?;
    }
    Ok(())
}

struct ForwardPiece {
    dx: Vector,
    dy: Option<Vector>,
    term: f64,
    trajectory: Trajectory,
}

/// Augmented-Lagrangian value at `ctrl`, plus the mismatch cache used by
/// [`parallel_gradient`].
pub fn parallel_cost(
    prob: &AssimilationProblem,
    ctrl: &ExtendedControl,
    lam: &MultiplierSet,
    ap: &AugLagParams,
    exec: &Executor,
) -> Result<(f64, MismatchCache)> {
    check_shapes(prob, ctrl, lam, ap)?;
    let model = prob.model();
    let xs = ctrl.states();
    let pieces = exec.try_map(prob.intervals(), |k| {
        let (end, trajectory) =
            propagate(model, &xs[k], &prob.partition()[k]).map_err(blow_up_on(k))?;
        let dx = &xs[k + 1] - end;
        let (dy, obs_term) = match prob.innovation(k + 1, &xs[k + 1])? {
            Some((dy, q)) => (Some(dy), q),
            None => (None, 0.0),
        };
        let lam_term = lam.get(k + 1).dot(&dx);
        let penalty = 0.5 * ap.mu * ap.p(k + 1).quad_form_inv(&dx)?;
        Ok(ForwardPiece {
            term: obs_term - lam_term + penalty,
            dx,
            dy,
            trajectory,
        })
    })?;

    let mut cost = 0.0;
    let mut cache = MismatchCache {
        point: xs.to_vec(),
        dx: Vec::with_capacity(pieces.len()),
        dy: Vec::with_capacity(pieces.len()),
        trajectories: Vec::with_capacity(pieces.len()),
    };
    for piece in pieces {
        cost += piece.term;
        cache.dx.push(piece.dx);
        cache.dy.push(piece.dy);
        cache.trajectories.push(piece.trajectory);
    }
    cost += prob.background_term(&xs[0])?;
    Ok((cost, cache))
}

/// Gradient of the augmented Lagrangian with respect to every boundary state.
///
/// With `b_k = μ P_k⁻¹ Δx_k − λ_k`, `d_k = Hᵀ R_k⁻¹ Δy_k` and
/// `a_k = M_{k,k+1}ᵀ b_{k+1}`:
/// `∇_{x_0} = B0⁻¹(x_0 − x_b) − a_0`, `∇_{x_k} = b_k + d_k − a_k`,
/// `∇_{x_N} = b_N + d_N`.
pub fn parallel_gradient(
    prob: &AssimilationProblem,
    ctrl: &ExtendedControl,
    lam: &MultiplierSet,
    ap: &AugLagParams,
    cache: &MismatchCache,
    exec: &Executor,
) -> Result<ExtendedControl> {
    check_shapes(prob, ctrl, lam, ap)?;
    if !cache.matches(ctrl) {
        return Err(Error::CheckpointMismatch(
            "augmented-Lagrangian cost evaluation",
        ));
    }
    let model = prob.model();
    let n = prob.state_dim();
    // (b_{k+1}, d_{k+1}, a_k) per sub-interval k
    let pieces = exec.try_map(prob.intervals(), |k| {
        let b = ap.p(k + 1).apply_inverse(&cache.dx[k])? * ap.mu - lam.get(k + 1);
        let d = match &cache.dy[k] {
            Some(dy) => prob.weighted_innovation_adjoint(k + 1, dy)?,
            None => Vector::zeros(n),
        };
        let a = adjoint_product(model, &cache.trajectories[k], &b, &prob.partition()[k])?;
        Ok((b, d, a))
    })?;

    let xs = ctrl.states();
    let mut grad = Vec::with_capacity(xs.len());
    grad.push(
        prob.background_covariance()
            .apply_inverse(&(&xs[0] - prob.background()))?
            - &pieces[0].2,
    );
    for k in 1..prob.intervals() {
        let (b, d, _) = &pieces[k - 1];
        grad.push(b + d - &pieces[k].2);
    }
    let (b, d, _) = &pieces[prob.intervals() - 1];
    grad.push(b + d);
    ExtendedControl::new(grad)
}

/// [`Objective`] over the flattened extended control for fixed `(λ, μ)`.
pub struct AugLagObjective<'a> {
    prob: &'a AssimilationProblem,
    lam: &'a MultiplierSet,
    ap: &'a AugLagParams,
    exec: &'a Executor,
    last: Option<(ExtendedControl, MismatchCache)>,
}

impl<'a> AugLagObjective<'a> {
    pub fn new(
        prob: &'a AssimilationProblem,
        lam: &'a MultiplierSet,
        ap: &'a AugLagParams,
        exec: &'a Executor,
    ) -> Self {
        Self {
            prob,
            lam,
            ap,
            exec,
            last: None,
        }
    }

    /// Cache of the most recent evaluation, if it was taken at `x`.
    pub fn cache_at(&self, x: &Vector) -> Option<&MismatchCache> {
        let (ctrl, cache) = self.last.as_ref()?;
        (ctrl.to_flat() == *x).then_some(cache)
    }

    /// Cache of the most recent finite cost evaluation.
    pub fn last_cache(&self) -> Option<&MismatchCache> {
        self.last.as_ref().map(|(_, c)| c)
    }
}

impl Objective for AugLagObjective<'_> {
    fn dim(&self) -> usize {
        self.prob.state_dim() * (self.prob.intervals() + 1)
    }

    fn value(&mut self, x: &Vector) -> Result<f64> {
        let ctrl = ExtendedControl::from_flat(x, self.prob.state_dim())?;
        match parallel_cost(self.prob, &ctrl, self.lam, self.ap, self.exec) {
            Ok((f, cache)) => {
                self.last = Some((ctrl, cache));
                Ok(f)
            }
            Err(Error::SubIntervalBlowUp { .. }) => {
                self.last = None;
                Ok(f64::INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    fn gradient(&mut self, x: &Vector) -> Result<Vector> {
        let ctrl = ExtendedControl::from_flat(x, self.prob.state_dim())?;
        if self.last.as_ref().map(|(c, _)| c) != Some(&ctrl) {
            let (_, cache) = parallel_cost(self.prob, &ctrl, self.lam, self.ap, self.exec)?;
            self.last = Some((ctrl.clone(), cache));
        }
        let cache = &self.last.as_ref().unwrap().1;
        Ok(parallel_gradient(self.prob, &ctrl, self.lam, self.ap, cache, self.exec)?.to_flat())
    }

    fn diagnostic(&self) -> Option<f64> {
        self.last_cache().map(MismatchCache::constraint_violation)
    }
}
