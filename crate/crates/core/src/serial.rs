//! Traditional strong-constraint 4D-Var: the cost over the initial state,
//! its gradient by one backward adjoint sweep, and an L-BFGS driver.

use crate::error::{check_dim, Error, Result};
use crate::lbfgs::{minimize, Objective, OptimizerConfig, SolveReport};
use crate::linalg::Vector;
use crate::problem::AssimilationProblem;
use crate::stepper::{adjoint_product, propagate, Trajectory};

/// Forward sweep retained by [`serial_cost`] for [`serial_gradient`].
#[derive(Debug, Clone)]
pub struct SerialCheckpoints {
    x0: Vector,
    trajectories: Vec<Trajectory>,
    innovations: Vec<Option<Vector>>,
}

impl SerialCheckpoints {
    /// Boundary states `x_0..x_N`.
    pub fn boundary_states(&self) -> Vec<Vector> {
        std::iter::once(self.x0.clone())
            .chain(self.trajectories.iter().map(|t| t.final_state().clone()))
            .collect()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
}

pub(crate) fn blow_up_on(index: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::SubIntervalBlowUp {
        index,
        source: Box::new(e),
    }
}

/// `J(x0) = ½‖x0 − xb‖²_{B0⁻¹} + ½ Σ_k ‖H(x_k) − y_k‖²_{R_k⁻¹}`, with `x_k`
/// propagated sequentially from `x0`.
///
/// Observation terms are summed in ascending `k`, then the background term is
/// added.
pub fn serial_cost(prob: &AssimilationProblem, x0: &Vector) -> Result<(f64, SerialCheckpoints)> {
    check_dim("serial_cost", prob.state_dim(), x0.len())?;
    let model = prob.model();
    let mut trajectories = Vec::with_capacity(prob.intervals());
    let mut innovations = Vec::with_capacity(prob.intervals());
    let mut cost = 0.0;
    let mut x = x0.clone();
    for (k, iv) in prob.partition().iter().enumerate() {
        let (next, traj) = propagate(model, &x, iv).map_err(blow_up_on(k))?;
        match prob.innovation(k + 1, &next)? {
            Some((dy, q)) => {
                cost += q;
                innovations.push(Some(dy));
            }
            None => innovations.push(None),
        }
        trajectories.push(traj);
        x = next;
    }
    cost += prob.background_term(x0)?;
    Ok((
        cost,
        SerialCheckpoints {
            x0: x0.clone(),
            trajectories,
            innovations,
        },
    ))
}

/// `∇J(x0) = B0⁻¹(x0 − xb) + Σ_k M_{0,k}ᵀ Hᵀ R_k⁻¹ (H(x_k) − y_k)`.
pub fn serial_gradient(
    prob: &AssimilationProblem,
    x0: &Vector,
    ckpt: &SerialCheckpoints,
) -> Result<Vector> {
    check_dim("serial_gradient", prob.state_dim(), x0.len())?;
    if ckpt.x0 != *x0 || ckpt.trajectories.len() != prob.intervals() {
        return Err(Error::CheckpointMismatch("serial cost evaluation"));
    }
    let model = prob.model();
    let mut adj = Vector::zeros(prob.state_dim());
    for k in (0..prob.intervals()).rev() {
        if let Some(dy) = &ckpt.innovations[k] {
            adj += prob.weighted_innovation_adjoint(k + 1, dy)?;
        }
        adj = adjoint_product(model, &ckpt.trajectories[k], &adj, &prob.partition()[k])?;
    }
    let bg = prob
        .background_covariance()
        .apply_inverse(&(x0 - prob.background()))?;
    Ok(bg + adj)
}

/// [`Objective`] over `x0` with forward-sweep reuse between cost and gradient.
pub struct SerialObjective<'a> {
    prob: &'a AssimilationProblem,
    last: Option<SerialCheckpoints>,
}

impl<'a> SerialObjective<'a> {
    pub fn new(prob: &'a AssimilationProblem) -> Self {
        Self { prob, last: None }
    }
}

impl Objective for SerialObjective<'_> {
    fn dim(&self) -> usize {
        self.prob.state_dim()
    }

    fn value(&mut self, x: &Vector) -> Result<f64> {
        match serial_cost(self.prob, x) {
            Ok((f, ck)) => {
                self.last = Some(ck);
                Ok(f)
            }
            // Trial points that blow the model up are rejected by the line search.
            Err(Error::SubIntervalBlowUp { .. }) => {
                self.last = None;
                Ok(f64::INFINITY)
            }
            Err(e) => Err(e),
        }
    }

    fn gradient(&mut self, x: &Vector) -> Result<Vector> {
        if self.last.as_ref().map(|c| &c.x0) != Some(x) {
            let (_, ck) = serial_cost(self.prob, x)?;
            self.last = Some(ck);
        }
        serial_gradient(self.prob, x, self.last.as_ref().unwrap())
    }

    fn diagnostic(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Serial 4D-Var from the background.
pub fn solve_serial(prob: &AssimilationProblem, opts: &OptimizerConfig) -> Result<SolveReport> {
    solve_serial_from(prob, prob.background(), opts)
}

/// Serial 4D-Var from an arbitrary first guess.
pub fn solve_serial_from(
    prob: &AssimilationProblem,
    x_init: &Vector,
    opts: &OptimizerConfig,
) -> Result<SolveReport> {
    minimize(&mut SerialObjective::new(prob), x_init, opts)
}
