use crate::error::{check_dim, Error, Result};
use crate::linalg::{CovarianceOperator, Vector};
use crate::models::{Dynamics, ModelSpec};
use crate::observations::{ObservationOperator, ObservationSet};
use crate::stepper::SubInterval;

/// One strong-constraint 4D-Var instance: model, window partition,
/// observations at the partition boundaries, and the background.
#[derive(Debug, Clone)]
pub struct AssimilationProblem {
    model: ModelSpec,
    partition: Vec<SubInterval>,
    hop: ObservationOperator,
    obs: ObservationSet,
    background: Vector,
    b0: CovarianceOperator,
}

impl AssimilationProblem {
    pub fn new(
        model: ModelSpec,
        partition: Vec<SubInterval>,
        hop: ObservationOperator,
        obs: ObservationSet,
        background: Vector,
        b0: CovarianceOperator,
    ) -> Result<Self> {
        model.validate()?;
        hop.validate()?;
        let n = model.dim();
        if partition.is_empty() {
            return Err(Error::InvalidConfig("partition is empty".into()));
        }
        for pair in partition.windows(2) {
            let gap = (pair[1].t_start() - pair[0].t_end()).abs();
            if gap > 1e-9 * pair[0].t_end().abs().max(1.0) {
                return Err(Error::InvalidConfig(format!(
                    "partition not contiguous: {} then {}",
                    pair[0].t_end(),
                    pair[1].t_start()
                )));
            }
        }
        check_dim("observation operator state", n, hop.state_dim())?;
        check_dim("background", n, background.len())?;
        check_dim("B0", n, b0.dim())?;
        crate::linalg::ensure_finite("background", &background)?;
        for o in obs.entries() {
            if o.boundary > partition.len() {
                return Err(Error::InvalidConfig(format!(
                    "observation at boundary {} beyond the {} sub-intervals",
                    o.boundary,
                    partition.len()
                )));
            }
            check_dim("observation", hop.obs_dim(), o.value.len())?;
        }
        Ok(Self {
            model,
            partition,
            hop,
            obs,
            background,
            b0,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn partition(&self) -> &[SubInterval] {
        &self.partition
    }

    /// Number of sub-intervals `N`.
    pub fn intervals(&self) -> usize {
        self.partition.len()
    }

    pub fn state_dim(&self) -> usize {
        self.model.dim()
    }

    pub fn observation_operator(&self) -> &ObservationOperator {
        &self.hop
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn background(&self) -> &Vector {
        &self.background
    }

    pub fn background_covariance(&self) -> &CovarianceOperator {
        &self.b0
    }

    /// Same problem with a different observation set.
    pub fn with_observations(&self, obs: ObservationSet) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.partition.clone(),
            self.hop.clone(),
            obs,
            self.background.clone(),
            self.b0.clone(),
        )
    }

    /// `½ (x0 - xb)ᵀ B0⁻¹ (x0 - xb)`.
    pub(crate) fn background_term(&self, x0: &Vector) -> Result<f64> {
        Ok(0.5 * self.b0.quad_form_inv(&(x0 - &self.background))?)
    }

    /// Innovation `H(x_k) - y_k` and its weighted half-norm, if boundary `k`
    /// is observed.
    pub(crate) fn innovation(&self, boundary: usize, xk: &Vector) -> Result<Option<(Vector, f64)>> {
        match self.obs.at(boundary) {
            None => Ok(None),
            Some(o) => {
                let dy = self.hop.observe(xk)? - &o.value;
                let q = 0.5 * o.covariance.quad_form_inv(&dy)?;
                Ok(Some((dy, q)))
            }
        }
    }

    /// `Hᵀ R_k⁻¹ Δy_k`.
    pub(crate) fn weighted_innovation_adjoint(
        &self,
        boundary: usize,
        dy: &Vector,
    ) -> Result<Vector> {
        let o = self
            .obs
            .at(boundary)
            .ok_or(Error::CheckpointMismatch("observation boundary"))?;
        self.hop.observe_adjoint(&o.covariance.apply_inverse(dy)?)
    }
}
