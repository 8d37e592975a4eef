//! Linear observation operators and synthetic twin-experiment observations.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{CovarianceOperator, SeededRng, Vector};
use crate::models::Dynamics;
use crate::stepper::{propagate, SubInterval};

/// Observation operator `H`: either the identity or a gather of components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationOperator {
    Identity { n: usize },
    Selection { n: usize, indices: Vec<usize> },
}

impl ObservationOperator {
    pub fn identity(n: usize) -> Self {
        Self::Identity { n }
    }

    pub fn selection(n: usize, indices: Vec<usize>) -> Result<Self> {
        let op = Self::Selection { n, indices };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Selection { n, indices } = self {
            if indices.is_empty() {
                return Err(Error::InvalidConfig(
                    "selection observes no components".into(),
                ));
            }
            let mut seen = vec![false; *n];
            for &i in indices {
                if i >= *n {
                    return Err(Error::InvalidConfig(format!(
                        "observed index {i} out of range for state dimension {n}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidConfig(format!("observed index {i} repeated")));
                }
            }
        }
        Ok(())
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        match self {
            Self::Identity { n } | Self::Selection { n, .. } => *n,
        }
    }

    /// Observation dimension.
    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Identity { n } => *n,
            Self::Selection { indices, .. } => indices.len(),
        }
    }

    pub fn observe(&self, x: &Vector) -> Result<Vector> {
        check_dim("observe", self.state_dim(), x.len())?;
        Ok(match self {
            Self::Identity { .. } => x.clone(),
            Self::Selection { indices, .. } => {
                Vector::from_iterator(indices.len(), indices.iter().map(|&i| x[i]))
            }
        })
    }

    /// `Hᵀ w`: scatter into a zero state vector.
    pub fn observe_adjoint(&self, w: &Vector) -> Result<Vector> {
        check_dim("observe_adjoint", self.obs_dim(), w.len())?;
        Ok(match self {
            Self::Identity { .. } => w.clone(),
            Self::Selection { n, indices } => {
                let mut out = Vector::zeros(*n);
                for (&i, wi) in indices.iter().zip(w.iter()) {
                    out[i] = *wi;
                }
                out
            }
        })
    }
}

/// Observation `y_k` at boundary `t_k` with error covariance `R_k`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub boundary: usize,
    pub value: Vector,
    pub covariance: CovarianceOperator,
}

/// Observations at sub-interval boundaries `t_1..t_N`, sorted by boundary.
///
/// Generated sets carry one observation per boundary; hand-built sets may
/// leave boundaries unobserved.
#[derive(Debug, Clone, Default)]
pub struct ObservationSet {
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(mut entries: Vec<Observation>) -> Result<Self> {
        entries.sort_by_key(|o| o.boundary);
        for pair in entries.windows(2) {
            if pair[0].boundary == pair[1].boundary {
                return Err(Error::InvalidConfig(format!(
                    "two observations at boundary {}",
                    pair[0].boundary
                )));
            }
        }
        for o in &entries {
            if o.boundary == 0 {
                return Err(Error::InvalidConfig(
                    "observations start at boundary 1".into(),
                ));
            }
            check_dim("observation covariance", o.value.len(), o.covariance.dim())?;
            crate::linalg::ensure_finite("observation value", &o.value)?;
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Observation at boundary `k` (1-based), if any.
    pub fn at(&self, boundary: usize) -> Option<&Observation> {
        self.entries
            .binary_search_by_key(&boundary, |o| o.boundary)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Boundary states `x_0..x_N` of the trajectory started at `x0`.
pub fn boundary_trajectory(
    model: &dyn Dynamics,
    x0: &Vector,
    partition: &[SubInterval],
) -> Result<Vec<Vector>> {
    let mut out = Vec::with_capacity(partition.len() + 1);
    out.push(x0.clone());
    for iv in partition {
        let (next, _) = propagate(model, out.last().unwrap(), iv)?;
        out.push(next);
    }
    Ok(out)
}

/// Mean of `|x_i|` over every component of every state given.
pub fn average_magnitude(states: &[Vector]) -> f64 {
    let count: usize = states.iter().map(|s| s.len()).sum();
    if count == 0 {
        return 0.0;
    }
    states
        .iter()
        .flat_map(|s| s.iter())
        .map(|x| x.abs())
        .sum::<f64>()
        / count as f64
}

/// Relative noise level used for the weights when the requested perturbation
/// is zero, so that `R_k` remains positive definite.
pub const ZERO_NOISE_WEIGHT_FRACTION: f64 = 0.01;

/// Diagonal covariance with standard deviation `fraction * magnitude`
/// (falling back to [`ZERO_NOISE_WEIGHT_FRACTION`] when `fraction == 0`).
pub fn relative_diagonal_covariance(
    dim: usize,
    fraction: f64,
    magnitude: f64,
) -> Result<CovarianceOperator> {
    let frac = if fraction > 0.0 {
        fraction
    } else {
        ZERO_NOISE_WEIGHT_FRACTION
    };
    let scale = if magnitude > 0.0 { magnitude } else { 1.0 };
    CovarianceOperator::scaled_identity(dim, frac * scale)
}

/// Twin-experiment observations from the reference trajectory of `x_ref0`.
///
/// `y_k = H(x_k) + η_k`, `η_k ~ N(0, R_k)`, with `R_k` diagonal and standard
/// deviation `noise_fraction` times the average magnitude of the reference
/// boundary states `x_0..x_N`.
pub fn generate_observations(
    model: &dyn Dynamics,
    x_ref0: &Vector,
    partition: &[SubInterval],
    hop: &ObservationOperator,
    noise_fraction: f64,
    rng: &mut SeededRng,
) -> Result<ObservationSet> {
    if !(noise_fraction >= 0.0 && noise_fraction.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "observation noise fraction must be >= 0, got {noise_fraction}"
        )));
    }
    check_dim("generate_observations", hop.state_dim(), x_ref0.len())?;
    let reference = boundary_trajectory(model, x_ref0, partition)?;
    let magnitude = average_magnitude(&reference);
    let m = hop.obs_dim();
    let cov = relative_diagonal_covariance(m, noise_fraction, magnitude)?;
    let perturb = CovarianceOperator::scaled_identity(m, noise_fraction * magnitude).ok();

    let mut entries = Vec::with_capacity(partition.len());
    for (k, state) in reference.iter().enumerate().skip(1) {
        let clean = hop.observe(state)?;
        let value = match &perturb {
            Some(c) if noise_fraction > 0.0 => c.sample(&clean, rng)?,
            _ => clean,
        };
        entries.push(Observation {
            boundary: k,
            value,
            covariance: cov.clone(),
        });
    }
    ObservationSet::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Lorenz96;
    use crate::stepper::uniform_partition;
    use nalgebra::dvector;

    #[test]
    fn observe_identity_and_selection() {
        let x = dvector![5.0, 6.0, 7.0];
        assert_eq!(ObservationOperator::identity(3).observe(&x).unwrap(), x);
        let sel = ObservationOperator::selection(3, vec![0, 2]).unwrap();
        assert_eq!(sel.observe(&x).unwrap(), dvector![5.0, 7.0]);
        assert_eq!(
            sel.observe_adjoint(&dvector![5.0, 7.0]).unwrap(),
            dvector![5.0, 0.0, 7.0]
        );
        let w = dvector![1.0, 2.0, 3.0];
        assert_eq!(
            ObservationOperator::identity(3)
                .observe_adjoint(&w)
                .unwrap(),
            w
        );
    }

    #[test]
    fn selection_validation() {
        assert!(ObservationOperator::selection(3, vec![0, 3]).is_err());
        assert!(ObservationOperator::selection(3, vec![1, 1]).is_err());
        assert!(ObservationOperator::selection(3, vec![]).is_err());
        let sel = ObservationOperator::selection(3, vec![2]).unwrap();
        assert!(matches!(
            sel.observe(&dvector![1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(sel.observe_adjoint(&dvector![1.0, 2.0]).is_err());
    }

    #[test]
    fn transpose_pair_is_exact() {
        let mut rng = SeededRng::new(3);
        for trial in 0..20 {
            let n = 12;
            let mut idx: Vec<usize> = (0..n).filter(|i| (i * 7 + trial) % 3 != 0).collect();
            idx.reverse();
            let op = ObservationOperator::selection(n, idx).unwrap();
            let x = rng.standard_normal_vector(n);
            let w = rng.standard_normal_vector(op.obs_dim());
            let lhs = op.observe(&x).unwrap().dot(&w);
            let rhs = x.dot(&op.observe_adjoint(&w).unwrap());
            assert!((lhs - rhs).abs() <= 1e-15 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn zero_noise_reproduces_reference() {
        let m = Lorenz96::default();
        let x0 = SeededRng::new(1).standard_normal_vector(40) + Vector::from_element(40, 3.0);
        let part = uniform_partition(0.0, 0.05, 10, 4).unwrap();
        let hop = ObservationOperator::identity(40);
        let obs = generate_observations(&m, &x0, &part, &hop, 0.0, &mut SeededRng::new(1)).unwrap();
        let refs = boundary_trajectory(&m, &x0, &part).unwrap();
        assert_eq!(obs.len(), 4);
        for o in obs.entries() {
            assert_eq!(o.value, refs[o.boundary]);
        }
        assert!(obs.at(0).is_none());
        assert!(obs.at(4).is_some());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = Lorenz96::default();
        let x0 = Vector::from_fn(40, |i, _| (i as f64 * 0.37).sin() * 4.0);
        let part = uniform_partition(0.0, 0.05, 10, 3).unwrap();
        let hop = ObservationOperator::selection(40, (0..40).step_by(2).collect()).unwrap();
        let a = generate_observations(&m, &x0, &part, &hop, 0.05, &mut SeededRng::new(77)).unwrap();
        let b = generate_observations(&m, &x0, &part, &hop, 0.05, &mut SeededRng::new(77)).unwrap();
        for (oa, ob) in a.entries().iter().zip(b.entries()) {
            assert_eq!(oa.value, ob.value);
        }
    }

    #[test]
    fn noise_level_monte_carlo() {
        let m = Lorenz96::default();
        let x0 = Vector::from_fn(40, |i, _| (i as f64 * 0.61).cos() * 5.0);
        let part = uniform_partition(0.0, 0.05, 2, 25).unwrap();
        let hop = ObservationOperator::identity(40);
        let obs =
            generate_observations(&m, &x0, &part, &hop, 0.05, &mut SeededRng::new(5)).unwrap();
        let refs = boundary_trajectory(&m, &x0, &part).unwrap();
        let prescribed = 0.05 * average_magnitude(&refs);
        let resid: Vec<f64> = obs
            .entries()
            .iter()
            .flat_map(|o| {
                (&o.value - &refs[o.boundary])
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(resid.len(), 1000);
        let std = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!(
            (std - prescribed).abs() <= 0.1 * prescribed,
            "{std} vs {prescribed}"
        );
    }

    #[test]
    fn rejects_negative_noise() {
        let m = Lorenz96::default();
        let part = uniform_partition(0.0, 0.05, 1, 1).unwrap();
        let r = generate_observations(
            &m,
            &Vector::zeros(40),
            &part,
            &ObservationOperator::identity(40),
            -0.1,
            &mut SeededRng::new(0),
        );
        assert!(r.is_err());
    }
}
