//! Dense vectors, symmetric positive-definite covariance operators and the
//! seeded random stream used to perturb twin-experiment data.
//!
//! Diagonal covariances are stored as a variance vector. Dense covariances
//! keep the matrix alongside its Cholesky factor `C = L Lᵀ`, computed once at
//! construction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// Model-space and observation-space vectors.
pub type Vector = DVector<f64>;

pub(crate) fn ensure_finite(context: &'static str, v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// Largest absolute entry, `0` for an empty vector.
pub fn norm_inf(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone)]
enum CovKind {
    Diagonal(Vector),
    Dense {
        matrix: DMatrix<f64>,
        factor: Cholesky<f64, Dyn>,
    },
}

/// Symmetric positive-definite weighting operator (`B0`, `R_k`, `P_k`).
#[derive(Debug, Clone)]
pub struct CovarianceOperator {
    kind: CovKind,
}

impl CovarianceOperator {
    /// Diagonal covariance with the given variances; every variance must be
    /// finite and strictly positive.
    pub fn diagonal(variances: Vector) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::NotPositiveDefinite("empty covariance".into()));
        }
        if let Some((i, v)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::NotPositiveDefinite(format!(
                "variance {i} is {v}, must be finite and > 0"
            )));
        }
        Ok(Self {
            kind: CovKind::Diagonal(variances),
        })
    }

    /// Diagonal covariance with a common standard deviation.
    pub fn scaled_identity(dim: usize, std_dev: f64) -> Result<Self> {
        Self::diagonal(Vector::from_element(dim, std_dev * std_dev))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            kind: CovKind::Diagonal(Vector::from_element(dim, 1.0)),
        }
    }

    /// Dense covariance. The matrix must be symmetric (to 1e-12 relative to
    /// its largest entry) and admit a Cholesky factorization.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::NotPositiveDefinite(format!(
                "matrix is {}x{}, must be square and non-empty",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entry".into()));
        }
        let scale = matrix.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let n = matrix.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let factor = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        Ok(Self {
            kind: CovKind::Dense { matrix, factor },
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            CovKind::Diagonal(v) => v.len(),
            CovKind::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.kind, CovKind::Diagonal(_))
    }

    /// `C v`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim("covariance apply", self.dim(), v.len())?;
        Ok(match &self.kind {
            CovKind::Diagonal(var) => v.component_mul(var),
            CovKind::Dense { matrix, .. } => matrix * v,
        })
    }

    /// `C⁻¹ v`.
    pub fn apply_inverse(&self, v: &Vector) -> Result<Vector> {
        check_dim("covariance apply_inverse", self.dim(), v.len())?;
        Ok(match &self.kind {
            CovKind::Diagonal(var) => v.component_div(var),
            CovKind::Dense { factor, .. } => factor.solve(v),
        })
    }

    /// `vᵀ C⁻¹ v`.
    pub fn quad_form_inv(&self, v: &Vector) -> Result<f64> {
        check_dim("covariance quad_form_inv", self.dim(), v.len())?;
        ensure_finite("quad_form_inv argument", v)?;
        Ok(match &self.kind {
            CovKind::Diagonal(var) => v.iter().zip(var.iter()).map(|(x, s)| x * x / s).sum(),
            CovKind::Dense { factor, .. } => {
                let y = factor
                    .l_dirty()
                    .solve_lower_triangular(v)
                    .expect("Cholesky factor has a positive diagonal");
                y.norm_squared()
            }
        })
    }

    /// `mean + L z` with `C = L Lᵀ` and `z` drawn from `rng`.
    pub fn sample(&self, mean: &Vector, rng: &mut SeededRng) -> Result<Vector> {
        check_dim("covariance sample", self.dim(), mean.len())?;
        let z = rng.standard_normal_vector(self.dim());
        Ok(match &self.kind {
            CovKind::Diagonal(var) => mean + z.zip_map(var, |zi, vi| zi * vi.sqrt()),
            CovKind::Dense { factor, .. } => mean + factor.l() * z,
        })
    }
}

/// Reproducible random stream: ChaCha20 seeded from a 64-bit seed
/// (`ChaCha20Rng::seed_from_u64`), normals drawn with the ziggurat sampler of
/// `rand_distr::StandardNormal`. Both are value-stable across platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for task `index`, seeded with `seed + index`.
    pub fn derive(&self, index: u64) -> Self {
        Self::new(self.seed.wrapping_add(index))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn standard_normal_vector(&mut self, dim: usize) -> Vector {
        Vector::from_iterator(dim, (0..dim).map(|_| self.standard_normal()))
    }
}
