//! Continuous-time model right-hand sides with hand-coded Jacobian and
//! Jacobian-transpose products.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;

/// Autonomous ODE `dx/dt = f(x)` with exact first derivatives.
///
/// The slice-level methods are the hot path used by the time stepper; callers
/// guarantee all slices have length [`Dynamics::dim`].
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn rhs_into(&self, x: &[f64], out: &mut [f64]);
    /// `out = J(x) v`
    fn jacobian_product_into(&self, x: &[f64], v: &[f64], out: &mut [f64]);
    /// `out = J(x)ᵀ w`
    fn jacobian_transpose_product_into(&self, x: &[f64], w: &[f64], out: &mut [f64]);

    fn rhs(&self, x: &Vector) -> Result<Vector> {
        check_dim("model rhs", self.dim(), x.len())?;
        let mut out = Vector::zeros(x.len());
        self.rhs_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn jacobian_product(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        check_dim("jacobian_product state", self.dim(), x.len())?;
        check_dim("jacobian_product direction", self.dim(), v.len())?;
        let mut out = Vector::zeros(x.len());
        self.jacobian_product_into(x.as_slice(), v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn jacobian_transpose_product(&self, x: &Vector, w: &Vector) -> Result<Vector> {
        check_dim("jacobian_transpose_product state", self.dim(), x.len())?;
        check_dim("jacobian_transpose_product direction", self.dim(), w.len())?;
        let mut out = Vector::zeros(x.len());
        self.jacobian_transpose_product_into(x.as_slice(), w.as_slice(), out.as_mut_slice());
        Ok(out)
    }
}

/// Lorenz-96: `dx_k/dt = x_{k-1}(x_{k+1} - x_{k-2}) - x_k + F`, periodic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lorenz96 {
    #[serde(default = "Lorenz96::default_n")]
    pub n: usize,
    #[serde(default = "Lorenz96::default_forcing")]
    pub forcing: f64,
}

impl Default for Lorenz96 {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
        }
    }
}

impl Lorenz96 {
    fn default_n() -> usize {
        40
    }

    fn default_forcing() -> f64 {
        8.0
    }

    pub fn new(n: usize, forcing: f64) -> Result<Self> {
        let m = Self { n, forcing };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidConfig(format!(
                "Lorenz-96 needs n >= 4, got {}",
                self.n
            )));
        }
        if !self.forcing.is_finite() {
            return Err(Error::InvalidConfig(
                "Lorenz-96 forcing must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Periodic neighbour indices `(k-2, k-1, k+1)`.
    #[inline]
    fn neighbours(&self, k: usize) -> (usize, usize, usize) {
        let n = self.n;
        ((k + n - 2) % n, (k + n - 1) % n, (k + 1) % n)
    }
}

impl Dynamics for Lorenz96 {
    fn dim(&self) -> usize {
        self.n
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            let (km2, km1, kp1) = self.neighbours(k);
            out[k] = x[km1] * (x[kp1] - x[km2]) - x[k] + self.forcing;
        }
    }

    fn jacobian_product_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            let (km2, km1, kp1) = self.neighbours(k);
            out[k] = (x[kp1] - x[km2]) * v[km1] + x[km1] * (v[kp1] - v[km2]) - v[k];
        }
    }

    fn jacobian_transpose_product_into(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let jm2 = (j + n - 2) % n;
            let jm1 = (j + n - 1) % n;
            let jp1 = (j + 1) % n;
            let jp2 = (j + 2) % n;
            out[j] = (x[jp2] - x[jm1]) * w[jp1] + x[jm2] * w[jm1] - x[jp1] * w[jp2] - w[j];
        }
    }
}

/// Linear model `dx/dt = A x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearModelRows", into = "LinearModelRows")]
pub struct LinearModel {
    a: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearModelRows {
    matrix: Vec<Vec<f64>>,
}

impl TryFrom<LinearModelRows> for LinearModel {
    type Error = Error;

    fn try_from(rows: LinearModelRows) -> Result<Self> {
        let n = rows.matrix.len();
        if let Some(bad) = rows.matrix.iter().find(|r| r.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "linear model matrix must be square: row of length {} in {n}x{n}",
                bad.len()
            )));
        }
        let flat: Vec<f64> = rows.matrix.into_iter().flatten().collect();
        LinearModel::new(DMatrix::from_row_slice(n, n, &flat))
    }
}

impl From<LinearModel> for LinearModelRows {
    fn from(m: LinearModel) -> Self {
        Self {
            matrix: m
                .a
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "linear model matrix must be square".into(),
            ));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "linear model matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

fn matvec(a: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let n = a.nrows();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        *o = (0..n).map(|j| a[(i, j)] * v[j]).sum();
    }
}

fn matvec_transpose(a: &DMatrix<f64>, w: &[f64], out: &mut [f64]) {
    let n = a.nrows();
    for (j, o) in out.iter_mut().enumerate().take(n) {
        *o = (0..n).map(|i| a[(i, j)] * w[i]).sum();
    }
}

impl Dynamics for LinearModel {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.a, x, out);
    }

    fn jacobian_product_into(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        matvec(&self.a, v, out);
    }

    fn jacobian_transpose_product_into(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        matvec_transpose(&self.a, w, out);
    }
}

/// The models shipped with the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Lorenz96(Lorenz96),
    Linear(LinearModel),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Lorenz96(m) => m.validate(),
            ModelSpec::Linear(_) => Ok(()),
        }
    }
}

impl Dynamics for ModelSpec {
    fn dim(&self) -> usize {
        match self {
            ModelSpec::Lorenz96(m) => m.dim(),
            ModelSpec::Linear(m) => m.dim(),
        }
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::Lorenz96(m) => m.rhs_into(x, out),
            ModelSpec::Linear(m) => m.rhs_into(x, out),
        }
    }

    fn jacobian_product_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::Lorenz96(m) => m.jacobian_product_into(x, v, out),
            ModelSpec::Linear(m) => m.jacobian_product_into(x, v, out),
        }
    }

    fn jacobian_transpose_product_into(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::Lorenz96(m) => m.jacobian_transpose_product_into(x, w, out),
            ModelSpec::Linear(m) => m.jacobian_transpose_product_into(x, w, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;

    fn l96(n: usize) -> Lorenz96 {
        Lorenz96::new(n, 8.0).unwrap()
    }

    /// Scalar oracle written index by index with `rem_euclid`.
    fn l96_component(x: &[f64], k: usize, f: f64) -> f64 {
        let n = x.len() as i64;
        let at = |i: i64| x[i.rem_euclid(n) as usize];
        let k = k as i64;
        at(k - 1) * (at(k + 1) - at(k - 2)) - at(k) + f
    }

    fn assemble_jacobian(m: &dyn Dynamics, x: &Vector) -> DMatrix<f64> {
        let n = m.dim();
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut e = Vector::zeros(n);
            e[c] = 1.0;
            j.set_column(c, &m.jacobian_product(x, &e).unwrap());
        }
        j
    }

    #[test]
    fn lorenz96_fixed_point_and_origin() {
        let m = l96(40);
        let eq = Vector::from_element(40, 8.0);
        assert_eq!(m.rhs(&eq).unwrap(), Vector::zeros(40));
        assert_eq!(
            m.rhs(&Vector::zeros(40)).unwrap(),
            Vector::from_element(40, 8.0)
        );
    }

    #[test]
    fn lorenz96_rhs_matches_scalar_oracle() {
        let m = l96(6);
        let x = SeededRng::new(1).standard_normal_vector(6) * 3.0;
        let f = m.rhs(&x).unwrap();
        for k in 0..6 {
            assert_eq!(f[k], l96_component(x.as_slice(), k, 8.0));
        }
    }

    #[test]
    fn lorenz96_jacobian_central_difference() {
        let m = l96(40);
        let mut rng = SeededRng::new(2);
        let x = rng.standard_normal_vector(40) * 3.0;
        let v = rng.standard_normal_vector(40);
        let eps = 1e-6;
        let fd =
            (m.rhs(&(&x + &v * eps)).unwrap() - m.rhs(&(&x - &v * eps)).unwrap()) / (2.0 * eps);
        let jv = m.jacobian_product(&x, &v).unwrap();
        assert!((&fd - &jv).norm() / jv.norm() <= 1e-7);
        assert_eq!(
            m.jacobian_product(&x, &Vector::zeros(40)).unwrap(),
            Vector::zeros(40)
        );
    }

    #[test]
    fn lorenz96_jacobian_stencil_pattern() {
        let m = l96(5);
        let x = SeededRng::new(3).standard_normal_vector(5) + Vector::from_element(5, 2.0);
        let j = assemble_jacobian(&m, &x);
        for r in 0..5 {
            let nz = j.row(r).iter().filter(|v| **v != 0.0).count();
            assert_eq!(nz, 4, "row {r}: {:?}", j.row(r));
            assert_eq!(j[(r, r)], -1.0);
        }
        let w = SeededRng::new(4).standard_normal_vector(5);
        let dense = j.transpose() * &w;
        let got = m.jacobian_transpose_product(&x, &w).unwrap();
        assert!((dense - got).amax() <= 1e-14);
    }

    #[test]
    fn lorenz96_adjoint_identity() {
        let m = l96(40);
        let mut rng = SeededRng::new(5);
        let x = rng.standard_normal_vector(40) * 4.0;
        let v = rng.standard_normal_vector(40);
        let w = rng.standard_normal_vector(40);
        let lhs = m.jacobian_product(&x, &v).unwrap().dot(&w);
        let rhs = v.dot(&m.jacobian_transpose_product(&x, &w).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        assert_eq!(
            m.jacobian_transpose_product(&x, &Vector::zeros(40))
                .unwrap(),
            Vector::zeros(40)
        );
    }

    #[test]
    fn linear_model_cases() {
        let zero = LinearModel::new(DMatrix::zeros(3, 3)).unwrap();
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(zero.rhs(&x).unwrap(), Vector::zeros(3));
        let id = LinearModel::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(id.rhs(&x).unwrap(), x);

        let mut rng = SeededRng::new(6);
        let a = DMatrix::from_fn(7, 7, |_, _| rng.standard_normal());
        let m = LinearModel::new(a).unwrap();
        let v = rng.standard_normal_vector(7);
        let w = rng.standard_normal_vector(7);
        let lhs = m
            .jacobian_product(&x.clone().resize_vertically(7, 0.0), &v)
            .unwrap()
            .dot(&w);
        let rhs = v.dot(&m.jacobian_transpose_product(&Vector::zeros(7), &w).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn dimension_errors() {
        let m = l96(6);
        assert!(matches!(
            m.rhs(&Vector::zeros(5)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m
            .jacobian_product(&Vector::zeros(6), &Vector::zeros(4))
            .is_err());
        assert!(Lorenz96::new(3, 8.0).is_err());
    }

    #[test]
    fn model_spec_serde() {
        let spec: ModelSpec = serde_json::from_str(r#"{"kind":"lorenz96","n":10}"#).unwrap();
        assert_eq!(
            spec,
            ModelSpec::Lorenz96(Lorenz96 {
                n: 10,
                forcing: 8.0
            })
        );
        let lin: ModelSpec =
            serde_json::from_str(r#"{"kind":"linear","matrix":[[0.0,1.0],[-1.0,0.0]]}"#).unwrap();
        assert_eq!(lin.dim(), 2);
        assert!(
            serde_json::from_str::<ModelSpec>(r#"{"kind":"linear","matrix":[[1.0],[2.0]]}"#)
                .is_err()
        );
    }
}
