//! Fixed-step classical RK4 propagation over a sub-interval, with the exact
//! tangent-linear and adjoint of the discrete map.
//!
//! The forward sweep stores every step endpoint and the four stage states
//! `Y1 = x`, `Y2 = x + h/2 k1`, `Y3 = x + h/2 k2`, `Y4 = x + h k3`. The
//! tangent-linear and adjoint products linearize about those stored stages,
//! so the adjoint is the transpose of the tangent-linear to round-off.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;
use crate::models::Dynamics;

/// One sub-interval `[t_start, t_start + steps * h]` of the assimilation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubInterval {
    t_start: f64,
    step: f64,
    steps: usize,
}

impl SubInterval {
    pub fn new(t_start: f64, step: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig(
                "sub-interval needs at least one step".into(),
            ));
        }
        if !(step > 0.0 && step.is_finite() && t_start.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sub-interval step must be finite and > 0, got {step}"
            )));
        }
        Ok(Self {
            t_start,
            step,
            steps,
        })
    }

    /// Sub-interval `[t_start, t_end]` split into `steps` equal steps.
    pub fn spanning(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::InvalidConfig(format!(
                "sub-interval end {t_end} must exceed start {t_start}"
            )));
        }
        Self::new(t_start, (t_end - t_start) / steps as f64, steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.step * self.steps as f64
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// `count` contiguous sub-intervals of `steps` RK4 steps each, starting at `t0`.
pub fn uniform_partition(
    t0: f64,
    step: f64,
    steps: usize,
    count: usize,
) -> Result<Vec<SubInterval>> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "partition needs at least one sub-interval".into(),
        ));
    }
    (0..count)
        .map(|k| SubInterval::new(t0 + (k * steps) as f64 * step, step, steps))
        .collect()
}

/// Forward trajectory on one sub-interval, retained for linearized sweeps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    interval: SubInterval,
    states: Vec<Vector>,
    stages: Vec<[Vector; 4]>,
}

impl Trajectory {
    pub fn interval(&self) -> &SubInterval {
        &self.interval
    }

    /// Step endpoints, `steps + 1` states starting with the propagation input.
    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn final_state(&self) -> &Vector {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    fn check(&self, model: &dyn Dynamics, iv: &SubInterval) -> Result<()> {
        if self.interval != *iv || self.stages.len() != iv.steps {
            return Err(Error::CheckpointMismatch("sub-interval"));
        }
        check_dim("checkpoint state", model.dim(), self.states[0].len())
    }
}

struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Propagate `x` across `iv` with classical RK4, keeping the checkpoint.
pub fn propagate(
    model: &dyn Dynamics,
    x: &Vector,
    iv: &SubInterval,
) -> Result<(Vector, Trajectory)> {
    let n = model.dim();
    check_dim("propagate", n, x.len())?;
    let h = iv.step;
    let mut ws = Workspace::new(n);
    let mut states = Vec::with_capacity(iv.steps + 1);
    let mut stages = Vec::with_capacity(iv.steps);
    states.push(x.clone());

    for step in 0..iv.steps {
        let cur = states[step].as_slice();
        let y1 = cur.to_vec();
        model.rhs_into(&y1, &mut ws.k[0]);
        let mut y2 = vec![0.0; n];
        axpy_into(&mut y2, cur, 0.5 * h, &ws.k[0]);
        model.rhs_into(&y2, &mut ws.k[1]);
        let mut y3 = vec![0.0; n];
        axpy_into(&mut y3, cur, 0.5 * h, &ws.k[1]);
        model.rhs_into(&y3, &mut ws.k[2]);
        let mut y4 = vec![0.0; n];
        axpy_into(&mut y4, cur, h, &ws.k[2]);
        model.rhs_into(&y4, &mut ws.k[3]);

        for i in 0..n {
            ws.tmp[i] =
                cur[i] + h / 6.0 * (ws.k[0][i] + 2.0 * ws.k[1][i] + 2.0 * ws.k[2][i] + ws.k[3][i]);
        }
        if ws.tmp.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                step,
                t_start: iv.t_start,
            });
        }
        states.push(Vector::from_column_slice(&ws.tmp));
        stages.push([
            Vector::from_vec(y1),
            Vector::from_vec(y2),
            Vector::from_vec(y3),
            Vector::from_vec(y4),
        ]);
    }

    let out = states[iv.steps].clone();
    Ok((
        out,
        Trajectory {
            interval: *iv,
            states,
            stages,
        },
    ))
}

/// Derivative of the discrete RK4 map along `ckpt`, applied to `v`.
pub fn tlm_product(
    model: &dyn Dynamics,
    ckpt: &Trajectory,
    v: &Vector,
    iv: &SubInterval,
) -> Result<Vector> {
    ckpt.check(model, iv)?;
    check_dim("tlm_product", model.dim(), v.len())?;
    let n = model.dim();
    let h = iv.step;
    let mut ws = Workspace::new(n);
    let mut dx = v.as_slice().to_vec();
    let mut dy = vec![0.0; n];

    for st in &ckpt.stages {
        model.jacobian_product_into(st[0].as_slice(), &dx, &mut ws.k[0]);
        axpy_into(&mut dy, &dx, 0.5 * h, &ws.k[0]);
        model.jacobian_product_into(st[1].as_slice(), &dy, &mut ws.k[1]);
        axpy_into(&mut dy, &dx, 0.5 * h, &ws.k[1]);
        model.jacobian_product_into(st[2].as_slice(), &dy, &mut ws.k[2]);
        axpy_into(&mut dy, &dx, h, &ws.k[2]);
        model.jacobian_product_into(st[3].as_slice(), &dy, &mut ws.k[3]);
        for i in 0..n {
            dx[i] += h / 6.0 * (ws.k[0][i] + 2.0 * ws.k[1][i] + 2.0 * ws.k[2][i] + ws.k[3][i]);
        }
    }
    Ok(Vector::from_vec(dx))
}

/// Transpose of [`tlm_product`]: pulls the sensitivity `w` at the end of the
/// sub-interval back to its start.
pub fn adjoint_product(
    model: &dyn Dynamics,
    ckpt: &Trajectory,
    w: &Vector,
    iv: &SubInterval,
) -> Result<Vector> {
    ckpt.check(model, iv)?;
    check_dim("adjoint_product", model.dim(), w.len())?;
    let n = model.dim();
    let h = iv.step;
    let mut lam = w.as_slice().to_vec();
    // adjoints of the stage slopes k1..k4
    let mut ak = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut ay = vec![0.0; n];

    for st in ckpt.stages.iter().rev() {
        for i in 0..n {
            ak[0][i] = h / 6.0 * lam[i];
            ak[1][i] = h / 3.0 * lam[i];
            ak[2][i] = h / 3.0 * lam[i];
            ak[3][i] = h / 6.0 * lam[i];
        }
        model.jacobian_transpose_product_into(st[3].as_slice(), &ak[3], &mut ay);
        for i in 0..n {
            lam[i] += ay[i];
            ak[2][i] += h * ay[i];
        }
        model.jacobian_transpose_product_into(st[2].as_slice(), &ak[2], &mut ay);
        for i in 0..n {
            lam[i] += ay[i];
            ak[1][i] += 0.5 * h * ay[i];
        }
        model.jacobian_transpose_product_into(st[1].as_slice(), &ak[1], &mut ay);
        for i in 0..n {
            lam[i] += ay[i];
            ak[0][i] += 0.5 * h * ay[i];
        }
        model.jacobian_transpose_product_into(st[0].as_slice(), &ak[0], &mut ay);
        for i in 0..n {
            lam[i] += ay[i];
        }
    }
    Ok(Vector::from_vec(lam))
}
