use serde::{Deserialize, Serialize};

use crate::field::BoundField;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub const KL_EPS: f64 = 1e-6;
pub const ENTROPY_EPS: f64 = 1e-7;

/// `-min(mean_trans, tau)`.
pub fn transmittance_loss<F: Real>(g: &mut Graph<F>, mean_trans: Var, tau: f64) -> Result<Var, TensorError> {
    let m = g.min_scalar(mean_trans, tau)?;
    g.neg(m)
}

/// Mean binary entropy of the clamped per-ray transmittance.
pub fn entropy_loss<F: Real>(g: &mut Graph<F>, trans_final: Var) -> Result<Var, TensorError> {
    let t = g.clamp(trans_final, ENTROPY_EPS, 1.0 - ENTROPY_EPS)?;
    let u = g.rsub_scalar(1.0, t)?;
    let lt = g.log(t)?;
    let lu = g.log(u)?;
    let a = g.mul(t, lt)?;
    let b = g.mul(u, lu)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// Mean over axes of the mean squared difference between neighbouring
/// values of a `[1, Nx, Ny, Nz]` grid. Axes with a single vertex are skipped.
pub fn tv_loss<F: Real>(g: &mut Graph<F>, grid: Var) -> Result<Var, TensorError> {
    let shape = g.shape(grid).to_vec();
    let mut terms = Vec::new();
    for axis in 1..shape.len() {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let hi = g.narrow(grid, axis, 1, n - 1)?;
        let lo = g.narrow(grid, axis, 0, n - 1)?;
        let d = g.sub(hi, lo)?;
        let sq = g.mul(d, d)?;
        terms.push(g.mean(sq)?);
    }
    let Some(&first) = terms.first() else {
        return Err(TensorError::Invalid {
            op: "tv_loss",
            msg: format!("grid {shape:?} has no axis with two vertices"),
        });
    };
    let mut acc = first;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.mul_scalar(acc, 1.0 / terms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    #[default]
    Mean,
    Sum,
}

/// Bernoulli KL between the unit-sphere occupancy prior and the opacity at
/// every grid vertex: `-log(a)` inside the sphere, `-log(1 - a)` outside,
/// with `a` clamped to `[eps, 1 - eps]`.
pub fn kl_sphere_loss<F: Real>(
    g: &mut Graph<F>,
    field: &BoundField,
    delta: f64,
    mode: KlMode,
) -> Result<Var, TensorError> {
    let alpha = field.vertex_alpha(g, delta)?;
    let a = g.clamp(alpha, KL_EPS, 1.0 - KL_EPS)?;
    let spec = field.spec;
    let inside: Vec<F> = spec
        .vertices()
        .map(|v| {
            let p = spec.vertex_world(v);
            let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            if r2 <= 1.0 {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    let outside: Vec<F> = inside.iter().map(|&m| F::one() - m).collect();
    let shape = spec.grid_shape(1);
    let m_in = g.constant(Tensor::new(shape, inside)?);
    let m_out = g.constant(Tensor::new(shape, outside)?);
    let la = g.log(a)?;
    let na = g.rsub_scalar(1.0, a)?;
    let lna = g.log(na)?;
    let x = g.mul(la, m_in)?;
    let y = g.mul(lna, m_out)?;
    let s = g.add(x, y)?;
    let agg = match mode {
        KlMode::Mean => g.mean(s)?,
        KlMode::Sum => g.sum(s)?,
    };
    g.neg(agg)
}
