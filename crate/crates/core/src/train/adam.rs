use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    /// Step size for voxel grids (and the explicit softplus bias).
    pub lr_grid: f64,
    /// Step size for MLP weights (and the implicit softplus bias).
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    state: &mut AdamState<F>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    assert_eq!(param.shape(), grad.shape(), "gradient shape");
    assert_eq!(param.shape(), state.m.shape(), "moment shape");
    state.step += 1;
    let (b1, b2) = (F::of(betas.0), F::of(betas.1));
    let one = F::one();
    let c1 = F::of(1.0 - betas.0.powi(state.step as i32));
    let c2 = F::of(1.0 - betas.1.powi(state.step as i32));
    let (lr, eps) = (F::of(lr), F::of(eps));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::new([3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new([3], vec![2.0, -0.5, 1e3]).unwrap();
        let mut s = AdamState::new(&[3]);
        adam_step(&mut p, &g, &mut s, 0.1, (0.9, 0.999), 1e-8);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] - 1.1).abs() < 1e-7);
        assert!((p.data()[2] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::new([2], vec![0.3, -4.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[2]);
        adam_step(&mut p, &Tensor::zeros([2]), &mut s, 0.1, (0.9, 0.999), 1e-8);
        assert_eq!(p, before);
    }
}
