//! Adaptive-moment optimizer with decoupled weight decay.

use crate::encoders::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One AdamW update of a single tensor at (1-based) step `t`.
///
/// Weight decay shrinks the parameters multiplicatively before the
/// bias-corrected adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    weight_decay: f64,
    t: u64,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = BETA1 * *mi + (1.0 - BETA1) * g;
        *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p *= decay;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// Optimizer state for one parameter set. Moment buffers mirror the
/// parameter tensors one-to-one.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<P: Parameters>(params: &P, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn apply<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let grads = grads.tensors();
        let tensors = params.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient set does not mirror parameters");
        assert_eq!(tensors.len(), self.first.len(), "optimizer built for another parameter set");
        for (((p, g), m), v) in tensors
            .into_iter()
            .zip(grads.iter())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            adamw_update(p, g.data, m, v, self.lr, self.weight_decay, self.step);
        }
    }
}
