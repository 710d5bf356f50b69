use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Coefficients of one Adam-style update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Divide the moments by `1 - beta^s` before the update.
    pub bias_correction: bool,
}

/// Applies one update to `params` in place.
///
/// `step` is the number of moment updates since the moments were last zeroed,
/// counting this one; it only matters when bias correction is on.
pub fn adam_update<F: Scalar>(
    cfg: &AdamConfig,
    params: &mut Tensor<F>,
    m: &mut Tensor<F>,
    v: &mut Tensor<F>,
    grad: &Tensor<F>,
    step: u64,
) {
    debug_assert_eq!(params.shape(), grad.shape());
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one, lr, eps) = (F::one(), F::of(cfg.lr), F::of(cfg.eps));
    let (c1, c2) = if cfg.bias_correction {
        let s = step.max(1) as f64;
        (
            F::of(1.0 - cfg.beta1.powf(s)),
            F::of(1.0 - cfg.beta2.powf(s)),
        )
    } else {
        (one, one)
    };
    let it = params
        .data_mut()
        .iter_mut()
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
        .zip(grad.data());
    for (((p, mi), vi), &g) in it {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let (mh, vh) = (*mi / c1, *vi / c2);
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}
