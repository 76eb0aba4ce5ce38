//! Training objectives. Squared-norm terms are mean-reduced over elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::{sigmoid_scalar, Tensor};

/// Probability clamp used by [`loss_ce`].
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 0.2,
            lambda1: 0.2,
            lambda2: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda0", self.lambda0), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field: format!("loss_weights.{name}"),
                    msg: format!("must be finite and ≥ 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// The three loss components of one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_mid_rec: f64,
    pub l_mask: f64,
    pub l_ce: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        total_loss(self.l_mid_rec, self.l_mask, self.l_ce, w)
    }
}

fn mse(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    a.expect_same_shape(b, op)?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `mean((x_mid − Δ_x)²)`.
pub fn loss_mid_rec(x_mid: &Tensor, delta_x: &Tensor) -> Result<f64> {
    mse(x_mid, delta_x, "loss_mid_rec")
}

/// Loss and its gradient with respect to `x_mid` (the gradient for `Δ_x`
/// is the negation).
pub fn loss_mid_rec_with_grad(x_mid: &Tensor, delta_x: &Tensor) -> Result<(f64, Tensor)> {
    let l = loss_mid_rec(x_mid, delta_x)?;
    let k = 2.0 / x_mid.len().max(1) as f32;
    Ok((l, x_mid.zip_map(delta_x, "loss_mid_rec", |a, b| k * (a - b))?))
}

/// `‖m_mid − M_mid‖² + ‖m_mid_c − M_mid_c‖² + ‖1 − m_mid − m_mid_c‖²`, each mean-reduced.
pub fn loss_mask(m_mid: &Tensor, m_mid_c: &Tensor, preset_mid: &Tensor, preset_mid_c: &Tensor) -> Result<f64> {
    Ok(loss_mask_with_grads(m_mid, m_mid_c, preset_mid, preset_mid_c)?.0)
}

/// [`loss_mask`] plus its gradients with respect to `m_mid` and `m_mid_c`.
pub fn loss_mask_with_grads(
    m_mid: &Tensor,
    m_mid_c: &Tensor,
    preset_mid: &Tensor,
    preset_mid_c: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    for t in [m_mid_c, preset_mid, preset_mid_c] {
        m_mid.expect_same_shape(t, "loss_mask")?;
    }
    let n = m_mid.len().max(1) as f64;
    let k = (2.0 / n) as f32;
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    let mut gm = Vec::with_capacity(m_mid.len());
    let mut gc = Vec::with_capacity(m_mid.len());
    for (((&m, &mc), &t), &tc) in m_mid.data().iter().zip(m_mid_c.data()).zip(preset_mid.data()).zip(preset_mid_c.data()) {
        let d1 = m - t;
        let d2 = mc - tc;
        let d3 = 1.0 - m - mc;
        a += (d1 as f64).powi(2);
        b += (d2 as f64).powi(2);
        c += (d3 as f64).powi(2);
        gm.push(k * (d1 - d3));
        gc.push(k * (d2 - d3));
    }
    let shape = m_mid.shape().to_vec();
    Ok(((a + b + c) / n, Tensor::new(shape.clone(), gm)?, Tensor::new(shape, gc)?))
}

/// Binary cross-entropy on a probability clamped to `[ε, 1 − ε]`.
pub fn loss_ce(y_true: f32, y_pred: f32) -> f64 {
    let p = (y_pred as f64).clamp(CE_EPS, 1.0 - CE_EPS);
    let y = y_true as f64;
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Cross-entropy of `sigmoid(logit)` and its derivative `y' − y` w.r.t. the logit.
pub fn loss_ce_logit(y_true: f32, logit: f32) -> (f64, f32) {
    let p = sigmoid_scalar(logit);
    (loss_ce(y_true, p), p - y_true)
}

/// `λ0·l_mid_rec + λ1·l_mask + λ2·l_ce`.
pub fn total_loss(l_mid_rec: f64, l_mask: f64, l_ce: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_mid_rec", l_mid_rec), ("l_mask", l_mask), ("l_ce", l_ce)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    Ok(w.lambda0 * l_mid_rec + w.lambda1 * l_mask + w.lambda2 * l_ce)
}
