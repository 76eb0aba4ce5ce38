use crate::error::{Error, Result};
use crate::tensorops::{Param, Tensor};

/// Moment estimates and hyper-parameters for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param>, lr: f32) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros_like(&p.value), Tensor::zeros_like(&p.value)))
            .unzip();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape("adam_step", format!("{} params", state.m.len()), params.len()));
    }
    state.t = state.t.checked_add(1).expect("adam step counter overflow");
    let t = state.t as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        if p.grad.shape() != m.shape() || p.value.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("{:?}", m.shape()), format!("{} {:?}", p.name, p.value.shape())));
        }
        let values = p.value.data_mut();
        let grads = p.grad.data();
        for (((x, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *x -= (state.lr as f64 * m_hat / (v_hat.sqrt() + state.eps as f64)) as f32;
        }
        p.zero_grad();
    }
    Ok(())
}
