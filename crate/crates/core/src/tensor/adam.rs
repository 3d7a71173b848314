use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Moment buffers and hyper-parameters for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, first: Vec::new(), second: Vec::new() }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::shape("adam_step", "moment buffers do not match parameter count"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("param {:?} grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Adam bound to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { state: AdamState::new(lr) }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let (mut ps, gs): (Vec<&mut Tensor>, Vec<&Tensor>) = store.split_mut().unzip();
        adam_step(&mut ps, &gs, &mut self.state)
    }
}
