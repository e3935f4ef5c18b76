use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// One Adam update of `param` in place.
///
/// Moments decay for every entry. Entries whose gradient is exactly zero keep
/// their value, so parameters outside the support of a sparse gradient (hash
/// table slots, untouched texels) stay put.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(NumError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    grad.ensure_finite("adam_step gradient")?;
    let n = param.numel();
    if state.m.len() != n {
        state.m = vec![0.0; n];
        state.v = vec![0.0; n];
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = cfg.lr / bc1;
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        if g != 0.0 {
            *p -= step_size * *m / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam over an ordered list of parameter tensors sharing one config.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, states: Vec::new() }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(NumError::InvalidArgument(format!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.states.len() != params.len() {
            self.states = vec![AdamState::default(); params.len()];
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(self.states.iter_mut()) {
            adam_step(p, g, s, &self.cfg)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}
