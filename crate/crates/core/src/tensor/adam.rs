use super::array::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
///
/// Tensors that receive no gradient in a step are left untouched, including
/// their moments, so each tensor keeps its own bias-correction step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    tensor_steps: Vec<u64>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        config: AdamConfig,
    ) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(invalid("adam: learning rate must be positive"));
        }
        let first: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let second = first.clone();
        let n = first.len();
        Ok(Self {
            config,
            first,
            second,
            tensor_steps: vec![0; n],
            step: 0,
        })
    }

    /// Number of completed `adam_step` calls.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tensor_steps(&self) -> &[u64] {
        &self.tensor_steps
    }
}

/// One bias-corrected Adam update. `grads[i]` of `None` skips `params[i]`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(invalid(format!(
            "adam: {} params, {} grads, state tracks {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.first[i].shape() {
            return Err(invalid(format!("adam: parameter {i} changed shape")));
        }
        if let Some(g) = g {
            p.same_shape(g, "adam")?;
        }
    }

    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        state.tensor_steps[i] += 1;
        let t = state.tensor_steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
