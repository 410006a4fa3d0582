use crate::autodiff::tensor::ParamStore;
use crate::error::{Error, Result};

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// One AdamW update of every trainable parameter in `params` using the
/// gradients stored on the tensors.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamWState) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, (_, name, t)) in params.iter().enumerate() {
        if t.requires_grad && t.grad().is_none() {
            return Err(Error::contract(format!("missing gradient for `{name}`")));
        }
        if state.first_moment[i].len() != t.numel() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: t.shape().to_vec(),
                rhs: vec![state.first_moment[i].len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (lr, b1, b2, eps, wd) = (
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    );
    for (i, tensor) in params.tensors_mut().enumerate() {
        if !tensor.requires_grad {
            continue;
        }
        let grad = tensor.grad.take().expect("checked above");
        let decay = if tensor.decay { 1.0 - lr * wd } else { 1.0 };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            data[j] *= decay;
            data[j] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
        }
        tensor.grad = Some(grad);
    }
    Ok(())
}
