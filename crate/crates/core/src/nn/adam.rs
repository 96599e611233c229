use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub const DEFAULT_LR: f32 = 2e-4;

    pub fn new(params: &ModelParams, lr: f32) -> Self {
        let zeros = || params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }
}

/// One optimizer update. Non-finite or misshapen gradients are rejected
/// before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((name, p), g) in params.entries().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (state.beta1 as f64).powi(t);
    let bc2 = 1.0 - (state.beta2 as f64).powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);

    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f32) -> ModelParams {
        ModelParams::new(vec![("p".into(), Tensor::new(vec![1], vec![p]).unwrap())]).unwrap()
    }

    #[test]
    fn first_step_hand_evaluated() {
        let mut params = single(1.0);
        let mut st = AdamState::new(&params, 0.1);
        adam_step(&mut params, &[Tensor::new(vec![1], vec![1.0]).unwrap()], &mut st).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.entries()[0].1.data()[0] - expected).abs() < 1e-7);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_grads_leave_params_and_moments() {
        let mut params = single(0.3);
        let before = params.clone();
        let mut st = AdamState::new(&params, 0.1);
        adam_step(&mut params, &[Tensor::zeros(vec![1])], &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.first_moments()[0], vec![0.0]);
        assert_eq!(st.second_moments()[0], vec![0.0]);
    }

    #[test]
    fn nan_gradient_leaves_state_unchanged() {
        let mut params = single(0.3);
        let mut st = AdamState::new(&params, 0.1);
        adam_step(&mut params, &[Tensor::new(vec![1], vec![0.5]).unwrap()], &mut st).unwrap();
        let (p_before, s_before) = (params.clone(), st.clone());
        let bad = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(adam_step(&mut params, &[bad], &mut st).is_err());
        assert_eq!(params, p_before);
        assert_eq!(st, s_before);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut params = single(0.123_456_7);
        let before = params.clone();
        let mut st = AdamState::new(&params, 0.0);
        adam_step(&mut params, &[Tensor::new(vec![1], vec![3.0]).unwrap()], &mut st).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single(0.0);
        let mut st = AdamState::new(&params, 0.1);
        assert!(adam_step(&mut params, &[Tensor::zeros(vec![2])], &mut st).is_err());
        assert_eq!(st.step(), 0);
    }
}
