//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first_moment: Vec<DenseMatrix>,
    second_moment: Vec<DenseMatrix>,
}

impl AdamState {
    /// Defaults: beta1 0.9, beta2 0.999, epsilon 1e-8. Moment buffers are
    /// allocated on the first step to match the parameter shapes.
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[DenseMatrix] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[DenseMatrix] {
        &self.second_moment
    }
}

/// One Adam update over a list of parameter blocks.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [DenseMatrix],
    grads: &[DenseMatrix],
) -> Result<()> {
    let mut param_refs: Vec<&mut DenseMatrix> = params.iter_mut().collect();
    let grad_refs: Vec<&DenseMatrix> = grads.iter().collect();
    adam_step_refs(state, &mut param_refs, &grad_refs)
}

/// As `adam_step`, but over borrowed blocks, so parameters scattered across
/// struct fields can be updated in one optimizer step.
pub fn adam_step_refs(
    state: &mut AdamState,
    params: &mut [&mut DenseMatrix],
    grads: &[&DenseMatrix],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "adam_step: {} parameter blocks vs {} gradient blocks",
            params.len(),
            grads.len()
        )));
    }
    if state.first_moment.is_empty() {
        state.first_moment = params
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::shape(
            "adam_step: parameter block count changed between steps".to_string(),
        ));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(
        state
            .first_moment
            .iter()
            .zip(&state.second_moment),
    ) {
        if !p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v) {
            return Err(Error::shape(
                "adam_step: parameter/gradient shape mismatch".to_string(),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let g: &DenseMatrix = g;
        let m = state.first_moment[k].data_mut();
        let v = state.second_moment[k].data_mut();
        let pd = p.data_mut();
        for ((pi, gi), (mi, vi)) in pd.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseMatrix {
        DenseMatrix::from_vec(1, 1, vec![v]).unwrap()
    }

    /// Independent scalar Adam used as the oracle for the matrix version.
    fn scalar_adam_trace(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments_zero() {
        let mut state = AdamState::new(0.1);
        let mut params = vec![scalar(1.5)];
        adam_step(&mut state, &mut params, &[scalar(0.0)]).unwrap();
        assert_eq!(params[0].get(0, 0), 1.5);
        assert_eq!(state.first_moment()[0].get(0, 0), 0.0);
        assert_eq!(state.second_moment()[0].get(0, 0), 0.0);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // param 0, grad 1, lr 0.1: bias-corrected m_hat = v_hat = 1,
        // so the step is -0.1 / (1 + 1e-8).
        let mut state = AdamState::new(0.1);
        let mut params = vec![scalar(0.0)];
        adam_step(&mut state, &mut params, &[scalar(1.0)]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params[0].get(0, 0) - expected).abs() < 1e-15);
        assert!((params[0].get(0, 0) + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let oracle = scalar_adam_trace(&[1.0, 1.0], 0.1);
        let mut state = AdamState::new(0.1);
        let mut params = vec![scalar(0.0)];
        adam_step(&mut state, &mut params, &[scalar(1.0)]).unwrap();
        assert_eq!(params[0].get(0, 0), oracle[0]);
        adam_step(&mut state, &mut params, &[scalar(1.0)]).unwrap();
        assert_eq!(params[0].get(0, 0), oracle[1]);
    }

    #[test]
    fn deterministic_bitwise() {
        let grads = vec![
            DenseMatrix::from_rows(&[vec![0.3, -1.2], vec![0.01, 4.0]]).unwrap(),
        ];
        let run = || {
            let mut state = AdamState::new(1e-3);
            let mut params = vec![DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()];
            for _ in 0..25 {
                adam_step(&mut state, &mut params, &grads).unwrap();
            }
            params[0].data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(0.1);
        let mut params = vec![scalar(0.0)];
        let grads = vec![DenseMatrix::zeros(2, 1)];
        assert!(adam_step(&mut state, &mut params, &grads).is_err());
    }
}
