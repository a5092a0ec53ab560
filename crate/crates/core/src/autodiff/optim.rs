use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMethod {
    Adamw,
}

/// AdamW state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<F> {
    pub method: OptimizerMethod,
    pub learning_rate: F,
    pub weight_decay: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step_count: u64,
    first_moment: Vec<F>,
    second_moment: Vec<F>,
}

impl<F: Scalar> OptimizerState<F> {
    /// AdamW with betas (0.9, 0.999) and eps 1e-8.
    pub fn adamw(param_count: usize, learning_rate: F, weight_decay: F) -> Self {
        OptimizerState {
            method: OptimizerMethod::Adamw,
            learning_rate,
            weight_decay,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            step_count: 0,
            first_moment: vec![F::zero(); param_count],
            second_moment: vec![F::zero(); param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[F] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[F] {
        &self.second_moment
    }

    /// In-place update scaled by `lr_factor` (the schedule multiplier).
    pub fn step_in_place(
        &mut self,
        params: &mut ParamVector<F>,
        grad: &ParamVector<F>,
        lr_factor: F,
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return Err(Error::dim(
                "optimizer step",
                self.first_moment.len(),
                params.len().max(grad.len()),
            ));
        }
        if let Some(block) = grad.first_non_finite_block() {
            return Err(Error::NonFinite(format!("gradient block `{block}`")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = F::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let lr = self.learning_rate * lr_factor;
        let decay = one - lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional AdamW step: returns the advanced state and the updated parameters.
pub fn adamw_step<F: Scalar>(
    state: &OptimizerState<F>,
    params: &ParamVector<F>,
    grad: &ParamVector<F>,
) -> Result<(OptimizerState<F>, ParamVector<F>)> {
    let mut next_state = state.clone();
    let mut next_params = params.clone();
    next_state.step_in_place(&mut next_params, grad, F::one())?;
    Ok((next_state, next_params))
}

/// Linear warmup followed by cosine decay over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineWarmup {
    /// Multiplier applied to the base learning rate at optimizer step `step` (0-based).
    pub fn factor<F: Scalar>(&self, step: usize) -> F {
        let total = self.total_steps.max(1) as f64;
        let progress = (step as f64 / total).min(1.0);
        let mut f = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        if self.warmup_steps > 0 && step < self.warmup_steps {
            f *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        F::lit(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn scalar_param(v: f64) -> ParamVector<f64> {
        let mut p = ParamVector::new();
        p.push_block("x", &Matrix::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_keeps_params() {
        let state = OptimizerState::adamw(2, 0.1, 0.0);
        let mut p = ParamVector::new();
        p.push_block("w", &Matrix::row_vector(&[1.5, -2.0]));
        let g = p.zeros_like();
        let (s1, p1) = adamw_step(&state, &p, &g).unwrap();
        assert_eq!(p1, p);
        assert_eq!(s1.step_count(), 1);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, update = 0.1 / (1 + 1e-8).
        let state = OptimizerState::adamw(1, 0.1, 0.0);
        let (_, p1) = adamw_step(&state, &scalar_param(1.0), &scalar_param(1.0)).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p1.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let (lr, wd) = (0.01, 0.5);
        let state = OptimizerState::adamw(1, lr, wd);
        let (_, p1) = adamw_step(&state, &scalar_param(2.0), &scalar_param(0.0)).unwrap();
        assert!((p1.values()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let state = OptimizerState::adamw(1, 0.1, 0.0);
        let err = adamw_step(&state, &scalar_param(1.0), &scalar_param(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(msg) if msg.contains('x')));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let state = OptimizerState::adamw(3, 0.1, 0.0);
        assert!(adamw_step(&state, &scalar_param(1.0), &scalar_param(1.0)).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = CosineWarmup {
            warmup_steps: 10,
            total_steps: 100,
        };
        let f0: f64 = s.factor(0);
        let f9: f64 = s.factor(9);
        let f99: f64 = s.factor(99);
        assert!(f0 < f9);
        assert!(f99 < 0.01);
    }
}
