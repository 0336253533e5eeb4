//! Adam optimizer over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Per-parameter first/second moments plus the step counter. One state per
/// training phase; moments always mirror the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    cfg: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(param_count: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update:
    ///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,
    ///   θ ← θ − lr·(m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), CoreError> {
        if params.len() != self.first_moment.len() {
            return Err(CoreError::LengthMismatch {
                context: "adam_step params",
                expected: self.first_moment.len(),
                actual: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(CoreError::LengthMismatch {
                context: "adam_step grads",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_moments_untouched() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut params = vec![1.0, -2.0, 0.5];
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert!(state.first_moment().iter().all(|&m| m == 0.0));
        assert!(state.second_moment().iter().all(|&v| v == 0.0));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With bias correction, m̂ = g and v̂ = g² on step one, so the update
        // is −lr·g/(|g| + ε′) ≈ −lr·sign(g).
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut params = vec![0.0];
        state.step(&mut params, &[0.5]).unwrap();
        assert!(
            (params[0] - (-0.000999998)).abs() < 1e-8,
            "delta {}",
            params[0]
        );
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut params = vec![0.0];
        state.step(&mut params, &[0.5]).unwrap();
        let delta1 = params[0].abs();
        let before = params[0];
        state.step(&mut params, &[0.5]).unwrap();
        let delta2 = (params[0] - before).abs();
        assert!(delta2 <= delta1 + 1e-9, "delta2 {delta2} > delta1 {delta1}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut params = vec![0.0, 0.0];
        assert!(state.step(&mut params, &[1.0]).is_err());
        let mut short = vec![0.0];
        assert!(state.step(&mut short, &[1.0]).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (θ−3)²; Adam travels ≈lr per step, so lr = 0.01 crosses
        // the distance with plenty of budget left to settle.
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(1, cfg);
        let mut params = vec![0.0];
        for _ in 0..3000 {
            let g = 2.0 * (params[0] - 3.0);
            state.step(&mut params, &[g]).unwrap();
        }
        assert!((params[0] - 3.0).abs() < 0.05, "ended at {}", params[0]);
    }
}
