//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "optim.learning_rate: must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (key, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{key}: must be in [0, 1), got {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config(format!("optim.epsilon: must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment accumulators plus the step count.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, params: &[Param]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from each parameter's grad slot.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::precondition(format!(
                "adam: {} params, state holds {}",
                params.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let grad = param.tensor.grad.as_ref().ok_or_else(|| {
                Error::precondition(format!("adam: parameter `{}` has no gradient", param.name))
            })?;
            if grad.len() != param.tensor.len() {
                return Err(Error::precondition(format!(
                    "adam: gradient length mismatch for `{}`",
                    param.name
                )));
            }
            for (k, &g) in grad.iter().enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                param.tensor.values[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_param(value: f64, grad: Option<f64>) -> Param {
        let mut tensor = Tensor::new(vec![1], vec![value]).unwrap();
        tensor.grad = grad.map(|g| vec![g]);
        Param { name: "w".to_string(), tensor }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![scalar_param(0.7, Some(0.0))];
        let mut opt = OptimState::new(OptimConfig::default(), &params).unwrap();
        for _ in 0..5 {
            opt.step(&mut params).unwrap();
        }
        assert_eq!(params[0].tensor.values[0], 0.7);
    }

    #[test]
    fn first_step_magnitude_approximates_learning_rate() {
        // t=1, g=1: m_hat = v_hat = 1, so the update is lr / (1 + eps).
        let mut params = vec![scalar_param(0.0, Some(1.0))];
        let mut opt = OptimState::new(OptimConfig::default(), &params).unwrap();
        opt.step(&mut params).unwrap();
        let update = -params[0].tensor.values[0];
        assert!((update - 1e-3).abs() < 1e-10, "update {update}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![scalar_param(0.0, None)];
        let mut opt = OptimState::new(OptimConfig::default(), &params).unwrap();
        let err = opt.step(&mut params).unwrap_err().to_string();
        assert!(err.contains("no gradient"), "{err}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = vec![scalar_param(0.5, None)];
            let mut opt = OptimState::new(OptimConfig::default(), &params).unwrap();
            for i in 0..50 {
                // Deterministic synthetic gradient.
                let g = (i as f64 * 0.37).sin();
                params[0].tensor.grad = Some(vec![g]);
                opt.step(&mut params).unwrap();
            }
            params[0].tensor.values[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
