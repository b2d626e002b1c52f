use super::params::ParamSet;
use crate::error::{Result, TsaError};

/// Adam with bias correction and an optional linear learning-rate warmup.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_: ()| -> Vec<Vec<f64>> {
            params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect()
        };
        AdamState {
            step: 0,
            m: zeros(()),
            v: zeros(()),
            beta1,
            beta2,
            eps,
            lr,
            warmup_steps: 0,
        }
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// Learning rate applied at the upcoming step.
    pub fn current_lr(&self) -> f64 {
        let t = self.step + 1;
        if self.warmup_steps > 0 && t < self.warmup_steps {
            self.lr * t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    /// One update of every parameter from its gradient. Gradients are left
    /// untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TsaError::Usage(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter_mut().enumerate() {
            if p.grad.is_none() {
                return Err(TsaError::Usage(format!("parameter {} has no gradient", p.name)));
            }
            if self.m[i].len() != p.value.numel() {
                return Err(TsaError::Usage(format!("optimizer state shape mismatch for {}", p.name)));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", Tensor::full(&[1], value)).unwrap();
        ps.accumulate_grad(id, &[grad]);
        ps
    }

    #[test]
    fn first_step_hand_example() {
        let mut ps = single(0.0, 1.0);
        let mut adam = AdamState::new(&ps, 0.1, 0.9, 0.98, 1e-9);
        adam.step(&mut ps).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-9);
        assert!((ps.value(ps.id("w").unwrap()).item() - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = single(0.7, 0.0);
        let mut adam = AdamState::new(&ps, 0.1, 0.9, 0.98, 1e-9);
        for _ in 0..5 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(ps.id("w").unwrap()).item(), 0.7);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        let mut adam = AdamState::new(&ps, 0.1, 0.9, 0.98, 1e-9);
        assert!(matches!(adam.step(&mut ps), Err(TsaError::Usage(_))));
    }

    #[test]
    fn identical_tensors_evolve_identically() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", Tensor::full(&[3], 0.5)).unwrap();
        let b = ps.insert("b", Tensor::full(&[3], 0.5)).unwrap();
        let mut adam = AdamState::new(&ps, 0.01, 0.9, 0.98, 1e-9);
        for s in 0..10 {
            let g = [0.1 * s as f64, -0.3, 1.0];
            ps.zero_grad();
            ps.accumulate_grad(a, &g);
            ps.accumulate_grad(b, &g);
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value(a), ps.value(b));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let ps = single(0.0, 1.0);
        let mut adam = AdamState::new(&ps, 1.0, 0.9, 0.98, 1e-9).with_warmup(4);
        assert_eq!(adam.current_lr(), 0.25);
        adam.step = 3;
        assert_eq!(adam.current_lr(), 1.0);
    }
}
