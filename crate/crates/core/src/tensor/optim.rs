use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamWConfig {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update in place. A non-finite gradient rejects the whole
    /// step and leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let c = self.config;
        if !(c.lr >= 0.0 && c.beta1 > 0.0 && c.beta2 > 0.0 && c.eps > 0.0 && c.weight_decay >= 0.0) {
            return Err(Error::contract(format!("invalid AdamW hyperparameters {c:?}")));
        }
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adamw_step gradient"));
            }
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let mut data = p.to_vec();
            for (j, (x, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                *x -= c.lr * c.weight_decay * *x;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = vec![Tensor::scalar(1.0f32)];
        let grads = vec![Tensor::scalar(0.0f32)];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.01));
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - 0.999).abs() < 1e-7);
        assert_eq!(opt.state.m[0], vec![0.0]);
        assert_eq!(opt.state.v[0], vec![0.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let init = Tensor::new(vec![3], vec![0.5f32, -2.0, 3.0]).unwrap();
        let mut params = vec![init.clone()];
        let grads = vec![Tensor::new(vec![3], vec![1.0f32, 2.0, -1.0]).unwrap()];
        let mut opt = AdamW::new(AdamWConfig::new(0.0, 0.1));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params[0], init);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap()];
        let grads = vec![Tensor::new(vec![2], vec![3.0f32, -0.5]).unwrap()];
        let mut opt = AdamW::new(AdamWConfig::new(0.01, 0.0));
        opt.step(&mut params, &grads).unwrap();
        // bias-corrected m̂/√v̂ = sign(g) on the first step
        assert!((params[0].data()[0] + 0.01).abs() < 1e-6);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn step_counter_increases() {
        let mut params = vec![Tensor::scalar(1.0f32)];
        let grads = vec![Tensor::scalar(0.3f32)];
        let mut opt = AdamW::new(AdamWConfig::new(0.01, 0.0));
        for expected in 1..=3 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.state.step, expected);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0));
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
