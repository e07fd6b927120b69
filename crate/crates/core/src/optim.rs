//! AdamW for gradient *ascent*, with bias-corrected moments and decoupled
//! weight decay.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub first_moment: Array2<f64>,
    pub second_moment: Array2<f64>,
    pub steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shape: (usize, usize)) -> Self {
        Self {
            config,
            first_moment: Array2::zeros(shape),
            second_moment: Array2::zeros(shape),
            steps: 0,
        }
    }

    /// One ascent step: `θ ← θ(1 − lr·wd) + lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) -> Result<()> {
        if params.dim() != grad.dim() || params.dim() != self.first_moment.dim() {
            return Err(Error::Contract(format!(
                "optimizer shape {:?}, params {:?}, gradient {:?}",
                self.first_moment.dim(),
                params.dim(),
                grad.dim()
            )));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        Zip::from(params)
            .and(grad)
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p *= 1.0 - lr * weight_decay;
                *p += lr * m_hat / (v_hat.sqrt() + eps);
            });
        Ok(())
    }
}
