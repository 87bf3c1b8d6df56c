use crate::error::{EspError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before each step.
    pub max_grad_norm: Option<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Norm of the gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, max_grad_norm: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`. `grad` is rescaled in place
    /// when clipping applies. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) -> Result<StepInfo> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(EspError::invalid(format!(
                "optimizer holds {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(EspError::Numerical("non-finite gradient; update aborted".into()));
        }
        let mut clipped = false;
        if let Some(max) = self.max_grad_norm {
            if grad_norm > max {
                let scale = max / grad_norm;
                grad.iter_mut().for_each(|g| *g *= scale);
                clipped = true;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}
