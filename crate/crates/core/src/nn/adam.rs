//! Adam optimizer with bias correction.

use crate::nn::tensor::Tensor;
use crate::nn::NnError;

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one Adam update to every parameter, consuming the gradients
    /// currently stored in each tensor. Parameter order must be stable
    /// across calls; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NnError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(NnError::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let g = p
                .grad()
                .ok_or_else(|| NnError::Invalid(format!("parameter {} has no gradient buffer", i)))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGrad(i));
            }
            if g.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch {
                    expected: format!("{} moments for parameter {}", self.m[i].len(), i),
                    actual: format!("{}", g.len()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g: Vec<f64> = p.grad().unwrap().to_vec();
            let data = p.data_mut();
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
