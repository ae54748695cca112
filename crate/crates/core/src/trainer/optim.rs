use segalign_tensor::Tensor;

use crate::params::ParamStore;
use crate::{Error, Result};

/// Bias-corrected Adam. Moments are kept per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` belongs to the i-th parameter of the store;
    /// `None` means the parameter did not take part in the loss. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Invalid(format!(
                        "gradient of `{}` has shape {:?}, parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { tensor: p.name.clone() });
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j] as f64);
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                data[j] = (data[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
