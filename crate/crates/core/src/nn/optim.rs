use serde::{Deserialize, Serialize};

use super::{NnError, ParameterSet, Result, Scalar};

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

/// Bias-corrected Adam. Moments are allocated lazily and the step count is
/// kept per parameter, so parameters that sit out some steps (frozen branches)
/// are corrected with their own count.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub steps: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>, u64)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient, then clears all gradients.
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        if !params.iter().any(|(_, p)| p.trainable && p.has_grad) {
            return Err(NnError::MissingGradient);
        }
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        for id in 0..params.len() {
            let p = params.by_id_mut(id);
            if !p.trainable || !p.has_grad {
                continue;
            }
            let n = p.value.numel();
            let (m, v, t) = self.moments[id].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n], 0));
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let step = T::lit(c.lr / bc1);
            let bc2 = T::lit(bc2);
            let eps = T::lit(c.eps);
            let values = p.value.data_mut();
            for i in 0..n {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                values[i] -= step * m[i] / ((v[i] / bc2).sqrt() + eps);
            }
        }
        self.steps += 1;
        params.zero_grad();
        Ok(())
    }
}
