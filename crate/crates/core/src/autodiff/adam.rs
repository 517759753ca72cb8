use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<NdArray>,
    second: Vec<NdArray>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a NdArray>) -> Self {
        let first: Vec<NdArray> = params.into_iter().map(|p| NdArray::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advance the moments with `grads` and return the bias-corrected update
    /// to add to each parameter. Nothing changes if a gradient is non-finite.
    pub fn direction(&mut self, grads: &[NdArray]) -> Result<Vec<NdArray>> {
        if grads.len() != self.first.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {} gradients",
                self.first.len(),
                grads.len()
            )));
        }
        for (g, m) in grads.iter().zip(&self.first) {
            g.check_same_shape(m)?;
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {pos}")));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut updates = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.first).zip(&mut self.second) {
            let mut delta = NdArray::zeros(g.shape());
            for (((gi, mi), vi), di) in g
                .data()
                .iter()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(delta.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *di = -lr * m_hat / (v_hat.sqrt() + eps);
            }
            updates.push(delta);
        }
        Ok(updates)
    }

    /// One descent step on `params`.
    pub fn step(&mut self, params: &mut [NdArray], grads: &[NdArray]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("parameter and gradient counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
        }
        let updates = self.direction(grads)?;
        for (p, d) in params.iter_mut().zip(&updates) {
            p.add_assign(d);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![NdArray::from_vec(vec![0.5])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[NdArray::from_vec(vec![1.0])]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -1e-3 / (1 + 1e-8)
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![NdArray::from_vec(vec![3.0, -2.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[NdArray::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[3.0, -2.0]);
    }

    #[test]
    fn opposite_gradients_give_opposite_updates() {
        let mut p = vec![NdArray::from_vec(vec![0.0, 0.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[NdArray::from_vec(vec![0.7, -0.7])]).unwrap();
        }
        assert_eq!(p[0].data()[0], -p[0].data()[1]);
        assert!(p[0].data()[0] < 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = vec![NdArray::from_vec(vec![1.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[NdArray::from_vec(vec![f64::NAN])]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }
}
