//! Adaptive-moment (Adam) parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for a fixed list of parameter groups.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, group_sizes: &[usize]) -> Result<Self> {
        if !(config.learning_rate > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        Ok(Self {
            config,
            first: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, group: usize) -> &[T] {
        &self.first[group]
    }

    /// Applies one update. Gradients are checked before any parameter is
    /// touched, so a failed step leaves both parameters and state intact.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} groups, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (gi, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[gi].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("parameter group {gi} size mismatch")));
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { group: gi, index });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let b1 = T::from_f64c(c.beta1);
        let b2 = T::from_f64c(c.beta2);
        let one = T::one();
        // Bias corrections folded into the step size.
        let step_size = T::from_f64c(c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
        let eps_hat = T::from_f64c(c.epsilon * (1.0 - c.beta2.powf(t)).sqrt());

        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[gi];
            let v = &mut self.second[gi];
            for i in 0..p.len() {
                let gv = g[i];
                m[i] = b1 * m[i] + (one - b1) * gv;
                v[i] = b2 * v[i] + (one - b2) * gv * gv;
                p[i] = p[i] - step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = OptimizerState::<f64>::new(AdamConfig::default(), &[3]).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut [&mut p], &[&[0.3, 0.0, 0.0]]).unwrap();
        let after_one = p.clone();
        let m_before = st.first_moment(0)[0];
        st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        // Momentum from the first step still moves p[0]; untouched entries stay put.
        assert_eq!(&p[1..], &after_one[1..]);
        assert!((st.first_moment(0)[0] - 0.9 * m_before).abs() < 1e-15);

        let mut fresh = OptimizerState::<f64>::new(AdamConfig::default(), &[2]).unwrap();
        let mut q = vec![4.0, 5.0];
        fresh.step(&mut [&mut q], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(q, vec![4.0, 5.0]);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut st = OptimizerState::<f64>::new(cfg, &[1]).unwrap();
        let mut w = vec![0.0];
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            st.step(&mut [&mut w], &[&[g]]).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn loss_decreases_on_convex_quadratic() {
        let mut st = OptimizerState::<f64>::new(AdamConfig { learning_rate: 0.05, ..Default::default() }, &[2]).unwrap();
        let mut w = vec![2.0, -1.0];
        let loss = |w: &[f64]| (w[0] - 1.0).powi(2) + 4.0 * (w[1] + 0.5).powi(2);
        let start = loss(&w);
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 1.0), 8.0 * (w[1] + 0.5)];
            st.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!(loss(&w) < 0.01 * start);
    }

    #[test]
    fn step_counter_and_nan_guard() {
        let mut st = OptimizerState::<f32>::new(AdamConfig::default(), &[1]).unwrap();
        let mut p = vec![1.0f32];
        for k in 1..=3 {
            st.step(&mut [&mut p], &[&[0.1]]).unwrap();
            assert_eq!(st.steps(), k);
        }
        let before = p.clone();
        let err = st.step(&mut [&mut p], &[&[f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { group: 0, index: 0 }));
        assert_eq!(p, before);
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = AdamConfig { learning_rate: 0.0, ..Default::default() };
        assert!(OptimizerState::<f64>::new(cfg, &[1]).is_err());
    }
}
