//! Adam with bias correction and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(lr_min.is_finite() && lr_max.is_finite() && lr_min >= 0.0 && lr_min <= lr_max) {
            return Err(Error::invalid(format!(
                "need 0 ≤ lr_min ≤ lr_max, got lr_min={lr_min} lr_max={lr_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be ≥ 1"));
        }
        Ok(CosineSchedule {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// Steps past the end stay at `lr_min`.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.lr_min;
        }
        let phase = PI * step as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `(name, len)` blocks.
    pub fn new(config: &AdamConfig, shapes: &[(String, usize)]) -> Self {
        AdamState {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            names: shapes.iter().map(|(n, _)| n.clone()).collect(),
            m: shapes.iter().map(|(_, l)| vec![0.0; *l]).collect(),
            v: shapes.iter().map(|(_, l)| vec![0.0; *l]).collect(),
        }
    }

    /// One bias-corrected Adam update of every block.
    ///
    /// Gradients are checked for NaN/Inf before anything is modified, so a
    /// failed step leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut [f64])],
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} blocks, got {} parameters and {} gradients",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((pn, p), (gn, g))) in params.iter().zip(grads).enumerate() {
            if *pn != self.names[i] || *gn != self.names[i] || p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::shape(format!(
                    "block {i}: expected {} with {} values, got parameter {pn} ({}) and gradient {gn} ({})",
                    self.names[i],
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in parameter {pn}[{j}]",
                    g[j]
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pj, gj), mj), vj) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule::new(0.1, 0.01, 100).unwrap();
        assert_eq!(s.lr_at_step(0), 0.1);
        assert_eq!(s.lr_at_step(100), 0.01);
        assert!((s.lr_at_step(50) - 0.055).abs() < 1e-15);
        assert_eq!(s.lr_at_step(1000), 0.01);
    }

    #[test]
    fn schedule_validation() {
        assert!(CosineSchedule::new(0.1, 0.2, 10).is_err());
        assert!(CosineSchedule::new(0.1, 0.0, 0).is_err());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut state = AdamState::new(&AdamConfig::default(), &[("w".into(), 2)]);
        let mut p = vec![1.0, 2.0];
        let err = state
            .step(&mut [("w".into(), &mut p)], &[("w".into(), vec![0.0, f64::NAN])], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = AdamState::new(&AdamConfig::default(), &[("w".into(), 3)]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..100 {
            state
                .step(&mut [("w".into(), &mut p)], &[("w".into(), vec![0.0; 3])], 1e-2)
                .unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut state = AdamState::new(&AdamConfig::default(), &[("w".into(), 3)]);
        let mut p = vec![0.0; 3];
        state
            .step(&mut [("w".into(), &mut p)], &[("w".into(), vec![2.0, -0.5, 1e-6])], 1e-3)
            .unwrap();
        assert!(p[0] < 0.0 && p[1] > 0.0 && p[2] < 0.0);
    }
}
