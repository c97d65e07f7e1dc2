//! SGD and Adam over the flat parameter vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl OptimKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Optimizer state over the flat (all-parameter) coordinate space.
/// Adam moments at pruned coordinates are zeroed when a mask lands so
/// stale momentum cannot leak through a later revival.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, lr: f64, len: usize) -> OptimizerState {
        OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update of `params` by `grads`. When a mask (true = kept, over
    /// the same flat space) is supplied, masked coordinates are re-zeroed
    /// after the update so they stay exactly 0.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        keep: Option<&[bool]>,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "params {} / grads {} vs state {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        if let Some(k) = keep {
            if k.len() != params.len() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("mask {} vs params {}", k.len(), params.len()),
                ));
            }
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                context: "optimizer gradients".into(),
            });
        }
        self.step += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
        if let Some(k) = keep {
            for (p, &keep) in params.iter_mut().zip(k) {
                if !keep {
                    *p = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Zero the moments of pruned coordinates.
    pub fn zero_pruned(&mut self, keep: &[bool]) {
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                self.m[i] = 0.0;
                self.v[i] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_update() {
        let mut opt = OptimizerState::new(OptimKind::Sgd, 0.1, 1);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0], None).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn masked_coordinate_stays_zero() {
        let mut opt = OptimizerState::new(OptimKind::Adam, 0.1, 2);
        let mut p = [0.0, 1.0];
        let keep = [false, true];
        for _ in 0..5 {
            opt.step(&mut p, &[3.0, 3.0], Some(&keep)).unwrap();
            assert_eq!(p[0], 0.0);
        }
        assert!(p[1] != 1.0);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // At t = 1 bias correction makes the update lr * g/(|g| + eps),
        // so the magnitude is ~lr regardless of gradient scale.
        for &g in &[1e-6, 1.0, 1e6] {
            let mut opt = OptimizerState::new(OptimKind::Adam, 0.01, 1);
            let mut p = [0.0];
            opt.step(&mut p, &[g], None).unwrap();
            assert!(
                (p[0].abs() - 0.01).abs() < 1e-4,
                "gradient {g} moved by {}",
                p[0].abs()
            );
        }
    }

    #[test]
    fn non_finite_gradients_error() {
        let mut opt = OptimizerState::new(OptimKind::Sgd, 0.1, 1);
        let mut p = [1.0];
        assert!(opt.step(&mut p, &[f64::INFINITY], None).is_err());
    }

    #[test]
    fn zero_pruned_clears_moments() {
        let mut opt = OptimizerState::new(OptimKind::Adam, 0.1, 2);
        let mut p = [1.0, 1.0];
        opt.step(&mut p, &[1.0, 1.0], None).unwrap();
        assert!(opt.m[0] != 0.0 && opt.v[0] != 0.0);
        opt.zero_pruned(&[false, true]);
        assert_eq!((opt.m[0], opt.v[0]), (0.0, 0.0));
        assert!(opt.m[1] != 0.0);
    }
}
