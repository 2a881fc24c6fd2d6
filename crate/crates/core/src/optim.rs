//! Adam with a per-epoch cosine-annealing learning rate.

use std::f32::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub t_max: usize,
}

impl CosineSchedule {
    /// `base_lr * (1 + cos(pi * epoch / t_max)) / 2`
    pub fn lr(&self, epoch: usize) -> f32 {
        if self.t_max == 0 {
            return self.base_lr;
        }
        let phase = epoch.min(self.t_max) as f32 / self.t_max as f32;
        self.base_lr * 0.5 * (1.0 + (PI * phase).cos())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub schedule: CosineSchedule,
    pub epoch: usize,
    /// Parameter tensors whose update was skipped because of a non-finite
    /// gradient.
    pub skipped_updates: usize,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(base_lr: f32, t_max: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            schedule: CosineSchedule { base_lr, t_max },
            epoch: 0,
            skipped_updates: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f32 {
        self.schedule.lr(self.epoch)
    }

    /// One Adam update at the scheduled learning rate of the current epoch.
    pub fn adam_step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidParameter(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::InvalidParameter(format!(
                    "parameter tensor {i} has {} values but its gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len()
            || self.first_moment.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::InvalidParameter(
                "parameter layout changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            if g.iter().any(|x| !x.is_finite()) {
                self.skipped_updates += 1;
                log::warn!("skipping update for a parameter tensor with a non-finite gradient");
                continue;
            }
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_first_step_leaves_params_unchanged() {
        let mut opt = OptimizerState::new(0.1, 10);
        let mut p = vec![1.0f32, -2.0];
        opt.adam_step(&mut [p.as_mut_slice()], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected both equal 1, so the step is
        // lr / (1 + eps).
        let mut opt = OptimizerState::new(0.1, 10);
        let mut p = vec![0.0f32];
        opt.adam_step(&mut [p.as_mut_slice()], &[vec![1.0]]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn optimizer_is_stateful() {
        let mut opt = OptimizerState::new(0.1, 10);
        let mut p = vec![0.0f32];
        opt.adam_step(&mut [p.as_mut_slice()], &[vec![1.0]]).unwrap();
        let d1 = p[0];
        opt.adam_step(&mut [p.as_mut_slice()], &[vec![0.5]]).unwrap();
        let d2 = p[0] - d1;
        assert!((d1 - d2).abs() > 1e-4, "second delta {d2} equals first {d1}");
    }

    #[test]
    fn non_finite_gradient_skips_that_tensor() {
        let mut opt = OptimizerState::new(0.1, 10);
        let mut a = vec![1.0f32];
        let mut b = vec![1.0f32];
        opt.adam_step(&mut [a.as_mut_slice(), b.as_mut_slice()], &[vec![f32::NAN], vec![1.0]])
            .unwrap();
        assert_eq!(a, vec![1.0]);
        assert!(b[0] < 1.0);
        assert_eq!(opt.skipped_updates, 1);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            t_max: 100,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!(s.lr(100).abs() < 1e-10);
        assert!((s.lr(50) - 5e-4).abs() < 1e-9);
        for e in 0..100 {
            let lr = s.lr(e);
            assert!(lr > 0.0 && lr <= 1e-3);
            let expected = 1e-3 * (1.0 + (std::f64::consts::PI * e as f64 / 100.0).cos()) / 2.0;
            assert!((lr as f64 - expected).abs() < 1e-9);
        }
    }
}
