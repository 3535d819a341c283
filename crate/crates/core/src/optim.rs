//! SGD (with optional Nesterov momentum) and Adam, plus per-epoch learning-rate schedules.
//!
//! Weight decay is the classic coupled form: `wd·θ` is added to the gradient
//! before the update, for every trainable tensor including normalization
//! parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub eps: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32, nesterov: bool, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            nesterov,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn adam(lr: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: 0.0,
            nesterov: false,
            ..Self::sgd(lr, 0.0, false, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("optimizer: {what}")));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta_max: f32,
    #[serde(default)]
    pub eta_min: f32,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn cosine(eta_max: f32, eta_min: f32, total_steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            eta_max,
            eta_min,
            total_steps,
        }
    }

    pub fn constant(eta: f32, total_steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            eta_max: eta,
            eta_min: eta,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max >= self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs eta_max >= eta_min >= 0, got {} / {}",
                self.eta_max, self.eta_min
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument(
                "schedule total_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step` (an epoch index; the schedule is stepped per epoch).
pub fn lr_at(sched: &ScheduleConfig, step: usize) -> Result<f32> {
    if step > sched.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    Ok(match sched.kind {
        ScheduleKind::Constant => sched.eta_max,
        ScheduleKind::Cosine => {
            let (hi, lo) = (f64::from(sched.eta_max), f64::from(sched.eta_min));
            let frac = step as f64 / sched.total_steps as f64;
            (lo + (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0) as f32
        }
    })
}

/// Optimizer state for one list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f32,
    /// SGD velocity or Adam first moment.
    first: Vec<Vec<f32>>,
    /// Adam second moment.
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            lr: cfg.lr,
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Applies one update. `grads[i]` may be `None` for a parameter that
    /// received no gradient, which is treated as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f32]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer step",
                &[params.len()],
                &[grads.len()],
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::shape("optimizer step", p.shape(), &[g.len()]));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericFault {
                        op: "optimizer step",
                    });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if self.cfg.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let (lr, wd, mu) = (self.lr, self.cfg.weight_decay, self.cfg.momentum);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let theta = p.data_mut();
            let grad = |k: usize, th: f32| g.map_or(0.0, |g| g[k]) + wd * th;
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    for k in 0..theta.len() {
                        let d = grad(k, theta[k]);
                        v[k] = mu * v[k] + d;
                        let update = if self.cfg.nesterov {
                            d + mu * v[k]
                        } else {
                            v[k]
                        };
                        theta[k] -= lr * update;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for k in 0..theta.len() {
                        let d = grad(k, theta[k]);
                        m[k] = b1 * m[k] + (1.0 - b1) * d;
                        v[k] = b2 * v[k] + (1.0 - b2) * d * d;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        theta[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    op: "optimizer step",
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: OptimizerConfig, theta: f32, grads: &[f32]) -> f32 {
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut t = Tensor::from_vec(vec![theta]);
        for g in grads {
            let gs = [*g];
            opt.step(&mut [&mut t], &[Some(&gs[..])]).unwrap();
        }
        t.item()
    }

    #[test]
    fn plain_gradient_step() {
        assert_eq!(
            run(OptimizerConfig::sgd(1.0, 0.0, false, 0.0), 0.0, &[1.0]),
            -1.0
        );
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        assert_eq!(
            run(OptimizerConfig::sgd(0.1, 0.9, true, 0.0), 0.7, &[0.0, 0.0]),
            0.7
        );
        assert_eq!(run(OptimizerConfig::adam(0.1, 0.0), 0.7, &[0.0, 0.0]), 0.7);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        // v1 = 1, θ1 = -0.1; v2 = 0.9 + 1 = 1.9, θ2 = -0.1 - 0.19
        let got = run(OptimizerConfig::sgd(0.1, 0.9, false, 0.0), 0.0, &[1.0, 1.0]);
        assert!((got - (-0.29)).abs() < 1e-7, "{got}");
    }

    #[test]
    fn nesterov_looks_ahead() {
        // step 1: v = 1, update = 1 + 0.9 = 1.9
        let got = run(OptimizerConfig::sgd(0.1, 0.9, true, 0.0), 0.0, &[1.0]);
        assert!((got - (-0.19)).abs() < 1e-7, "{got}");
    }

    #[test]
    fn weight_decay_is_coupled() {
        // g' = 0 + 0.5 * 2 = 1
        assert_eq!(
            run(OptimizerConfig::sgd(1.0, 0.0, false, 0.5), 2.0, &[0.0]),
            1.0
        );
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let got = run(OptimizerConfig::adam(0.01, 0.0), 1.0, &[3.0]);
        assert!((got - 0.99).abs() < 1e-6, "{got}");
    }

    #[test]
    fn non_finite_gradients_fault() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, false, 0.0)).unwrap();
        let mut t = Tensor::from_vec(vec![0.0]);
        let g = [f32::NAN];
        assert!(matches!(
            opt.step(&mut [&mut t], &[Some(&g[..])]),
            Err(Error::NumericFault { .. })
        ));
    }

    #[test]
    fn cosine_endpoints() {
        let s = ScheduleConfig::cosine(5.0e-2, 1e-6, 10);
        assert_eq!(lr_at(&s, 0).unwrap(), 5.0e-2);
        assert!((lr_at(&s, 10).unwrap() - 1e-6).abs() < 1e-12);
        assert!((lr_at(&s, 5).unwrap() - (5.0e-2 + 1e-6) / 2.0).abs() < 1e-9);
        assert!(lr_at(&s, 11).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0, 0.0, false, 0.0)).is_err());
        assert!(Optimizer::new(OptimizerConfig::sgd(0.1, 1.0, false, 0.0)).is_err());
        assert!(Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, false, -1.0)).is_err());
        assert!(ScheduleConfig::cosine(0.1, 0.2, 5).validate().is_err());
        assert!(ScheduleConfig::cosine(0.1, 0.0, 0).validate().is_err());
    }
}
