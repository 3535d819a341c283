//! Distillation objectives and teacher-side logit construction.
//!
//! The student objective is `α·NLL(z_s, y) + (1 − α)·KD(z_s, z_t)` with
//!
//! ```text
//! KD(z_s, z_t) = −τ² Σ_j softmax_j(z_t / τ) · log softmax_j(z_s / τ)
//! ```
//!
//! averaged over the batch. Teacher ensembles are fused as
//! `z_t = log(mean_i softmax(z_i))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillLossConfig {
    pub alpha: f32,
    pub tau: f32,
}

impl DistillLossConfig {
    pub fn new(alpha: f32, tau: f32) -> Result<Self> {
        let cfg = DistillLossConfig { alpha, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "α must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "τ must be positive, got {tau}"
        )))
    }
}

/// Row-wise log-softmax of `z / tau` in f64, via max subtraction.
pub fn log_softmax_row(z: &[f32], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|&v| f64::from(v) / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| (v - max) - lse).collect()
}

/// Tempered softmax of a single logit vector.
pub fn softmax(z: &[f32], tau: f32) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "softmax needs finite, non-empty logits".into(),
        ));
    }
    Ok(log_softmax_row(z, f64::from(tau))
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Fuses component logits `[N, c]` into `log(mean_i softmax(z_i))`.
pub fn ensemble_logits(components: &[Tensor]) -> Result<Tensor> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one component".into()))?;
    for c in components {
        if c.shape() != first.shape() || c.shape().len() != 2 {
            return Err(Error::shape("ensemble_logits", first.shape(), c.shape()));
        }
    }
    let classes = first.shape()[1];
    let m = components.len() as f64;
    let mut out = Vec::with_capacity(first.numel());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(components.len());
    for r in 0..first.shape()[0] {
        rows.clear();
        for c in components {
            rows.push(log_softmax_row(
                &c.data()[r * classes..(r + 1) * classes],
                1.0,
            ));
        }
        for j in 0..classes {
            let max = rows
                .iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + rows
                    .iter()
                    .map(|row| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            out.push((lse - m.ln()) as f32);
        }
    }
    Tensor::new(first.shape().to_vec(), out)
}

/// `m` frozen networks evaluated in eval mode.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    components: Vec<Network>,
}

impl TeacherEnsemble {
    pub fn new(mut components: Vec<Network>) -> Result<Self> {
        let first = components.first().ok_or_else(|| {
            Error::InvalidArgument("ensemble needs at least one component".into())
        })?;
        let (arity, input) = (first.classes(), first.input_shape().to_vec());
        for c in &components {
            if c.classes() != arity || c.input_shape() != input.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "ensemble components disagree: {arity} classes on {input:?} vs {} on {:?}",
                    c.classes(),
                    c.input_shape()
                )));
            }
        }
        for c in &mut components {
            c.set_mode(Mode::Eval);
        }
        Ok(TeacherEnsemble { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.components[0].classes()
    }

    pub fn components(&self) -> &[Network] {
        &self.components
    }

    /// Fused teacher logits for a normalized batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        if self.components.len() == 1 {
            return self.components[0].predict(batch);
        }
        let parts = self
            .components
            .iter()
            .map(|c| c.predict(batch))
            .collect::<Result<Vec<_>>>()?;
        ensemble_logits(&parts)
    }
}

/// Teacher probabilities `softmax(z_t / τ)` as a constant on the tape.
fn tempered_targets(zt: &Tensor, tau: f32) -> Result<Tensor> {
    let c = zt.shape()[1];
    let data = zt
        .data()
        .chunks(c)
        .flat_map(|row| {
            log_softmax_row(row, f64::from(tau))
                .into_iter()
                .map(|v| v.exp() as f32)
        })
        .collect();
    Tensor::new(zt.shape().to_vec(), data)
}

/// Mean over the batch of `−Σ_j target_j · log softmax_j(z / τ)`, times `scale`.
fn soft_cross_entropy(
    tape: &mut Tape,
    z: Var,
    targets: Tensor,
    tau: f32,
    scale: f32,
) -> Result<Var> {
    let n = tape.shape(z)[0] as f32;
    let scaled = if tau == 1.0 {
        z
    } else {
        tape.scale(z, 1.0 / tau)?
    };
    let logp = tape.log_softmax(scaled)?;
    let t = tape.constant(targets);
    let prod = tape.mul(logp, t)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -scale / n)
}

fn check_logits(op: &'static str, tape: &Tape, z: Var, other: &[usize]) -> Result<()> {
    let s = tape.shape(z);
    if s.len() != 2 || s != other {
        return Err(Error::shape(op, s, other));
    }
    Ok(())
}

/// Builds one-hot rows from class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Supervised cross-entropy against one-hot rows `y`.
pub fn nll_loss(tape: &mut Tape, zs: Var, y: &Tensor) -> Result<Var> {
    check_logits("nll_loss", tape, zs, y.shape())?;
    let c = y.shape()[1];
    for row in y.data().chunks(c) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::InvalidArgument("labels are not one-hot".into()));
        }
    }
    soft_cross_entropy(tape, zs, y.clone(), 1.0, 1.0)
}

/// τ²-scaled teacher–student cross-entropy, averaged over the batch.
pub fn kd_loss(tape: &mut Tape, zs: Var, zt: &Tensor, tau: f32) -> Result<Var> {
    check_tau(tau)?;
    check_logits("kd_loss", tape, zs, zt.shape())?;
    let targets = tempered_targets(zt, tau)?;
    soft_cross_entropy(tape, zs, targets, tau, tau * tau)
}

/// `α·nll + (1 − α)·kd`. Labels may be absent only when `α = 0`.
pub fn student_loss(
    tape: &mut Tape,
    zs: Var,
    zt: &Tensor,
    y: Option<&Tensor>,
    cfg: &DistillLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let kd = kd_loss(tape, zs, zt, cfg.tau)?;
    if cfg.alpha == 0.0 {
        return Ok(kd);
    }
    let y = y.ok_or_else(|| Error::InvalidArgument("α > 0 requires labels".into()))?;
    let nll = nll_loss(tape, zs, y)?;
    let a = tape.scale(nll, cfg.alpha)?;
    let b = tape.scale(kd, 1.0 - cfg.alpha)?;
    tape.add(a, b)
}

/// Value of [`kd_loss`] with f64 accumulation, for evaluation passes.
pub fn kd_loss_value(zs: &Tensor, zt: &Tensor, tau: f32) -> Result<f64> {
    check_tau(tau)?;
    if zs.shape() != zt.shape() || zs.shape().len() != 2 {
        return Err(Error::shape("kd_loss", zs.shape(), zt.shape()));
    }
    let c = zs.shape()[1];
    let tau64 = f64::from(tau);
    let mut total = 0.0;
    for (s, t) in zs.data().chunks(c).zip(zt.data().chunks(c)) {
        let ls = log_softmax_row(s, tau64);
        let lt = log_softmax_row(t, tau64);
        total -= lt.iter().zip(&ls).map(|(a, b)| a.exp() * b).sum::<f64>();
    }
    Ok(tau64 * tau64 * total / zs.shape()[0] as f64)
}
