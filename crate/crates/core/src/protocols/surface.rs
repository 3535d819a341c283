use serde::{Deserialize, Serialize};

use super::{run_cells, Context};
use crate::data::{subset, Dataset};
use crate::error::{Error, Result};
use crate::losses::kd_loss_value;
use crate::metrics::{top1_agreement, EvalBatchResult};
use crate::nn::{Network, WeightVector};

fn default_resolution() -> usize {
    25
}
fn default_lo() -> f64 {
    -0.5
}
fn default_hi() -> f64 {
    1.5
}
fn default_tau() -> f32 {
    4.0
}
fn default_eval_examples() -> usize {
    2048
}

/// Grid and evaluation settings for [`loss_surface`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default = "default_tau")]
    pub tau: f32,
    /// Size of the seeded evaluation subset of the distillation data.
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default)]
    pub eval_seed: u64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec {
            resolution: default_resolution(),
            lo: default_lo(),
            hi: default_hi(),
            tau: default_tau(),
            eval_examples: default_eval_examples(),
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub teacher: [f64; 2],
    pub init: [f64; 2],
    #[serde(rename = "final")]
    pub final_: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceHeader {
    pub spec: SurfaceSpec,
    pub eval_examples: usize,
    /// Length of `θ_init − θ_t`, the scale of the first axis.
    pub u_norm: f64,
    /// Length of the component of `θ_final − θ_t` orthogonal to the first axis.
    pub v_norm: f64,
    pub uv_dot: f64,
    pub anchors: Anchors,
    pub init_reconstruction_error: f64,
    pub final_reconstruction_error: f64,
    /// kd loss of the teacher against itself on the evaluation subset.
    pub teacher_self_loss: f64,
}

/// Distillation loss and train agreement over the plane through the teacher,
/// the student's initial weights and the student's final weights.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub header: SurfaceHeader,
    /// Unit basis vectors in flattened weight space.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `loss[j][i]` at coordinates `(a[i], b[j])`.
    pub loss: Vec<Vec<f64>>,
    pub agreement: Vec<Vec<f64>>,
}

impl SurfaceGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,loss,agreement\n");
        for (j, &b) in self.b.iter().enumerate() {
            for (i, &a) in self.a.iter().enumerate() {
                s.push_str(&format!(
                    "{a},{b},{},{}\n",
                    self.loss[j][i], self.agreement[j][i]
                ));
            }
        }
        s
    }

    pub fn header_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.header)? + "\n")
    }

    /// Loss at an exact grid node.
    pub fn loss_at(&self, a: f64, b: f64) -> Option<f64> {
        let i = self.a.iter().position(|&x| x == a)?;
        let j = self.b.iter().position(|&x| x == b)?;
        Some(self.loss[j][i])
    }

    pub fn min_loss(&self) -> f64 {
        self.loss
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Node `i` of `n` evenly spaced points on `[lo, hi]`, written so that grid
/// coordinates that are exactly representable (like 0 and 1 on `[-0.5, 1.5]`
/// with 25 points) come out exact.
fn node(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    (lo * (n - 1 - i) as f64 + hi * i as f64) / (n - 1) as f64
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Evaluates the kd loss and top-1 agreement against `teacher` on the plane
/// `θ_t + a·(θ_init − θ_t) + b·w`, where `w` is the part of `θ_final − θ_t`
/// orthogonal to the first axis. The teacher sits at (0, 0), the initial
/// student at (1, 0) and the final student at (⟨θ_final − θ_t, u⟩/‖θ_init − θ_t‖, 1).
pub fn loss_surface(
    teacher: &Network,
    init: &WeightVector,
    final_: &WeightVector,
    eval: &Dataset,
    spec: &SurfaceSpec,
    ctx: &Context,
) -> Result<SurfaceGrid> {
    if spec.resolution < 2 || !(spec.hi > spec.lo) {
        return Err(Error::InvalidArgument(
            "surface grid needs resolution >= 2 and hi > lo".into(),
        ));
    }
    let tw = teacher.weights();
    tw.check_compatible(init)?;
    tw.check_compatible(final_)?;
    let (t, i0, f) = (tw.to_flat(), init.to_flat(), final_.to_flat());
    let d1: Vec<f64> = i0.iter().zip(&t).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = f.iter().zip(&t).map(|(a, b)| a - b).collect();
    let n1 = dot(&d1, &d1).sqrt();
    if n1 < 1e-8 {
        return Err(Error::DegeneratePlane(
            "initial student coincides with the teacher".into(),
        ));
    }
    let u: Vec<f64> = d1.iter().map(|x| x / n1).collect();
    let proj = dot(&d2, &u);
    let w: Vec<f64> = d2.iter().zip(&u).map(|(x, y)| x - proj * y).collect();
    let nw = dot(&w, &w).sqrt();
    if nw < 1e-8 {
        return Err(Error::DegeneratePlane(
            "the three anchors are colinear".into(),
        ));
    }
    let v: Vec<f64> = w.iter().map(|x| x / nw).collect();
    let xf = proj / n1;

    let point = |a: f64, b: f64| -> Vec<f64> {
        t.iter()
            .zip(&d1)
            .zip(&w)
            .map(|((t, d), w)| t + a * d + b * w)
            .collect()
    };
    // Measured on the f32 weights a network would actually load.
    let init_err = max_abs_diff(&tw.with_flat(&point(1.0, 0.0))?.to_flat(), &i0);
    let final_err = max_abs_diff(&tw.with_flat(&point(xf, 1.0))?.to_flat(), &f);

    let eval = if eval.len() > spec.eval_examples {
        subset(eval, spec.eval_examples, spec.eval_seed)?
    } else {
        eval.clone()
    };
    let x = eval.inputs(0, eval.len())?;
    let zt = teacher.predict(&x)?;
    let self_loss = kd_loss_value(&zt, &zt, spec.tau)?;

    let n = spec.resolution;
    let coords: Vec<f64> = (0..n).map(|i| node(spec.lo, spec.hi, n, i)).collect();
    let rows = run_cells(n, |j| {
        let mut net = teacher.clone();
        let mut loss = Vec::with_capacity(n);
        let mut agree = Vec::with_capacity(n);
        for &a in &coords {
            ctx.cancel.check()?;
            net.load_weights(&tw.with_flat(&point(a, coords[j]))?)?;
            let zs = net.predict(&x)?;
            loss.push(kd_loss_value(&zs, &zt, spec.tau)?);
            agree.push(top1_agreement(&EvalBatchResult::new(
                zt.clone(),
                zs,
                vec![],
            )?));
        }
        Ok((loss, agree))
    })?;
    let (loss, agreement) = rows.into_iter().unzip();
    Ok(SurfaceGrid {
        header: SurfaceHeader {
            spec: spec.clone(),
            eval_examples: eval.len(),
            u_norm: n1,
            v_norm: nw,
            uv_dot: dot(&u, &v),
            anchors: Anchors {
                teacher: [0.0, 0.0],
                init: [1.0, 0.0],
                final_: [xf, 1.0],
            },
            init_reconstruction_error: init_err,
            final_reconstruction_error: final_err,
            teacher_self_loss: self_loss,
        },
        u,
        v,
        a: coords.clone(),
        b: coords,
        loss,
        agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::train::tests::blobs;

    #[test]
    fn default_grid_hits_zero_and_one() {
        let pts: Vec<f64> = (0..25).map(|i| node(-0.5, 1.5, 25, i)).collect();
        assert!(pts.contains(&0.0) && pts.contains(&1.0));
        assert_eq!((pts[0], pts[24]), (-0.5, 1.5));
    }

    #[test]
    fn anchors_and_basis() {
        let data = blobs(30, 1);
        let t = Network::from_preset("mlp-5-ln@1x2x2:2", 1).unwrap();
        let i = Network::from_preset("mlp-5-ln@1x2x2:2", 2)
            .unwrap()
            .weights();
        let f = Network::from_preset("mlp-5-ln@1x2x2:2", 3)
            .unwrap()
            .weights();
        let spec = SurfaceSpec {
            resolution: 5,
            lo: -0.5,
            hi: 1.5,
            ..SurfaceSpec::default()
        };
        let g = loss_surface(&t, &i, &f, &data.train, &spec, &Context::default()).unwrap();
        assert!(g.header.uv_dot.abs() < 1e-6);
        assert!((dot(&g.u, &g.u) - 1.0).abs() < 1e-6 && (dot(&g.v, &g.v) - 1.0).abs() < 1e-6);
        assert!(g.header.final_reconstruction_error < 1e-5);
        assert!(g.header.init_reconstruction_error < 1e-5);
        let origin = g.loss_at(0.0, 0.0).unwrap();
        assert!((origin - g.header.teacher_self_loss).abs() < 1e-5);
        assert!(g.min_loss() <= origin + 1e-6);
        assert_eq!(g.to_csv().lines().count(), 26);
    }

    #[test]
    fn colinear_anchors_are_degenerate() {
        let data = blobs(10, 2);
        let t = Network::from_preset("mlp-3@1x2x2:2", 1).unwrap();
        let i = Network::from_preset("mlp-3@1x2x2:2", 2).unwrap().weights();
        for f in [i.clone(), t.weights()] {
            let r = loss_surface(
                &t,
                &i,
                &f,
                &data.train,
                &SurfaceSpec::default(),
                &Context::default(),
            );
            assert!(matches!(r, Err(Error::DegeneratePlane(_))));
        }
        let r = loss_surface(
            &t,
            &t.weights(),
            &i,
            &data.train,
            &SurfaceSpec::default(),
            &Context::default(),
        );
        assert!(matches!(r, Err(Error::DegeneratePlane(_))));
    }
}
