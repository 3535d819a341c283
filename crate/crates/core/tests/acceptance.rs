//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 7-10 train on MNIST, read from `DISTILAB_MNIST_DIR` or
//! `data/mnist` at the workspace root (see `scripts/fetch_mnist.sh`).
//! The process fails if any criterion fails, except those listed in
//! `UNATTAINABLE`, whose FAIL lines carry the reason.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use distilab::autodiff::Tape;
use distilab::data::{subset, AugmentationPolicy, Dataset, SplitPlan};
use distilab::losses::{
    kd_loss, kd_loss_value, nll_loss, one_hot, DistillLossConfig, TeacherEnsemble,
};
use distilab::metrics::{self, EvalBatchResult};
use distilab::nn::{LayerSpec, Mode, Network, NORM_EPS};
use distilab::optim::OptimizerConfig;
use distilab::protocols::{
    self, Context, DataSpec, InitSpec, Role, RunConfig, SubsetSpec, TrainData,
};
use distilab::rng::Stream;
use distilab::tensor::Tensor;
use distilab::Result;

/// Criteria that cannot hold as written, with the reason printed next to FAIL.
const UNATTAINABLE: &[(usize, &str)] = &[(
    3,
    "for c classes the large-tau gradient of the tau^2-scaled loss tends to (z_s - z_t)/c, \
     so it cannot match z_s - z_t within 2% unless c = 1",
)];

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            pass: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines
            .push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("     {line}"));
    }
}

fn rng(tag: &str, k: u64) -> Stream {
    Stream::tagged(2024, tag, &[k])
}

fn uniform(r: &mut Stream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.uniform_range(lo, hi)).collect()
}

fn int(r: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + r.below((hi - lo + 1) as u64) as usize
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

// ── criterion 1: gradients against a 64-bit finite-difference oracle ──────

const FD_STEP: f64 = 1e-3;

/// 64-bit forward of one layer: `inputs[0]` is the batch, the rest are parameters.
type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

fn dense64(n: usize, i: usize, o: usize) -> Oracle {
    Box::new(move |v| {
        let (x, w, b) = (&v[0], &v[1], &v[2]);
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            for k in 0..o {
                out[r * o + k] = b[k] + (0..i).map(|j| x[r * i + j] * w[k * i + j]).sum::<f64>();
            }
        }
        out
    })
}

#[allow(clippy::too_many_arguments)]
fn conv64(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Oracle {
    let (ho, wo) = (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    );
    Box::new(move |v| {
        let (x, wt, b) = (&v[0], &v[1], &v[2]);
        let mut out = vec![0.0; n * f * ho * wo];
        for img in 0..n {
            for ff in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[ff];
                        for cc in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((img * c + cc) * h + iy as usize) * w + ix as usize;
                                    s += x[xi] * wt[((ff * c + cc) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((img * f + ff) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    })
}

fn relu64() -> Oracle {
    Box::new(|v| v[0].iter().map(|&x| x.max(0.0)).collect())
}

/// Per-example normalization over all features, per-channel affine.
fn layer_norm64(n: usize, c: usize, s: usize) -> Oracle {
    Box::new(move |v| {
        let (x, g, b) = (&v[0], &v[1], &v[2]);
        let m = c * s;
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let sd = (var + f64::from(NORM_EPS)).sqrt();
            for k in 0..m {
                out[i * m + k] = (row[k] - mean) / sd * g[k / s] + b[k / s];
            }
        }
        out
    })
}

/// Per-channel normalization over batch and spatial axes (biased variance).
fn batch_norm64(n: usize, c: usize, s: usize) -> Oracle {
    Box::new(move |v| {
        let (x, g, b) = (&v[0], &v[1], &v[2]);
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let idx: Vec<usize> = (0..n)
                .flat_map(|i| (0..s).map(move |k| (i * c + ch) * s + k))
                .collect();
            let mean = idx.iter().map(|&j| x[j]).sum::<f64>() / idx.len() as f64;
            let var = idx.iter().map(|&j| (x[j] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
            let sd = (var + f64::from(NORM_EPS)).sqrt();
            for &j in &idx {
                out[j] = (x[j] - mean) / sd * g[ch] + b[ch];
            }
        }
        out
    })
}

fn max_pool64(planes: usize, h: usize, w: usize, size: usize) -> Oracle {
    Box::new(move |v| {
        let x = &v[0];
        let mut out = Vec::new();
        for p in 0..planes {
            for oy in 0..h / size {
                for ox in 0..w / size {
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..size {
                        for j in 0..size {
                            best = best.max(x[(p * h + oy * size + i) * w + ox * size + j]);
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    })
}

fn identity64() -> Oracle {
    Box::new(|v| v[0].clone())
}

fn log_softmax64(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let lse = m + z.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v / tau - lse).collect()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

/// Central differences of the scalar `f` at every coordinate of every input.
fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, at: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = at.to_vec();
    for t in 0..at.len() {
        for i in 0..at[t].len() {
            let x0 = probe[t][i];
            probe[t][i] = x0 + FD_STEP;
            let up = f(&probe);
            probe[t][i] = x0 - FD_STEP;
            let down = f(&probe);
            probe[t][i] = x0;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// One single-layer network, its batch and the matching 64-bit oracle.
struct LayerFixture {
    spec: LayerSpec,
    shape: Vec<usize>,
    x: Tensor,
    oracle: Oracle,
}

/// Autodiff gradient of `Σ r ⊙ layer(x)` with respect to the batch and every
/// parameter, against central differences of the 64-bit oracle.
fn layer_grad_error(fx: &LayerFixture, r: &mut Stream) -> Result<f64> {
    let mut net = Network::build(std::slice::from_ref(&fx.spec), &fx.shape, 0)?;
    for p in net.trainable_mut() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&uniform(r, n, -1.5, 1.5));
    }
    let params: Vec<Tensor> = net.trainable().into_iter().cloned().collect();
    let mut tape = Tape::new();
    let xv = tape.param(fx.x.clone());
    let f = net.forward(&mut tape, xv, true)?;
    let out_shape = tape.shape(f.logits).to_vec();
    let proj = Tensor::new(
        out_shape.clone(),
        uniform(r, out_shape.iter().product(), -1.0, 1.0),
    )?;
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(f.logits, pv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let mut auto = to64(tape.grad(xv).expect("batch is a leaf"));
    for p in &f.params {
        auto.extend(to64(tape.grad(*p).expect("parameter leaf")));
    }
    let mut at = vec![to64(fx.x.data())];
    at.extend(params.iter().map(|p| to64(p.data())));
    let r64 = to64(proj.data());
    let scalar = |v: &[Vec<f64>]| {
        (fx.oracle)(v)
            .iter()
            .zip(&r64)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    Ok(rel_err(&auto, &fd_grad(&scalar, &at)))
}

/// Batch values at least `gap` away from zero, so no finite-difference
/// stencil straddles the relu kink.
fn away_from_zero(r: &mut Stream, n: usize, gap: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = r.uniform_range(gap, 2.0);
            if r.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Pool inputs whose window maxima lead the runner-up by at least `gap`.
fn pool_input(
    r: &mut Stream,
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
    gap: f32,
) -> Vec<f32> {
    let mut x = uniform(r, planes * h * w, -1.0, 1.0);
    for p in 0..planes {
        for oy in 0..h / size {
            for ox in 0..w / size {
                let cells: Vec<usize> = (0..size * size)
                    .map(|k| (p * h + oy * size + k / size) * w + ox * size + k % size)
                    .collect();
                let winner = cells[r.below(cells.len() as u64) as usize];
                let top = cells
                    .iter()
                    .filter(|&&c| c != winner)
                    .map(|&c| x[c])
                    .fold(f32::MIN, f32::max);
                x[winner] = top + gap + r.uniform_range(0.0, 0.5);
            }
        }
    }
    x
}

fn layer_fixture(kind: &str, r: &mut Stream) -> Result<LayerFixture> {
    let n = int(r, 2, 4);
    Ok(match kind {
        "dense" => {
            let (i, o) = (int(r, 1, 6), int(r, 1, 5));
            LayerFixture {
                spec: LayerSpec::Dense {
                    inputs: i,
                    outputs: o,
                },
                shape: vec![i],
                x: Tensor::new(vec![n, i], uniform(r, n * i, -2.0, 2.0))?,
                oracle: dense64(n, i, o),
            }
        }
        "conv" => {
            let (c, f, k, stride, pad) = (
                int(r, 1, 3),
                int(r, 1, 3),
                int(r, 1, 3),
                int(r, 1, 2),
                int(r, 0, 1),
            );
            let (ho, wo) = (int(r, 2, 4), int(r, 2, 4));
            let (h, w) = (
                (ho - 1) * stride + k - 2 * pad,
                (wo - 1) * stride + k - 2 * pad,
            );
            let (h, w) = if h == 0 || w == 0 {
                (h + stride, w + stride)
            } else {
                (h, w)
            };
            LayerFixture {
                spec: LayerSpec::Conv {
                    in_channels: c,
                    filters: f,
                    kernel: k,
                    stride,
                    pad,
                },
                shape: vec![c, h, w],
                x: Tensor::new(vec![n, c, h, w], uniform(r, n * c * h * w, -2.0, 2.0))?,
                oracle: conv64(n, c, h, w, f, k, stride, pad),
            }
        }
        "relu" => {
            let d = int(r, 1, 8);
            LayerFixture {
                spec: LayerSpec::Relu,
                shape: vec![d],
                x: Tensor::new(vec![n, d], away_from_zero(r, n * d, 0.01))?,
                oracle: relu64(),
            }
        }
        "layer_norm" | "batch_norm" => {
            let c = int(r, 1, 4);
            let shape = if r.bernoulli(0.5) {
                vec![c]
            } else {
                vec![c, int(r, 1, 3), int(r, 1, 3)]
            };
            let s: usize = shape[1..].iter().product();
            let numel = n * c * s;
            let mut full = vec![n];
            full.extend(&shape);
            let (spec, oracle) = if kind == "layer_norm" {
                (
                    LayerSpec::LayerNorm {
                        channels: c,
                        eps: NORM_EPS,
                    },
                    layer_norm64(n, c, s),
                )
            } else {
                (
                    LayerSpec::BatchNorm {
                        channels: c,
                        eps: NORM_EPS,
                        momentum: 0.1,
                    },
                    batch_norm64(n, c, s),
                )
            };
            LayerFixture {
                spec,
                shape,
                x: Tensor::new(full, uniform(r, numel, -2.0, 2.0))?,
                oracle,
            }
        }
        "max_pool" => {
            let (c, size) = (int(r, 1, 3), int(r, 2, 3));
            let (h, w) = (size * int(r, 1, 3), size * int(r, 1, 3));
            LayerFixture {
                spec: LayerSpec::MaxPool { size },
                shape: vec![c, h, w],
                x: Tensor::new(vec![n, c, h, w], pool_input(r, n * c, h, w, size, 0.01))?,
                oracle: max_pool64(n * c, h, w, size),
            }
        }
        "flatten" => {
            let shape = vec![int(r, 1, 3), int(r, 1, 3), int(r, 1, 3)];
            let numel = n * shape.iter().product::<usize>();
            let mut full = vec![n];
            full.extend(&shape);
            LayerFixture {
                spec: LayerSpec::Flatten,
                shape,
                x: Tensor::new(full, uniform(r, numel, -2.0, 2.0))?,
                oracle: identity64(),
            }
        }
        other => unreachable!("no fixture for {other}"),
    })
}

/// Gradient of nll (labels) or kd (teacher logits, τ) with respect to the student logits.
fn loss_grad_error(kind: &str, r: &mut Stream) -> Result<f64> {
    let (n, c) = (int(r, 1, 4), int(r, 2, 10));
    let zs = Tensor::new(vec![n, c], uniform(r, n * c, -4.0, 4.0))?;
    let mut tape = Tape::new();
    let zv = tape.param(zs.clone());
    let oracle: Box<dyn Fn(&[Vec<f64>]) -> f64> = if kind == "nll" {
        let labels: Vec<usize> = (0..n).map(|_| r.below(c as u64) as usize).collect();
        let loss = nll_loss(&mut tape, zv, &one_hot(&labels, c)?)?;
        tape.backward(loss)?;
        Box::new(move |v| {
            let total: f64 = (0..n)
                .map(|i| -log_softmax64(&v[0][i * c..(i + 1) * c], 1.0)[labels[i]])
                .sum();
            total / n as f64
        })
    } else {
        let tau = [1.0f32, 2.0, 4.0, 8.0][r.below(4) as usize];
        let zt = Tensor::new(vec![n, c], uniform(r, n * c, -4.0, 4.0))?;
        let loss = kd_loss(&mut tape, zv, &zt, tau)?;
        tape.backward(loss)?;
        let zt64 = to64(zt.data());
        let t = f64::from(tau);
        Box::new(move |v| {
            let mut total = 0.0;
            for i in 0..n {
                let lt = log_softmax64(&zt64[i * c..(i + 1) * c], t);
                let ls = log_softmax64(&v[0][i * c..(i + 1) * c], t);
                total -= lt.iter().zip(&ls).map(|(a, b)| a.exp() * b).sum::<f64>();
            }
            t * t * total / n as f64
        })
    };
    let auto = to64(tape.grad(zv).expect("logits are a leaf"));
    Ok(rel_err(&auto, &fd_grad(&*oracle, &[to64(zs.data())])))
}

fn criterion_1() -> Result<Outcome> {
    let mut o = Outcome::new();
    const KINDS: [&str; 9] = [
        "dense",
        "conv",
        "relu",
        "layer_norm",
        "batch_norm",
        "max_pool",
        "flatten",
        "nll",
        "kd",
    ];
    for (k, kind) in KINDS.iter().enumerate() {
        let mut r = rng("grad", k as u64);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let e = match *kind {
                "nll" | "kd" => loss_grad_error(kind, &mut r)?,
                _ => layer_grad_error(&layer_fixture(kind, &mut r)?, &mut r)?,
            };
            worst = worst.max(e);
        }
        o.check(
            worst < 1e-3,
            format!("{kind:<10} worst relative error {worst:.2e} over 20 fixtures (< 1e-3)"),
        );
    }
    Ok(o)
}

// ── criterion 2: metrics against brute-force references ──────────────────

fn probs64(row: &[f32]) -> Vec<f64> {
    let z = to64(row);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn first_max(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

fn ref_agreement(t: &Tensor, s: &Tensor) -> f64 {
    let c = t.shape()[1];
    let rows: Vec<_> = t.data().chunks(c).zip(s.data().chunks(c)).collect();
    let hits = rows
        .iter()
        .filter(|(a, b)| first_max(&to64(a)) == first_max(&to64(b)))
        .count();
    hits as f64 / rows.len() as f64
}

fn ref_kl(t: &Tensor, s: &Tensor) -> f64 {
    let c = t.shape()[1];
    let n = t.shape()[0];
    let mut total = 0.0;
    for (a, b) in t.data().chunks(c).zip(s.data().chunks(c)) {
        let (p, q) = (probs64(a), probs64(b));
        total += p
            .iter()
            .zip(&q)
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
            .sum::<f64>();
    }
    total / n as f64
}

fn ref_nll(z: &Tensor, y: &[usize]) -> f64 {
    let c = z.shape()[1];
    z.data()
        .chunks(c)
        .zip(y)
        .map(|(r, &l)| -probs64(r)[l].ln())
        .sum::<f64>()
        / y.len() as f64
}

fn ref_ece(z: &Tensor, y: &[usize], bins: usize) -> f64 {
    let c = z.shape()[1];
    let mut acc = vec![(0usize, 0usize, 0.0f64); bins];
    for (r, &l) in z.data().chunks(c).zip(y) {
        let p = probs64(r);
        let pred = first_max(&p);
        let conf = p[pred];
        let b = (0..bins)
            .find(|&b| conf > b as f64 / bins as f64 && conf <= (b + 1) as f64 / bins as f64)
            .unwrap_or(0);
        acc[b].0 += 1;
        acc[b].1 += usize::from(pred == l);
        acc[b].2 += conf;
    }
    acc.iter()
        .filter(|b| b.0 > 0)
        .map(|&(n, k, s)| n as f64 / y.len() as f64 * (k as f64 / n as f64 - s / n as f64).abs())
        .sum()
}

/// HSIC-based linear CKA with an explicit centering matrix.
fn ref_cka(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let gram = |t: &Tensor| {
        let d = t.data().len() / n;
        let v = to64(t.data());
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = (0..d).map(|q| v[i * d + q] * v[j * d + q]).sum();
            }
        }
        k
    };
    let center = |k: &Vec<Vec<f64>>| {
        let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
        let mut hk = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                hk[i][j] = (0..n).map(|m| h(i, m) * k[m][j]).sum();
            }
        }
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..n).map(|m| hk[i][m] * h(m, j)).sum();
            }
        }
        out
    };
    let (kx, ky) = (center(&gram(x)), center(&gram(y)));
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        (0..n)
            .map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>())
            .sum()
    };
    hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
}

fn criterion_2() -> Result<Outcome> {
    let mut o = Outcome::new();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |k: &'static str, a: f64, b: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max((a - b).abs());
    };
    for f in 0..10 {
        let mut r = rng("metrics", f);
        let (n, c) = (int(&mut r, 20, 200), int(&mut r, 2, 10));
        let zt = Tensor::new(vec![n, c], uniform(&mut r, n * c, -5.0, 5.0))?;
        let zs = Tensor::new(vec![n, c], uniform(&mut r, n * c, -5.0, 5.0))?;
        let y: Vec<usize> = (0..n).map(|_| r.below(c as u64) as usize).collect();
        let res = EvalBatchResult::new(zt.clone(), zs.clone(), y.clone())?;
        bump(
            "agreement",
            metrics::top1_agreement(&res),
            ref_agreement(&zt, &zs),
        );
        bump("kl", metrics::predictive_kl(&res), ref_kl(&zt, &zs));
        bump("nll", metrics::nll(&zs, &y), ref_nll(&zs, &y));
        bump("ece", metrics::ece(&zs, &y, 15)?, ref_ece(&zs, &y, 15));
        // Small and wide feature widths exercise both evaluation routes.
        let m = int(&mut r, 5, 30);
        let (dx, dy) = if f % 2 == 0 {
            (int(&mut r, 1, 4), int(&mut r, 1, 4))
        } else {
            (m * m, m + 7)
        };
        let x = Tensor::new(vec![m, dx], uniform(&mut r, m * dx, -1.0, 1.0))?;
        let yf = Tensor::new(vec![m, dy], uniform(&mut r, m * dy, -1.0, 1.0))?;
        bump("cka", metrics::linear_cka(&x, &yf)?, ref_cka(&x, &yf));
    }
    for (k, e) in &worst {
        o.check(
            *e <= 1e-9,
            format!("{k:<10} max |lib - reference| {e:.2e} over 10 fixtures (<= 1e-9)"),
        );
    }

    let mut r = rng("identities", 0);
    let z = Tensor::new(vec![50, 10], uniform(&mut r, 500, -5.0, 5.0))?;
    let same = EvalBatchResult::new(z.clone(), z.clone(), vec![])?;
    let kl = metrics::predictive_kl(&same);
    o.check(kl.abs() <= 1e-6, format!("KL(p||p) = {kl:.2e}"));
    let a = metrics::top1_agreement(&same);
    o.check(
        (a - 1.0).abs() <= 1e-6,
        format!("agreement of identical logits = {a}"),
    );
    // Confidence 3/4 with three of four correct, and confidence ~1 always correct.
    let l3 = 3f32.ln();
    let cal = Tensor::new(
        vec![6, 2],
        vec![l3, 0.0, l3, 0.0, l3, 0.0, l3, 0.0, 60.0, 0.0, 0.0, 60.0],
    )?;
    let e = metrics::ece(&cal, &[0, 0, 0, 1, 0, 1], 15)?;
    o.check(
        e.abs() <= 1e-6,
        format!("ECE of perfectly calibrated predictions = {e:.2e}"),
    );
    let x = Tensor::new(vec![40, 12], uniform(&mut r, 480, -1.0, 1.0))?;
    let y = Tensor::new(vec![40, 7], uniform(&mut r, 280, -1.0, 1.0))?;
    let self_cka = metrics::linear_cka(&x, &x)?;
    o.check(
        (self_cka - 1.0).abs() <= 1e-6,
        format!("CKA(X, X) = {self_cka}"),
    );
    let base = metrics::linear_cka(&x, &y)?;
    let mut dev = 0.0f64;
    for s in [1e-3f32, 0.5, 7.0, 1e3] {
        let ys = Tensor::new(vec![40, 7], y.data().iter().map(|v| v * s).collect())?;
        dev = dev.max((metrics::linear_cka(&x, &ys)? - base).abs());
    }
    o.check(
        dev <= 1e-6,
        format!("CKA scale invariance, max deviation {dev:.2e}"),
    );
    Ok(o)
}

// ── criteria 3 and 4: properties of the distillation loss ───────────────

fn kd_grad(zs: &Tensor, zt: &Tensor, tau: f32) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.param(zs.clone());
    let l = kd_loss(&mut tape, v, zt, tau)?;
    tape.backward(l)?;
    Ok(to64(tape.grad(v).expect("leaf")))
}

fn zero_mean(r: &mut Stream, c: usize) -> Vec<f32> {
    let v = uniform(r, c, -2.0, 2.0);
    let m = v.iter().sum::<f32>() / c as f32;
    v.iter().map(|x| x - m).collect()
}

fn criterion_3() -> Result<Outcome> {
    let mut o = Outcome::new();
    let (mut worst, mut worst_scaled) = (0.0f64, 0.0f64);
    let mut classes = Vec::new();
    for f in 0..100 {
        let mut r = rng("tau-limit", f);
        let c = int(&mut r, 2, 10);
        classes.push(c);
        let (zs, zt) = (zero_mean(&mut r, c), zero_mean(&mut r, c));
        let g = kd_grad(
            &Tensor::new(vec![1, c], zs.clone())?,
            &Tensor::new(vec![1, c], zt.clone())?,
            100.0,
        )?;
        let diff: Vec<f64> = zs.iter().zip(&zt).map(|(a, b)| f64::from(a - b)).collect();
        let span = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let dev = g
            .iter()
            .zip(&diff)
            .fold(0.0f64, |m, (g, d)| m.max((g - d).abs()));
        let dev_scaled = g
            .iter()
            .zip(&diff)
            .fold(0.0f64, |m, (g, d)| m.max((g - d / c as f64).abs()));
        worst = worst.max(dev / span);
        worst_scaled = worst_scaled.max(dev_scaled / span);
    }
    o.check(
        worst < 0.02,
        format!(
            "max |grad kd - (z_s - z_t)| / max|z_s - z_t| = {worst:.4} over 100 fixtures (< 0.02)"
        ),
    );
    o.note(format!(
        "against (z_s - z_t)/c instead the same ratio is {worst_scaled:.4}; classes in [{}, {}]",
        classes.iter().min().unwrap(),
        classes.iter().max().unwrap()
    ));
    Ok(o)
}

fn criterion_4() -> Result<Outcome> {
    let mut o = Outcome::new();
    let (mut violations, mut min_gap) = (0, f64::INFINITY);
    let mut worst_shift = 0.0f64;
    for f in 0..1000 {
        let mut r = rng("gibbs", f);
        let (n, c) = (int(&mut r, 1, 4), int(&mut r, 2, 10));
        let tau = if r.bernoulli(0.5) { 1.0 } else { 4.0 };
        let zt = Tensor::new(vec![n, c], uniform(&mut r, n * c, -3.0, 3.0))?;
        let zs = Tensor::new(vec![n, c], uniform(&mut r, n * c, -3.0, 3.0))?;
        let floor = kd_loss_value(&zt, &zt, tau)?;
        let gap = kd_loss_value(&zs, &zt, tau)? - floor;
        if gap <= 0.0 {
            violations += 1;
        }
        min_gap = min_gap.min(gap);
        // A per-row uniform shift leaves the tempered distribution unchanged.
        let shifts: Vec<f32> = (0..n).map(|_| r.uniform_range(-5.0, 5.0)).collect();
        let shifted = Tensor::new(
            vec![n, c],
            zt.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + shifts[i / c])
                .collect(),
        )?;
        worst_shift =
            worst_shift.max((kd_loss_value(&shifted, &zt, tau)? - floor).abs() / floor.max(1.0));
    }
    o.check(
        violations == 0,
        format!(
            "kd(z_s, z_t) > kd(z_t, z_t) on {}/1000 random draws; smallest gap {min_gap:.3e}",
            1000 - violations
        ),
    );
    o.check(
        worst_shift <= 1e-5,
        format!("uniform shifts reach the bound: max relative gap {worst_shift:.2e} (<= 1e-5)"),
    );
    Ok(o)
}

// ── criterion 6: normalization and shared weights ───────────────────────

fn criterion_6() -> Result<Outcome> {
    let mut o = Outcome::new();
    let mut r = rng("probes", 0);
    let probes = Tensor::new(
        vec![1000, 1, 28, 28],
        uniform(&mut r, 1000 * 784, -1.0, 3.0),
    )?;
    let a = Network::from_preset("lenet5-ln", 1)?;
    let mut b = Network::from_preset("lenet5-ln", 2)?;
    b.load_weights(&a.weights())?;
    let (za, zb) = (a.predict(&probes)?, b.predict(&probes)?);
    let d = za
        .data()
        .iter()
        .zip(zb.data())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
    o.check(
        d <= 1e-6,
        format!("layernorm pair sharing weights: max |dz| = {d:.2e} on 1000 probes (<= 1e-6)"),
    );

    let a = Network::from_preset("lenet5-bn", 1)?;
    let mut b = a.clone();
    // One train-mode pass moves b's running statistics and nothing else.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(
        vec![64, 1, 28, 28],
        probes.data()[..64 * 784].to_vec(),
    )?);
    b.set_mode(Mode::Train);
    b.forward(&mut tape, x, false)?;
    b.set_mode(Mode::Eval);
    let same = a.trainable() == b.trainable();
    let (za, zb) = (a.predict(&probes)?, b.predict(&probes)?);
    let d = za
        .data()
        .iter()
        .zip(zb.data())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
    o.check(
        same && d > 1e-3,
        format!("batchnorm pair, identical trainable weights: {same}, distinct running stats: max |dz| = {d:.3} (> 1e-3)"),
    );
    Ok(o)
}

// ── MNIST-backed criteria ───────────────────────────────────────────────

fn mnist_dir() -> PathBuf {
    std::env::var_os("DISTILAB_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

const SEEDS: [u64; 3] = [0, 1, 2];
const DISTILL_SIZES: [usize; 3] = [10_000, 30_000, 60_000];

fn teacher_cfg(seed: u64) -> RunConfig {
    RunConfig {
        role: Role::Teacher,
        arch: "lenet5".into(),
        data: DataSpec {
            dir: mnist_dir(),
            split: None,
            subset: Some(SubsetSpec { n: 200, seed }),
        },
        augmentation: AugmentationPolicy::none(),
        optimizer: OptimizerConfig::sgd(0.01, 0.9, true, 5e-4),
        schedule: None,
        epochs: 100,
        batch_size: 32,
        distill: None,
        teachers: vec![],
        init: InitSpec::Random,
        seed,
    }
}

/// Self-distillation run; the student seed differs from every teacher seed.
fn student_cfg(seed: u64, n: usize, epochs: usize) -> RunConfig {
    RunConfig {
        role: Role::Student,
        data: DataSpec {
            dir: mnist_dir(),
            split: None,
            subset: Some(SubsetSpec {
                n,
                seed: 1000 + seed,
            }),
        },
        optimizer: OptimizerConfig::sgd(0.01, 0.9, true, 0.0),
        epochs,
        batch_size: 64,
        distill: Some(DistillLossConfig {
            alpha: 0.0,
            tau: 4.0,
        }),
        seed: 100 + seed,
        ..teacher_cfg(seed)
    }
}

/// Networks shared between the MNIST criteria, trained on first use.
struct Mnist {
    train: Dataset,
    test: Dataset,
    teachers: BTreeMap<u64, Network>,
    /// Seed-0 student distilled on all 60k examples: (initial, final).
    student: Option<(Network, Network)>,
}

impl Mnist {
    fn load() -> Result<Mnist> {
        let (train, test) = Dataset::load_mnist(&mnist_dir())?;
        Ok(Mnist {
            train,
            test,
            teachers: BTreeMap::new(),
            student: None,
        })
    }

    fn data(&self, spec: &DataSpec) -> Result<TrainData> {
        spec.select(&self.train, &self.test)
    }

    fn teacher(&mut self, seed: u64) -> Result<(Network, Option<f64>)> {
        if let Some(t) = self.teachers.get(&seed) {
            return Ok((t.clone(), None));
        }
        let cfg = teacher_cfg(seed);
        let out = protocols::train_teacher(&cfg, &self.data(&cfg.data)?, &Context::default())?;
        self.teachers.insert(seed, out.network.clone());
        Ok((out.network, out.report.get("test_accuracy")))
    }

    fn distill(&mut self, seed: u64, n: usize) -> Result<(Network, Network, f64)> {
        let (t, _) = self.teacher(seed)?;
        let ens = TeacherEnsemble::new(vec![t])?;
        let cfg = student_cfg(seed, n, 6);
        let init = protocols::student_init(&cfg, &ens)?;
        let out = protocols::distill(&cfg, &ens, &self.data(&cfg.data)?, &Context::default())?;
        let agree = out
            .report
            .get("test_agreement")
            .expect("student reports agreement");
        Ok((init, out.network, agree))
    }
}

fn criterion_5(m: &mut Mnist) -> Result<Outcome> {
    let mut o = Outcome::new();
    let mut agree = vec![vec![0.0; SEEDS.len()]; DISTILL_SIZES.len()];
    for (si, &seed) in SEEDS.iter().enumerate() {
        let (_, acc) = m.teacher(seed)?;
        let acc = acc.expect("fresh teacher");
        o.check(
            (0.82..=0.88).contains(&acc),
            format!("teacher seed {seed}: test accuracy {acc:.4} on a 200-example subset (in [0.82, 0.88])"),
        );
        for (k, &n) in DISTILL_SIZES.iter().enumerate() {
            let (init, fin, a) = m.distill(seed, n)?;
            agree[k][si] = a;
            if seed == 0 && n == 60_000 {
                m.student = Some((init, fin));
            }
        }
    }
    let means: Vec<f64> = agree
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    for (k, &n) in DISTILL_SIZES.iter().enumerate() {
        let per: Vec<String> = agree[k].iter().map(|a| format!("{a:.4}")).collect();
        o.note(format!(
            "distill on {n:>6}: test agreement mean {:.4} (seeds {})",
            means[k],
            per.join(", ")
        ));
    }
    o.check(
        means.windows(2).all(|w| w[1] >= w[0]),
        "seed-averaged agreement is non-decreasing in distillation set size".into(),
    );
    o.check(
        means[2] >= 0.95,
        format!("60k student test agreement {:.4} (>= 0.95)", means[2]),
    );
    Ok(o)
}

fn criterion_7(m: &mut Mnist) -> Result<Outcome> {
    let mut o = Outcome::new();
    let (teacher, _) = m.teacher(0)?;
    if m.student.is_none() {
        let (i, f, _) = m.distill(0, 60_000)?;
        m.student = Some((i, f));
    }
    let (init, fin) = m.student.clone().expect("set above");
    let spec = protocols::SurfaceSpec::default();
    let g = protocols::loss_surface(
        &teacher,
        &init.weights(),
        &fin.weights(),
        &m.train,
        &spec,
        &Context::default(),
    )?;
    let origin = g.loss_at(0.0, 0.0).expect("0 is a grid node");
    let d = (origin - g.header.teacher_self_loss).abs();
    o.check(
        d <= 1e-5,
        format!(
            "origin {origin:.6} vs teacher self-loss {:.6}: |d| = {d:.2e} (<= 1e-5)",
            g.header.teacher_self_loss
        ),
    );
    let (ei, ef) = (
        g.header.init_reconstruction_error,
        g.header.final_reconstruction_error,
    );
    o.check(
        ei <= 1e-5 && ef <= 1e-5,
        format!("reconstruction inf-norm: init {ei:.2e}, final {ef:.2e} (<= 1e-5)"),
    );
    let min = g.min_loss();
    o.check(
        min <= origin + 1e-6,
        format!("grid minimum {min:.6} <= origin {origin:.6} + 1e-6"),
    );
    o.note(format!(
        "{0}x{0} grid on {1} examples; final student at ({2:.3}, 1)",
        spec.resolution, g.header.eval_examples, g.header.anchors.final_[0]
    ));
    Ok(o)
}

fn criterion_8(m: &mut Mnist) -> Result<Outcome> {
    let mut o = Outcome::new();
    // Layer-normalized self-distillation, teacher trained like the others.
    let tcfg = RunConfig {
        arch: "lenet5-ln".into(),
        ..teacher_cfg(0)
    };
    let teacher =
        protocols::train_teacher(&tcfg, &m.data(&tcfg.data)?, &Context::default())?.network;
    let mut cfg = RunConfig {
        arch: "lenet5-ln".into(),
        ..student_cfg(0, 2000, 3)
    };
    cfg.data.subset = Some(SubsetSpec { n: 2000, seed: 500 });
    let data = m.data(&cfg.data)?;
    let sweep = protocols::convex_init_sweep(
        &cfg,
        &teacher,
        &data,
        &protocols::DEFAULT_LAMBDAS,
        &[1, 2, 3],
        &Context::default(),
    )?;
    let curve: Vec<String> = protocols::DEFAULT_LAMBDAS
        .iter()
        .map(|&l| {
            format!(
                "{l}:{:.3}",
                sweep.mean(l, |p| p.train_agreement).unwrap_or(f64::NAN)
            )
        })
        .collect();
    o.note(format!(
        "final train agreement by lambda: {}",
        curve.join(" ")
    ));
    let at = |l: f32| sweep.mean(l, |p| p.train_agreement).unwrap_or(f64::NAN);
    let (lo, hi) = (at(0.0), at(0.875));
    o.check(
        hi >= lo,
        format!("lambda 0.875 agreement {hi:.4} >= lambda 0 agreement {lo:.4} (3 seeds)"),
    );
    Ok(o)
}

/// Small MNIST protocol runs; their serialized reports, keyed by name.
fn smoke_runs(m: &mut Mnist) -> Result<BTreeMap<String, String>> {
    let ctx = Context::default();
    let mut out = BTreeMap::new();
    let mut tcfg = teacher_cfg(7);
    tcfg.epochs = 20;
    let scfg = |epochs: usize| student_cfg(7, 1000, epochs);
    let train = subset(&m.train, 2000, 7)?;
    let rec = protocols::recycling_protocol(
        &tcfg,
        &scfg(2),
        &train,
        &m.test,
        &SplitPlan::halves(7),
        &ctx,
    )?;
    out.insert("recycle/teacher".into(), rec.teacher.report.to_json()?);
    for (name, s) in &rec.students {
        out.insert(format!("recycle/{name}"), s.report.to_json()?);
    }

    let (teacher, _) = m.teacher(0)?;
    let ens = TeacherEnsemble::new(vec![teacher.clone()])?;
    let data = m.data(&scfg(1).data)?;
    let opts = [
        OptimizerConfig::sgd(0.01, 0.9, true, 0.0),
        OptimizerConfig::adam(1e-3, 0.0),
    ];
    let abl = protocols::optimizer_ablation(&scfg(1), &ens, &data, &opts, &[1, 2], &[1, 2], &ctx)?;
    out.insert("ablation.json".into(), serde_json::to_string_pretty(&abl)?);
    out.insert("ablation.csv".into(), abl.to_csv());

    let shared = protocols::shared_init_study(&scfg(2), &teacher, &data, &[1, 2], 256, &ctx)?;
    out.insert(
        "shared_init.json".into(),
        serde_json::to_string_pretty(&shared)?,
    );
    out.insert("shared_init.csv".into(), shared.to_csv());
    Ok(out)
}

fn criterion_9(runs: &BTreeMap<String, String>) -> Result<Outcome> {
    let mut o = Outcome::new();
    for name in ["recycle/teacher", "recycle/s0", "recycle/s1", "recycle/s01"] {
        let r: metrics::MetricsReport = serde_json::from_str(&runs[name])?;
        let needed: &[&str] = if name.ends_with("teacher") {
            &["test_accuracy", "test_nll", "test_ece", "train_accuracy"]
        } else {
            &[
                "test_agreement",
                "test_kl",
                "train_agreement",
                "train_kl",
                "test_accuracy",
                "initial_train_agreement",
            ]
        };
        let missing: Vec<_> = needed.iter().filter(|k| r.get(k).is_none()).collect();
        let unknown: Vec<_> = r
            .metrics
            .keys()
            .filter(|k| !metrics::is_known_metric(k))
            .collect();
        o.check(
            missing.is_empty() && unknown.is_empty() && r.metadata.contains_key("config"),
            format!(
                "{name}: {} metrics, missing {missing:?}, unknown {unknown:?}",
                r.metrics.len()
            ),
        );
    }
    let abl: protocols::AblationReport = serde_json::from_str(&runs["ablation.json"])?;
    o.check(
        abl.rows.len() == 4
            && abl
                .rows
                .iter()
                .all(|r| r.train_agreement.trials == 2 && r.test_agreement.std.is_some()),
        format!(
            "ablation: {} rows (2 optimizers x 2 budgets), 2 trials each",
            abl.rows.len()
        ),
    );
    let shared: protocols::SharedInitReport = serde_json::from_str(&runs["shared_init.json"])?;
    let header: Vec<String> = runs["shared_init.csv"]
        .lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(String::from)
        .collect();
    let required = [
        "Init",
        "Agree",
        "KL",
        "CKA_stage1",
        "CKA_stage2",
        "CKA_stage3",
        "CKA_self",
    ];
    let absent: Vec<_> = required
        .iter()
        .filter(|c| !header.iter().any(|h| h == *c))
        .collect();
    o.check(
        absent.is_empty(),
        format!("shared-init columns: {}", header.join(",")),
    );
    let self_col = header.iter().position(|h| h == "CKA_self");
    let selfs: Vec<f64> = runs["shared_init.csv"]
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(self_col?)?.parse().ok())
        .collect();
    o.check(
        selfs.len() == shared.rows.len() && selfs.iter().all(|v| (v - 1.0).abs() <= 1e-6),
        format!("CKA_self column {selfs:?} (= 1)"),
    );
    for row in &shared.rows {
        o.note(format!(
            "shared-init {:<7} agree {:.4} KL {:.4} CKA_stage1 {:.3}",
            row.init,
            row.report.get("test_agreement").unwrap_or(f64::NAN),
            row.report.get("test_kl").unwrap_or(f64::NAN),
            row.report.get("cka_stage1").unwrap_or(f64::NAN)
        ));
    }
    Ok(o)
}

fn criterion_10(m: &mut Mnist, first: &BTreeMap<String, String>) -> Result<Outcome> {
    let mut o = Outcome::new();
    let second = smoke_runs(m)?;
    for (name, a) in first {
        let same = second.get(name) == Some(a);
        o.check(
            same,
            format!("{name}: {} bytes, re-run identical: {same}", a.len()),
        );
    }
    Ok(o)
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t0 = Instant::now();
    let (pass, lines) = match f() {
        Ok(o) => (o.pass, o.lines),
        Err(e) => (false, vec![format!("error: {e}")]),
    };
    let secs = t0.elapsed().as_secs_f64();
    let known = UNATTAINABLE
        .iter()
        .find(|(k, _)| *k == n)
        .map(|(_, why)| *why);
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2}: {verdict}  {name} ({secs:.1}s)");
    for l in lines {
        println!("    {l}");
    }
    if let (false, Some(why)) = (pass, known) {
        println!("    unattainable as written: {why}");
    }
    pass || known.is_some()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient correctness", criterion_1);
    ok &= run(2, "metric oracles", criterion_2);
    ok &= run(3, "tau-limit gradient", criterion_3);
    ok &= run(4, "Gibbs bound", criterion_4);
    let mnist =
        Mnist::load().map_err(|e| format!("MNIST unavailable ({e}); run scripts/fetch_mnist.sh"));
    let missing = |why: &String| Err(distilab::Error::InvalidArgument(why.clone()));
    match mnist {
        Ok(mut m) => {
            ok &= run(5, "MNIST self-distillation", || criterion_5(&mut m));
            ok &= run(6, "layernorm identity", criterion_6);
            ok &= run(7, "loss-surface anchors", || criterion_7(&mut m));
            ok &= run(8, "convex-init direction", || criterion_8(&mut m));
            let mut runs = None;
            ok &= run(9, "protocol smoke runs", || {
                let r = smoke_runs(&mut m)?;
                let out = criterion_9(&r);
                runs = Some(r);
                out
            });
            ok &= run(10, "reproducibility", || match &runs {
                Some(r) => criterion_10(&mut m, r),
                None => Err(distilab::Error::InvalidArgument(
                    "smoke runs did not complete".into(),
                )),
            });
        }
        Err(why) => {
            ok &= run(5, "MNIST self-distillation", || missing(&why));
            ok &= run(6, "layernorm identity", criterion_6);
            for (n, name) in [
                (7, "loss-surface anchors"),
                (8, "convex-init direction"),
                (9, "protocol smoke runs"),
                (10, "reproducibility"),
            ] {
                ok &= run(n, name, || missing(&why));
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
