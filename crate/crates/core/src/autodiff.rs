//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value; [`Tape::backward`]
//! walks the nodes once in reverse recording order. Leaves created with
//! [`Tape::param`] accumulate gradients across backward calls until
//! [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.col_cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.col_cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Axis layout shared by the normalization ops: `[n, c, spatial]`.
#[derive(Debug, Clone, Copy)]
struct NormGeom {
    n: usize,
    c: usize,
    s: usize,
}

impl NormGeom {
    fn of(shape: &[usize]) -> Self {
        NormGeom {
            n: shape[0],
            c: shape.get(1).copied().unwrap_or(1),
            s: shape.iter().skip(2).product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MaxAxis {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics are part of the graph (train mode) or fixed (eval mode).
        batch_stats: bool,
    },
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Per-channel batch statistics produced by [`Tape::batch_norm_train`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f32>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NumericFault { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ────────────────────────────────────────────────────

    /// `b` must be a scalar or have a shape equal to a suffix of `a`'s shape.
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        if nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(nb)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let nb = self.check_broadcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f32> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let out = finite(op, Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f32) -> f32, node: Op) -> Result<Var> {
        let av = self.value(a);
        let data: Vec<f32> = av.data().iter().map(|&x| f(x)).collect();
        let out = finite(op, Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, node, rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f32::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f32::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    // ── reductions and shape ───────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| f64::from(x)).sum();
        let out = finite("sum", Tensor::scalar(s as f32))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| f64::from(x)).sum();
        let out = finite("mean", Tensor::scalar((s / v.numel() as f64) as f32))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Maximum along `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "max over axis {axis} of rank-{} tensor",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = finite("max_axis", Tensor::new(out_shape, out)?)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaxAxis { input: a, argmax }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let out = finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x @ wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let y = self.matmul_nt(x, w)?;
        self.add(y, b)
    }

    /// `a @ bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Transposed,
            0.0,
            &mut out,
        );
        let out = finite("matmul_nt", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]`, plus optional bias `[F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if kh > hp || kw > wp {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d output extent is not integral: input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[f]));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.requires_grad(w);
        let mut cols = vec![0.0; if keep_cols { n * rows * p } else { rows * p }];
        let mut out = vec![0.0; n * f * p];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for img in 0..n {
            let col = if keep_cols {
                &mut cols[img * rows * p..(img + 1) * rows * p]
            } else {
                &mut cols[..]
            };
            geom.im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], col);
            gemm(
                f,
                rows,
                p,
                wdata,
                Layout::Normal,
                col,
                Layout::Normal,
                0.0,
                &mut out[img * f * p..(img + 1) * f * p],
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (chunk, bias) in out.chunks_mut(p).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let out = finite("conv2d", Tensor::new(vec![n, f, geom.ho, geom.wo], out)?)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling with a square window of `size` on `[N,C,H,W]`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool2d({size}) needs a 4-d input with divisible spatial extents, got {s:?}"
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = base + (oy * size + i) * w + ox * size + j;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = finite("max_pool2d", Tensor::new(vec![s[0], s[1], ho, wo], out)?)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    // ── normalization ──────────────────────────────────────────────────

    fn check_affine(&self, op: &'static str, x: Var, gain: Var, bias: Var) -> Result<NormGeom> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape(op, sx, self.shape(gain)));
        }
        let g = NormGeom::of(sx);
        for p in [gain, bias] {
            if self.shape(p) != [g.c] {
                return Err(Error::shape(op, sx, self.shape(p)));
            }
        }
        Ok(g)
    }

    /// Normalizes each example over all non-batch axes; per-channel (axis 1) affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let g = self.check_affine("layer_norm", x, gain, bias)?;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let m = g.c * g.s;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; g.n];
        let mut out = vec![0.0; xd.len()];
        for i in 0..g.n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / m as f64;
            let inv = (1.0 / (var + f64::from(eps)).sqrt()) as f32;
            inv_std[i] = inv;
            for (k, &v) in row.iter().enumerate() {
                let xh = (v - mean as f32) * inv;
                let ch = k / g.s;
                xhat[i * m + k] = xh;
                out[i * m + k] = xh * gd[ch] + bd[ch];
            }
        }
        let out = finite("layer_norm", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization with statistics of the current batch (per channel over N and spatial axes).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let g = self.check_affine("batch_norm", x, gain, bias)?;
        let xd = self.value(x).data();
        let count = g.n * g.s;
        let mut mean = vec![0.0f32; g.c];
        let mut var = vec![0.0f32; g.c];
        for ch in 0..g.c {
            let mut s = 0.0f64;
            for i in 0..g.n {
                let off = (i * g.c + ch) * g.s;
                s += xd[off..off + g.s]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0f64;
            for i in 0..g.n {
                let off = (i * g.c + ch) * g.s;
                q += xd[off..off + g.s]
                    .iter()
                    .map(|&v| (f64::from(v) - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (q / count as f64) as f32;
        }
        let v = self.batch_norm_with(x, gain, bias, &mean, &var, eps, true)?;
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.batch_norm_with(x, gain, bias, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<Var> {
        let g = self.check_affine("batch_norm", x, gain, bias)?;
        if mean.len() != g.c || var.len() != g.c {
            return Err(Error::shape(
                "batch_norm stats",
                &[g.c],
                &[mean.len(), var.len()],
            ));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..g.n {
            for ch in 0..g.c {
                let off = (i * g.c + ch) * g.s;
                for k in off..off + g.s {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let out = finite("batch_norm", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    // ── softmax family ─────────────────────────────────────────────────

    /// Log-softmax over the last axis, computed as `(z - max) - log Σ exp(z - max)`.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let v = self.value(z);
        let c = *v
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidArgument("log_softmax of a scalar".into()))?;
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row
                .iter()
                .map(|&x| f64::from(x - max).exp())
                .sum::<f64>()
                .ln() as f32;
            out.extend(row.iter().map(|&x| (x - max) - lse));
        }
        let out = finite("log_softmax", Tensor::new(v.shape().to_vec(), out)?)?;
        let rg = self.rg(&[z]);
        Ok(self.push(out, Op::LogSoftmax(z), rg))
    }

    /// Softmax over the last axis at temperature `tau`.
    pub fn softmax(&mut self, z: Var, tau: f32) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let scaled = self.scale(z, 1.0 / tau)?;
        let ls = self.log_softmax(scaled)?;
        self.exp(ls)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every gradient-carrying leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.numel();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    let da = accumulate(&mut adj[a.0], len(*a));
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(*b) {
                    let nb = len(*b);
                    let db = accumulate(&mut adj[b.0], nb);
                    for (k, gv) in g.iter().enumerate() {
                        db[k % nb] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(nodes[i].op, Op::Div(..));
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = bd.len();
                if wants(*a) {
                    let da = accumulate(&mut adj[a.0], ad.len());
                    for (k, gv) in g.iter().enumerate() {
                        let bv = bd[k % nb];
                        da[k] += if is_div { gv / bv } else { gv * bv };
                    }
                }
                if wants(*b) {
                    let db = accumulate(&mut adj[b.0], nb);
                    for (k, gv) in g.iter().enumerate() {
                        let bv = bd[k % nb];
                        db[k % nb] += if is_div {
                            -gv * ad[k] / (bv * bv)
                        } else {
                            gv * ad[k]
                        };
                    }
                }
            }
            Op::Neg(a) => {
                let da = accumulate(&mut adj[a.0], len(*a));
                da.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
            Op::Scale(a, s) => {
                let da = accumulate(&mut adj[a.0], len(*a));
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
            Op::Exp(a) => {
                let da = accumulate(&mut adj[a.0], len(*a));
                for ((d, gv), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y;
                }
            }
            Op::Log(a) => {
                let ad = nodes[a.0].value.data();
                let da = accumulate(&mut adj[a.0], ad.len());
                for ((d, gv), x) in da.iter_mut().zip(g).zip(ad) {
                    *d += gv / x;
                }
            }
            Op::Relu(a) => {
                let ad = nodes[a.0].value.data();
                let da = accumulate(&mut adj[a.0], ad.len());
                for ((d, gv), x) in da.iter_mut().zip(g).zip(ad) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = len(*a);
                let gv = if matches!(nodes[i].op, Op::Mean(_)) {
                    g[0] / n as f32
                } else {
                    g[0]
                };
                let da = accumulate(&mut adj[a.0], n);
                da.iter_mut().for_each(|d| *d += gv);
            }
            Op::MaxAxis { input, argmax } => {
                let da = accumulate(&mut adj[input.0], len(*input));
                for (gv, &k) in g.iter().zip(argmax) {
                    da[k] += gv;
                }
            }
            Op::Reshape(a) => {
                let da = accumulate(&mut adj[a.0], len(*a));
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = accumulate(&mut adj[a.0], m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        nodes[b.0].value.data(),
                        Layout::Transposed,
                        1.0,
                        da,
                    );
                }
                if wants(*b) {
                    let db = accumulate(&mut adj[b.0], k * n);
                    gemm(
                        k,
                        m,
                        n,
                        nodes[a.0].value.data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        1.0,
                        db,
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if wants(*a) {
                    let da = accumulate(&mut adj[a.0], m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        nodes[b.0].value.data(),
                        Layout::Normal,
                        1.0,
                        da,
                    );
                }
                if wants(*b) {
                    let db = accumulate(&mut adj[b.0], n * k);
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        Layout::Transposed,
                        nodes[a.0].value.data(),
                        Layout::Normal,
                        1.0,
                        db,
                    );
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let f = geom.f;
                let wd = nodes[w.0].value.data();
                if let Some(b) = b {
                    if wants(*b) {
                        let db = accumulate(&mut adj[b.0], f);
                        for (k, chunk) in g.chunks(p).enumerate() {
                            db[k % f] += chunk.iter().sum::<f32>();
                        }
                    }
                }
                if wants(*w) {
                    let dw = accumulate(&mut adj[w.0], f * rows);
                    for img in 0..geom.n {
                        let gi = &g[img * f * p..(img + 1) * f * p];
                        let ci = &cols[img * rows * p..(img + 1) * rows * p];
                        gemm(
                            f,
                            p,
                            rows,
                            gi,
                            Layout::Normal,
                            ci,
                            Layout::Transposed,
                            1.0,
                            dw,
                        );
                    }
                }
                if wants(*x) {
                    let img_len = geom.c * geom.h * geom.w;
                    let dx = accumulate(&mut adj[x.0], geom.n * img_len);
                    let mut dcols = vec![0.0; rows * p];
                    for img in 0..geom.n {
                        let gi = &g[img * f * p..(img + 1) * f * p];
                        gemm(
                            rows,
                            f,
                            p,
                            wd,
                            Layout::Transposed,
                            gi,
                            Layout::Normal,
                            0.0,
                            &mut dcols,
                        );
                        geom.col2im_add(&dcols, &mut dx[img * img_len..(img + 1) * img_len]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = accumulate(&mut adj[x.0], len(*x));
                for (gv, &k) in g.iter().zip(argmax) {
                    dx[k as usize] += gv;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let geom = NormGeom::of(nodes[x.0].value.shape());
                let gd = nodes[gain.0].value.data();
                let m = geom.c * geom.s;
                affine_param_grads(geom, g, xhat, *gain, *bias, &wants, adj);
                if wants(*x) {
                    let dx = accumulate(&mut adj[x.0], geom.n * m);
                    let mut dxhat = vec![0.0f32; m];
                    for i in 0..geom.n {
                        let range = i * m..(i + 1) * m;
                        for (k, d) in dxhat.iter_mut().enumerate() {
                            *d = g[i * m + k] * gd[k / geom.s];
                        }
                        let xh = &xhat[range.clone()];
                        let s1: f64 = dxhat.iter().map(|&v| f64::from(v)).sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(&a, &b)| f64::from(a * b)).sum();
                        let (s1, s2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
                        let inv = inv_std[i];
                        for (k, d) in dx[range].iter_mut().enumerate() {
                            *d += inv * (dxhat[k] - s1 - xh[k] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let geom = NormGeom::of(nodes[x.0].value.shape());
                let gd = nodes[gain.0].value.data();
                affine_param_grads(geom, g, xhat, *gain, *bias, &wants, adj);
                if wants(*x) {
                    let total = geom.n * geom.c * geom.s;
                    let dx = accumulate(&mut adj[x.0], total);
                    let count = (geom.n * geom.s) as f64;
                    for ch in 0..geom.c {
                        let scale = gd[ch] * inv_std[ch];
                        let (mut s1, mut s2) = (0.0f64, 0.0f64);
                        if *batch_stats {
                            for i in 0..geom.n {
                                let off = (i * geom.c + ch) * geom.s;
                                for k in off..off + geom.s {
                                    s1 += f64::from(g[k]);
                                    s2 += f64::from(g[k] * xhat[k]);
                                }
                            }
                        }
                        let (s1, s2) = ((s1 / count) as f32, (s2 / count) as f32);
                        for i in 0..geom.n {
                            let off = (i * geom.c + ch) * geom.s;
                            for k in off..off + geom.s {
                                dx[k] += scale * (g[k] - s1 - xhat[k] * s2);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(z) => {
                let c = *out.shape().last().unwrap_or(&1);
                let dz = accumulate(&mut adj[z.0], out.numel());
                for ((drow, grow), yrow) in
                    dz.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                {
                    let gs: f32 = grow.iter().sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - y.exp() * gs;
                    }
                }
            }
        }
    }
}

fn affine_param_grads(
    geom: NormGeom,
    g: &[f32],
    xhat: &[f32],
    gain: Var,
    bias: Var,
    wants: &dyn Fn(Var) -> bool,
    adj: &mut [Option<Vec<f32>>],
) {
    if wants(gain) {
        let dg = accumulate(&mut adj[gain.0], geom.c);
        for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
            dg[(k / geom.s) % geom.c] += gv * xh;
        }
    }
    if wants(bias) {
        let db = accumulate(&mut adj[bias.0], geom.c);
        for (k, gv) in g.iter().enumerate() {
            db[(k / geom.s) % geom.c] += gv;
        }
    }
}
