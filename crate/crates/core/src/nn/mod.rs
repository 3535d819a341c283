//! Network architectures, normalization layers and seeded initialization.

mod preset;
mod weights;

pub use preset::{Architecture, Base, Blueprint, Norm, BN_MOMENTUM, NORM_EPS};
pub use weights::{interpolate_weights, NamedTensor, WeightVector};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Rows per chunk when running inference over a large batch.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    LayerNorm {
        channels: usize,
        eps: f32,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
        momentum: f32,
    },
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: &[usize]| Err(Error::shape("layer", input, expected));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return mismatch(&[inputs]);
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return mismatch(&[in_channels, 0, 0]);
                }
                let (hp, wp) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if kernel > hp
                    || kernel > wp
                    || (hp - kernel) % stride != 0
                    || (wp - kernel) % stride != 0
                {
                    return Err(Error::InvalidArgument(format!(
                        "conv kernel {kernel} stride {stride} pad {pad} does not tile input {input:?}"
                    )));
                }
                Ok(vec![
                    filters,
                    (hp - kernel) / stride + 1,
                    (wp - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::LayerNorm { channels, .. } | LayerSpec::BatchNorm { channels, .. } => {
                if input.first() != Some(&channels) {
                    return mismatch(&[channels]);
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { size } => {
                if input.len() != 3 || size == 0 || input[1] % size != 0 || input[2] % size != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "max pool {size} does not tile input {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                stride,
                ..
            } => in_channels > 0 && filters > 0 && kernel > 0 && stride > 0,
            LayerSpec::LayerNorm { channels, eps } => channels > 0 && eps > 0.0,
            LayerSpec::BatchNorm {
                channels,
                eps,
                momentum,
            } => channels > 0 && eps > 0.0 && (0.0..=1.0).contains(&momentum),
            LayerSpec::MaxPool { size } => size > 0,
            LayerSpec::Relu | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid layer spec {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    mean: Vec<f32>,
    var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    /// Trainable tensors: `[weight, bias]` or `[gain, bias]`.
    params: Vec<Tensor>,
    running: Option<RunningStats>,
}

impl Layer {
    fn param_names(&self) -> &'static [&'static str] {
        match self.spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => &["weight", "bias"],
            LayerSpec::LayerNorm { .. } | LayerSpec::BatchNorm { .. } => &["gain", "bias"],
            _ => &[],
        }
    }
}

/// Result of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Leaves for every trainable tensor, in [`Network::trainable_mut`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Option<String>,
    seed: u64,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    stages: Vec<(String, usize)>,
    mode: Mode,
}

impl Network {
    /// Builds a network from explicit layers, initialized from `seed`.
    ///
    /// Dense and conv weights are uniform in `±sqrt(6 / fan_in)` with zero
    /// biases; normalization gains start at 1 and biases at 0. The stream for
    /// layer `i` is `Stream::tagged(seed, "init", &[i])`.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            shape = spec.output_shape(&shape)?;
            let mut rng = Stream::tagged(seed, "init", &[i as u64]);
            let mut uniform = |shape: &[usize], fan_in: usize| {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape product matches")
            };
            let (params, running) = match *spec {
                LayerSpec::Dense { inputs, outputs } => (
                    vec![
                        uniform(&[outputs, inputs], inputs),
                        Tensor::zeros(&[outputs]),
                    ],
                    None,
                ),
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    ..
                } => (
                    vec![
                        uniform(
                            &[filters, in_channels, kernel, kernel],
                            in_channels * kernel * kernel,
                        ),
                        Tensor::zeros(&[filters]),
                    ],
                    None,
                ),
                LayerSpec::LayerNorm { channels, .. } => (
                    vec![Tensor::ones(&[channels]), Tensor::zeros(&[channels])],
                    None,
                ),
                LayerSpec::BatchNorm { channels, .. } => (
                    vec![Tensor::ones(&[channels]), Tensor::zeros(&[channels])],
                    Some(RunningStats {
                        mean: vec![0.0; channels],
                        var: vec![1.0; channels],
                    }),
                ),
                _ => (Vec::new(), None),
            };
            layers.push(Layer {
                spec: spec.clone(),
                params,
                running,
            });
        }
        let last = layers.len().saturating_sub(1);
        Ok(Network {
            arch: None,
            seed,
            input_shape: input_shape.to_vec(),
            layers,
            stages: vec![("logits".to_string(), last)],
            mode: Mode::Train,
        })
    }

    /// Builds a named preset (see [`Architecture`]).
    pub fn from_preset(name: &str, seed: u64) -> Result<Self> {
        let arch = Architecture::parse(name)?;
        let bp = arch.blueprint();
        let mut net = Network::build(&bp.layers, &arch.input, seed)?;
        net.arch = Some(name.to_string());
        net.stages = bp.stages;
        Ok(net)
    }

    pub fn arch(&self) -> Option<&str> {
        self.arch.as_deref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.spec.output_shape(&s))
            .expect("validated at build time")
    }

    pub fn classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn stage_ids(&self) -> Vec<String> {
        self.stages.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn has_running_stats(&self) -> bool {
        self.layers.iter().any(|l| l.running.is_some())
    }

    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::numel)
            .sum()
    }

    /// Trainable tensors in a fixed order (layer order, then weight/gain before bias).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.input_shape.len() + 1 || x[1..] != self.input_shape[..] || x[0] == 0 {
            let mut expected = vec![0];
            expected.extend(&self.input_shape);
            return Err(Error::shape("network input", x, &expected));
        }
        Ok(())
    }

    /// Shared forward. Returns the output var, the parameter leaves, per-layer
    /// output vars, and batch statistics of each batchnorm layer in train mode.
    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(
        Var,
        Vec<Var>,
        Vec<Var>,
        Vec<Option<crate::autodiff::BatchStats>>,
    )> {
        self.check_input(tape.shape(x))?;
        let mut h = x;
        let mut params = Vec::new();
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p: Vec<Var> = layer
                .params
                .iter()
                .map(|t| {
                    if track_grads {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            params.extend(&p);
            let mut batch = None;
            h = match layer.spec {
                LayerSpec::Dense { .. } => tape.linear(h, p[0], p[1])?,
                LayerSpec::Conv { stride, pad, .. } => {
                    tape.conv2d(h, p[0], Some(p[1]), stride, pad)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::LayerNorm { eps, .. } => tape.layer_norm(h, p[0], p[1], eps)?,
                LayerSpec::BatchNorm { eps, .. } => match mode {
                    Mode::Train => {
                        let (v, s) = tape.batch_norm_train(h, p[0], p[1], eps)?;
                        batch = Some(s);
                        v
                    }
                    Mode::Eval => {
                        let r = layer
                            .running
                            .as_ref()
                            .expect("batchnorm carries running stats");
                        tape.batch_norm_eval(h, p[0], p[1], &r.mean, &r.var, eps)?
                    }
                },
                LayerSpec::MaxPool { size } => tape.max_pool2d(h, size)?,
                LayerSpec::Flatten => {
                    let s = tape.shape(h);
                    let n = s[0];
                    let rest = s[1..].iter().product();
                    tape.reshape(h, &[n, rest])?
                }
            };
            outputs.push(h);
            stats.push(batch);
        }
        Ok((h, params, outputs, stats))
    }

    /// Records a forward pass in the network's current mode. In train mode,
    /// batchnorm running statistics are updated with the layer momentum.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, track_grads: bool) -> Result<Forward> {
        let (logits, params, _, stats) = self.run(tape, x, self.mode, track_grads)?;
        if self.mode == Mode::Train {
            for (layer, s) in self.layers.iter_mut().zip(stats) {
                if let (Some(s), Some(r), LayerSpec::BatchNorm { momentum, .. }) =
                    (s, layer.running.as_mut(), &layer.spec)
                {
                    let unbias = if s.count > 1 {
                        s.count as f32 / (s.count - 1) as f32
                    } else {
                        1.0
                    };
                    for c in 0..r.mean.len() {
                        r.mean[c] = (1.0 - momentum) * r.mean[c] + momentum * s.mean[c];
                        r.var[c] = (1.0 - momentum) * r.var[c] + momentum * s.var[c] * unbias;
                    }
                }
            }
        }
        Ok(Forward { logits, params })
    }

    /// Eval-mode logits `[N, classes]` without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let classes = self.classes();
        let mut out = Vec::with_capacity(n * classes);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end));
            let (logits, ..) = self.run(&mut tape, xv, Mode::Eval, false)?;
            out.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![n, classes], out)
    }

    /// Eval-mode preactivation features at the requested stages, one `[N, d]` matrix each.
    pub fn capture_preactivations(
        &self,
        x: &Tensor,
        stage_ids: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        self.check_input(x.shape())?;
        let mut taps = Vec::new();
        for id in stage_ids {
            let (_, layer) = self
                .stages
                .iter()
                .find(|(s, _)| s == id)
                .ok_or_else(|| Error::UnknownStage(id.to_string()))?;
            taps.push((id.to_string(), *layer));
        }
        let n = x.shape()[0];
        let mut acc: Vec<Vec<f32>> = vec![Vec::new(); taps.len()];
        let mut widths = vec![0usize; taps.len()];
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end));
            let (_, _, outputs, _) = self.run(&mut tape, xv, Mode::Eval, false)?;
            for (k, (_, layer)) in taps.iter().enumerate() {
                let v = tape.value(outputs[*layer]);
                widths[k] = v.numel() / (end - start);
                acc[k].extend_from_slice(v.data());
            }
        }
        let mut out = BTreeMap::new();
        for ((id, _), (data, d)) in taps.into_iter().zip(acc.into_iter().zip(widths)) {
            out.insert(id, Tensor::new(vec![n, d], data)?);
        }
        Ok(out)
    }

    /// Every trainable tensor and running statistic, in a fixed order.
    pub fn weights(&self) -> WeightVector {
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.param_names().iter().zip(&layer.params) {
                entries.push(NamedTensor {
                    name: format!("{i}.{name}"),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
            if let Some(r) = &layer.running {
                for (name, v) in [("running_mean", &r.mean), ("running_var", &r.var)] {
                    entries.push(NamedTensor {
                        name: format!("{i}.{name}"),
                        shape: vec![v.len()],
                        data: v.clone(),
                    });
                }
            }
        }
        WeightVector { entries }
    }

    /// Replaces all parameters and running statistics; names and shapes must match.
    pub fn load_weights(&mut self, w: &WeightVector) -> Result<()> {
        let template = self.weights();
        template.check_compatible(w)?;
        let mut it = w.entries.iter();
        for layer in &mut self.layers {
            for t in &mut layer.params {
                let e = it.next().expect("compatible");
                t.data_mut().copy_from_slice(&e.data);
            }
            if let Some(r) = &mut layer.running {
                r.mean.copy_from_slice(&it.next().expect("compatible").data);
                r.var.copy_from_slice(&it.next().expect("compatible").data);
            }
        }
        Ok(())
    }

    /// Test hook: overwrite the running statistics of every batchnorm layer.
    pub fn set_running_stats(&mut self, mean: f32, var: f32) {
        for layer in &mut self.layers {
            if let Some(r) = &mut layer.running {
                r.mean.iter_mut().for_each(|m| *m = mean);
                r.var.iter_mut().for_each(|v| *v = var);
            }
        }
    }
}
