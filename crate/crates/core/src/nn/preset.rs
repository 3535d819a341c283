//! Named architecture presets.
//!
//! Grammar: `<base>[-ln|-bn][@CxHxW][:classes]`, where `<base>` is `lenet5` or
//! `mlp-<w1>-<w2>-...`. Input defaults to `1x28x28`, classes to 10.
//!
//! `lenet5` is the five-layer LeNet: conv 5x5 (6 filters, pad 2), pool 2,
//! conv 5x5 (16 filters), pool 2, dense 120, dense 84, dense `classes`. The
//! optional normalization sits between each conv/dense layer and its ReLU.
//!
//! CKA stages tap preactivations (after normalization, before ReLU):
//!
//! | stage    | lenet5 tap       | width on 1x28x28 |
//! |----------|------------------|------------------|
//! | `stage1` | conv block 1     | 6·28·28 = 4704   |
//! | `stage2` | conv block 2     | 16·10·10 = 1600  |
//! | `stage3` | first dense      | 120              |
//! | `logits` | network output   | classes          |
//!
//! For `mlp-*` presets `stage<k>` is the k-th hidden layer.

use super::LayerSpec;
use crate::error::{Error, Result};

/// Normalization variant of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Layer,
    Batch,
}

pub const NORM_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Base {
    LeNet5,
    Mlp(Vec<usize>),
}

/// A parsed preset string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub name: String,
    pub base: Base,
    pub norm: Norm,
    pub input: [usize; 3],
    pub classes: usize,
}

/// Layers plus the layer index after which each stage is tapped.
#[derive(Debug, Clone)]
pub struct Blueprint {
    pub layers: Vec<LayerSpec>,
    pub stages: Vec<(String, usize)>,
}

impl Architecture {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("bad architecture `{name}`: {why}"));
        let (rest, classes) = match name.rsplit_once(':') {
            Some((r, c)) => (r, c.parse::<usize>().map_err(|_| bad("classes"))?),
            None => (name, 10),
        };
        let (rest, input) = match rest.split_once('@') {
            Some((r, dims)) => {
                let d: Vec<usize> = dims
                    .split('x')
                    .map(|v| v.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("input extents"))?;
                if d.len() != 3 {
                    return Err(bad("input must be CxHxW"));
                }
                (r, [d[0], d[1], d[2]])
            }
            None => (rest, [1, 28, 28]),
        };
        let (rest, norm) = if let Some(r) = rest.strip_suffix("-ln") {
            (r, Norm::Layer)
        } else if let Some(r) = rest.strip_suffix("-bn") {
            (r, Norm::Batch)
        } else {
            (rest, Norm::None)
        };
        let base = if rest == "lenet5" {
            Base::LeNet5
        } else if let Some(widths) = rest.strip_prefix("mlp-") {
            let w: Vec<usize> = widths
                .split('-')
                .map(|v| v.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("mlp widths"))?;
            Base::Mlp(w)
        } else if rest == "mlp" {
            Base::Mlp(Vec::new())
        } else {
            return Err(bad("unknown base, expected lenet5 or mlp-<widths>"));
        };
        if classes == 0 || input.contains(&0) {
            return Err(bad("extents must be positive"));
        }
        Ok(Architecture {
            name: name.to_string(),
            base,
            norm,
            input,
            classes,
        })
    }

    pub fn blueprint(&self) -> Blueprint {
        let mut layers = Vec::new();
        let mut stages = Vec::new();
        let norm = |layers: &mut Vec<LayerSpec>, channels: usize| match self.norm {
            Norm::None => {}
            Norm::Layer => layers.push(LayerSpec::LayerNorm {
                channels,
                eps: NORM_EPS,
            }),
            Norm::Batch => layers.push(LayerSpec::BatchNorm {
                channels,
                eps: NORM_EPS,
                momentum: BN_MOMENTUM,
            }),
        };
        let [c, h, w] = self.input;
        match &self.base {
            Base::LeNet5 => {
                layers.push(LayerSpec::Conv {
                    in_channels: c,
                    filters: 6,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                });
                norm(&mut layers, 6);
                stages.push(("stage1".to_string(), layers.len() - 1));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::MaxPool { size: 2 });
                layers.push(LayerSpec::Conv {
                    in_channels: 6,
                    filters: 16,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                });
                norm(&mut layers, 16);
                stages.push(("stage2".to_string(), layers.len() - 1));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::MaxPool { size: 2 });
                layers.push(LayerSpec::Flatten);
                let flat = 16 * ((h / 2).saturating_sub(4) / 2) * ((w / 2).saturating_sub(4) / 2);
                let mut prev = flat;
                for (k, width) in [120usize, 84].into_iter().enumerate() {
                    layers.push(LayerSpec::Dense {
                        inputs: prev,
                        outputs: width,
                    });
                    norm(&mut layers, width);
                    if k == 0 {
                        stages.push(("stage3".to_string(), layers.len() - 1));
                    }
                    layers.push(LayerSpec::Relu);
                    prev = width;
                }
                layers.push(LayerSpec::Dense {
                    inputs: prev,
                    outputs: self.classes,
                });
            }
            Base::Mlp(widths) => {
                layers.push(LayerSpec::Flatten);
                let mut prev = c * h * w;
                for (k, &width) in widths.iter().enumerate() {
                    layers.push(LayerSpec::Dense {
                        inputs: prev,
                        outputs: width,
                    });
                    norm(&mut layers, width);
                    stages.push((format!("stage{}", k + 1), layers.len() - 1));
                    layers.push(LayerSpec::Relu);
                    prev = width;
                }
                layers.push(LayerSpec::Dense {
                    inputs: prev,
                    outputs: self.classes,
                });
            }
        }
        stages.push(("logits".to_string(), layers.len() - 1));
        Blueprint { layers, stages }
    }
}
