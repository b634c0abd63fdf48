// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built residual networks described by a structured config file.
//!
//! A spec either names a built-in `preset` or lists the layers explicitly.
//! Explicit convolution weights are given inline; layers that omit them
//! are zero-initialized, or drawn from a seeded normal when `seed` is set.
//!
//! ```toml
//! name = "toy"
//! input_resolution = 32
//!
//! [[stem]]
//! type = "conv"
//! in_channels = 3
//! out_channels = 2
//! kernel = 3
//! padding = 1
//! seed = 7
//!
//! [[stages]]
//! [[stages.blocks]]
//! out_channels = 2
//! main = [{ type = "conv", in_channels = 2, out_channels = 2, kernel = 3, padding = 1, seed = 8 },
//!         { type = "batch_norm", channels = 2 }]
//!
//! [head]
//! kind = "global_avg"
//! classes = 2
//! seed = 9
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Head, NetworkHandle, Preprocess, ResidualBlock, ResidualNet};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub input_resolution: usize,
    #[serde(default)]
    pub preprocess: Option<Preprocess>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub stem: Vec<LayerSpec>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
}

fn default_input_channels() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub main: Vec<LayerSpec>,
    #[serde(default)]
    pub shortcut: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        dilation: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    BatchNorm {
        channels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        var: Option<Vec<f64>>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    GlobalAvg,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn values<T: Scalar>(explicit: &Option<Vec<f64>>, len: usize, seed: Option<u64>, std: f64, what: &str) -> Result<Vec<T>> {
    match (explicit, seed) {
        (Some(v), _) if v.len() != len => Err(Error::Config(format!("{what}: expected {len} values, got {}", v.len()))),
        (Some(v), _) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
        (None, Some(seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, std).expect("valid std");
            Ok((0..len).map(|_| T::lit(normal.sample(&mut rng))).collect())
        }
        (None, None) => Ok(vec![T::zero(); len]),
    }
}

impl LayerSpec {
    fn build<T: Scalar>(&self) -> Result<Layer<T>> {
        Ok(match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                dilation,
                weights,
                bias,
                seed,
            } => {
                let n = in_channels * out_channels * kernel * kernel;
                let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
                let w = values(weights, n, *seed, std, "conv weights")?;
                let mut conv = Conv2d::new(*in_channels, *out_channels, *kernel, *stride, *padding, w).with_dilation(*dilation);
                if let Some(b) = bias {
                    conv = conv.with_bias(values(&Some(b.clone()), *out_channels, None, 0.0, "conv bias")?);
                }
                Layer::Conv(conv)
            }
            LayerSpec::BatchNorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                let id = BatchNorm::<T>::identity(*channels);
                let pick = |v: &Option<Vec<f64>>, d: Vec<T>, what: &str| -> Result<Vec<T>> {
                    match v {
                        Some(_) => values(v, *channels, None, 0.0, what),
                        None => Ok(d),
                    }
                };
                Layer::BatchNorm(BatchNorm {
                    gamma: pick(gamma, id.gamma.clone(), "gamma")?,
                    beta: pick(beta, id.beta.clone(), "beta")?,
                    running_mean: pick(mean, id.running_mean.clone(), "mean")?,
                    running_var: pick(var, id.running_var.clone(), "var")?,
                    eps: id.eps,
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { kernel, stride, padding } => Layer::MaxPool(MaxPool2d {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            }),
        })
    }

    fn from_layer<T: Scalar>(layer: &Layer<T>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        match layer {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                dilation: c.dilation,
                weights: Some(f(&c.weight)),
                bias: c.bias.as_deref().map(f),
                seed: None,
            },
            Layer::BatchNorm(bn) => LayerSpec::BatchNorm {
                channels: bn.channels(),
                gamma: Some(f(&bn.gamma)),
                beta: Some(f(&bn.beta)),
                mean: Some(f(&bn.running_mean)),
                var: Some(f(&bn.running_var)),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool(p) => LayerSpec::MaxPool {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
            },
        }
    }
}

impl SyntheticSpec {
    /// Spec naming a built-in network.
    pub fn preset(preset: &str, input_resolution: usize) -> Self {
        Self {
            name: preset.to_string(),
            input_channels: 3,
            input_resolution,
            preprocess: None,
            preset: Some(preset.to_string()),
            stem: Vec::new(),
            stages: Vec::new(),
            head: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Serializes an in-memory network with all weights inline.
    pub fn from_network<T: Scalar>(name: &str, input_resolution: usize, preprocess: Preprocess, net: &ResidualNet<T>) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let (kind, lin) = match &net.head {
            Head::GlobalAvgLinear(l) => (HeadKind::GlobalAvg, l),
            Head::CenterLinear(l) => (HeadKind::Center, l),
        };
        Self {
            name: name.to_string(),
            input_channels: net.input_channels,
            input_resolution,
            preprocess: Some(preprocess),
            preset: None,
            stem: net.stem.iter().map(LayerSpec::from_layer).collect(),
            stages: net
                .stages
                .iter()
                .map(|s| StageSpec {
                    blocks: s
                        .iter()
                        .map(|b| BlockSpec {
                            out_channels: b.out_channels,
                            main: b.main.iter().map(LayerSpec::from_layer).collect(),
                            shortcut: b.shortcut.iter().map(LayerSpec::from_layer).collect(),
                        })
                        .collect(),
                })
                .collect(),
            head: Some(HeadSpec {
                kind,
                classes: lin.out_features,
                weights: Some(f(&lin.weight)),
                bias: Some(f(&lin.bias)),
                seed: None,
            }),
        }
    }

    pub fn build<T: Scalar>(&self, weights_id: &str) -> Result<NetworkHandle<T>> {
        if let Some(preset) = &self.preset {
            let (net, pre) = match preset.as_str() {
                "planted-scale-pair" => (planted_scale_pair::<T>(), Preprocess::identity(3)),
                "center-classifier" => (center_classifier::<T>(), Preprocess::identity(3)),
                other => return Err(Error::Config(format!("unknown synthetic preset `{other}`"))),
            };
            return NetworkHandle::new(weights_id, self.input_resolution, self.preprocess.clone().unwrap_or(pre), net);
        }
        let stem = self.stem.iter().map(LayerSpec::build).collect::<Result<Vec<_>>>()?;
        let mut stages = Vec::new();
        for s in &self.stages {
            let mut blocks = Vec::new();
            for b in &s.blocks {
                blocks.push(ResidualBlock {
                    main: b.main.iter().map(LayerSpec::build).collect::<Result<_>>()?,
                    shortcut: b.shortcut.iter().map(LayerSpec::build).collect::<Result<_>>()?,
                    out_channels: b.out_channels,
                });
            }
            stages.push(blocks);
        }
        if stages.iter().all(|s| s.is_empty()) {
            return Err(Error::NotResidual(weights_id.to_string()));
        }
        let last = stages.iter().rev().find_map(|s| s.last()).map(|b| b.out_channels).unwrap();
        let head_spec = self.head.clone().unwrap_or(HeadSpec {
            kind: HeadKind::GlobalAvg,
            classes: 2,
            weights: None,
            bias: None,
            seed: Some(0),
        });
        let std = (1.0 / last as f64).sqrt();
        let lin = Linear::new(
            last,
            head_spec.classes,
            values(&head_spec.weights, last * head_spec.classes, head_spec.seed, std, "head weights")?,
            values(&head_spec.bias, head_spec.classes, None, 0.0, "head bias")?,
        );
        let head = match head_spec.kind {
            HeadKind::GlobalAvg => Head::GlobalAvgLinear(lin),
            HeadKind::Center => Head::CenterLinear(lin),
        };
        let net = ResidualNet {
            input_channels: self.input_channels,
            stem,
            stages,
            head,
        };
        let pre = self.preprocess.clone().unwrap_or_else(|| Preprocess::identity(self.input_channels));
        NetworkHandle::new(weights_id, self.input_resolution, pre, net)
    }
}

/// Zero-sum difference-of-Gaussians kernel, scaled so its positive part
/// sums to one. Row-major `size × size`.
pub fn dog_kernel(size: usize, sigma_center: f64, sigma_surround: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let gauss = |sigma: f64| {
        let g: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let d: Vec<f64> = gauss(sigma_center).iter().zip(gauss(sigma_surround)).map(|(a, b)| a - b).collect();
    let pos: f64 = d.iter().filter(|v| **v > 0.0).sum();
    d.into_iter().map(|v| v / pos).collect()
}

/// Places a `ksize × ksize` kernel centered inside a `size × size` one.
fn embed(kernel: &[f64], ksize: usize, size: usize) -> Vec<f64> {
    let off = (size - ksize) / 2;
    let mut out = vec![0.0; size * size];
    for y in 0..ksize {
        for x in 0..ksize {
            out[(y + off) * size + x + off] = kernel[y * ksize + x];
        }
    }
    out
}

fn center_tap(size: usize, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    out[(size / 2) * size + size / 2] = v;
    out
}

fn set_kernel<T: Scalar>(conv: &mut Conv2d<T>, o: usize, i: usize, k: &[f64]) {
    let n = conv.kernel;
    for y in 0..n {
        for x in 0..n {
            conv.set_weight(o, i, y, x, T::lit(k[y * n + x]));
        }
    }
}

/// Stem kernel size of [`planted_scale_pair`].
pub const PLANTED_STEM_KERNEL: usize = 7;
/// Main-path kernel size of [`planted_scale_pair`].
pub const PLANTED_MAIN_KERNEL: usize = 13;

/// Single-block network with a planted scale-equivariant pair.
///
/// Channels of the block (In → Pre):
///
/// 0. small center-surround detector → same detector at twice the scale
///    (the planted scale-invariant channel),
/// 1. horizontal luminance edge → 4 × red-minus-green at the center,
/// 2. luminance carrier → nothing (all-zero main path),
/// 3. red-minus-green carrier → negative luminance.
///
/// Inputs are `[0, 1]` RGB with identity preprocessing.
pub fn planted_scale_pair<T: Scalar>() -> ResidualNet<T> {
    let ks = PLANTED_STEM_KERNEL;
    let km = PLANTED_MAIN_KERNEL;
    let mut stem = Conv2d::<T>::zeros(3, 4, ks, 1, ks / 2);
    let small = embed(&dog_kernel(5, 0.8, 1.6), 5, ks);
    let sobel = {
        let s = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        embed(&s.map(|v| v / 4.0), 3, ks)
    };
    for rgb in 0..3 {
        set_kernel(&mut stem, 0, rgb, &small.iter().map(|v| v / 3.0).collect::<Vec<_>>());
        set_kernel(&mut stem, 1, rgb, &sobel.iter().map(|v| v / 3.0).collect::<Vec<_>>());
        set_kernel(&mut stem, 2, rgb, &center_tap(ks, 1.0 / 3.0));
    }
    set_kernel(&mut stem, 3, 0, &center_tap(ks, 1.0));
    set_kernel(&mut stem, 3, 1, &center_tap(ks, -1.0));

    let mut main = Conv2d::<T>::zeros(4, 4, km, 1, km / 2);
    set_kernel(&mut main, 0, 2, &embed(&dog_kernel(11, 1.6, 3.2), 11, km));
    set_kernel(&mut main, 1, 3, &center_tap(km, 4.0));
    set_kernel(&mut main, 3, 2, &center_tap(km, -1.0));
    let mut bn = BatchNorm::identity(4);
    bn.beta = vec![T::lit(0.05), T::lit(0.05), T::zero(), T::zero()];

    let head = Linear::new(
        4,
        2,
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0].into_iter().map(T::lit).collect(),
        vec![T::zero(); 2],
    );
    ResidualNet {
        input_channels: 3,
        stem: vec![Layer::Conv(stem)],
        stages: vec![vec![ResidualBlock {
            main: vec![Layer::Conv(main), Layer::BatchNorm(bn)],
            shortcut: Vec::new(),
            out_channels: 4,
        }]],
        head: Head::GlobalAvgLinear(head),
    }
}

/// Two-class network whose decision depends only on the center value of
/// block 1.0 Post channel 0 (luminance): class 1 iff it exceeds 0.5.
///
/// Block channels: 0 luminance, 1 red, 2 green, 3 blue. The main path is
/// all zero, so `Post = ReLU(In)`.
pub fn center_classifier<T: Scalar>() -> ResidualNet<T> {
    center_readout(
        &[[1.0 / 3.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        &[vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]],
        &[0.0, -0.5],
    )
}

/// Single-block network: a 1×1 stem mixing RGB into block channels, an
/// all-zero main path, and a linear classifier on the center neurons.
pub fn center_readout<T: Scalar>(stem_rows: &[[f64; 3]], head_rows: &[Vec<f64>], head_bias: &[f64]) -> ResidualNet<T> {
    let c = stem_rows.len();
    let stem = Conv2d::new(3, c, 1, 1, 0, stem_rows.iter().flatten().map(|&v| T::lit(v)).collect());
    let classes = head_rows.len();
    assert!(head_rows.iter().all(|r| r.len() == c), "head rows must have one weight per channel");
    let head = Linear::new(
        c,
        classes,
        head_rows.iter().flatten().map(|&v| T::lit(v)).collect(),
        head_bias.iter().map(|&v| T::lit(v)).collect(),
    );
    ResidualNet {
        input_channels: 3,
        stem: vec![Layer::Conv(stem)],
        stages: vec![vec![ResidualBlock {
            main: vec![Layer::Conv(Conv2d::zeros(c, c, 1, 1, 0)), Layer::BatchNorm(BatchNorm::identity(c))],
            shortcut: Vec::new(),
            out_channels: c,
        }]],
        head: Head::CenterLinear(head),
    }
}
