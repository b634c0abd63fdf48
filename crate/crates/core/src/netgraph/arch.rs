// SPDX-License-Identifier: MIT OR Apache-2.0

//! BasicBlock ResNet architectures with torchvision parameter naming.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use super::{Head, ResidualBlock, ResidualNet};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d};
use crate::scalar::Scalar;

/// Shape of a BasicBlock ResNet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub name: &'static str,
    pub stem_width: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub classes: usize,
}

pub const RESNET18: Arch = Arch {
    name: "resnet18",
    stem_width: 64,
    widths: [64, 128, 256, 512],
    blocks: [2, 2, 2, 2],
    classes: 1000,
};

pub const RESNET34: Arch = Arch {
    name: "resnet34",
    stem_width: 64,
    widths: [64, 128, 256, 512],
    blocks: [3, 4, 6, 3],
    classes: 1000,
};

/// ResNet18 topology at reduced width, used for small checkpoints in tests.
pub const RESNET_MINI: Arch = Arch {
    name: "resnet-mini",
    stem_width: 8,
    widths: [8, 16, 32, 64],
    blocks: [2, 2, 2, 2],
    classes: 10,
};

/// Registered checkpoints: weights id to architecture.
pub fn registered(weights_id: &str) -> Option<Arch> {
    match weights_id {
        "resnet18-imagenet-v1" => Some(RESNET18),
        "resnet34-imagenet-v1" => Some(RESNET34),
        _ => None,
    }
}

/// Source of named parameter tensors.
trait ParamSource<T> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Result<Vec<T>>;
    fn bn(&mut self, name: &str, channels: usize) -> Result<BatchNorm<T>>;
    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<(Vec<T>, Vec<T>)>;
}

impl Arch {
    pub fn by_name(name: &str) -> Option<Arch> {
        [RESNET18, RESNET34, RESNET_MINI].into_iter().find(|a| a.name == name)
    }

    /// Parameter names and shapes this architecture expects, in build order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut rec = ShapeRecorder::default();
        self.build::<f32>(&mut rec).expect("shape recorder never fails");
        rec.shapes
    }

    fn build<T: Scalar>(&self, src: &mut dyn ParamSource<T>) -> Result<ResidualNet<T>> {
        let sw = self.stem_width;
        let stem = vec![
            Layer::Conv(Conv2d::new(3, sw, 7, 2, 3, src.conv("conv1.weight", sw, 3, 7)?)),
            Layer::BatchNorm(src.bn("bn1", sw)?),
            Layer::Relu,
            Layer::MaxPool(MaxPool2d { kernel: 3, stride: 2, padding: 1 }),
        ];
        let mut stages = Vec::new();
        let mut in_ch = sw;
        for (si, (&width, &count)) in self.widths.iter().zip(&self.blocks).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..count {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("layer{}.{}", si + 1, bi);
                let main = vec![
                    Layer::Conv(Conv2d::new(in_ch, width, 3, stride, 1, src.conv(&format!("{p}.conv1.weight"), width, in_ch, 3)?)),
                    Layer::BatchNorm(src.bn(&format!("{p}.bn1"), width)?),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(width, width, 3, 1, 1, src.conv(&format!("{p}.conv2.weight"), width, width, 3)?)),
                    Layer::BatchNorm(src.bn(&format!("{p}.bn2"), width)?),
                ];
                let shortcut = if stride != 1 || in_ch != width {
                    vec![
                        Layer::Conv(Conv2d::new(in_ch, width, 1, stride, 0, src.conv(&format!("{p}.downsample.0.weight"), width, in_ch, 1)?)),
                        Layer::BatchNorm(src.bn(&format!("{p}.downsample.1"), width)?),
                    ]
                } else {
                    Vec::new()
                };
                blocks.push(ResidualBlock {
                    main,
                    shortcut,
                    out_channels: width,
                });
                in_ch = width;
            }
            stages.push(blocks);
        }
        let (w, b) = src.linear("fc", self.classes, in_ch)?;
        Ok(ResidualNet {
            input_channels: 3,
            stem,
            stages,
            head: Head::GlobalAvgLinear(Linear::new(in_ch, self.classes, w, b)),
        })
    }

    /// Kaiming-normal convolutions, unit batch norms, uniform classifier.
    pub fn random_init<T: Scalar>(&self, seed: u64) -> ResidualNet<T> {
        self.build(&mut RandomSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
        .expect("random source never fails")
    }

    pub fn load_safetensors<T: Scalar>(&self, path: impl AsRef<Path>) -> Result<ResidualNet<T>> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        self.build(&mut SafetensorsSource { st })
    }
}

#[derive(Default)]
struct ShapeRecorder {
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> ParamSource<T> for ShapeRecorder {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Result<Vec<T>> {
        self.shapes.push((name.to_string(), vec![out, inp, k, k]));
        Ok(vec![T::zero(); out * inp * k * k])
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BatchNorm<T>> {
        for field in ["weight", "bias", "running_mean", "running_var"] {
            self.shapes.push((format!("{name}.{field}"), vec![channels]));
        }
        Ok(BatchNorm::identity(channels))
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<(Vec<T>, Vec<T>)> {
        self.shapes.push((format!("{name}.weight"), vec![out, inp]));
        self.shapes.push((format!("{name}.bias"), vec![out]));
        Ok((vec![T::zero(); out * inp], vec![T::zero(); out]))
    }
}

struct RandomSource {
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamSource<T> for RandomSource {
    fn conv(&mut self, _name: &str, out: usize, inp: usize, k: usize) -> Result<Vec<T>> {
        let std = (2.0 / (out * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Ok((0..out * inp * k * k).map(|_| T::lit(normal.sample(&mut self.rng))).collect())
    }

    fn bn(&mut self, _name: &str, channels: usize) -> Result<BatchNorm<T>> {
        Ok(BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(1e-5),
        })
    }

    fn linear(&mut self, _name: &str, out: usize, inp: usize) -> Result<(Vec<T>, Vec<T>)> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = (0..out * inp).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        let b = (0..out).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        Ok((w, b))
    }
}

struct SafetensorsSource<'a> {
    st: SafeTensors<'a>,
}

impl SafetensorsSource<'_> {
    fn read<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let view = self.st.tensor(name).map_err(|e| Error::Weights(format!("tensor `{name}`: {e}")))?;
        if view.shape() != shape {
            return Err(Error::Weights(format!("tensor `{name}` has shape {:?}, expected {shape:?}", view.shape())));
        }
        let data = view.data();
        let values = match view.dtype() {
            Dtype::F32 => data.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            Dtype::F64 => data.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            other => return Err(Error::Weights(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        Ok(values)
    }
}

impl<T: Scalar> ParamSource<T> for SafetensorsSource<'_> {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Result<Vec<T>> {
        self.read(name, &[out, inp, k, k])
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BatchNorm<T>> {
        let s = [channels];
        Ok(BatchNorm {
            gamma: self.read(&format!("{name}.weight"), &s)?,
            beta: self.read(&format!("{name}.bias"), &s)?,
            running_mean: self.read(&format!("{name}.running_mean"), &s)?,
            running_var: self.read(&format!("{name}.running_var"), &s)?,
            eps: T::lit(1e-5),
        })
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<(Vec<T>, Vec<T>)> {
        Ok((self.read(&format!("{name}.weight"), &[out, inp])?, self.read(&format!("{name}.bias"), &[out])?))
    }
}
