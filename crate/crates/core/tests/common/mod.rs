// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference implementations and fixtures shared by the integration tests.
//! Nothing here calls into the library's own image or tensor operations;
//! library networks are only read for their weights.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use resscale::layers::Layer;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

/// A tensor read from a safetensors file, widened to `f64`.
#[derive(Debug, Clone)]
pub struct Stored {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Minimal safetensors reader: 8-byte little-endian header length, JSON
/// header, raw little-endian data.
pub fn read_safetensors(path: &Path) -> HashMap<String, Stored> {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    let data = &bytes[8 + n..];
    let mut out = HashMap::new();
    for (name, meta) in header.as_object().unwrap() {
        if name == "__metadata__" {
            continue;
        }
        let shape: Vec<usize> = meta["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
        let off = meta["data_offsets"].as_array().unwrap();
        let raw = &data[off[0].as_u64().unwrap() as usize..off[1].as_u64().unwrap() as usize];
        let values: Vec<f64> = match meta["dtype"].as_str().unwrap() {
            "F64" => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            "F32" => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            "I64" => raw.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            "U8" => raw.iter().map(|&b| b as f64).collect(),
            other => panic!("unsupported dtype {other}"),
        };
        out.insert(name.clone(), Stored { shape, values });
    }
    out
}

/// Planar `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planar {
    pub fn new(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { c, h, w, data }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Centered crop with the offset rounded half to even.
pub fn ref_center_crop(img: &Planar, size: usize) -> Planar {
    let top = ((img.h - size) as f64 / 2.0).round_ties_even() as usize;
    let left = ((img.w - size) as f64 / 2.0).round_ties_even() as usize;
    Planar::new(img.c, size, size, |c, y, x| img.at(c, top + y, left + x))
}

/// Bilinear resize with half-pixel centers and edge clamping, no
/// antialiasing; `align_corners` maps corner pixel centers onto each other.
pub fn ref_bilinear(img: &Planar, oh: usize, ow: usize, align_corners: bool) -> Planar {
    let coord = |dst: usize, inp: usize, out: usize| -> f64 {
        if align_corners {
            if out == 1 {
                0.0
            } else {
                dst as f64 * (inp - 1) as f64 / (out - 1) as f64
            }
        } else {
            ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0)
        }
    };
    Planar::new(img.c, oh, ow, |c, y, x| {
        let sy = coord(y, img.h, oh);
        let sx = coord(x, img.w, ow);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.h - 1), (x0 + 1).min(img.w - 1));
        let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
        let top = img.at(c, y0, x0) * (1.0 - lx) + img.at(c, y0, x1) * lx;
        let bottom = img.at(c, y1, x0) * (1.0 - lx) + img.at(c, y1, x1) * lx;
        top * (1.0 - ly) + bottom * ly
    })
}

/// Direct zero-padded convolution of a planar image with `[O, I, K, K]`
/// weights.
pub fn ref_conv(img: &Planar, weights: &[f64], out_channels: usize, k: usize, stride: usize, pad: usize) -> Planar {
    let oh = (img.h + 2 * pad - k) / stride + 1;
    let ow = (img.w + 2 * pad - k) / stride + 1;
    Planar::new(out_channels, oh, ow, |o, y, x| {
        let mut acc = 0.0;
        for i in 0..img.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (x * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < img.h && (ix as usize) < img.w {
                        acc += weights[((o * img.c + i) * k + ky) * k + kx] * img.at(i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Center Pre and Post values of every channel, computed by direct
/// convolution from the planted weights.
pub fn planted_pre_post(img: &Planar) -> (Vec<f64>, Vec<f64>) {
    let net = resscale::netgraph::synthetic::planted_scale_pair::<f64>();
    let Layer::Conv(stem) = &net.stem[0] else { panic!("stem conv") };
    let b = &net.stages[0][0];
    let (Layer::Conv(main), Layer::BatchNorm(bn)) = (&b.main[0], &b.main[1]) else { panic!("main path") };
    let block_in = ref_conv(img, &stem.weight, stem.out_channels, stem.kernel, 1, stem.padding);
    let conv = ref_conv(&block_in, &main.weight, main.out_channels, main.kernel, 1, main.padding);
    let (cy, cx) = (conv.h / 2, conv.w / 2);
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for c in 0..conv.c {
        let p = (conv.at(c, cy, cx) - bn.running_mean[c]) * bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c];
        pre.push(p);
        post.push((block_in.at(c, cy, cx) + p).max(0.0));
    }
    (pre, post)
}

/// Small deterministic generator for test images, independent of the
/// library's seeding.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Writes `root/<class>/<name>.png` files with uniform RGB colors.
pub fn write_uniform_dataset(root: &Path, classes: &[(&str, Vec<[u8; 3]>)], size: u32) {
    for (class, colors) in classes {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for (i, rgb) in colors.iter().enumerate() {
            let img = image::RgbImage::from_pixel(size, size, image::Rgb(*rgb));
            img.save(dir.join(format!("img{i:03}.png"))).unwrap();
        }
    }
}
