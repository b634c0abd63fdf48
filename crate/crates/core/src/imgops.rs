// SPDX-License-Identifier: MIT OR Apache-2.0

//! Geometric image operations on NCHW tensors together with their adjoints.
//!
//! Resampling is expressed as a [`SamplingPlan`]: for every output pixel a
//! fixed set of weighted input taps. Applying the plan is a gather, and the
//! adjoint used for backpropagation is the matching scatter.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Round half to even, matching Python's `round` on the crop offset.
fn round_half_even(v: f64) -> usize {
    let r = v.round();
    let out = if (v - v.trunc()).abs() == 0.5 && (r as i64) % 2 != 0 { r - v.signum() } else { r };
    out.max(0.0) as usize
}

/// Top-left offset of a centered crop, using the torchvision convention.
pub fn center_crop_offset(extent: usize, crop: usize) -> usize {
    assert!(crop <= extent, "crop {crop} larger than extent {extent}");
    round_half_even((extent - crop) as f64 / 2.0)
}

/// Extracts the window `[top, top+h) × [left, left+w)` from every plane.
pub fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let [n, c, ih, iw] = img.shape();
    assert!(top + h <= ih && left + w <= iw, "crop window out of bounds");
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| img.at(b, ch, top + y, left + x))
}

/// Adjoint of [`crop`]: places `grad` back into a zero tensor of `input_shape`.
pub fn crop_backward<T: Scalar>(grad: &Tensor<T>, top: usize, left: usize, input_shape: [usize; 4]) -> Tensor<T> {
    let mut out = Tensor::zeros(input_shape);
    let [n, c, h, w] = grad.shape();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(b, ch, top + y, left + x, grad.at(b, ch, y, x));
                }
            }
        }
    }
    out
}

pub fn center_crop<T: Scalar>(img: &Tensor<T>, size: usize) -> Tensor<T> {
    let top = center_crop_offset(img.height(), size);
    let left = center_crop_offset(img.width(), size);
    crop(img, top, left, size, size)
}

/// Pads every plane by `pad` pixels on each side with a constant.
pub fn pad_constant<T: Scalar>(img: &Tensor<T>, pad: usize, value: T) -> Tensor<T> {
    let [n, c, h, w] = img.shape();
    let mut out = Tensor::full([n, c, h + 2 * pad, w + 2 * pad], value);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(b, ch, y + pad, x + pad, img.at(b, ch, y, x));
                }
            }
        }
    }
    out
}

/// Per-output-pixel bilinear taps shared by every plane of a tensor.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

fn axis_source(dst: usize, in_len: usize, out_len: usize, align_corners: bool) -> (usize, usize, f64) {
    let src = if align_corners {
        if out_len > 1 {
            dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    } else {
        let scale = in_len as f64 / out_len as f64;
        ((dst as f64 + 0.5) * scale - 0.5).max(0.0)
    };
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = if i0 < in_len - 1 { i0 + 1 } else { i0 };
    let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, lambda)
}

impl SamplingPlan {
    /// Bilinear resize without antialiasing. `align_corners = false` is the
    /// half-pixel-center convention.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize, align_corners: bool) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0, "empty resize");
        let rows: Vec<_> = (0..out_h).map(|y| axis_source(y, in_h, out_h, align_corners)).collect();
        let cols: Vec<_> = (0..out_w).map(|x| axis_source(x, in_w, out_w, align_corners)).collect();
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, ly) in &rows {
            for &(x0, x1, lx) in &cols {
                let idx = |y: usize, x: usize| (y * in_w + x) as u32;
                taps.push([
                    (idx(y0, x0), (1.0 - ly) * (1.0 - lx)),
                    (idx(y0, x1), (1.0 - ly) * lx),
                    (idx(y1, x0), ly * (1.0 - lx)),
                    (idx(y1, x1), ly * lx),
                ]);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Rotation by `degrees` about the image center with bilinear sampling;
    /// samples falling outside the input read as zero.
    pub fn rotate(h: usize, w: usize, degrees: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (lx, ly) = (sx - x0, sy - y0);
                let mut tap = [(0u32, 0.0); 4];
                let corners = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x0 + 1.0, (1.0 - ly) * lx),
                    (y0 + 1.0, x0, ly * (1.0 - lx)),
                    (y0 + 1.0, x0 + 1.0, ly * lx),
                ];
                for (slot, &(yy, xx, wgt)) in tap.iter_mut().zip(&corners) {
                    if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                        *slot = ((yy as usize * w + xx as usize) as u32, wgt);
                    }
                }
                taps.push(tap);
            }
        }
        Self {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            taps,
        }
    }

    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = img.shape();
        assert_eq!((h, w), (self.in_h, self.in_w), "sampling plan input size");
        let taps: Vec<[(u32, T); 4]> = self.typed_taps();
        let mut out = Tensor::zeros([n, c, self.out_h, self.out_w]);
        for b in 0..n {
            for ch in 0..c {
                let src = img.plane(b, ch).to_vec();
                for (d, tap) in out.plane_mut(b, ch).iter_mut().zip(&taps) {
                    *d = tap.iter().fold(T::zero(), |acc, &(i, wgt)| acc + src[i as usize] * wgt);
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_adjoint<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = grad.shape();
        assert_eq!((h, w), (self.out_h, self.out_w), "sampling plan output size");
        let taps: Vec<[(u32, T); 4]> = self.typed_taps();
        let mut out = Tensor::zeros([n, c, self.in_h, self.in_w]);
        for b in 0..n {
            for ch in 0..c {
                let g = grad.plane(b, ch).to_vec();
                let dst = out.plane_mut(b, ch);
                for (&gv, tap) in g.iter().zip(&taps) {
                    for &(i, wgt) in tap {
                        dst[i as usize] = dst[i as usize] + gv * wgt;
                    }
                }
            }
        }
        out
    }

    fn typed_taps<T: Scalar>(&self) -> Vec<[(u32, T); 4]> {
        self.taps.iter().map(|t| t.map(|(i, wgt)| (i, T::lit(wgt)))).collect()
    }
}

pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Tensor<T> {
    if img.height() == out_h && img.width() == out_w && !align_corners {
        return img.clone();
    }
    SamplingPlan::resize(img.height(), img.width(), out_h, out_w, align_corners).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_offsets_follow_round_half_even() {
        assert_eq!(center_crop_offset(256, 231), 12);
        assert_eq!(center_crop_offset(256, 205), 26);
        assert_eq!(center_crop_offset(256, 224), 16);
        assert_eq!(center_crop_offset(224, 112), 56);
        assert_eq!(center_crop_offset(5, 2), 2);
    }

    #[test]
    fn resize_same_size_is_identity_in_both_modes() {
        let img = Tensor::<f64>::from_fn([1, 2, 5, 6], |_, c, y, x| (c * 31 + y * 7 + x) as f64);
        let plan = SamplingPlan::resize(5, 6, 5, 6, true);
        assert!(plan.apply(&img).max_abs_diff(&img) < 1e-12);
        let plan = SamplingPlan::resize(5, 6, 5, 6, false);
        assert!(plan.apply(&img).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn upsample_two_x_half_pixel_values() {
        // 1-D [0, 1] upsampled to 4 samples under half-pixel centers.
        let img = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]);
        let out = resize_bilinear(&img, 1, 4, false);
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rotation_by_zero_is_identity_and_adjoint_holds() {
        let img = Tensor::<f64>::from_fn([1, 1, 6, 7], |_, _, y, x| ((y * 7 + x) as f64).sin());
        let plan = SamplingPlan::rotate(6, 7, 0.0);
        assert!(plan.apply(&img).max_abs_diff(&img) < 1e-12);
        let plan = SamplingPlan::rotate(6, 7, 9.0);
        let g = Tensor::<f64>::from_fn([1, 1, 6, 7], |_, _, y, x| ((y + 2 * x) as f64).cos());
        let lhs: f64 = plan.apply(&img).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data().iter().zip(plan.apply_adjoint(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let img = Tensor::<f32>::from_fn([1, 3, 4, 4], |_, c, y, x| (c + y + x) as f32);
        let padded = pad_constant(&img, 2, 0.5);
        assert_eq!(padded.shape(), [1, 3, 8, 8]);
        assert_eq!(padded.at(0, 0, 0, 0), 0.5);
        assert_eq!(crop(&padded, 2, 2, 4, 4), img);
    }
}
