// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image parameterizations optimized by feature visualization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Fourier coefficients with 1/f scaling and a color-decorrelated basis.
    SpectralDecorrelated,
    /// Per-pixel logits.
    RawPixel,
}

/// Square root of the ImageNet RGB covariance, used to decorrelate colors.
const COLOR_CORRELATION_SVD_SQRT: [[f64; 3]; 3] = [[0.26, 0.09, 0.02], [0.27, 0.00, -0.05], [0.27, -0.09, 0.03]];

/// Initial standard deviation of the parameters.
const INIT_SD: f64 = 0.01;

/// Spectral images are divided by this before color mixing.
const SPECTRAL_DIVISOR: f64 = 4.0;

fn color_matrix() -> [[f64; 3]; 3] {
    let m = COLOR_CORRELATION_SVD_SQRT;
    let max_norm = (0..3)
        .map(|col| (0..3).map(|row| m[row][col] * m[row][col]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    m.map(|row| row.map(|v| v / max_norm))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// A differentiable map from a flat parameter vector to a `[1, 3, H, W]`
/// image in `[0, 1]`.
pub struct ImageParam<T: Scalar> {
    kind: Parameterization,
    height: usize,
    width: usize,
    pub params: Vec<T>,
    spectral: Option<Spectral<T>>,
}

struct Spectral<T: Scalar> {
    cols: usize,
    /// Per-coefficient 1/f scale, `[H, cols]`.
    scale: Vec<T>,
    /// Hermitian multiplicity per column: 1 for DC/Nyquist, 2 otherwise.
    multiplicity: Vec<T>,
    row_inv: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    row_fwd: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
}

/// Values kept from [`ImageParam::render`] for the backward pass.
pub struct RenderCache<T> {
    image: Tensor<T>,
}

impl<T: Scalar> ImageParam<T> {
    pub fn new(kind: Parameterization, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
        let spectral = (kind == Parameterization::SpectralDecorrelated).then(|| Spectral::new(height, width));
        let len = match &spectral {
            Some(s) => 3 * height * s.cols * 2,
            None => 3 * height * width,
        };
        let params = (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect();
        Self {
            kind,
            height,
            width,
            params,
            spectral,
        }
    }

    pub fn kind(&self) -> Parameterization {
        self.kind
    }

    /// Pre-sigmoid image `[1, 3, H, W]`.
    fn logits(&self) -> Tensor<T> {
        match &self.spectral {
            None => Tensor::from_vec([1, 3, self.height, self.width], self.params.clone()),
            Some(s) => {
                let mut planes = Vec::with_capacity(3);
                let per = self.height * s.cols * 2;
                for c in 0..3 {
                    planes.push(s.synthesize(&self.params[c * per..(c + 1) * per], self.height, self.width));
                }
                let m = color_matrix();
                Tensor::from_fn([1, 3, self.height, self.width], |_, c, y, x| {
                    let i = y * self.width + x;
                    (0..3).fold(T::zero(), |acc, j| acc + T::lit(m[c][j]) * planes[j][i])
                })
            }
        }
    }

    pub fn render(&self) -> (Tensor<T>, RenderCache<T>) {
        let image = self.logits().map(sigmoid);
        (image.clone(), RenderCache { image })
    }

    pub fn image(&self) -> Tensor<T> {
        self.render().0
    }

    /// Gradient with respect to `params` given the gradient with respect to
    /// the rendered image.
    pub fn backward(&self, cache: &RenderCache<T>, grad_image: &Tensor<T>) -> Vec<T> {
        let g_logits = cache.image.zip_map(grad_image, |s, g| g * s * (T::one() - s));
        match &self.spectral {
            None => g_logits.into_vec(),
            Some(s) => {
                let m = color_matrix();
                let hw = self.height * self.width;
                let mut out = Vec::with_capacity(self.params.len());
                for j in 0..3 {
                    let plane: Vec<T> = (0..hw)
                        .map(|i| (0..3).fold(T::zero(), |acc, c| acc + T::lit(m[c][j]) * g_logits.plane(0, c)[i]))
                        .collect();
                    out.extend(s.synthesize_adjoint(&plane, self.height, self.width));
                }
                out
            }
        }
    }
}

impl<T: Scalar> Spectral<T> {
    fn new(h: usize, w: usize) -> Self {
        let cols = w / 2 + 1;
        let fy = |k: usize| {
            let k = k as f64;
            let h = h as f64;
            if k < (h / 2.0).ceil() { k / h } else { (k - h) / h }
        };
        let floor = 1.0 / (h.max(w) as f64);
        let mut scale = Vec::with_capacity(h * cols);
        for ky in 0..h {
            for kx in 0..cols {
                let fx = kx as f64 / w as f64;
                let f = (fx * fx + fy(ky) * fy(ky)).sqrt();
                scale.push(T::lit(1.0 / f.max(floor)));
            }
        }
        let multiplicity = (0..cols)
            .map(|k| if k == 0 || (w.is_multiple_of(2) && k == w / 2) { T::one() } else { T::lit(2.0) })
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            cols,
            scale,
            multiplicity,
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
        }
    }

    /// Real image from half-spectrum parameters `[H, cols, 2]`:
    /// `Re(IFFT2_ortho(m ⊙ s ⊙ Z)) / 4` with `Z` zero beyond column `W/2`.
    fn synthesize(&self, p: &[T], h: usize, w: usize) -> Vec<T> {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
        for ky in 0..h {
            for kx in 0..self.cols {
                let i = ky * self.cols + kx;
                let f = self.scale[i] * self.multiplicity[kx];
                buf[ky * w + kx] = Complex::new(p[2 * i] * f, p[2 * i + 1] * f);
            }
        }
        fft2(&mut buf, h, w, &self.row_inv, &self.col_inv);
        let norm = T::one() / (T::from_usize(h * w).unwrap().sqrt() * T::lit(SPECTRAL_DIVISOR));
        buf.iter().map(|c| c.re * norm).collect()
    }

    fn synthesize_adjoint(&self, g: &[T], h: usize, w: usize) -> Vec<T> {
        let mut buf: Vec<Complex<T>> = g.iter().map(|&v| Complex::new(v, T::zero())).collect();
        fft2(&mut buf, h, w, &self.row_fwd, &self.col_fwd);
        let norm = T::one() / (T::from_usize(h * w).unwrap().sqrt() * T::lit(SPECTRAL_DIVISOR));
        let mut out = Vec::with_capacity(h * self.cols * 2);
        for ky in 0..h {
            for kx in 0..self.cols {
                let i = ky * self.cols + kx;
                let f = self.scale[i] * self.multiplicity[kx] * norm;
                let c = buf[ky * w + kx];
                out.push(c.re * f);
                out.push(c.im * f);
            }
        }
        out
    }
}

/// Unnormalized 2-D transform of a row-major `h × w` buffer.
fn fft2<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize, rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
    for row in buf.chunks_mut(w) {
        rows.process(row);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(kind: Parameterization, h: usize, w: usize) {
        let mut p = ImageParam::<f64>::new(kind, h, w, 3);
        // Larger parameters so the sigmoid is away from its linear regime.
        p.params.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 30.0 + (i as f64 * 0.7).sin() * 0.2);
        let weights = Tensor::<f64>::from_fn([1, 3, h, w], |_, c, y, x| ((c * 13 + y * 5 + x * 3) as f64).cos());
        let f = |p: &ImageParam<f64>| -> f64 { p.image().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum() };
        let (_, cache) = p.render();
        let grad = p.backward(&cache, &weights);
        assert_eq!(grad.len(), p.params.len());
        let eps = 1e-6;
        for i in (0..p.params.len()).step_by(11) {
            let orig = p.params[i];
            p.params[i] = orig + eps;
            let up = f(&p);
            p.params[i] = orig - eps;
            let down = f(&p);
            p.params[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0), "{kind:?} {h}x{w} index {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        fd_check(Parameterization::SpectralDecorrelated, 8, 8);
        fd_check(Parameterization::SpectralDecorrelated, 6, 9);
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        fd_check(Parameterization::RawPixel, 5, 4);
    }

    #[test]
    fn initial_image_is_near_mid_gray() {
        for kind in [Parameterization::SpectralDecorrelated, Parameterization::RawPixel] {
            let img = ImageParam::<f32>::new(kind, 16, 16, 1).image();
            assert!(img.data().iter().all(|v| (v - 0.5).abs() < 0.1), "{kind:?}");
        }
    }

    #[test]
    fn color_matrix_columns_have_max_unit_norm() {
        let m = color_matrix();
        let norms: Vec<f64> = (0..3).map(|c| (0..3).map(|r| m[r][c] * m[r][c]).sum::<f64>().sqrt()).collect();
        assert!((norms.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }
}
