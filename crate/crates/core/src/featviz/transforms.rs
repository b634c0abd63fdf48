// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stochastic robustness transforms applied to the image at every
//! optimization step: pad, jitter, random scale, random rotation and a
//! second, half-size jitter.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imgops::{crop, crop_backward, pad_constant, SamplingPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Primary and secondary jitter magnitudes in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JitterPair {
    pub primary: usize,
    pub secondary: usize,
}

impl JitterPair {
    /// The secondary jitter is always half the primary, rounded down.
    pub fn from_primary(primary: usize) -> Self {
        Self {
            primary,
            secondary: primary / 2,
        }
    }
}

/// Regularization stack settings other than jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformStack {
    pub enabled: bool,
    pub pad: usize,
    pub pad_value: f64,
    pub scales: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Default for TransformStack {
    fn default() -> Self {
        let scales = (0..11).map(|i| 1.0 + (i as f64 - 5.0) / 50.0).collect();
        let mut angles: Vec<f64> = (-10..=10).map(f64::from).collect();
        angles.extend([0.0; 5]);
        Self {
            enabled: true,
            pad: 12,
            pad_value: 0.5,
            scales,
            angles,
        }
    }
}

impl TransformStack {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

enum Applied {
    Pad { pad: usize, shape: [usize; 4] },
    Crop { top: usize, left: usize, shape: [usize; 4] },
    Sample(SamplingPlan),
}

/// Record of one sampled transform chain, replayable backwards.
pub struct TransformTape {
    steps: Vec<Applied>,
}

fn jitter<T: Scalar>(img: &Tensor<T>, d: usize, rng: &mut impl Rng, steps: &mut Vec<Applied>) -> Tensor<T> {
    if d == 0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (dx, dy) = (rng.gen_range(0..d), rng.gen_range(0..d));
    steps.push(Applied::Crop {
        top: dy,
        left: dx,
        shape: img.shape(),
    });
    crop(img, dy, dx, h - d, w - d)
}

impl TransformStack {
    pub fn apply<T: Scalar>(&self, img: &Tensor<T>, jitter_pair: JitterPair, rng: &mut impl Rng) -> (Tensor<T>, TransformTape) {
        let mut steps = Vec::new();
        if !self.enabled {
            return (img.clone(), TransformTape { steps });
        }
        let mut cur = img.clone();
        if self.pad > 0 {
            steps.push(Applied::Pad {
                pad: self.pad,
                shape: cur.shape(),
            });
            cur = pad_constant(&cur, self.pad, T::lit(self.pad_value));
        }
        cur = jitter(&cur, jitter_pair.primary, rng, &mut steps);
        if let Some(&s) = self.scales.choose(rng) {
            let (h, w) = (cur.height(), cur.width());
            let (oh, ow) = ((s * h as f64).ceil() as usize, (s * w as f64).ceil() as usize);
            if (oh, ow) != (h, w) {
                let plan = SamplingPlan::resize(h, w, oh, ow, true);
                cur = plan.apply(&cur);
                steps.push(Applied::Sample(plan));
            }
        }
        if let Some(&a) = self.angles.choose(rng) {
            if a != 0.0 {
                let plan = SamplingPlan::rotate(cur.height(), cur.width(), a);
                cur = plan.apply(&cur);
                steps.push(Applied::Sample(plan));
            }
        }
        cur = jitter(&cur, jitter_pair.secondary, rng, &mut steps);
        (cur, TransformTape { steps })
    }
}

impl TransformTape {
    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for step in self.steps.iter().rev() {
            g = match step {
                Applied::Pad { pad, shape } => crop(&g, *pad, *pad, shape[2], shape[3]),
                Applied::Crop { top, left, shape } => crop_backward(&g, *top, *left, *shape),
                Applied::Sample(plan) => plan.apply_adjoint(&g),
            };
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_stack_matches_canonical_recipe() {
        let t = TransformStack::default();
        assert_eq!(t.pad, 12);
        assert_eq!(t.scales.len(), 11);
        assert!((t.scales[0] - 0.9).abs() < 1e-12 && (t.scales[10] - 1.1).abs() < 1e-12);
        assert_eq!(t.angles.len(), 26);
        assert_eq!(t.angles.iter().filter(|a| **a == 0.0).count(), 6);
    }

    #[test]
    fn secondary_jitter_is_half_primary() {
        assert_eq!(JitterPair::from_primary(16), JitterPair { primary: 16, secondary: 8 });
        assert_eq!(JitterPair::from_primary(4).secondary, 2);
        assert_eq!(JitterPair::from_primary(5).secondary, 2);
        assert_eq!(JitterPair::from_primary(0).secondary, 0);
    }

    #[test]
    fn backward_is_adjoint_of_linear_part() {
        // With pad value 0 the whole chain is linear.
        let stack = TransformStack {
            pad_value: 0.0,
            ..TransformStack::default()
        };
        let img = Tensor::<f64>::from_fn([1, 3, 20, 20], |_, c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.3).sin());
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, tape) = stack.apply(&img, JitterPair::from_primary(4), &mut rng);
            let g = Tensor::from_fn(out.shape(), |_, c, y, x| ((c + 2 * y + 5 * x) as f64 * 0.17).cos());
            let lhs: f64 = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let back = tape.backward(&g);
            assert_eq!(back.shape(), img.shape());
            let rhs: f64 = img.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn disabled_stack_is_identity() {
        let img = Tensor::<f32>::full([1, 3, 8, 8], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, tape) = TransformStack::disabled().apply(&img, JitterPair::from_primary(16), &mut rng);
        assert_eq!(out, img);
        assert_eq!(tape.backward(&img), img);
    }
}
