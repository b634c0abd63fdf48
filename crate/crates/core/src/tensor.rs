// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense NCHW tensor used for images, activation maps and gradients.

use crate::scalar::Scalar;

/// Four-dimensional row-major tensor in `[batch, channel, height, width]`
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `H×W` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Contiguous `C×H×W` slab of one batch element.
    pub fn sample(&self, n: usize) -> &[T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let chw = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * chw..(n + 1) * chw]
    }

    /// Copies batch element `n` into a standalone single-sample tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self::from_vec([1, c, h, w], self.sample(n).to_vec())
    }

    /// Concatenates equally shaped tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            assert_eq!(&t.shape[1..], &[c, h, w], "stack shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    /// Spatial position of the center neuron: `(floor(H/2), floor(W/2))`.
    #[inline]
    pub fn center(&self) -> (usize, usize) {
        (self.shape[2] / 2, self.shape[3] / 2)
    }

    /// Center-neuron value of channel `c` in batch element `n`.
    pub fn center_value(&self, n: usize, c: usize) -> T {
        let (y, x) = self.center();
        self.at(n, c, y, x)
    }

    /// Mean over the full spatial map of channel `c` in batch element `n`.
    pub fn channel_mean(&self, n: usize, c: usize) -> T {
        let plane = self.plane(n, c);
        plane.iter().copied().sum::<T>() / T::from_usize(plane.len()).unwrap()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_uses_floor_for_even_extent() {
        let t = Tensor::<f32>::zeros([1, 1, 4, 7]);
        assert_eq!(t.center(), (2, 3));
        let t = Tensor::<f32>::zeros([1, 1, 1, 1]);
        assert_eq!(t.center(), (0, 0));
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
        assert_eq!(t.select(1).at(0, 2, 3, 4), 1234.0);
    }

    #[test]
    fn stack_then_select_recovers_items() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([1, 2, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), [2, 2, 2, 2]);
        assert_eq!(s.select(0), a);
        assert_eq!(s.select(1), b);
    }
}
