//! Dense channel-major (C×H×W) `f64` fields.
//!
//! Images, denoiser latents, control embeddings and noise all share this
//! representation. Pixel-space images are nominally in `[-1, 1]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A channel-major `C×H×W` field of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Wraps an existing buffer. Panics if the length does not match the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "buffer length does not match {channels}x{height}x{width}"
        );
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Standard normal samples drawn in row-major order from `rng`.
    pub fn randn<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Spatial shape `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// `a·self + b·other`, elementwise. Shapes must agree.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Tensor {
        assert!(self.same_shape(other), "shape mismatch in lincomb");
        Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            ..*self
        }
    }

    /// `self += a·other`.
    pub fn axpy(&mut self, a: f64, other: &Tensor) {
        assert!(self.same_shape(other), "shape mismatch in axpy");
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|v| a * v)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2×2 average pooling. Spatial dims must be even.
    pub fn avg_pool2(&self) -> Tensor {
        assert!(
            self.height % 2 == 0 && self.width % 2 == 0,
            "odd extent in avg_pool2"
        );
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let r0 = &src[2 * y * self.width..(2 * y + 1) * self.width];
                let r1 = &src[(2 * y + 1) * self.width..(2 * y + 2) * self.width];
                for x in 0..w {
                    dst[y * w + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::avg_pool2`]: spreads each value over its 2×2 block with weight 1/4.
    pub fn avg_pool2_backward(&self) -> Tensor {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = 0.25 * src[(y / 2) * self.width + x / 2];
                }
            }
        }
        out
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / 2) * self.width + x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`]: 2×2 sum pooling.
    pub fn upsample2_backward(&self) -> Tensor {
        self.avg_pool2().scale(4.0)
    }

    /// Stacks channels of `self` followed by `other`.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.spatial(),
            other.spatial(),
            "spatial mismatch in concat"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(
            self.channels + other.channels,
            self.height,
            self.width,
            data,
        )
    }

    /// Splits off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        assert!(first <= self.channels);
        let n = first * self.plane_len();
        (
            Tensor::from_vec(first, self.height, self.width, self.data[..n].to_vec()),
            Tensor::from_vec(
                self.channels - first,
                self.height,
                self.width,
                self.data[n..].to_vec(),
            ),
        )
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor {
    type Output = f64;

    fn index(&self, (c, y, x): (usize, usize, usize)) -> &f64 {
        &self.data[(c * self.height + y) * self.width + x]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor {
    fn index_mut(&mut self, (c, y, x): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let a = Tensor::from_vec(1, 2, 4, (0..8).map(|v| v as f64).collect());
        let b = Tensor::from_vec(1, 1, 2, vec![0.5, -1.5]);
        // <pool(a), b> == <a, pool^T(b)>
        let lhs: f64 = a
            .avg_pool2()
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = a
            .data()
            .iter()
            .zip(b.avg_pool2_backward().data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = b
            .upsample2()
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = b
            .data()
            .iter()
            .zip(a.upsample2_backward().data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::filled(2, 3, 3, 1.0);
        let b = Tensor::filled(1, 3, 3, -2.0);
        let (x, y) = a.concat_channels(&b).split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }
}
