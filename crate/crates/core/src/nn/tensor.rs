use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Element type of the network: `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Scalar: num_traits::Float + Default + Debug + Sum + Send + Sync + 'static {
    fn c(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Channel-major 4D tensor; each channel is an x-fastest volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![F::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<F>) -> Result<Self> {
        let n = channels * dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                found: data.len(),
            });
        }
        Ok(Tensor { channels, dims, data })
    }

    /// Stacks equally sized volumes as channels.
    pub fn from_channels(dims: [usize; 3], channels: &[Vec<F>]) -> Result<Self> {
        let mut data = Vec::with_capacity(channels.len() * dims[0] * dims[1] * dims[2]);
        for c in channels {
            data.extend_from_slice(c);
        }
        Self::from_data(channels.len(), dims, data)
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }

    /// Reverses the selected spatial axes (an involution).
    pub fn flip(&self, axes: [bool; 3]) -> Self {
        if !axes.iter().any(|&a| a) {
            return self.clone();
        }
        let [nx, ny, nz] = self.dims;
        let n = self.voxels();
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let src = &self.data[c * n..(c + 1) * n];
            for z in 0..nz {
                let sz = if axes[2] { nz - 1 - z } else { z };
                for y in 0..ny {
                    let sy = if axes[1] { ny - 1 - y } else { y };
                    let row = nx * (sy + ny * sz);
                    for x in 0..nx {
                        let sx = if axes[0] { nx - 1 - x } else { x };
                        out.push(src[row + sx]);
                    }
                }
            }
        }
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: out,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The eight axis-flip combinations, identity first.
pub fn flip_combinations() -> [[bool; 3]; 8] {
    std::array::from_fn(|i| [i & 1 != 0, i & 2 != 0, i & 4 != 0])
}
