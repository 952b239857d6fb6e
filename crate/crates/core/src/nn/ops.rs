//! Differentiable ops with explicit backward passes.
//!
//! Convolution weights are laid out `[out][in][kz][ky][kx]` (kx fastest) for
//! both the strided and the transposed convolution. Work is split over
//! output channels (forward, weight gradients) or input channels (input
//! gradients), so every value is reduced in a fixed order regardless of the
//! thread count.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvShape {
    pub fn pad(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.kernel[a] / 2)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel_volume()
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel_volume()
    }

    /// "Same" padding: `(n + 2p − k)/s + 1`.
    pub fn out_dims(&self, in_dims: [usize; 3]) -> Result<[usize; 3]> {
        let p = self.pad();
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 || in_dims[a] + 2 * p[a] < self.kernel[a] {
                return Err(Error::Shape(format!("conv {self:?} cannot consume {in_dims:?}")));
            }
            out[a] = (in_dims[a] + 2 * p[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Transposed convolution with kernel equal to stride: `n·s`.
    pub fn transposed_out_dims(&self, in_dims: [usize; 3]) -> Result<[usize; 3]> {
        if self.kernel != self.stride || self.stride.contains(&0) {
            return Err(Error::Shape(format!("transposed conv needs kernel == stride, got {self:?}")));
        }
        Ok(std::array::from_fn(|a| in_dims[a] * self.stride[a]))
    }

    fn w_offset(&self, o: usize, i: usize) -> usize {
        (o * self.in_ch + i) * self.kernel_volume()
    }
}

/// Range of output indices `o` with `o·s + k − p` inside `0..n_in`.
fn valid(n_in: usize, n_out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n_in + p > k { ((n_in - 1 + p - k) / s + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

/// Calls `f(in_start, out_start, count)` for every output row touched by one
/// kernel tap; input x advances by `stride[0]` per output x.
fn tap_rows(
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    k: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    let (xl, xh) = valid(in_dims[0], out_dims[0], stride[0], k[0], pad[0]);
    let (yl, yh) = valid(in_dims[1], out_dims[1], stride[1], k[1], pad[1]);
    let (zl, zh) = valid(in_dims[2], out_dims[2], stride[2], k[2], pad[2]);
    if xl >= xh {
        return;
    }
    for oz in zl..zh {
        let iz = oz * stride[2] + k[2] - pad[2];
        for oy in yl..yh {
            let iy = oy * stride[1] + k[1] - pad[1];
            let in_start = in_dims[0] * (iy + in_dims[1] * iz) + xl * stride[0] + k[0] - pad[0];
            let out_start = out_dims[0] * (oy + out_dims[1] * oz) + xl;
            f(in_start, out_start, xh - xl);
        }
    }
}

#[inline]
fn axpy<F: Scalar>(dst: &mut [F], src: &[F], w: F, src_stride: usize) {
    if src_stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + w * s;
        }
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = *d + w * src[i * src_stride];
        }
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F], b_stride: usize) -> F {
    let mut acc = F::zero();
    if b_stride == 1 {
        for (&x, &y) in a.iter().zip(b) {
            acc = acc + x * y;
        }
    } else {
        for (i, &x) in a.iter().enumerate() {
            acc = acc + x * b[i * b_stride];
        }
    }
    acc
}

fn taps(kernel: [usize; 3]) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [kx, ky, kz] = kernel;
    (0..kx * ky * kz).map(move |t| (t, [t % kx, (t / kx) % ky, t / (kx * ky)]))
}

fn check_input<F: Scalar>(x: &Tensor<F>, w: &[F], b: &[F], s: &ConvShape) -> Result<()> {
    if x.channels != s.in_ch || w.len() != s.weight_len() || b.len() != s.out_ch {
        return Err(Error::Shape(format!(
            "conv {s:?}: input has {} channels, {} weights, {} biases",
            x.channels,
            w.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn conv3d<F: Scalar>(x: &Tensor<F>, w: &[F], b: &[F], s: &ConvShape) -> Result<Tensor<F>> {
    check_input(x, w, b, s)?;
    let out_dims = s.out_dims(x.dims)?;
    let mut out = Tensor::zeros(s.out_ch, out_dims);
    let nv = out.voxels();
    let pad = s.pad();
    par::for_each_chunk_mut(&mut out.data, nv, |o, dst| {
        dst.fill(b[o]);
        for i in 0..s.in_ch {
            let src = x.channel(i);
            let wo = s.w_offset(o, i);
            for (t, k) in taps(s.kernel) {
                let wv = w[wo + t];
                tap_rows(x.dims, out_dims, s.stride, pad, k, |is, os, n| {
                    axpy(&mut dst[os..os + n], &src[is..], wv, s.stride[0]);
                });
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

pub fn conv3d_backward<F: Scalar>(x: &Tensor<F>, w: &[F], s: &ConvShape, g: &Tensor<F>) -> Result<ConvGrads<F>> {
    let out_dims = s.out_dims(x.dims)?;
    if g.dims != out_dims || g.channels != s.out_ch {
        return Err(Error::Shape("conv gradient shape mismatch".into()));
    }
    let pad = s.pad();
    let mut gx = Tensor::zeros(s.in_ch, x.dims);
    let nv = gx.voxels();
    par::for_each_chunk_mut(&mut gx.data, nv, |i, dst| {
        for o in 0..s.out_ch {
            let go = g.channel(o);
            let wo = s.w_offset(o, i);
            for (t, k) in taps(s.kernel) {
                let wv = w[wo + t];
                tap_rows(x.dims, out_dims, s.stride, pad, k, |is, os, n| {
                    if s.stride[0] == 1 {
                        axpy(&mut dst[is..is + n], &go[os..os + n], wv, 1);
                    } else {
                        for j in 0..n {
                            dst[is + j * s.stride[0]] = dst[is + j * s.stride[0]] + wv * go[os + j];
                        }
                    }
                });
            }
        }
    });
    let per_out = s.in_ch * s.kernel_volume();
    let gw_parts = par::map_range(s.out_ch, |o| {
        let go = g.channel(o);
        let mut part = vec![F::zero(); per_out];
        for i in 0..s.in_ch {
            let src = x.channel(i);
            for (t, k) in taps(s.kernel) {
                let mut acc = F::zero();
                tap_rows(x.dims, out_dims, s.stride, pad, k, |is, os, n| {
                    acc = acc + dot(&go[os..os + n], &src[is..], s.stride[0]);
                });
                part[i * s.kernel_volume() + t] = acc;
            }
        }
        part
    });
    let bias = (0..s.out_ch).map(|o| g.channel(o).iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: gx,
        weight: gw_parts.concat(),
        bias,
    })
}

/// Calls `f(in_row_start, out_row_start, n)` for each input row under one
/// transposed-conv tap; output x advances by `stride[0]` per input x.
fn up_rows(in_dims: [usize; 3], out_dims: [usize; 3], stride: [usize; 3], k: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    for iz in 0..in_dims[2] {
        let oz = iz * stride[2] + k[2];
        for iy in 0..in_dims[1] {
            let oy = iy * stride[1] + k[1];
            f(in_dims[0] * (iy + in_dims[1] * iz), out_dims[0] * (oy + out_dims[1] * oz) + k[0], in_dims[0]);
        }
    }
}

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
pub fn conv_transpose3d<F: Scalar>(x: &Tensor<F>, w: &[F], b: &[F], s: &ConvShape) -> Result<Tensor<F>> {
    check_input(x, w, b, s)?;
    let out_dims = s.transposed_out_dims(x.dims)?;
    let mut out = Tensor::zeros(s.out_ch, out_dims);
    let nv = out.voxels();
    par::for_each_chunk_mut(&mut out.data, nv, |o, dst| {
        dst.fill(b[o]);
        for i in 0..s.in_ch {
            let src = x.channel(i);
            let wo = s.w_offset(o, i);
            for (t, k) in taps(s.kernel) {
                let wv = w[wo + t];
                up_rows(x.dims, out_dims, s.stride, k, |is, os, n| {
                    for j in 0..n {
                        let d = os + j * s.stride[0];
                        dst[d] = dst[d] + wv * src[is + j];
                    }
                });
            }
        }
    });
    Ok(out)
}

pub fn conv_transpose3d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &[F],
    s: &ConvShape,
    g: &Tensor<F>,
) -> Result<ConvGrads<F>> {
    let out_dims = s.transposed_out_dims(x.dims)?;
    if g.dims != out_dims || g.channels != s.out_ch {
        return Err(Error::Shape("transposed conv gradient shape mismatch".into()));
    }
    let mut gx = Tensor::zeros(s.in_ch, x.dims);
    let nv = gx.voxels();
    par::for_each_chunk_mut(&mut gx.data, nv, |i, dst| {
        for o in 0..s.out_ch {
            let go = g.channel(o);
            let wo = s.w_offset(o, i);
            for (t, k) in taps(s.kernel) {
                let wv = w[wo + t];
                up_rows(x.dims, out_dims, s.stride, k, |is, os, n| {
                    axpy(&mut dst[is..is + n], &go[os..], wv, s.stride[0]);
                });
            }
        }
    });
    let per_out = s.in_ch * s.kernel_volume();
    let gw_parts = par::map_range(s.out_ch, |o| {
        let go = g.channel(o);
        let mut part = vec![F::zero(); per_out];
        for i in 0..s.in_ch {
            let src = x.channel(i);
            for (t, k) in taps(s.kernel) {
                let mut acc = F::zero();
                up_rows(x.dims, out_dims, s.stride, k, |is, os, n| {
                    acc = acc + dot(&src[is..is + n], &go[os..], s.stride[0]);
                });
                part[i * s.kernel_volume() + t] = acc;
            }
        }
        part
    });
    let bias = (0..s.out_ch).map(|o| g.channel(o).iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: gx,
        weight: gw_parts.concat(),
        bias,
    })
}

/// Saved state of an instance-norm forward pass.
pub struct NormCache<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Per-channel normalisation to zero mean and unit (population) variance,
/// followed by the affine `gamma·x̂ + beta`.
pub fn instance_norm<F: Scalar>(x: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<(Tensor<F>, NormCache<F>)> {
    if gamma.len() != x.channels || beta.len() != x.channels {
        return Err(Error::Shape("instance norm parameter count mismatch".into()));
    }
    let nv = x.voxels();
    let n = F::c(nv as f64);
    let eps = F::c(NORM_EPS);
    let inv_std = par::map_range(x.channels, |c| {
        let v = x.channel(c);
        let mean = v.iter().copied().sum::<F>() / n;
        let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() / n;
        (mean, F::one() / (var + eps).sqrt())
    });
    let mut xhat = Tensor::zeros(x.channels, x.dims);
    par::for_each_chunk_mut(&mut xhat.data, nv, |c, dst| {
        let (mean, is) = inv_std[c];
        for (d, &a) in dst.iter_mut().zip(x.channel(c)) {
            *d = (a - mean) * is;
        }
    });
    let mut y = xhat.clone();
    par::for_each_chunk_mut(&mut y.data, nv, |c, dst| {
        for d in dst.iter_mut() {
            *d = gamma[c] * *d + beta[c];
        }
    });
    Ok((
        y,
        NormCache {
            xhat,
            inv_std: inv_std.into_iter().map(|(_, s)| s).collect(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<F: Scalar>(
    g: &Tensor<F>,
    gamma: &[F],
    cache: &NormCache<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let nv = g.voxels();
    let n = F::c(nv as f64);
    let sums = par::map_range(g.channels, |c| {
        let gc = g.channel(c);
        let xh = cache.xhat.channel(c);
        let sg: F = gc.iter().copied().sum();
        let sgx: F = gc.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        (sg, sgx)
    });
    let mut gx = Tensor::zeros(g.channels, g.dims);
    par::for_each_chunk_mut(&mut gx.data, nv, |c, dst| {
        let (sg, sgx) = sums[c];
        let k = gamma[c] * cache.inv_std[c];
        let (mg, mgx) = (sg / n, sgx / n);
        for ((d, &gv), &xh) in dst.iter_mut().zip(g.channel(c)).zip(cache.xhat.channel(c)) {
            *d = k * (gv - mg - xh * mgx);
        }
    });
    let dgamma = sums.iter().map(|s| s.1).collect();
    let dbeta = sums.iter().map(|s| s.0).collect();
    (gx, dgamma, dbeta)
}

pub fn leaky_relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let slope = F::c(LEAKY_SLOPE);
    Tensor {
        channels: x.channels,
        dims: x.dims,
        data: x.data.iter().map(|&v| if v > F::zero() { v } else { v * slope }).collect(),
    }
}

/// Gradient through leaky ReLU given the op's input `x`.
pub fn leaky_relu_backward<F: Scalar>(x: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let slope = F::c(LEAKY_SLOPE);
    Tensor {
        channels: g.channels,
        dims: g.dims,
        data: x
            .data
            .iter()
            .zip(&g.data)
            .map(|(&v, &d)| if v > F::zero() { d } else { d * slope })
            .collect(),
    }
}

/// Channel concatenation `[a, b]`.
pub fn concat<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("concat of {:?} and {:?}", a.dims, b.dims)));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_data(a.channels + b.channels, a.dims, data)
}

/// Splits a concat gradient into the parts for the first `a_channels` and the rest.
pub fn concat_backward<F: Scalar>(g: &Tensor<F>, a_channels: usize) -> (Tensor<F>, Tensor<F>) {
    let cut = a_channels * g.voxels();
    (
        Tensor {
            channels: a_channels,
            dims: g.dims,
            data: g.data[..cut].to_vec(),
        },
        Tensor {
            channels: g.channels - a_channels,
            dims: g.dims,
            data: g.data[cut..].to_vec(),
        },
    )
}
