//! Soft Dice + cross-entropy with deep supervision.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;

/// Channel-wise softmax at every voxel.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let nv = logits.voxels();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.dims);
    for v in 0..nv {
        let m = (0..c).map(|k| logits.data[k * nv + v]).fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for k in 0..c {
            let e = (logits.data[k * nv + v] - m).exp();
            out.data[k * nv + v] = e;
            z = z + e;
        }
        for k in 0..c {
            out.data[k * nv + v] = out.data[k * nv + v] / z;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelLoss {
    pub dice: f64,
    pub ce: f64,
}

impl LevelLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

/// Mean voxel cross-entropy against integer labels and its logit gradient.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, target: &[u8]) -> Result<(F, Tensor<F>)> {
    let nv = check(logits, target)?;
    let p = softmax(logits);
    let n = F::c(nv as f64);
    let mut loss = F::zero();
    let mut g = p.clone();
    for (v, &t) in target.iter().enumerate() {
        let t = t as usize;
        let c = logits.channels;
        let m = (0..c).map(|k| logits.data[k * nv + v]).fold(F::neg_infinity(), F::max);
        let lse = m + (0..c)
            .map(|k| (logits.data[k * nv + v] - m).exp())
            .sum::<F>()
            .ln();
        loss = loss + lse - logits.data[t * nv + v];
        g.data[t * nv + v] = g.data[t * nv + v] - F::one();
    }
    for x in g.data.iter_mut() {
        *x = *x / n;
    }
    Ok((loss / n, g))
}

/// Soft Dice loss on channel 1: `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn soft_dice<F: Scalar>(logits: &Tensor<F>, target: &[u8]) -> Result<(F, Tensor<F>)> {
    let nv = check(logits, target)?;
    let p = softmax(logits);
    let p1 = p.channel(1);
    let eps = F::c(DICE_EPS);
    let two = F::c(2.0);
    let mut inter = F::zero();
    let mut psum = F::zero();
    let mut gsum = F::zero();
    for (&pv, &t) in p1.iter().zip(target) {
        let gv = F::c(t as f64);
        inter = inter + pv * gv;
        psum = psum + pv;
        gsum = gsum + gv;
    }
    let num = two * inter + eps;
    let den = psum + gsum + eps;
    let loss = F::one() - num / den;
    let mut g = Tensor::zeros(logits.channels, logits.dims);
    for v in 0..nv {
        let gv = F::c(target[v] as f64);
        let a = -(two * gv * den - num) / (den * den);
        let p1v = p.data[nv + v];
        for k in 0..logits.channels {
            let delta = if k == 1 { F::one() } else { F::zero() };
            g.data[k * nv + v] = a * p1v * (delta - p.data[k * nv + v]);
        }
    }
    Ok((loss, g))
}

fn check<F: Scalar>(logits: &Tensor<F>, target: &[u8]) -> Result<usize> {
    let nv = logits.voxels();
    if target.len() != nv || logits.channels < 2 {
        return Err(Error::Shape(format!(
            "logits {}×{:?} vs target of {} voxels",
            logits.channels,
            logits.dims,
            target.len()
        )));
    }
    if target.iter().any(|&t| t as usize >= logits.channels) {
        return Err(Error::InvalidMask("target label exceeds channel count".into()));
    }
    Ok(nv)
}

/// Dice + CE for one output and the gradient of their sum.
pub fn dice_ce<F: Scalar>(logits: &Tensor<F>, target: &[u8]) -> Result<(LevelLoss, Tensor<F>)> {
    let (d, mut g) = soft_dice(logits, target)?;
    let (c, gc) = cross_entropy(logits, target)?;
    for (a, b) in g.data.iter_mut().zip(&gc.data) {
        *a = *a + *b;
    }
    Ok((LevelLoss { dice: d.f64(), ce: c.f64() }, g))
}

/// `2^−l` weights for the supervised levels, normalised to sum to one.
pub fn ds_weights(levels: &[usize]) -> Vec<f64> {
    let raw: Vec<f64> = levels.iter().map(|&l| 0.5f64.powi(l as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

/// Nearest-neighbour downsampling by integer factors, keeping index `i·f`.
pub fn downsample_target(target: &[u8], dims: [usize; 3], factor: [usize; 3]) -> (Vec<u8>, [usize; 3]) {
    let out: [usize; 3] = std::array::from_fn(|a| dims[a] / factor[a]);
    let mut v = Vec::with_capacity(out[0] * out[1] * out[2]);
    for z in 0..out[2] {
        for y in 0..out[1] {
            for x in 0..out[0] {
                v.push(target[x * factor[0] + dims[0] * (y * factor[1] + dims[1] * z * factor[2])]);
            }
        }
    }
    (v, out)
}

/// Weighted deep-supervision loss over `(output, target)` pairs.
/// Returns the weighted total, per-level terms and per-output gradients.
pub fn deep_supervision_loss<F: Scalar>(
    outputs: &[Tensor<F>],
    targets: &[Vec<u8>],
    weights: &[f64],
) -> Result<(f64, Vec<LevelLoss>, Vec<Tensor<F>>)> {
    if outputs.len() != targets.len() || outputs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} outputs, {} targets, {} weights",
            outputs.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    let mut levels = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    for ((o, t), &w) in outputs.iter().zip(targets).zip(weights) {
        let (l, mut g) = dice_ce(o, t)?;
        total += w * l.total();
        let wf = F::c(w);
        for x in g.data.iter_mut() {
            *x = *x * wf;
        }
        levels.push(l);
        grads.push(g);
    }
    Ok((total, levels, grads))
}
