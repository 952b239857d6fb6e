//! Finite-difference gradient checks for every differentiable op.
//!
//! Each check builds a scalar `L = Σ r ⊙ op(x)` with a random projection `r`,
//! compares the analytic gradient from the op's backward pass against
//! central differences in f64, and reports the worst relative error
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::loss::{cross_entropy, deep_supervision_loss, dice_ce, soft_dice};
use super::ops::{
    concat, concat_backward, conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, instance_norm,
    instance_norm_backward, leaky_relu, leaky_relu_backward, ConvShape,
};
use super::tensor::Tensor;
use super::unet::{UNet, UNetSpec};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + STEP;
            let up = f(&p);
            p[i] = x[i] - STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

fn project(t: &Tensor<f64>, r: &[f64]) -> f64 {
    t.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Values in ±[0.05, 1], kept away from the leaky-ReLU kink.
fn away_from_zero(rng: &mut Pcg64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn randn(rng: &mut Pcg64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut Pcg64, channels: usize, dims: [usize; 3]) -> Tensor<f64> {
    let n = channels * dims.iter().product::<usize>();
    Tensor::from_data(channels, dims, randn(rng, n)).expect("sized")
}

fn random_dims(rng: &mut Pcg64, max: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| rng.random_range(1..=max[a]))
}

fn check_conv(rng: &mut Pcg64, name: &str, kernel: [usize; 3], stride: [usize; 3]) -> CheckResult {
    let s = ConvShape {
        in_ch: rng.random_range(1..=2),
        out_ch: rng.random_range(1..=2),
        kernel,
        stride,
    };
    let dims = random_dims(rng, [6, 6, 4]).map(|d| d.max(2));
    let x = random_tensor(rng, s.in_ch, dims);
    let w = randn(rng, s.weight_len());
    let b = randn(rng, s.out_ch);
    let y = conv3d(&x, &w, &b, &s).expect("conv");
    let r = randn(rng, y.data.len());
    let g = Tensor::from_data(y.channels, y.dims, r.clone()).expect("sized");
    let an = conv3d_backward(&x, &w, &s, &g).expect("backward");
    let fx = |v: &[f64]| {
        let t = Tensor::from_data(x.channels, x.dims, v.to_vec()).expect("sized");
        project(&conv3d(&t, &w, &b, &s).expect("conv"), &r)
    };
    let fw = |v: &[f64]| project(&conv3d(&x, v, &b, &s).expect("conv"), &r);
    let fb = |v: &[f64]| project(&conv3d(&x, &w, v, &s).expect("conv"), &r);
    let e = worst(&an.input.data, &numeric_grad(fx, &x.data))
        .max(worst(&an.weight, &numeric_grad(fw, &w)))
        .max(worst(&an.bias, &numeric_grad(fb, &b)));
    CheckResult {
        op: name.into(),
        max_rel_error: e,
        checked: x.data.len() + w.len() + b.len(),
    }
}

fn check_transposed(rng: &mut Pcg64, name: &str, stride: [usize; 3]) -> CheckResult {
    let s = ConvShape {
        in_ch: rng.random_range(1..=2),
        out_ch: rng.random_range(1..=2),
        kernel: stride,
        stride,
    };
    let dims: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=[6, 6, 4][a] / stride[a]));
    let x = random_tensor(rng, s.in_ch, dims);
    let w = randn(rng, s.weight_len());
    let b = randn(rng, s.out_ch);
    let y = conv_transpose3d(&x, &w, &b, &s).expect("tconv");
    let r = randn(rng, y.data.len());
    let g = Tensor::from_data(y.channels, y.dims, r.clone()).expect("sized");
    let an = conv_transpose3d_backward(&x, &w, &s, &g).expect("backward");
    let fx = |v: &[f64]| {
        let t = Tensor::from_data(x.channels, x.dims, v.to_vec()).expect("sized");
        project(&conv_transpose3d(&t, &w, &b, &s).expect("tconv"), &r)
    };
    let fw = |v: &[f64]| project(&conv_transpose3d(&x, v, &b, &s).expect("tconv"), &r);
    let fb = |v: &[f64]| project(&conv_transpose3d(&x, &w, v, &s).expect("tconv"), &r);
    let e = worst(&an.input.data, &numeric_grad(fx, &x.data))
        .max(worst(&an.weight, &numeric_grad(fw, &w)))
        .max(worst(&an.bias, &numeric_grad(fb, &b)));
    CheckResult {
        op: name.into(),
        max_rel_error: e,
        checked: x.data.len() + w.len() + b.len(),
    }
}

fn check_norm(rng: &mut Pcg64) -> CheckResult {
    let c = rng.random_range(1..=2);
    let dims = random_dims(rng, [6, 6, 4]).map(|d| d.max(2));
    let x = random_tensor(rng, c, dims);
    let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta = randn(rng, c);
    let (y, cache) = instance_norm(&x, &gamma, &beta).expect("norm");
    let r = randn(rng, y.data.len());
    let g = Tensor::from_data(c, dims, r.clone()).expect("sized");
    let (gx, gg, gb) = instance_norm_backward(&g, &gamma, &cache);
    let fx = |v: &[f64]| {
        let t = Tensor::from_data(c, dims, v.to_vec()).expect("sized");
        project(&instance_norm(&t, &gamma, &beta).expect("norm").0, &r)
    };
    let fg = |v: &[f64]| project(&instance_norm(&x, v, &beta).expect("norm").0, &r);
    let fb = |v: &[f64]| project(&instance_norm(&x, &gamma, v).expect("norm").0, &r);
    let e = worst(&gx.data, &numeric_grad(fx, &x.data))
        .max(worst(&gg, &numeric_grad(fg, &gamma)))
        .max(worst(&gb, &numeric_grad(fb, &beta)));
    CheckResult {
        op: "instance_norm".into(),
        max_rel_error: e,
        checked: x.data.len() + 2 * c,
    }
}

fn check_lrelu(rng: &mut Pcg64) -> CheckResult {
    let dims = random_dims(rng, [6, 6, 4]);
    let c = rng.random_range(1..=2);
    let x = Tensor::from_data(c, dims, away_from_zero(rng, c * dims.iter().product::<usize>())).expect("sized");
    let r = randn(rng, x.data.len());
    let g = Tensor::from_data(c, dims, r.clone()).expect("sized");
    let an = leaky_relu_backward(&x, &g);
    let f = |v: &[f64]| project(&leaky_relu(&Tensor::from_data(c, dims, v.to_vec()).expect("sized")), &r);
    CheckResult {
        op: "leaky_relu".into(),
        max_rel_error: worst(&an.data, &numeric_grad(f, &x.data)),
        checked: x.data.len(),
    }
}

fn check_concat(rng: &mut Pcg64) -> CheckResult {
    let dims = random_dims(rng, [6, 6, 4]);
    let (ca, cb) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let a = random_tensor(rng, ca, dims);
    let b = random_tensor(rng, cb, dims);
    let r = randn(rng, a.data.len() + b.data.len());
    let g = Tensor::from_data(ca + cb, dims, r.clone()).expect("sized");
    let (ga, gb) = concat_backward(&g, ca);
    let fa = |v: &[f64]| {
        let t = Tensor::from_data(ca, dims, v.to_vec()).expect("sized");
        project(&concat(&t, &b).expect("concat"), &r)
    };
    let fb = |v: &[f64]| {
        let t = Tensor::from_data(cb, dims, v.to_vec()).expect("sized");
        project(&concat(&a, &t).expect("concat"), &r)
    };
    CheckResult {
        op: "concat".into(),
        max_rel_error: worst(&ga.data, &numeric_grad(fa, &a.data)).max(worst(&gb.data, &numeric_grad(fb, &b.data))),
        checked: a.data.len() + b.data.len(),
    }
}

type LossFn = fn(&Tensor<f64>, &[u8]) -> (f64, Tensor<f64>);

fn check_loss(rng: &mut Pcg64, name: &str, f: LossFn) -> CheckResult {
    let dims = random_dims(rng, [6, 6, 4]);
    let logits = random_tensor(rng, 2, dims);
    let mut target: Vec<u8> = (0..logits.voxels()).map(|_| rng.random_bool(0.4) as u8).collect();
    target[0] = 1;
    let (_, g) = f(&logits, &target);
    let num = numeric_grad(
        |v| f(&Tensor::from_data(2, dims, v.to_vec()).expect("sized"), &target).0,
        &logits.data,
    );
    CheckResult {
        op: name.into(),
        max_rel_error: worst(&g.data, &num),
        checked: logits.data.len(),
    }
}

fn check_deep_supervision(rng: &mut Pcg64) -> CheckResult {
    let full = random_tensor(rng, 2, [4, 4, 2]);
    let aux = random_tensor(rng, 2, [2, 2, 2]);
    let t0: Vec<u8> = (0..32).map(|i| (i % 3 == 0) as u8).collect();
    let t1: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
    let w = [0.7, 0.3];
    let targets = vec![t0, t1];
    let (_, _, g) = deep_supervision_loss(&[full.clone(), aux.clone()], &targets, &w).expect("loss");
    let f0 = |v: &[f64]| {
        let t = Tensor::from_data(2, full.dims, v.to_vec()).expect("sized");
        deep_supervision_loss(&[t, aux.clone()], &targets, &w).expect("loss").0
    };
    let f1 = |v: &[f64]| {
        let t = Tensor::from_data(2, aux.dims, v.to_vec()).expect("sized");
        deep_supervision_loss(&[full.clone(), t], &targets, &w).expect("loss").0
    };
    CheckResult {
        op: "deep_supervision".into(),
        max_rel_error: worst(&g[0].data, &numeric_grad(f0, &full.data)).max(worst(&g[1].data, &numeric_grad(f1, &aux.data))),
        checked: full.data.len() + aux.data.len(),
    }
}

/// End-to-end check through a small U-Net: the input gradient plus every
/// `stride`-th element of each parameter array.
pub fn check_unet(seed: u64, stride: usize) -> CheckResult {
    let mut rng = Pcg64::seed_from_u64(seed);
    let spec = UNetSpec {
        in_channels: 2,
        out_channels: 2,
        base_features: 2,
        kernels: vec![[3, 3, 1], [3, 3, 3]],
        strides: vec![[1, 1, 1], [2, 2, 2]],
        ds_levels: vec![0],
    };
    let mut net = UNet::<f64>::new(spec, seed).expect("spec");
    for p in net.params.iter_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = random_tensor(&mut rng, 2, [4, 4, 2]);
    let target: Vec<u8> = (0..32).map(|i| (i % 5 < 2) as u8).collect();
    let loss_of = |net: &UNet<f64>, x: &Tensor<f64>| {
        let out = net.forward(x).expect("forward");
        deep_supervision_loss(&out, std::slice::from_ref(&target), &[1.0]).expect("loss").0
    };
    let (out, cache) = net.forward_cached(&x).expect("forward");
    let (_, _, og) = deep_supervision_loss(&out, std::slice::from_ref(&target), &[1.0]).expect("loss");
    let (grads, gin) = net.backward(&cache, &og).expect("backward");
    let mut e = worst(
        &gin.data,
        &numeric_grad(|v| loss_of(&net, &Tensor::from_data(2, x.dims, v.to_vec()).expect("sized")), &x.data),
    );
    let mut checked = x.data.len();
    let mut probe = net.clone();
    for (pi, p) in net.params.iter().enumerate() {
        for i in (0..p.len()).step_by(stride.max(1)) {
            probe.params[pi][i] = p[i] + STEP;
            let up = loss_of(&probe, &x);
            probe.params[pi][i] = p[i] - STEP;
            let down = loss_of(&probe, &x);
            probe.params[pi][i] = p[i];
            let nu = (up - down) / (2.0 * STEP);
            e = e.max(rel_error(grads[pi][i], nu));
            checked += 1;
        }
    }
    CheckResult {
        op: "unet".into(),
        max_rel_error: e,
        checked,
    }
}

/// Runs every per-op check `trials` times with random shapes up to 2×6×6×4.
pub fn check_all_ops(seed: u64, trials: usize) -> Vec<CheckResult> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut out: Vec<CheckResult> = Vec::new();
    let mut record = |r: CheckResult| match out.iter_mut().find(|o| o.op == r.op) {
        Some(o) => {
            o.max_rel_error = o.max_rel_error.max(r.max_rel_error);
            o.checked += r.checked;
        }
        None => out.push(r),
    };
    for _ in 0..trials {
        record(check_conv(&mut rng, "conv3d", [3, 3, 3], [1, 1, 1]));
        record(check_conv(&mut rng, "conv3d_pseudo3d", [3, 3, 1], [1, 1, 1]));
        record(check_conv(&mut rng, "conv3d_strided", [3, 3, 3], [2, 2, 2]));
        record(check_conv(&mut rng, "conv3d_strided_inplane", [3, 3, 1], [2, 2, 1]));
        record(check_conv(&mut rng, "conv3d_1x1x1", [1, 1, 1], [1, 1, 1]));
        record(check_transposed(&mut rng, "conv_transpose3d", [2, 2, 2]));
        record(check_transposed(&mut rng, "conv_transpose3d_inplane", [2, 2, 1]));
        record(check_norm(&mut rng));
        record(check_lrelu(&mut rng));
        record(check_concat(&mut rng));
        record(check_loss(&mut rng, "softmax_cross_entropy", |l, t| cross_entropy(l, t).expect("ce")));
        record(check_loss(&mut rng, "soft_dice", |l, t| soft_dice(l, t).expect("dice")));
        record(check_loss(&mut rng, "dice_ce", |l, t| {
            let (v, g) = dice_ce(l, t).expect("loss");
            (v.total(), g)
        }));
        record(check_deep_supervision(&mut rng));
    }
    out
}
