//! 3D U-Net with instance norm, leaky ReLU and deep supervision.
//!
//! Level `l` works at resolution `1/∏strides[..=l]` with `base·2^l`
//! features. Encoder blocks are conv(stride_l) → norm → lrelu → conv → norm →
//! lrelu; each decoder level upsamples with a transposed conv (kernel =
//! stride), concatenates `[upsampled, skip]` and runs a stride-1 block.
//! Supervised levels get a 1×1×1 head; outputs are ordered full resolution
//! first.
//!
//! Parameters live in one flat list, in this order:
//! `enc{l}.{conv1.weight, conv1.bias, norm1.gamma, norm1.beta, conv2.…, norm2.…}`
//! for l = 0..L, then `dec{l}.{up.weight, up.bias, conv1.…, norm1.…, conv2.…,
//! norm2.…}` for l = L−2 down to 0, then `head{l}.{weight, bias}` per
//! supervised level.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::ops::{
    concat, concat_backward, conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, instance_norm,
    instance_norm_backward, leaky_relu, leaky_relu_backward, ConvShape, NormCache,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::planner::{stride_products, PipelinePlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_features: usize,
    pub kernels: Vec<[usize; 3]>,
    pub strides: Vec<[usize; 3]>,
    /// Levels with a segmentation head, ascending; always starts with 0.
    pub ds_levels: Vec<usize>,
}

impl UNetSpec {
    /// Topology from a plan; every level except the bottleneck is supervised.
    pub fn from_plan(plan: &PipelinePlan, in_channels: usize) -> Result<Self> {
        let levels = plan.levels();
        let spec = UNetSpec {
            in_channels,
            out_channels: 2,
            base_features: plan.base_features,
            kernels: plan.kernel_schedule.clone(),
            strides: plan.stride_schedule.clone(),
            ds_levels: (0..levels.saturating_sub(1).max(1)).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn levels(&self) -> usize {
        self.kernels.len()
    }

    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    pub fn divisors(&self) -> [usize; 3] {
        stride_products(&self.strides)
    }

    /// Total downsampling factor at `level`.
    pub fn scale(&self, level: usize) -> [usize; 3] {
        stride_products(&self.strides[..=level])
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        let bad = |m: String| Err(Error::InvalidArgument(format!("network spec: {m}")));
        if l < 2 || self.strides.len() != l {
            return bad(format!("need ≥ 2 levels with one stride each, got {l} kernels and {} strides", self.strides.len()));
        }
        if self.strides[0] != [1, 1, 1] {
            return bad("level 0 must have stride 1".into());
        }
        if self.in_channels == 0 || self.out_channels < 2 || self.base_features == 0 {
            return bad("channel counts must be positive and out_channels ≥ 2".into());
        }
        if self.kernels.iter().flatten().any(|&k| k % 2 == 0) || self.strides.iter().flatten().any(|&s| s == 0) {
            return bad("kernels must be odd and strides positive".into());
        }
        if self.ds_levels.first() != Some(&0)
            || self.ds_levels.windows(2).any(|w| w[0] >= w[1])
            || self.ds_levels.iter().any(|&d| d + 1 >= l)
        {
            return bad(format!("invalid supervised levels {:?}", self.ds_levels));
        }
        Ok(())
    }

    /// Checks that an input of `dims` passes through the network.
    pub fn check_input(&self, channels: usize, dims: [usize; 3]) -> Result<()> {
        let d = self.divisors();
        if channels != self.in_channels || (0..3).any(|a| dims[a] % d[a] != 0) {
            return Err(Error::Shape(format!(
                "network expects {} channels with dims divisible by {d:?}, got {channels} × {dims:?}",
                self.in_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    shape: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    c1: ConvLayer,
    n1: NormLayer,
    c2: ConvLayer,
    n2: NormLayer,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Block>,
    up: Vec<Option<ConvLayer>>,
    dec: Vec<Option<Block>>,
    heads: Vec<(usize, ConvLayer)>,
    names: Vec<String>,
    lens: Vec<usize>,
    /// Parameter indices that are conv/transposed-conv weights, with fan-in.
    fan_in: Vec<Option<usize>>,
    /// Parameter indices that are norm gammas.
    gammas: Vec<usize>,
}

impl Layout {
    fn build(spec: &UNetSpec) -> Self {
        let mut lay = Layout {
            enc: Vec::new(),
            up: vec![None; spec.levels()],
            dec: vec![None; spec.levels()],
            heads: Vec::new(),
            names: Vec::new(),
            lens: Vec::new(),
            fan_in: Vec::new(),
            gammas: Vec::new(),
        };
        let l = spec.levels();
        for lvl in 0..l {
            let in_ch = if lvl == 0 { spec.in_channels } else { spec.features(lvl - 1) };
            let b = lay.block(&format!("enc{lvl}"), in_ch, spec.features(lvl), spec.kernels[lvl], spec.strides[lvl]);
            lay.enc.push(b);
        }
        for lvl in (0..l - 1).rev() {
            let f = spec.features(lvl);
            let s = spec.strides[lvl + 1];
            let up = lay.conv(
                &format!("dec{lvl}.up"),
                ConvShape {
                    in_ch: spec.features(lvl + 1),
                    out_ch: f,
                    kernel: s,
                    stride: s,
                },
            );
            lay.up[lvl] = Some(up);
            lay.dec[lvl] = Some(lay.block(&format!("dec{lvl}"), 2 * f, f, spec.kernels[lvl], [1, 1, 1]));
        }
        for &lvl in &spec.ds_levels {
            let h = lay.conv(
                &format!("head{lvl}"),
                ConvShape {
                    in_ch: spec.features(lvl),
                    out_ch: spec.out_channels,
                    kernel: [1, 1, 1],
                    stride: [1, 1, 1],
                },
            );
            lay.heads.push((lvl, h));
        }
        lay
    }

    fn push(&mut self, name: String, len: usize, fan_in: Option<usize>) -> usize {
        self.names.push(name);
        self.lens.push(len);
        self.fan_in.push(fan_in);
        self.names.len() - 1
    }

    fn conv(&mut self, prefix: &str, shape: ConvShape) -> ConvLayer {
        let w = self.push(format!("{prefix}.weight"), shape.weight_len(), Some(shape.fan_in()));
        let b = self.push(format!("{prefix}.bias"), shape.out_ch, None);
        ConvLayer { shape, w, b }
    }

    fn norm(&mut self, prefix: &str, ch: usize) -> NormLayer {
        let g = self.push(format!("{prefix}.gamma"), ch, None);
        self.gammas.push(g);
        let b = self.push(format!("{prefix}.beta"), ch, None);
        NormLayer { g, b }
    }

    fn block(&mut self, prefix: &str, in_ch: usize, out_ch: usize, kernel: [usize; 3], stride: [usize; 3]) -> Block {
        let c1 = self.conv(
            &format!("{prefix}.conv1"),
            ConvShape {
                in_ch,
                out_ch,
                kernel,
                stride,
            },
        );
        let n1 = self.norm(&format!("{prefix}.norm1"), out_ch);
        let c2 = self.conv(
            &format!("{prefix}.conv2"),
            ConvShape {
                in_ch: out_ch,
                out_ch,
                kernel,
                stride: [1, 1, 1],
            },
        );
        let n2 = self.norm(&format!("{prefix}.norm2"), out_ch);
        Block { c1, n1, c2, n2 }
    }
}

struct BlockCache<F> {
    input: Tensor<F>,
    n1: NormCache<F>,
    h1: Tensor<F>,
    x1: Tensor<F>,
    n2: NormCache<F>,
    h2: Tensor<F>,
}

/// Activations saved by [`UNet::forward_cached`].
pub struct ForwardCache<F> {
    enc: Vec<BlockCache<F>>,
    enc_out: Vec<Tensor<F>>,
    dec: Vec<Option<BlockCache<F>>>,
    dec_out: Vec<Option<Tensor<F>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<F> {
    pub spec: UNetSpec,
    pub params: Vec<Vec<F>>,
    layout_names: Vec<String>,
}

impl<F: Scalar> UNet<F> {
    fn layout(&self) -> Layout {
        Layout::build(&self.spec)
    }

    /// He-normal weights (sd `sqrt(2/fan_in)`), zero biases, unit gammas.
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let lay = Layout::build(&spec);
        let mut rng = Pcg64::seed_from_u64(seed);
        let params = lay
            .lens
            .iter()
            .enumerate()
            .map(|(i, &n)| match lay.fan_in[i] {
                Some(fan) => {
                    let d = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive sd");
                    (0..n).map(|_| F::c(d.sample(&mut rng))).collect()
                }
                None if lay.gammas.contains(&i) => vec![F::one(); n],
                None => vec![F::zero(); n],
            })
            .collect();
        Ok(UNet {
            spec,
            params,
            layout_names: lay.names,
        })
    }

    /// All parameters zero (gammas included).
    pub fn zeros(spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let lay = Layout::build(&spec);
        Ok(UNet {
            params: lay.lens.iter().map(|&n| vec![F::zero(); n]).collect(),
            spec,
            layout_names: lay.names,
        })
    }

    pub fn from_params(spec: UNetSpec, params: Vec<Vec<F>>) -> Result<Self> {
        spec.validate()?;
        let lay = Layout::build(&spec);
        if params.len() != lay.lens.len() || params.iter().zip(&lay.lens).any(|(p, &n)| p.len() != n) {
            return Err(Error::Shape("parameter arrays do not match the network spec".into()));
        }
        Ok(UNet {
            spec,
            params,
            layout_names: lay.names,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> UNet<G> {
        UNet {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| G::c(v.f64())).collect())
                .collect(),
            layout_names: self.layout_names.clone(),
        }
    }

    fn conv(&self, c: &ConvLayer, x: &Tensor<F>) -> Result<Tensor<F>> {
        conv3d(x, &self.params[c.w], &self.params[c.b], &c.shape)
    }

    fn block(&self, b: &Block, x: Tensor<F>, keep: bool) -> Result<(Tensor<F>, Option<BlockCache<F>>)> {
        let a1 = self.conv(&b.c1, &x)?;
        let (h1, n1) = instance_norm(&a1, &self.params[b.n1.g], &self.params[b.n1.b])?;
        let x1 = leaky_relu(&h1);
        let a2 = self.conv(&b.c2, &x1)?;
        let (h2, n2) = instance_norm(&a2, &self.params[b.n2.g], &self.params[b.n2.b])?;
        let out = leaky_relu(&h2);
        let cache = keep.then(|| BlockCache {
            input: x,
            n1,
            h1,
            x1,
            n2,
            h2,
        });
        Ok((out, cache))
    }

    fn run(&self, x: &Tensor<F>, keep: bool) -> Result<(Vec<Tensor<F>>, Option<ForwardCache<F>>)> {
        self.spec.check_input(x.channels, x.dims)?;
        let lay = self.layout();
        let l = self.spec.levels();
        let mut enc_cache = Vec::new();
        let mut enc_out: Vec<Tensor<F>> = Vec::with_capacity(l);
        for lvl in 0..l {
            let input = if lvl == 0 { x.clone() } else { enc_out[lvl - 1].clone() };
            let (o, c) = self.block(&lay.enc[lvl], input, keep)?;
            enc_out.push(o);
            if let Some(c) = c {
                enc_cache.push(c);
            }
        }
        let mut dec_cache: Vec<Option<BlockCache<F>>> = (0..l).map(|_| None).collect();
        let mut dec_out: Vec<Option<Tensor<F>>> = vec![None; l];
        let mut cur = enc_out[l - 1].clone();
        for lvl in (0..l - 1).rev() {
            let up = lay.up[lvl].expect("decoder level");
            let u = conv_transpose3d(&cur, &self.params[up.w], &self.params[up.b], &up.shape)?;
            let c = concat(&u, &enc_out[lvl])?;
            let (o, bc) = self.block(&lay.dec[lvl].expect("decoder level"), c, keep)?;
            dec_cache[lvl] = bc;
            dec_out[lvl] = Some(o.clone());
            cur = o;
        }
        let mut outputs = Vec::with_capacity(lay.heads.len());
        for (lvl, h) in &lay.heads {
            outputs.push(self.conv(h, dec_out[*lvl].as_ref().expect("supervised decoder level"))?);
        }
        let cache = keep.then(|| ForwardCache {
            enc: enc_cache,
            enc_out,
            dec: dec_cache,
            dec_out,
        });
        Ok((outputs, cache))
    }

    /// Logits for every supervised level, full resolution first.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<(Vec<Tensor<F>>, ForwardCache<F>)> {
        let (o, c) = self.run(x, true)?;
        Ok((o, c.expect("cache requested")))
    }

    fn block_backward(
        &self,
        b: &Block,
        c: &BlockCache<F>,
        g: &Tensor<F>,
        grads: &mut [Vec<F>],
    ) -> Result<Tensor<F>> {
        let g = leaky_relu_backward(&c.h2, g);
        let (g, dg, db) = instance_norm_backward(&g, &self.params[b.n2.g], &c.n2);
        add(&mut grads[b.n2.g], &dg);
        add(&mut grads[b.n2.b], &db);
        let cg = conv3d_backward(&c.x1, &self.params[b.c2.w], &b.c2.shape, &g)?;
        add(&mut grads[b.c2.w], &cg.weight);
        add(&mut grads[b.c2.b], &cg.bias);
        let g = leaky_relu_backward(&c.h1, &cg.input);
        let (g, dg, db) = instance_norm_backward(&g, &self.params[b.n1.g], &c.n1);
        add(&mut grads[b.n1.g], &dg);
        add(&mut grads[b.n1.b], &db);
        let cg = conv3d_backward(&c.input, &self.params[b.c1.w], &b.c1.shape, &g)?;
        add(&mut grads[b.c1.w], &cg.weight);
        add(&mut grads[b.c1.b], &cg.bias);
        Ok(cg.input)
    }

    /// Parameter gradients (aligned with `params`) and the input gradient,
    /// given gradients of the loss with respect to each output.
    pub fn backward(&self, cache: &ForwardCache<F>, out_grads: &[Tensor<F>]) -> Result<(Vec<Vec<F>>, Tensor<F>)> {
        let lay = self.layout();
        if out_grads.len() != lay.heads.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for {} heads",
                out_grads.len(),
                lay.heads.len()
            )));
        }
        let l = self.spec.levels();
        let mut grads: Vec<Vec<F>> = self.params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        let mut g_dec: Vec<Option<Tensor<F>>> = vec![None; l];
        let mut g_enc: Vec<Option<Tensor<F>>> = vec![None; l];
        for ((lvl, h), g) in lay.heads.iter().zip(out_grads) {
            let input = cache.dec_out[*lvl].as_ref().expect("supervised decoder level");
            let cg = conv3d_backward(input, &self.params[h.w], &h.shape, g)?;
            add(&mut grads[h.w], &cg.weight);
            add(&mut grads[h.b], &cg.bias);
            accumulate(&mut g_dec[*lvl], cg.input);
        }
        for lvl in 0..l - 1 {
            let Some(g) = g_dec[lvl].take() else { continue };
            let block = lay.dec[lvl].expect("decoder level");
            let bc = cache.dec[lvl].as_ref().expect("decoder cache");
            let gc = self.block_backward(&block, bc, &g, &mut grads)?;
            let up = lay.up[lvl].expect("decoder level");
            let (gu, gskip) = concat_backward(&gc, up.shape.out_ch);
            accumulate(&mut g_enc[lvl], gskip);
            let below = if lvl + 1 == l - 1 {
                &cache.enc_out[l - 1]
            } else {
                cache.dec_out[lvl + 1].as_ref().expect("decoder output")
            };
            let tg = conv_transpose3d_backward(below, &self.params[up.w], &up.shape, &gu)?;
            add(&mut grads[up.w], &tg.weight);
            add(&mut grads[up.b], &tg.bias);
            if lvl + 1 == l - 1 {
                accumulate(&mut g_enc[l - 1], tg.input);
            } else {
                accumulate(&mut g_dec[lvl + 1], tg.input);
            }
        }
        let mut g_in = None;
        for lvl in (0..l).rev() {
            let Some(g) = g_enc[lvl].take() else { continue };
            let gi = self.block_backward(&lay.enc[lvl], &cache.enc[lvl], &g, &mut grads)?;
            if lvl == 0 {
                g_in = Some(gi);
            } else {
                accumulate(&mut g_enc[lvl - 1], gi);
            }
        }
        let g_in = g_in.unwrap_or_else(|| Tensor::zeros(self.spec.in_channels, cache.enc[0].input.dims));
        Ok((grads, g_in))
    }
}

fn add<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, t: Tensor<F>) {
    match slot {
        Some(s) => add(&mut s.data, &t.data),
        None => *slot = Some(t),
    }
}
