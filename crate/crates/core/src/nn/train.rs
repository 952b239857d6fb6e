//! Training loop for one fold.
//!
//! One epoch is one shuffled pass over the fold's training cases with batch
//! size 1. Gradients are averaged over `grad_accum` samples (and flushed at
//! the end of each epoch), clipped to a global norm of `grad_clip`, and
//! applied with Nesterov SGD under the poly schedule. Interactive samples get
//! freshly synthesised clicks every epoch, jittered in-plane by up to
//! `click_jitter` voxels while staying inside the mask.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentParams};
use super::loss::{deep_supervision_loss, downsample_target, ds_weights};
use super::optim::{clip_grad_norm, lr_poly, Nesterov};
use super::tensor::Tensor;
use super::unet::{UNet, UNetSpec};
use crate::error::{Error, Result};
use crate::interactions::{jitter_points, synth_extreme_points, InwardRule};
use crate::planner::PipelinePlan;
use crate::preprocess::{crop_pad_mask, interactive_input, preprocess_automatic, resample_mask, resample_mask_to_dims, resample_volume};
use crate::volume::{Mask3D, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub grad_accum: usize,
    pub seed: u64,
    pub augment: AugmentParams,
    /// Per supervised level; `None` uses normalised `2^−l`.
    pub ds_weights: Option<Vec<f64>>,
    pub click_jitter: usize,
    /// Global gradient-norm bound (0 disables clipping).
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr0: 0.01,
            poly_exponent: 0.9,
            momentum: 0.99,
            grad_accum: 4,
            seed: 0,
            augment: AugmentParams::default(),
            ds_weights: None,
            click_jitter: 2,
            grad_clip: 12.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidArgument("epochs and grad_accum must be ≥ 1".into()));
        }
        if !(self.lr0 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "need lr0 ≥ 0 and 0 ≤ momentum < 1, got {} and {}",
                self.lr0, self.momentum
            )));
        }
        Ok(())
    }
}

/// One training case, ready to produce network inputs.
#[derive(Debug, Clone)]
pub enum TrainSample {
    /// Image and mask on the plan's grid; ROI and EGD are rebuilt per draw.
    Interactive { image: Volume3D, mask: Mask3D },
    /// Whole-volume image-only input and its target.
    Fixed { input: Tensor<f32>, target: Vec<u8> },
}

impl TrainSample {
    pub fn interactive(image: &Volume3D, mask: &Mask3D, plan: &PipelinePlan) -> Result<Self> {
        if !image.geometry().same_grid(mask.geometry()) {
            return Err(Error::Geometry("image and mask grids differ".into()));
        }
        let mask = resample_mask(mask, plan.target_spacing)?;
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(TrainSample::Interactive {
            image: resample_volume(image, plan.target_spacing)?,
            mask,
        })
    }

    pub fn automatic(image: &Volume3D, mask: &Mask3D, plan: &PipelinePlan, budget: [usize; 3]) -> Result<Self> {
        if !image.geometry().same_grid(mask.geometry()) {
            return Err(Error::Geometry("image and mask grids differ".into()));
        }
        let pre = preprocess_automatic(image, plan, budget)?;
        let m = resample_mask_to_dims(mask, pre.inverse.resampled.dims, false)?;
        let target = crop_pad_mask(&m, &pre.roi)?.into_labels();
        Ok(TrainSample::Fixed {
            input: Tensor::from_channels(pre.image.dims(), &pre.channels())?,
            target,
        })
    }

    /// Network input and target for one training step.
    pub fn draw(&self, plan: &PipelinePlan, jitter: usize, rng: &mut Pcg64) -> Result<(Tensor<f32>, Vec<u8>)> {
        match self {
            TrainSample::Fixed { input, target } => Ok((input.clone(), target.clone())),
            TrainSample::Interactive { image, mask } => {
                let mut clicks = synth_extreme_points(mask)?;
                if jitter > 0 {
                    clicks = jitter_points(&clicks, mask, jitter, &InwardRule::default(), rng)?;
                }
                let (roi_image, egd, roi, _) = interactive_input(image, &clicks, plan)?;
                let target = crop_pad_mask(mask, &roi)?.into_labels();
                let input = Tensor::from_channels(roi_image.dims(), &[roi_image.data().to_vec(), egd.values_f32()])?;
                Ok((input, target))
            }
        }
    }
}

/// Validation index sets for `k` folds over `n` cases, deterministic in `seed`.
pub fn fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} cases into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Pcg64::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, &c) in idx.iter().enumerate() {
        folds[i % k].push(c);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Indices of `0..n` not in `held_out`.
pub fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !held_out.contains(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted deep-supervision loss.
    pub loss: f64,
    /// Mean full-resolution Dice and CE terms.
    pub dice: f64,
    pub ce: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: UNet<f32>,
    pub trace: Vec<EpochStats>,
    pub seed: u64,
}

/// Moving average over `window` epochs (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn apply(model: &mut UNet<f32>, opt: &mut Nesterov<f32>, acc: &mut [Vec<f32>], count: usize, lr: f64, clip: f64) {
    let inv = 1.0 / count as f32;
    acc.iter_mut().flatten().for_each(|g| *g *= inv);
    if clip > 0.0 {
        clip_grad_norm(acc, clip);
    }
    opt.step(&mut model.params, acc, lr);
    acc.iter_mut().flatten().for_each(|g| *g = 0.0);
}

/// Trains one network on `samples` from a seeded He initialisation.
pub fn train_model(samples: &[&TrainSample], spec: &UNetSpec, plan: &PipelinePlan, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_model_with(samples, spec, plan, cfg, |_| {})
}

/// [`train_model`] with a per-epoch callback.
pub fn train_model_with(
    samples: &[&TrainSample],
    spec: &UNetSpec,
    plan: &PipelinePlan,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let weights = match &cfg.ds_weights {
        Some(w) if w.len() == spec.ds_levels.len() => w.clone(),
        Some(w) => {
            return Err(Error::InvalidArgument(format!(
                "{} deep-supervision weights for {} supervised levels",
                w.len(),
                spec.ds_levels.len()
            )))
        }
        None => ds_weights(&spec.ds_levels),
    };
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut model = UNet::<f32>::new(spec.clone(), cfg.seed)?;
    let mut opt = Nesterov::new(cfg.momentum, &model.params);
    let mut acc: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut count = 0;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_poly(epoch, cfg.epochs, cfg.lr0, cfg.poly_exponent);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        for &i in &order {
            let (x, t) = samples[i].draw(plan, cfg.click_jitter, &mut rng)?;
            let (x, t) = augment(&x, &t, &mut rng, &cfg.augment);
            let targets: Vec<Vec<u8>> = spec
                .ds_levels
                .iter()
                .map(|&l| downsample_target(&t, x.dims, spec.scale(l)).0)
                .collect();
            let (outs, cache) = model.forward_cached(&x)?;
            let (loss, levels, out_grads) = deep_supervision_loss(&outs, &targets, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, case {i}: loss is {loss}")));
            }
            let (grads, _) = model.backward(&cache, &out_grads)?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(a, &g)| *a += g);
            }
            count += 1;
            if count == cfg.grad_accum {
                apply(&mut model, &mut opt, &mut acc, count, lr, cfg.grad_clip);
                count = 0;
            }
            loss_sum += loss;
            dice_sum += levels[0].dice;
            ce_sum += levels[0].ce;
        }
        if count > 0 {
            apply(&mut model, &mut opt, &mut acc, count, lr, cfg.grad_clip);
            count = 0;
        }
        if model.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite weights")));
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / n,
            dice: dice_sum / n,
            ce: ce_sum / n,
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(TrainedModel {
        model,
        trace,
        seed: cfg.seed,
    })
}
