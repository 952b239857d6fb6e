//! End-to-end entry points: segment a volume, train a k-fold ensemble.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict, Ensemble, Mode};
use crate::interactions::{synth_extreme_points, InteractionSet, RoiBox};
use crate::nn::train::{complement, fold_split, train_model_with, EpochStats};
use crate::nn::{TrainConfig, TrainSample, UNet, UNetSpec};
use crate::par;
use crate::planner::PipelinePlan;
use crate::postproc::{apply_postproc, postproc_scores, select_postprocessing, PostprocChoice};
use crate::preprocess::{preprocess_automatic, preprocess_case, restore_to_original};
use crate::stats::dsc;
use crate::volume::{Mask3D, Volume3D};

/// Wall-clock seconds per engine stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocessing: f64,
    pub model_inference: f64,
    pub postprocessing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Final mask on the input grid.
    pub mask: Mask3D,
    /// Restored mask before post-processing.
    pub raw_mask: Mask3D,
    /// ROI on the resampled grid.
    pub roi: RoiBox,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocessing,
    Inferring,
    Postprocessing,
}

/// Runs preprocessing, prediction, restoration and post-processing with an
/// explicit model set. `clicks` are required in interactive mode and ignored
/// otherwise.
pub fn segment_with(
    image: &Volume3D,
    clicks: Option<&InteractionSet>,
    plan: &PipelinePlan,
    mode: Mode,
    budget: [usize; 3],
    models: &[UNet<f32>],
    postproc: PostprocChoice,
) -> Result<Segmentation> {
    segment_staged(image, clicks, plan, mode, budget, models, postproc, |_| {})
}

/// [`segment_with`], calling `on_stage` as each stage starts.
#[allow(clippy::too_many_arguments)]
pub fn segment_staged(
    image: &Volume3D,
    clicks: Option<&InteractionSet>,
    plan: &PipelinePlan,
    mode: Mode,
    budget: [usize; 3],
    models: &[UNet<f32>],
    postproc: PostprocChoice,
    mut on_stage: impl FnMut(Stage),
) -> Result<Segmentation> {
    on_stage(Stage::Preprocessing);
    let t0 = Instant::now();
    let case = match mode {
        Mode::Interactive => {
            let clicks = clicks.ok_or_else(|| Error::Interactions("interactive mode needs six clicks".into()))?;
            preprocess_case(image, clicks, plan)?
        }
        Mode::Automatic => preprocess_automatic(image, plan, budget)?,
    };
    on_stage(Stage::Inferring);
    let t1 = Instant::now();
    let roi_mask = predict(&case, models)?;
    on_stage(Stage::Postprocessing);
    let t2 = Instant::now();
    let raw = restore_to_original(&roi_mask, &case.inverse)?;
    let raw = Mask3D::new(image.geometry().clone(), raw.into_labels())?;
    let mask = apply_postproc(&raw, postproc);
    let t3 = Instant::now();
    Ok(Segmentation {
        mask,
        raw_mask: raw,
        roi: case.roi,
        timings: StageTimings {
            preprocessing: (t1 - t0).as_secs_f64(),
            model_inference: (t2 - t1).as_secs_f64(),
            postprocessing: (t3 - t2).as_secs_f64(),
        },
    })
}

/// Segments with the ensemble's models, plan and post-processing choice.
pub fn segment(image: &Volume3D, clicks: Option<&InteractionSet>, ensemble: &Ensemble) -> Result<Segmentation> {
    segment_ensemble(image, clicks, ensemble, |_| {})
}

/// [`segment`] with stage notifications.
pub fn segment_ensemble(
    image: &Volume3D,
    clicks: Option<&InteractionSet>,
    ensemble: &Ensemble,
    on_stage: impl FnMut(Stage),
) -> Result<Segmentation> {
    segment_staged(
        image,
        clicks,
        &ensemble.plan,
        ensemble.mode,
        ensemble.budget,
        &ensemble.models,
        ensemble.plan.postproc,
        on_stage,
    )
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub ensemble: Ensemble,
    /// Held-out case indices per fold.
    pub folds: Vec<Vec<usize>>,
    pub traces: Vec<Vec<EpochStats>>,
    /// Mean cross-validation DSC per post-processing choice.
    pub cv_scores: Vec<(PostprocChoice, f64)>,
    /// Cross-validation DSC per case (index order) after the selected post-processing.
    pub cv_dsc: Vec<f64>,
}

pub fn training_samples(
    cases: &[(Volume3D, Mask3D)],
    plan: &PipelinePlan,
    mode: Mode,
    budget: [usize; 3],
) -> Result<Vec<TrainSample>> {
    par::map_slice(cases, |(img, m)| match mode {
        Mode::Interactive => TrainSample::interactive(img, m, plan),
        Mode::Automatic => TrainSample::automatic(img, m, plan, budget),
    })
    .into_iter()
    .collect()
}

/// Trains `k` fold models (fold `f` seeded with `cfg.seed + f`), predicts
/// each held-out case with its fold's model using synthetic clicks, and
/// selects the post-processing that maximises mean cross-validation DSC.
pub fn train_ensemble(
    cases: &[(Volume3D, Mask3D)],
    plan: &PipelinePlan,
    cfg: &TrainConfig,
    k: usize,
    mode: Mode,
    budget: [usize; 3],
    progress: impl Fn(usize, &EpochStats) + Sync,
) -> Result<TrainingOutcome> {
    plan.validate()?;
    cfg.validate()?;
    let n = cases.len();
    if n < 2 {
        return Err(Error::InvalidArgument("training needs at least two cases".into()));
    }
    let folds = fold_split(n, k, cfg.seed)?;
    let samples = training_samples(cases, plan, mode, budget)?;
    let spec = UNetSpec::from_plan(plan, mode.in_channels())?;
    let trained = par::map_range(k, |f| {
        let idx = complement(n, &folds[f]);
        let refs: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let c = TrainConfig {
            seed: cfg.seed.wrapping_add(f as u64),
            ..cfg.clone()
        };
        train_model_with(&refs, &spec, plan, &c, |s| progress(f, s))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut held: Vec<(usize, usize)> = folds
        .iter()
        .enumerate()
        .flat_map(|(f, v)| v.iter().map(move |&i| (i, f)))
        .collect();
    held.sort_unstable();
    let raw: Vec<(Mask3D, Mask3D)> = par::map_slice(&held, |&(i, f)| -> Result<(Mask3D, Mask3D)> {
        let (img, m) = &cases[i];
        let clicks = match mode {
            Mode::Interactive => Some(synth_extreme_points(m)?),
            Mode::Automatic => None,
        };
        let models = std::slice::from_ref(&trained[f].model);
        let s = segment_with(img, clicks.as_ref(), plan, mode, budget, models, PostprocChoice::None)?;
        Ok((s.raw_mask, m.clone()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let cv_scores = postproc_scores(&raw)?;
    let choice = select_postprocessing(&raw)?;
    let cv_dsc = raw
        .iter()
        .map(|(p, r)| dsc(&apply_postproc(p, choice), r))
        .collect::<Result<_>>()?;

    let mut plan = plan.clone();
    plan.postproc = choice;
    let ensemble = Ensemble {
        mode,
        budget,
        plan,
        seeds: trained.iter().map(|t| t.seed).collect(),
        epochs: vec![cfg.epochs; k],
        models: trained.iter().map(|t| t.model.clone()).collect(),
    };
    Ok(TrainingOutcome {
        ensemble,
        folds,
        traces: trained.into_iter().map(|t| t.trace).collect(),
        cv_scores,
        cv_dsc,
    })
}
