use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use extremeseg::engine::{segment, train_ensemble};
use extremeseg::inference::{Ensemble, Mode, DEFAULT_AUTOMATIC_BUDGET};
use extremeseg::interactions::{synth_extreme_points, InteractionSet};
use extremeseg::nn::TrainConfig;
use extremeseg::phantom::{generate_dataset, Manifest, ManifestEntry, PhantomConfig};
use extremeseg::planner::{derive_plan_with, fingerprint_dataset, PipelinePlan, PlanOptions};
use extremeseg::preprocess::{preprocess_automatic, preprocess_case};
use extremeseg::stats::{CaseMetrics, EvalReport};
use extremeseg::volume::mvol::{atomic_write, read_header, read_mask, read_volume, write_mask, write_volume, Dtype, Kind};
use extremeseg::volume::{parse_volume_bytes, Mask3D, Modality, Volume3D};
use extremeseg::par;
use extremeseg_service::{AppState, ServiceConfig, DEFAULT_MAX_UPLOAD_BYTES};
use serde::Serialize;

use crate::config::{overlay, RunConfig};
use crate::{
    Cli, Command, EvalArgs, InferArgs, ModalityArg, PhantomArgs, PlanArgs, PreprocessArgs, ServeArgs,
    SimulateClicksArgs, SpaceArg, TrainArgs,
};

pub const MANIFEST_FILE: &str = "manifest.json";

struct Ctx {
    cfg: RunConfig,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn manifest_path(&self, flag: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        self.cfg
            .data_root()
            .map(|d| d.join(MANIFEST_FILE))
            .ok_or_else(|| anyhow!("no --data given and no data root configured"))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(cfg.threads).unwrap_or(0);
    par::init_global(threads);
    let ctx = Ctx { cfg, quiet: cli.quiet };
    match cli.command {
        Command::Phantom(a) => phantom(&ctx, a),
        Command::SimulateClicks(a) => simulate_clicks(a),
        Command::Plan(a) => plan(&ctx, a),
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// MVOL by header, anything else through the upload parser (NIfTI-1).
fn read_image(path: &Path) -> Result<Volume3D> {
    if path.extension().is_some_and(|e| e == "mvol") {
        return Ok(read_volume(path)?);
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_volume_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_cases(manifest: &Path) -> Result<(Manifest, Vec<(Volume3D, Mask3D)>)> {
    let m = Manifest::load(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    if m.cases.is_empty() {
        bail!("manifest {} lists no cases", manifest.display());
    }
    let cases = m
        .cases
        .iter()
        .map(|c| -> Result<_> {
            let img = read_volume(&c.image).with_context(|| format!("case {}", c.id))?;
            let mask = read_mask(&c.mask).with_context(|| format!("case {}", c.id))?;
            Ok((img, mask))
        })
        .collect::<Result<_>>()?;
    Ok((m, cases))
}

fn phantom(ctx: &Ctx, a: PhantomArgs) -> Result<()> {
    let out = a
        .out
        .or_else(|| ctx.cfg.data_root())
        .ok_or_else(|| anyhow!("no --out given and no data root configured"))?;
    let mut pc = overlay(PhantomConfig::default(), ctx.cfg.phantom.as_ref(), "phantom")?;
    if let Some(d) = a.dims {
        pc.dims = d;
    }
    if let Some(s) = a.spacing {
        pc.spacing = s;
    }
    if a.distractor {
        pc.distractor = true;
    }
    if let Some(m) = a.modality {
        pc.modality = match m {
            ModalityArg::Ct => Modality::Ct,
            ModalityArg::MrT1 => Modality::MrT1,
            ModalityArg::MrT2fs => Modality::MrT2fs,
            ModalityArg::Synth => Modality::Synth,
        };
    }
    if let Some(n) = a.noise {
        pc.noise_sigma = n;
    }
    let seed = a.seed.or(ctx.cfg.seed).unwrap_or(0);
    let cases = generate_dataset(a.n, &pc, seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let id = format!("case_{i:03}");
        let image = PathBuf::from(format!("{id}.mvol"));
        let mask = PathBuf::from(format!("{id}_mask.mvol"));
        write_volume(&out.join(&image), &c.image, Dtype::F32)?;
        write_mask(&out.join(&mask), &c.mask)?;
        let distractor = match &c.distractor {
            Some(d) => {
                let p = PathBuf::from(format!("{id}_distractor.mvol"));
                write_mask(&out.join(&p), d)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry { id, image, mask, distractor, seed: c.seed });
    }
    write_json(&out.join(MANIFEST_FILE), &Manifest { cases: entries })?;
    ctx.note(format!("wrote {} cases to {}", a.n, out.display()));
    Ok(())
}

fn simulate_clicks(a: SimulateClicksArgs) -> Result<()> {
    let mask = read_mask(&a.mask)?;
    let mut clicks = synth_extreme_points(&mask)?;
    if a.space == SpaceArg::World {
        clicks = clicks.to_world(mask.geometry())?;
    }
    write_json(&a.out, &clicks)
}

fn plan_options(ctx: &Ctx) -> Result<PlanOptions> {
    overlay(PlanOptions::default(), ctx.cfg.plan.as_ref(), "plan")
}

fn plan(ctx: &Ctx, a: PlanArgs) -> Result<()> {
    let manifest = ctx.manifest_path(a.data.as_deref())?;
    let (_, cases) = load_cases(&manifest)?;
    let mut opts = plan_options(ctx)?;
    if let Some(l) = a.max_levels {
        opts.max_levels = l;
    }
    let fp = fingerprint_dataset(&cases)?;
    let plan = derive_plan_with(&fp, &opts)?;
    write_json(&a.out, &plan)?;
    ctx.note(format!(
        "plan: spacing {:?}, strides {:?}, divisors {:?}",
        plan.target_spacing, plan.stride_schedule, plan.divisors
    ));
    Ok(())
}

fn budget(ctx: &Ctx, flag: Option<[usize; 3]>) -> [usize; 3] {
    flag.or(ctx.cfg.budget).unwrap_or(DEFAULT_AUTOMATIC_BUDGET)
}

fn read_clicks(path: Option<&Path>) -> Result<InteractionSet> {
    let p = path.ok_or_else(|| anyhow!("--clicks is required in interactive mode"))?;
    read_json(p)
}

fn preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let plan = PipelinePlan::load(&a.plan)?;
    let image = read_image(&a.case)?;
    let case = if a.automatic {
        preprocess_automatic(&image, &plan, budget(ctx, a.budget))?
    } else {
        preprocess_case(&image, &read_clicks(a.clicks.as_deref())?, &plan)?
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_volume(&a.out.join("image.mvol"), &case.image, Dtype::F32)?;
    if let Some(egd) = &case.egd {
        let v = Volume3D::new(case.image.geometry().clone(), egd.values_f32(), case.image.modality())?;
        write_volume(&a.out.join("egd.mvol"), &v, Dtype::F32)?;
    }
    case.inverse.save(&a.out.join("inverse_map.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    mode: Mode,
    folds: &'a [Vec<String>],
    cv_scores: &'a [(extremeseg::postproc::PostprocChoice, f64)],
    cv_dsc: BTreeMap<&'a str, f64>,
    traces: &'a [Vec<extremeseg::nn::train::EpochStats>],
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let plan = PipelinePlan::load(&a.plan)?;
    let manifest = ctx.manifest_path(a.data.as_deref())?;
    let (m, cases) = load_cases(&manifest)?;
    let mut tc = overlay(TrainConfig::default(), ctx.cfg.train.as_ref(), "train")?;
    if let Some(s) = ctx.cfg.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(lr) = a.lr {
        tc.lr0 = lr;
    }
    if a.no_click_jitter {
        tc.click_jitter = 0;
    }
    let k = a.folds.or(ctx.cfg.folds).unwrap_or(5);
    let mode = if a.automatic { Mode::Automatic } else { Mode::Interactive };
    let budget = budget(ctx, a.budget);
    let quiet = ctx.quiet;
    let total = tc.epochs;
    let outcome = train_ensemble(&cases, &plan, &tc, k, mode, budget, |f, s| {
        if !quiet && (s.epoch % 10 == 9 || s.epoch + 1 == total) {
            eprintln!("fold {f} epoch {:>4}  loss {:.4}  dice {:.4}  lr {:.5}", s.epoch + 1, s.loss, s.dice, s.lr);
        }
    })?;
    outcome.ensemble.save(&a.out)?;
    let ids: Vec<&str> = m.cases.iter().map(|c| c.id.as_str()).collect();
    let folds: Vec<Vec<String>> = outcome
        .folds
        .iter()
        .map(|f| f.iter().map(|&i| ids[i].to_string()).collect())
        .collect();
    let report = TrainReport {
        mode,
        folds: &folds,
        cv_scores: &outcome.cv_scores,
        cv_dsc: ids.iter().copied().zip(outcome.cv_dsc.iter().copied()).collect(),
        traces: &outcome.traces,
    };
    write_json(&a.out.join("training.json"), &report)?;
    let mean = outcome.cv_dsc.iter().sum::<f64>() / outcome.cv_dsc.len() as f64;
    ctx.note(format!(
        "post-processing {:?}, cross-validation DSC {mean:.4}",
        outcome.ensemble.plan.postproc
    ));
    Ok(())
}

/// Loads the ensemble, checking an explicit plan and mode against it.
fn load_ensemble(models: &Path, plan: Option<&Path>, automatic: Option<bool>) -> Result<Ensemble> {
    let ens = Ensemble::load(models).with_context(|| format!("loading models from {}", models.display()))?;
    if let Some(p) = plan {
        let mut given = PipelinePlan::load(p)?;
        given.postproc = ens.plan.postproc;
        if given != ens.plan {
            bail!("plan {} does not match the plan the models were trained with", p.display());
        }
    }
    if let Some(auto) = automatic {
        let want = if auto { Mode::Automatic } else { Mode::Interactive };
        if ens.mode != want {
            bail!("models were trained in {:?} mode, requested {want:?}", ens.mode);
        }
    }
    Ok(ens)
}

fn infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let ens = load_ensemble(&a.models, a.plan.as_deref(), Some(a.automatic))?;
    let image = read_image(&a.case)?;
    let clicks = if a.automatic { None } else { Some(read_clicks(a.clicks.as_deref())?) };
    let seg = segment(&image, clicks.as_ref(), &ens)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_mask(&a.out, &seg.mask)?;
    let t = seg.timings;
    ctx.note(format!(
        "{} voxels; preprocessing {:.3}s, inference {:.3}s, post-processing {:.3}s",
        seg.mask.count(),
        t.preprocessing,
        t.model_inference,
        t.postprocessing
    ));
    Ok(())
}

/// Case id of a mask file: the file stem without a trailing `_mask`.
pub fn case_id(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    Some(stem.strip_suffix("_mask").unwrap_or(stem).to_string())
}

/// Mask headers in `dir` keyed by case id; images are skipped.
fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for e in entries {
        let p = e?.path();
        if p.extension().is_none_or(|x| x != "mvol") {
            continue;
        }
        if read_header(&p)?.kind != Kind::Mask {
            continue;
        }
        let id = case_id(&p).ok_or_else(|| anyhow!("bad file name {}", p.display()))?;
        if let Some(prev) = out.insert(id.clone(), p.clone()) {
            bail!("case {id} appears twice: {} and {}", prev.display(), p.display());
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let refs = mask_files(&a.reference)?;
    let preds = mask_files(&a.pred)?;
    if refs.is_empty() {
        bail!("no reference masks in {}", a.reference.display());
    }
    if let Some(id) = refs.keys().find(|id| !preds.contains_key(*id)) {
        bail!("missing prediction for case {id} in {}", a.pred.display());
    }
    if let Some(id) = preds.keys().find(|id| !refs.contains_key(*id)) {
        bail!("missing reference for case {id} in {}", a.reference.display());
    }
    let cases = refs
        .iter()
        .map(|(id, rp)| -> Result<CaseMetrics> {
            let r = read_mask(rp)?;
            let p = read_mask(&preds[id])?;
            CaseMetrics::compute(id.clone(), &p, &r).with_context(|| format!("case {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_cases(cases)?;
    write_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        atomic_write(csv, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let ens = load_ensemble(&a.models, a.plan.as_deref(), None)?;
    let max_upload_bytes = a
        .max_upload_bytes
        .or(ctx.cfg.max_upload_bytes)
        .unwrap_or(DEFAULT_MAX_UPLOAD_BYTES);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let state = AppState::new(ens, ServiceConfig { max_upload_bytes });
        ctx.note(format!("listening on http://{addr}"));
        extremeseg_service::serve(addr, state).await
    })
    .with_context(|| format!("serving on {addr}"))
}
