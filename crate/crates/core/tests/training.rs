use extremeseg::engine::training_samples;
use extremeseg::inference::Mode;
use extremeseg::nn::train::{complement, fold_split, train_model};
use extremeseg::nn::{TrainConfig, TrainSample, UNet, UNetSpec};
use extremeseg::phantom::{generate_dataset, PhantomConfig};
use extremeseg::planner::{derive_plan_with, fingerprint_dataset, PipelinePlan, PlanOptions};

fn setup(n: usize, seed: u64) -> (Vec<TrainSample>, PipelinePlan, UNetSpec) {
    let data: Vec<_> = generate_dataset(n, &PhantomConfig::default(), seed)
        .unwrap()
        .into_iter()
        .map(|c| (c.image, c.mask))
        .collect();
    let fp = fingerprint_dataset(&data).unwrap();
    let plan = derive_plan_with(&fp, &PlanOptions { max_levels: 3, ..PlanOptions::default() }).unwrap();
    let samples = training_samples(&data, &plan, Mode::Interactive, [32, 32, 16]).unwrap();
    let spec = UNetSpec::from_plan(&plan, 2).unwrap();
    (samples, plan, spec)
}

fn block_stats(values: &[f64], window: usize) -> Vec<(f64, f64)> {
    values
        .chunks(window)
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (m, (var / n).sqrt())
        })
        .collect()
}

#[test]
fn three_level_net_learns_phantoms() {
    let (samples, plan, spec) = setup(20, 2);
    assert_eq!(spec.levels(), 3);
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let cfg = TrainConfig { epochs: 150, seed: 0, ..TrainConfig::default() };
    let m = train_model(&refs, &spec, &plan, &cfg).unwrap();
    assert_eq!(m.trace.len(), 150);
    let last = m.trace.last().unwrap();
    assert!(last.dice < 0.2, "final Dice term {}", last.dice);
    assert!(m.trace.iter().all(|e| e.loss.is_finite()));

    // 10-epoch block means never rise by more than three standard errors.
    let loss: Vec<f64> = m.trace.iter().map(|e| e.loss).collect();
    let blocks = block_stats(&loss, 10);
    for (i, w) in blocks.windows(2).enumerate() {
        let rise = w[1].0 - w[0].0;
        let se = (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
        assert!(rise <= 3.0 * se, "block {} rises by {rise:.4} (se {se:.4})", i + 1);
    }
    assert!(blocks.last().unwrap().0 < 0.5 * blocks[0].0);
}

#[test]
fn training_is_deterministic() {
    let (samples, plan, spec) = setup(4, 5);
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let cfg = TrainConfig { epochs: 3, seed: 42, ..TrainConfig::default() };
    let a = train_model(&refs, &spec, &plan, &cfg).unwrap();
    let b = train_model(&refs, &spec, &plan, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
    let c = train_model(&refs, &spec, &plan, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let (samples, plan, spec) = setup(3, 6);
    let refs: Vec<&TrainSample> = samples.iter().collect();
    let cfg = TrainConfig { epochs: 2, lr0: 0.0, seed: 9, ..TrainConfig::default() };
    let m = train_model(&refs, &spec, &plan, &cfg).unwrap();
    assert_eq!(m.model, UNet::new(spec, 9).unwrap());
    assert!(m.trace.iter().all(|e| e.lr == 0.0));
}

#[test]
fn fold_split_partitions_cases() {
    for (n, k) in [(30, 2), (10, 3), (7, 5), (2, 2)] {
        let folds = fold_split(n, k, 1).unwrap();
        assert_eq!(folds, fold_split(n, k, 1).unwrap());
        assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &folds {
            assert_eq!(complement(n, f).len(), n - f.len());
        }
    }
    assert!(fold_split(3, 4, 0).is_err());
}
