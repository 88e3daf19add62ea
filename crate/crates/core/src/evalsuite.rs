//! Evaluation protocols: k-fold cross-subject runs, split-scenario
//! diagnostics, the block-term ablation and channel-masking importance.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataframe::{Batch, DatasetIndex};
use crate::discrepancy::{caba, wasserstein1_diag, FeatureBatch, KernelConfig, Pairing};
use crate::error::{Error, Result};
use crate::mixer::{self, argmax, MixerConfig, MixerParams};
use crate::splits::{split_by_axis, Axis, FoldPlan, Split, SplitSpec};
use crate::trainer::{self, DaMode, EpochRecord, TrainConfig};

/// Maps `f` over `items` on `jobs` threads (`1` runs inline, `0` uses
/// every core). Output order follows input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs == 1 || items.len() <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub test_subjects: Vec<u32>,
    pub test_count: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Mean same-class cross-block MMD of the test features.
    pub block_mmd: Option<f64>,
    #[serde(skip)]
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub params: Option<MixerParams>,
}

/// Eval-mode accuracy and confusion matrix. Predictions are the argmax of
/// the logits with ties going to the lower class.
pub fn evaluate(params: &MixerParams, mcfg: &MixerConfig, test: &DatasetIndex) -> Result<FoldResult> {
    if test.is_empty() {
        return Err(Error::Split("evaluation set is empty".into()));
    }
    evaluate_batch(params, mcfg, &test.batch())
}

fn evaluate_batch(params: &MixerParams, mcfg: &MixerConfig, batch: &Batch) -> Result<FoldResult> {
    let (logits, _) = mixer::infer(params, mcfg, batch)?;
    let m = mcfg.classes;
    let mut confusion = vec![vec![0usize; m]; m];
    for (i, &y) in batch.labels.iter().enumerate() {
        confusion[y][argmax(&logits[i * m..(i + 1) * m])] += 1;
    }
    let correct: usize = (0..m).map(|c| confusion[c][c]).sum();
    let mut subjects: Vec<u32> = batch.keys.iter().map(|k| k.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    Ok(FoldResult {
        fold: 0,
        accuracy: correct as f64 / batch.len() as f64,
        confusion,
        test_subjects: subjects,
        test_count: batch.len(),
        best_epoch: 0,
        epochs: 0,
        block_mmd: None,
        history: Vec::new(),
        params: None,
    })
}

/// Mean squared MMD between same-class features of distinct blocks within
/// a session, computed on the model's pooled features of `index`. `None`
/// when no such pair exists.
pub fn block_conditional_mmd(
    params: &MixerParams,
    mcfg: &MixerConfig,
    index: &DatasetIndex,
    kernel_cfg: &KernelConfig,
) -> Result<Option<f64>> {
    let batch = index.batch();
    let (_, pooled) = mixer::infer(params, mcfg, &batch)?;
    let features = FeatureBatch::new(pooled, mcfg.width, batch.labels, batch.keys)?;
    let kernel = kernel_cfg.resolve(&features.features, features.dim)?;
    let out = caba(&features, &kernel, Pairing::Block)?;
    Ok((!out.degenerate).then_some(out.value))
}

/// Splits a training set into train and validation parts for early
/// stopping: 10% of the subjects when there are at least ten, otherwise
/// 10% of the (subject, session, block) groups (at least one).
pub fn validation_carve(index: &DatasetIndex, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = index.subjects();
    let (train, val) = if subjects.len() >= 10 {
        let mut s = subjects;
        s.shuffle(&mut rng);
        let k = (s.len() as f64 * 0.1).round() as usize;
        let held: BTreeSet<u32> = s[..k.max(1)].iter().copied().collect();
        (
            index.filter(|w| !held.contains(&w.key.subject)),
            index.filter(|w| held.contains(&w.key.subject)),
        )
    } else {
        let mut groups: Vec<(u32, u32, u32)> = index
            .samples()
            .iter()
            .map(|w| (w.key.subject, w.key.session, w.key.block))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if groups.len() < 2 {
            return Err(Error::Split(
                "training set needs at least two blocks to carve out validation data".into(),
            ));
        }
        groups.shuffle(&mut rng);
        let k = ((groups.len() as f64 * 0.1).round() as usize).max(1);
        let held: BTreeSet<(u32, u32, u32)> = groups[..k].iter().copied().collect();
        let key = |w: &crate::dataframe::WindowSample| (w.key.subject, w.key.session, w.key.block);
        (
            index.filter(|w| !held.contains(&key(w))),
            index.filter(|w| held.contains(&key(w))),
        )
    };
    Ok((train, val))
}

fn ensure_all_classes(index: &DatasetIndex, what: &str) -> Result<()> {
    if let Some(c) = index.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Split(format!("{what} has no sample of class {c}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct KfoldReport {
    pub mean_accuracy: f64,
    pub folds: Vec<FoldResult>,
}

/// Trains and tests one model per fold. Fold `f` holds out the plan's
/// subjects for testing and carves validation data out of the rest.
pub fn run_kfold(
    index: &DatasetIndex,
    plan: &FoldPlan,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
    jobs: usize,
) -> Result<KfoldReport> {
    plan.validate_for(index)?;
    let folds: Vec<usize> = (0..plan.k).collect();
    let results = par_map(jobs, &folds, |&f| run_fold(index, plan, f, mcfg, tcfg, kernel_cfg))?;
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_accuracy = folds.iter().map(|r| r.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(KfoldReport { mean_accuracy, folds })
}

fn run_fold(
    index: &DatasetIndex,
    plan: &FoldPlan,
    fold: usize,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
) -> Result<FoldResult> {
    let (rest, test) = plan.partition(index, fold);
    let (train, val) = validation_carve(&rest, tcfg.seed.wrapping_add(fold as u64))?;
    ensure_all_classes(&train, &format!("fold {fold} training set"))?;
    let fold_cfg = TrainConfig {
        seed: tcfg.seed.wrapping_add(fold as u64),
        ..tcfg.clone()
    };
    let out = trainer::train_fold(&train, &val, mcfg, &fold_cfg, kernel_cfg)?;
    let mut result = evaluate(&out.params, mcfg, &test)?;
    result.fold = fold;
    result.best_epoch = out.best_epoch;
    result.epochs = out.history.len();
    result.block_mmd = block_conditional_mmd(&out.params, mcfg, &test, kernel_cfg)?;
    result.history = out.history;
    result.params = Some(out.params);
    Ok(result)
}

/// Features the train/test distance is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WdOn {
    /// Pooled features of the trained model.
    #[default]
    Features,
    /// Flattened input windows.
    Raw,
}

impl std::str::FromStr for WdOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(WdOn::Features),
            "raw" => Ok(WdOn::Raw),
            other => Err(Error::Config(format!("wd_on must be raw|features, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WdConfig {
    /// Random mini-batches drawn from each side.
    pub batches: usize,
    pub batch_size: usize,
    pub on: WdOn,
}

impl Default for WdConfig {
    fn default() -> Self {
        Self {
            batches: 20,
            batch_size: 32,
            on: WdOn::Features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub accuracy: f64,
    pub wd: f64,
    pub train_count: usize,
    pub test_count: usize,
}

/// Mean of `wasserstein1_diag` over all pairs of `batches` random train
/// mini-batches and `batches` random test mini-batches.
pub fn mean_batch_wd(train: &FeatureBatch, test: &FeatureBatch, wd: &WdConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |fb: &FeatureBatch| -> Vec<FeatureBatch> {
        (0..wd.batches)
            .map(|_| {
                let k = wd.batch_size.min(fb.len());
                let rows: Vec<usize> = rand::seq::index::sample(&mut rng, fb.len(), k).into_vec();
                fb.subset(&rows)
            })
            .collect()
    };
    let a = draw(train);
    let b = draw(test);
    let mut total = 0.0;
    for x in &a {
        for y in &b {
            total += wasserstein1_diag(x, y)?;
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

fn wd_features(
    params: &MixerParams,
    mcfg: &MixerConfig,
    index: &DatasetIndex,
    on: WdOn,
) -> Result<FeatureBatch> {
    let batch = index.batch();
    match on {
        WdOn::Features => {
            let (_, pooled) = mixer::infer(params, mcfg, &batch)?;
            FeatureBatch::new(pooled, mcfg.width, batch.labels, batch.keys)
        }
        WdOn::Raw => {
            let dim = batch.shape.len();
            FeatureBatch::new(batch.values, dim, batch.labels, batch.keys)
        }
    }
}

/// For every split scenario: trains with cross-entropy only, then reports
/// test accuracy and the mean mini-batch Wasserstein distance between train
/// and test.
pub fn split_scenario_table(
    index: &DatasetIndex,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    scenarios: &[SplitSpec],
    wd: &WdConfig,
    jobs: usize,
) -> Result<Vec<ScenarioRow>> {
    if wd.batches == 0 || wd.batch_size == 0 {
        return Err(Error::Config("diagnose: wd batches and batch_size must be positive".into()));
    }
    let ce_only = TrainConfig {
        da_mode: DaMode::None,
        alpha: 0.0,
        ..tcfg.clone()
    };
    let rows = par_map(jobs, scenarios, |spec| -> Result<ScenarioRow> {
        let split = split_by_axis(index, spec)?;
        let carve = SplitSpec::new(spec.axis, 0.1, spec.seed.wrapping_add(1));
        let (train, val) = match split_by_axis(&split.train, &carve) {
            Ok(Split { train, test, .. }) => (train, test),
            Err(_) => validation_carve(&split.train, spec.seed)?,
        };
        let out = trainer::train_fold(&train, &val, mcfg, &ce_only, &KernelConfig::default())?;
        let accuracy = evaluate(&out.params, mcfg, &split.test)?.accuracy;
        let a = wd_features(&out.params, mcfg, &split.train, wd.on)?;
        let b = wd_features(&out.params, mcfg, &split.test, wd.on)?;
        let wd_value = mean_batch_wd(&a, &b, wd, spec.seed)?;
        Ok(ScenarioRow {
            scenario: format!("split-by-{}", spec.axis),
            accuracy,
            wd: wd_value,
            train_count: split.train.len(),
            test_count: split.test.len(),
        })
    })?;
    rows.into_iter().collect()
}

/// The four scenarios of the split diagnostic, in trial, block, session,
/// subject order.
pub fn default_scenarios(seed: u64) -> Vec<SplitSpec> {
    Axis::ALL.iter().map(|&a| SplitSpec::new(a, 1.0 / 3.0, seed)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub with_caba: KfoldReport,
    pub without_caba: KfoldReport,
    /// `with - without` mean accuracy.
    pub delta: f64,
}

/// Runs the k-fold protocol twice with identical seeds: once with the
/// configured objective and once with the block term removed (the CDD
/// term stays).
pub fn ablate_caba(
    index: &DatasetIndex,
    plan: &FoldPlan,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
    jobs: usize,
) -> Result<AblationReport> {
    if !matches!(tcfg.da_mode, DaMode::Block | DaMode::Session) {
        return Err(Error::Config(format!(
            "ablation needs train.da_mode block or session, got {}",
            tcfg.da_mode
        )));
    }
    let without = TrainConfig {
        da_mode: DaMode::Subject,
        ..tcfg.clone()
    };
    let arms = [tcfg.clone(), without];
    let mut reports = par_map(jobs, &arms, |cfg| run_kfold(index, plan, mcfg, cfg, kernel_cfg, 1))?.into_iter();
    let with_caba = reports.next().expect("two arms")?;
    let without_caba = reports.next().expect("two arms")?;
    Ok(AblationReport {
        delta: with_caba.mean_accuracy - without_caba.mean_accuracy,
        with_caba,
        without_caba,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskReport {
    pub unmasked_accuracy: f64,
    pub masks: Vec<Vec<usize>>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Positions in `masks` whose accuracy falls below `ci_lower`.
    pub critical: Vec<usize>,
}

/// Evaluates the model with each mask applied in turn. The band is
/// `mean +- 1.96 * sd / sqrt(k)` over the k masked accuracies (sample
/// standard deviation; zero width for a single mask).
pub fn mask_importance(
    params: &MixerParams,
    mcfg: &MixerConfig,
    test: &DatasetIndex,
    masks: &[BTreeSet<usize>],
) -> Result<MaskReport> {
    if masks.is_empty() {
        return Err(Error::Config("mask: at least one mask is required".into()));
    }
    let batch = test.batch();
    let unmasked_accuracy = evaluate_batch(params, mcfg, &batch)?.accuracy;
    let mut accuracies = Vec::with_capacity(masks.len());
    for mask in masks {
        let masked = mixer::mask_channels(&batch, mask)?;
        accuracies.push(evaluate_batch(params, mcfg, &masked)?.accuracy);
    }
    let k = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / k;
    let sd = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / k.sqrt();
    let (ci_lower, ci_upper) = (mean - half, mean + half);
    let critical = (0..accuracies.len()).filter(|&i| accuracies[i] < ci_lower).collect();
    Ok(MaskReport {
        unmasked_accuracy,
        masks: masks.iter().map(|m| m.iter().copied().collect()).collect(),
        accuracies,
        mean,
        ci_lower,
        ci_upper,
        critical,
    })
}

/// One single-channel mask per spatial channel.
pub fn single_channel_masks(groups: usize) -> Vec<BTreeSet<usize>> {
    (0..groups).map(|g| BTreeSet::from([g])).collect()
}

/// Accuracy of always predicting the most frequent class.
pub fn majority_rate(index: &DatasetIndex) -> f64 {
    let counts = index.class_counts();
    *counts.iter().max().unwrap_or(&0) as f64 / index.len().max(1) as f64
}

/// Per-class sample counts of every subject, for reports.
pub fn subject_class_counts(index: &DatasetIndex) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for s in index.samples() {
        out.entry(s.key.subject).or_insert_with(|| vec![0; index.class_count()])[s.label] += 1;
    }
    out
}
