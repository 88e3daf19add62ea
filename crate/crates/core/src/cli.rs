//! The `caba` command line: argument parsing, run configuration and the
//! command implementations.
//!
//! Precedence is flag > config file > built-in default. The effective
//! configuration is written to `<out>/config.json` by every command that
//! produces a run directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataframe::{load_manifest, synth_generate, validate_dataset, write_manifest, DatasetIndex, SynthConfig};
use crate::discrepancy::KernelConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{self, FoldResult, KfoldReport, WdConfig, WdOn};
use crate::mixer::{self, MixerConfig};
use crate::splits::{kfold_by_subject, split_by_axis, Axis, FoldPlan, SplitSpec};
use crate::trainer::{self, EpochRecord, GridSpace, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "caba", version, about = "Class-aware block-aware domain adaptation for block-designed time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic corpus into --out.
    Synth,
    /// Train one model on a train/test split and save the best checkpoint.
    Train,
    /// Grid search over learning rate, dropout and alpha by k-fold accuracy.
    Gridsearch,
    /// k-fold cross-subject evaluation.
    Kfold,
    /// k-fold evaluation with and without the block discrepancy term.
    Ablate,
    /// Accuracy and train/test Wasserstein distance per split scenario.
    Diagnose,
    /// Channel-masking importance analysis.
    Mask,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (holding dataset.json).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random draw; overrides the per-section seeds.
    #[arg(long, global = true, env = "CABA_SEED")]
    pub seed: Option<u64>,
    /// Split axis for `train` and `mask`: trial|block|session|subject.
    #[arg(long, global = true)]
    pub split: Option<Axis>,
    /// Number of folds; leave-one-subject-out when absent from flags and config.
    #[arg(long, global = true)]
    pub kfold: Option<usize>,
    /// Worker threads across folds, grid points and scenarios (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Distance features for `diagnose`: raw|features.
    #[arg(long = "wd-on", global = true)]
    pub wd_on: Option<WdOn>,
    /// Model checkpoint for `mask` (otherwise a model is trained first).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

/// Model hyperparameters; the input shape and class count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub layers: usize,
    pub temporal_hidden: usize,
    pub channel_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 16,
            layers: 4,
            temporal_hidden: 64,
            channel_hidden: 32,
        }
    }
}

impl ModelSection {
    pub fn for_data(&self, index: &DatasetIndex, dropout: f64) -> Result<MixerConfig> {
        let shape = index.shape();
        let cfg = MixerConfig {
            seq_len: shape.seq_len,
            groups: shape.groups,
            features_per_group: shape.features_per_group(),
            width: self.width,
            layers: self.layers,
            temporal_hidden: self.temporal_hidden,
            channel_hidden: self.channel_hidden,
            classes: index.class_count(),
            dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfoldSection {
    /// Folds; `None` means one fold per subject.
    pub k: Option<usize>,
    /// Fold file overriding `k`.
    pub plan: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub axes: Vec<Axis>,
    pub test_fraction: f64,
    pub seed: u64,
    pub wd: WdConfig,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            axes: Axis::ALL.to_vec(),
            test_fraction: 1.0 / 3.0,
            seed: 0,
            wd: WdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    /// Channel sets masked one at a time; single channels when absent.
    pub masks: Option<Vec<Vec<usize>>>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides every section seed when set.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub kernel: KernelConfig,
    pub split: SplitSpec,
    pub kfold: KfoldSection,
    pub grid: GridSpace,
    pub diagnose: DiagnoseSection,
    pub mask: MaskSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            seed: None,
            jobs: 1,
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            kernel: KernelConfig::default(),
            split: SplitSpec::default(),
            kfold: KfoldSection::default(),
            grid: GridSpace::default(),
            diagnose: DiagnoseSection::default(),
            mask: MaskSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (if any) with the flags applied on top.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if flags.data.is_some() {
            cfg.data.clone_from(&flags.data);
        }
        if flags.out.is_some() {
            cfg.out.clone_from(&flags.out);
        }
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if let Some(axis) = flags.split {
            cfg.split.axis = axis;
        }
        if flags.kfold.is_some() {
            cfg.kfold.k = flags.kfold;
            cfg.kfold.plan = None;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = j;
        }
        if let Some(on) = flags.wd_on {
            cfg.diagnose.wd.on = on;
        }
        if flags.checkpoint.is_some() {
            cfg.mask.checkpoint.clone_from(&flags.checkpoint);
        }
        if let Some(s) = cfg.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
            cfg.split.seed = s;
            cfg.kfold.seed = s;
            cfg.diagnose.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.kernel.validate()?;
        self.grid.validate()?;
        let m = self.model;
        for (name, v) in [
            ("width", m.width),
            ("temporal_hidden", m.temporal_hidden),
            ("channel_hidden", m.channel_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config("split.test_fraction must lie in (0, 1)".into()));
        }
        if !(self.diagnose.test_fraction > 0.0 && self.diagnose.test_fraction < 1.0) {
            return Err(Error::Config("diagnose.test_fraction must lie in (0, 1)".into()));
        }
        if self.diagnose.axes.is_empty() {
            return Err(Error::Config("diagnose.axes must name at least one axis".into()));
        }
        if self.diagnose.wd.batches == 0 || self.diagnose.wd.batch_size == 0 {
            return Err(Error::Config("diagnose.wd batches and batch_size must be positive".into()));
        }
        if let Some(k) = self.kfold.k {
            if k < 2 {
                return Err(Error::Config(format!("kfold.k must be at least 2, got {k}")));
            }
        }
        if let Some(masks) = &self.mask.masks {
            if masks.is_empty() {
                return Err(Error::Config("mask.masks must not be empty".into()));
            }
        }
        Ok(())
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))
    }

    fn load_data(&self) -> Result<DatasetIndex> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset: pass --data or set \"data\"".into()))?;
        load_manifest(dir)
    }

    fn fold_plan(&self, index: &DatasetIndex) -> Result<FoldPlan> {
        let plan = match (&self.kfold.plan, self.kfold.k) {
            (Some(p), _) => FoldPlan::load(p)?,
            (None, Some(k)) => kfold_by_subject(index, k, self.kfold.seed)?,
            (None, None) => kfold_by_subject(index, index.subjects().len(), self.kfold.seed)?,
        };
        plan.validate_for(index)?;
        Ok(plan)
    }
}

/// Parses the process arguments and runs the command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, cli.flags.force).map(|_| ()),
        Command::Train => cmd_train(&cfg),
        Command::Gridsearch => cmd_gridsearch(&cfg),
        Command::Kfold => cmd_kfold(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Diagnose => cmd_diagnose(&cfg),
        Command::Mask => cmd_mask(&cfg),
    }
}

// ---------------------------------------------------------------------------
// Output helpers

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    fold: usize,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

fn write_history(path: &Path, folds: &[(usize, &[EpochRecord])]) -> Result<()> {
    let mut out = Vec::new();
    for (fold, records) in folds {
        for record in records.iter() {
            serde_json::to_writer(&mut out, &HistoryLine { fold: *fold, record }).expect("history serializes");
            out.push(b'\n');
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn start_run(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out_dir()?;
    prepare_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Commands

/// Writes a synthetic corpus to the output directory. A non-empty
/// directory is only overwritten with `force`.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    let index = synth_generate(&cfg.synth)?;
    let report = validate_dataset(&index);
    if !report.passes() {
        return Err(Error::Manifest(format!("generated corpus is invalid: {:?}", report.violations)));
    }
    write_manifest(&index, out)?;
    log::info!(
        "wrote {} windows of {} subjects to {}",
        index.len(),
        report.subjects,
        out.display()
    );
    Ok(out.to_path_buf())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    split: &'a SplitSpec,
    train_count: usize,
    val_count: usize,
    test_count: usize,
    test_accuracy: f64,
    confusion: &'a [Vec<usize>],
    best_epoch: usize,
    epochs: usize,
    best_val_ce: f64,
    block_mmd: Option<f64>,
    parameters: usize,
    macs_per_window: u64,
}

/// Trains on the split's train side and reports on its test side.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
    let out = start_run(cfg)?;
    let split = split_by_axis(&index, &cfg.split)?;
    let (train, val) = evalsuite::validation_carve(&split.train, cfg.split.seed)?;
    let fit = trainer::train_fold(&train, &val, &mcfg, &cfg.train, &cfg.kernel)?;
    mixer::save_checkpoint(out.join("best.ckpt"), &mcfg, &fit.params)?;
    write_history(&out.join("history.jsonl"), &[(0, &fit.history)])?;
    let result = evalsuite::evaluate(&fit.params, &mcfg, &split.test)?;
    let block_mmd = evalsuite::block_conditional_mmd(&fit.params, &mcfg, &split.test, &cfg.kernel)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            split: &cfg.split,
            train_count: train.len(),
            val_count: val.len(),
            test_count: split.test.len(),
            test_accuracy: result.accuracy,
            confusion: &result.confusion,
            best_epoch: fit.best_epoch,
            epochs: fit.history.len(),
            best_val_ce: fit.best_val_ce,
            block_mmd,
            parameters: mcfg.param_count(),
            macs_per_window: mixer::count_macs(&mcfg),
        },
    )?;
    log::info!("test accuracy {:.4}", result.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct GridCsvRow {
    learning_rate: f64,
    dropout: f64,
    alpha: f64,
    mean_accuracy: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct CurveRow {
    alpha: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct GridSummary<'a> {
    best: &'a TrainConfig,
    best_accuracy: f64,
    grid_points: usize,
    diverged: usize,
}

pub fn cmd_gridsearch(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
    let plan = cfg.fold_plan(&index)?;
    let out = start_run(cfg)?;
    plan.save(out.join("folds.json"))?;
    let report = trainer::grid_search(&index, &plan, &mcfg, &cfg.train, &cfg.kernel, &cfg.grid, cfg.jobs)?;
    let rows: Vec<GridCsvRow> = report
        .rows
        .iter()
        .map(|r| GridCsvRow {
            learning_rate: r.learning_rate,
            dropout: r.dropout,
            alpha: r.alpha,
            mean_accuracy: r.mean_accuracy,
            error: r.error.clone(),
        })
        .collect();
    write_csv(&out.join("grid.csv"), &rows)?;
    let curve: Vec<CurveRow> = report
        .alpha_curve
        .iter()
        .map(|&(alpha, accuracy)| CurveRow { alpha, accuracy })
        .collect();
    write_csv(&out.join("alpha_curve.csv"), &curve)?;
    write_json(
        &out.join("summary.json"),
        &GridSummary {
            best: &report.best,
            best_accuracy: report.best_accuracy,
            grid_points: report.rows.len(),
            diverged: report.rows.iter().filter(|r| r.mean_accuracy.is_none()).count(),
        },
    )?;
    log::info!("best mean accuracy {:.4}", report.best_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct FoldCsvRow {
    fold: usize,
    test_subjects: String,
    accuracy: f64,
    best_epoch: usize,
    epochs: usize,
    block_mmd: Option<f64>,
}

fn fold_rows(folds: &[FoldResult]) -> Vec<FoldCsvRow> {
    folds
        .iter()
        .map(|f| FoldCsvRow {
            fold: f.fold,
            test_subjects: f
                .test_subjects
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            accuracy: f.accuracy,
            best_epoch: f.best_epoch,
            epochs: f.epochs,
            block_mmd: f.block_mmd,
        })
        .collect()
}

fn fold_histories(report: &KfoldReport) -> Vec<(usize, &[EpochRecord])> {
    report.folds.iter().map(|f| (f.fold, f.history.as_slice())).collect()
}

pub fn cmd_kfold(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
    let plan = cfg.fold_plan(&index)?;
    let out = start_run(cfg)?;
    plan.save(out.join("folds.json"))?;
    let report = evalsuite::run_kfold(&index, &plan, &mcfg, &cfg.train, &cfg.kernel, cfg.jobs)?;
    write_history(&out.join("history.jsonl"), &fold_histories(&report))?;
    write_csv(&out.join("folds.csv"), &fold_rows(&report.folds))?;
    write_json(&out.join("summary.json"), &report)?;
    log::info!("mean accuracy over {} folds {:.4}", plan.k, report.mean_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    arm: &'static str,
    mean_accuracy: f64,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
    let plan = cfg.fold_plan(&index)?;
    let out = start_run(cfg)?;
    plan.save(out.join("folds.json"))?;
    let report = evalsuite::ablate_caba(&index, &plan, &mcfg, &cfg.train, &cfg.kernel, cfg.jobs)?;
    write_history(&out.join("history_with_caba.jsonl"), &fold_histories(&report.with_caba))?;
    write_history(&out.join("history_without_caba.jsonl"), &fold_histories(&report.without_caba))?;
    write_csv(
        &out.join("ablation.csv"),
        &[
            AblationRow {
                arm: "with_caba",
                mean_accuracy: report.with_caba.mean_accuracy,
            },
            AblationRow {
                arm: "without_caba",
                mean_accuracy: report.without_caba.mean_accuracy,
            },
        ],
    )?;
    write_json(&out.join("summary.json"), &report)?;
    log::info!("caba delta {:+.4}", report.delta);
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseCsvRow<'a> {
    scenario: &'a str,
    #[serde(rename = "WD")]
    wd: f64,
    #[serde(rename = "Acc")]
    acc: f64,
}

#[derive(Serialize)]
struct DiagnoseSummary<'a> {
    wd_on: WdOn,
    rows: &'a [evalsuite::ScenarioRow],
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
    let out = start_run(cfg)?;
    let d = &cfg.diagnose;
    let scenarios: Vec<SplitSpec> = d.axes.iter().map(|&a| SplitSpec::new(a, d.test_fraction, d.seed)).collect();
    let rows = evalsuite::split_scenario_table(&index, &mcfg, &cfg.train, &scenarios, &d.wd, cfg.jobs)?;
    let csv_rows: Vec<DiagnoseCsvRow> = rows
        .iter()
        .map(|r| DiagnoseCsvRow {
            scenario: &r.scenario,
            wd: r.wd,
            acc: r.accuracy,
        })
        .collect();
    write_csv(&out.join("diagnose.csv"), &csv_rows)?;
    write_json(&out.join("summary.json"), &DiagnoseSummary { wd_on: d.wd.on, rows: &rows })?;
    Ok(())
}

#[derive(Serialize)]
struct MaskCsvRow {
    mask: String,
    accuracy: f64,
    critical: bool,
}

pub fn cmd_mask(cfg: &RunConfig) -> Result<()> {
    let index = cfg.load_data()?;
    let out = start_run(cfg)?;
    let (mcfg, params, test) = match &cfg.mask.checkpoint {
        Some(p) => {
            let (mcfg, params) = mixer::load_checkpoint(p)?;
            let split = split_by_axis(&index, &cfg.split)?;
            (mcfg, params, split.test)
        }
        None => {
            let mcfg = cfg.model.for_data(&index, cfg.train.dropout)?;
            let split = split_by_axis(&index, &cfg.split)?;
            let (train, val) = evalsuite::validation_carve(&split.train, cfg.split.seed)?;
            let fit = trainer::train_fold(&train, &val, &mcfg, &cfg.train, &cfg.kernel)?;
            mixer::save_checkpoint(out.join("best.ckpt"), &mcfg, &fit.params)?;
            write_history(&out.join("history.jsonl"), &[(0, &fit.history)])?;
            (mcfg, fit.params, split.test)
        }
    };
    let masks: Vec<BTreeSet<usize>> = match &cfg.mask.masks {
        Some(m) => m.iter().map(|s| s.iter().copied().collect()).collect(),
        None => evalsuite::single_channel_masks(mcfg.groups),
    };
    let report = evalsuite::mask_importance(&params, &mcfg, &test, &masks)?;
    let rows: Vec<MaskCsvRow> = report
        .masks
        .iter()
        .zip(&report.accuracies)
        .enumerate()
        .map(|(i, (m, &accuracy))| MaskCsvRow {
            mask: m.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
            accuracy,
            critical: report.critical.contains(&i),
        })
        .collect();
    write_csv(&out.join("mask.csv"), &rows)?;
    write_json(&out.join("summary.json"), &report)?;
    Ok(())
}
