//! Leave-one-subject-out evaluation, CE-only against CABA-DA.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::evalsuite::run_kfold;
use caba_da::mixer::MixerConfig;
use caba_da::splits::kfold_by_subject;
use caba_da::trainer::{DaMode, TrainConfig};

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        seed: 100,
        ..Default::default()
    })?;
    let shape = index.shape();
    let mcfg = MixerConfig {
        seq_len: shape.seq_len,
        groups: shape.groups,
        features_per_group: shape.features_per_group(),
        width: 8,
        layers: 1,
        temporal_hidden: 16,
        channel_hidden: 16,
        classes: 2,
        dropout: 0.0,
    };
    let plan = kfold_by_subject(&index, 6, 0)?;
    let base = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 30,
        ..Default::default()
    };
    for (name, tcfg) in [
        ("ce-only", TrainConfig { alpha: 0.0, da_mode: DaMode::None, ..base.clone() }),
        ("caba-da", TrainConfig { alpha: 0.5, da_mode: DaMode::Block, ..base.clone() }),
    ] {
        let rep = run_kfold(&index, &plan, &mcfg, &tcfg, &KernelConfig::default(), 1)?;
        let per_fold: Vec<String> = rep.folds.iter().map(|f| format!("{:.2}", f.accuracy)).collect();
        let mmd = rep.folds.iter().filter_map(|f| f.block_mmd).sum::<f64>() / rep.folds.len() as f64;
        println!("{name}: mean accuracy {:.3} [{}], held-out block MMD {mmd:.3}", rep.mean_accuracy, per_fold.join(" "));
    }
    Ok(())
}
