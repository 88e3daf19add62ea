//! The same k-fold run with and without the block discrepancy term.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::evalsuite::ablate_caba;
use caba_da::mixer::MixerConfig;
use caba_da::splits::kfold_by_subject;
use caba_da::trainer::TrainConfig;

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        seed: 101,
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
    let tcfg = TrainConfig {
        alpha: 0.5,
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 30,
        ..Default::default()
    };
    let plan = kfold_by_subject(&index, 6, 0)?;
    let rep = ablate_caba(&index, &plan, &mcfg, &tcfg, &KernelConfig::default(), 1)?;
    println!("with caba    {:.3}", rep.with_caba.mean_accuracy);
    println!("without caba {:.3}", rep.without_caba.mean_accuracy);
    println!("delta        {:+.3}", rep.delta);
    Ok(())
}
