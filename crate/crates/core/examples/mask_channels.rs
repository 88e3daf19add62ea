//! Channel importance by masking one spatial channel at a time.

use std::collections::BTreeSet;

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::evalsuite::{majority_rate, mask_importance, single_channel_masks, validation_carve};
use caba_da::mixer::MixerConfig;
use caba_da::splits::{split_by_axis, Axis, SplitSpec};
use caba_da::trainer::{train_fold, TrainConfig};

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        shape: [16, 16, 4],
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
    let split = split_by_axis(&index, &SplitSpec::new(Axis::Subject, 1.0 / 3.0, 0))?;
    let (train, val) = validation_carve(&split.train, 0)?;
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 30,
        ..Default::default()
    };
    let fit = train_fold(&train, &val, &mcfg, &tcfg, &KernelConfig::default())?;

    let rep = mask_importance(&fit.params, &mcfg, &split.test, &single_channel_masks(mcfg.groups))?;
    println!("unmasked accuracy {:.3}", rep.unmasked_accuracy);
    for (mask, acc) in rep.masks.iter().zip(&rep.accuracies) {
        println!("  mask {mask:?}: {acc:.3}");
    }
    println!("95% band [{:.3}, {:.3}], critical {:?}", rep.ci_lower, rep.ci_upper, rep.critical);

    let everything: BTreeSet<usize> = (0..mcfg.groups).collect();
    let blind = mask_importance(&fit.params, &mcfg, &split.test, &[everything])?;
    println!(
        "all channels masked: {:.3} (majority rate {:.3})",
        blind.accuracies[0],
        majority_rate(&split.test)
    );
    Ok(())
}
