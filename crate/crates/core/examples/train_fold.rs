//! Train one model with CABA-DA on a leave-subjects-out split and follow
//! the loss components epoch by epoch.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::evalsuite::{evaluate, validation_carve};
use caba_da::mixer::MixerConfig;
use caba_da::splits::{split_by_axis, Axis, SplitSpec};
use caba_da::trainer::{train_fold, DaMode, TrainConfig};

fn main() -> caba_da::Result<()> {
    env_logger::init();
    let index = synth_generate(&SynthConfig {
        seed: 3,
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
        max_epochs: 40,
        patience: 15,
        da_mode: DaMode::Block,
        ..Default::default()
    };
    let split = split_by_axis(&index, &SplitSpec::new(Axis::Subject, 1.0 / 3.0, 0))?;
    let (train, val) = validation_carve(&split.train, 0)?;
    let out = train_fold(&train, &val, &mcfg, &tcfg, &KernelConfig::default())?;
    println!("epoch   loss      ce     cdd    caba  val_ce val_acc");
    for r in out.history.iter().step_by(5) {
        println!(
            "{:>5} {:>6.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            r.epoch, r.loss, r.ce, r.cdd, r.caba, r.val_ce, r.val_acc
        );
    }
    let test = evaluate(&out.params, &mcfg, &split.test)?;
    println!("best epoch {}, test accuracy {:.3}, confusion {:?}", out.best_epoch, test.accuracy, test.confusion);
    Ok(())
}
