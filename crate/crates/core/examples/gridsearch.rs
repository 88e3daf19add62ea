//! Grid search over learning rate, dropout and alpha by k-fold accuracy.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::mixer::MixerConfig;
use caba_da::splits::kfold_by_subject;
use caba_da::trainer::{grid_search, GridSpace, TrainConfig};

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        subjects: 4,
        shape: [16, 4, 2],
        ..Default::default()
    })?;
    let mcfg = MixerConfig {
        seq_len: 16,
        groups: 2,
        features_per_group: 2,
        width: 8,
        layers: 1,
        temporal_hidden: 16,
        channel_hidden: 16,
        classes: 2,
        dropout: 0.0,
    };
    let plan = kfold_by_subject(&index, 2, 0)?;
    let base = TrainConfig {
        max_epochs: 20,
        patience: 10,
        ..Default::default()
    };
    let space = GridSpace {
        learning_rates: vec![1e-3, 1e-2],
        dropouts: vec![0.0, 0.25],
        alphas: vec![0.5, 1.0],
    };
    let rep = grid_search(&index, &plan, &mcfg, &base, &KernelConfig::default(), &space, 0)?;
    for r in &rep.rows {
        println!("lr {:<6} dropout {:<4} alpha {:<3} -> {:?}", r.learning_rate, r.dropout, r.alpha, r.mean_accuracy);
    }
    println!(
        "best: lr {} dropout {} alpha {} ({:.3})",
        rep.best.learning_rate, rep.best.dropout, rep.best.alpha, rep.best_accuracy
    );
    println!("alpha curve {:?}", rep.alpha_curve);
    Ok(())
}
