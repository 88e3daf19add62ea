//! Accuracy and train/test Wasserstein distance when the same corpus is
//! split by trial, block, session and subject.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::evalsuite::{default_scenarios, split_scenario_table, WdConfig, WdOn};
use caba_da::mixer::MixerConfig;
use caba_da::trainer::TrainConfig;

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        sessions_per_subject: 3,
        seed: 102,
        ..Default::default()
    })?;
    let shape = index.shape();
    let mcfg = MixerConfig {
        seq_len: shape.seq_len,
        groups: shape.groups,
        features_per_group: shape.features_per_group(),
        width: 16,
        layers: 1,
        temporal_hidden: 16,
        channel_hidden: 16,
        classes: 2,
        dropout: 0.0,
    };
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 30,
        ..Default::default()
    };
    for on in [WdOn::Raw, WdOn::Features] {
        let wd = WdConfig { on, ..Default::default() };
        println!("WD on {on:?}");
        for r in split_scenario_table(&index, &mcfg, &tcfg, &default_scenarios(0), &wd, 1)? {
            println!("  {:<17} acc {:.3}  wd {:.3}", r.scenario, r.accuracy, r.wd);
        }
    }
    Ok(())
}
