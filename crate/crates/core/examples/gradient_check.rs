//! Finite-difference check of the full CE + alpha (CDD + CABA) gradient.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::discrepancy::KernelConfig;
use caba_da::mixer::{init_params, MixerConfig};
use caba_da::trainer::{finite_diff_check, Assignment, TrainConfig};

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        subjects: 2,
        sessions_per_subject: 1,
        blocks_per_session: 2,
        trials_per_block: 2,
        shape: [8, 4, 2],
        ..Default::default()
    })?;
    let mcfg = MixerConfig {
        seq_len: 8,
        groups: 2,
        features_per_group: 2,
        width: 4,
        layers: 1,
        temporal_hidden: 8,
        channel_hidden: 8,
        classes: 2,
        dropout: 0.0,
    };
    let batch = index.batch();
    let assignment = Assignment::by_subject(&batch);
    for alpha in [0.0, 1.0] {
        let tcfg = TrainConfig {
            alpha,
            ..Default::default()
        };
        let r = finite_diff_check(
            &init_params(&mcfg, 1),
            &mcfg,
            &tcfg,
            &KernelConfig::default(),
            &batch,
            &assignment,
            1e-4,
        )?;
        println!("alpha {alpha}: {} parameters, max relative error {:.2e}", r.checked, r.max_rel_error);
    }
    Ok(())
}
