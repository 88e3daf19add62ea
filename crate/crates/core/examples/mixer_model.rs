//! Build the MLPMixer, count its multiply-accumulates, run a forward and
//! backward pass and round-trip a checkpoint.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::mixer::{self, count_macs, init_params, MixerConfig, Mode};

fn main() -> caba_da::Result<()> {
    let tufts = MixerConfig::tufts();
    println!("tufts-scale model: {} parameters, {} MACs per window", tufts.param_count(), count_macs(&tufts));

    let index = synth_generate(&SynthConfig::default())?;
    let shape = index.shape();
    let cfg = MixerConfig {
        seq_len: shape.seq_len,
        groups: shape.groups,
        features_per_group: shape.features_per_group(),
        width: 8,
        layers: 2,
        temporal_hidden: 16,
        channel_hidden: 16,
        classes: index.class_count(),
        dropout: 0.1,
    };
    let params = init_params(&cfg, 0);
    let batch = index.batch_of(&[0, 1, 2, 3]);
    let trace = mixer::forward(&params, &cfg, &batch, Mode::Train, 0)?;
    println!("logits of window 0: {:?}", trace.logits_of(0));

    let d_logits = vec![0.25; trace.logits.len()];
    let grads = mixer::backward(&trace, &params, &cfg, &d_logits, &[])?;
    for (name, t) in grads.params.tensors().iter().take(3) {
        let norm = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("|d {name}| = {norm:.4}");
    }

    let path = std::env::temp_dir().join("caba-example.ckpt");
    mixer::save_checkpoint(&path, &cfg, &params)?;
    let (cfg2, params2) = mixer::load_checkpoint(&path)?;
    assert!(cfg2 == cfg && params2 == params);
    println!("checkpoint round-trip ok ({})", path.display());
    Ok(())
}
