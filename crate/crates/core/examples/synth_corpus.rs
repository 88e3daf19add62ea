//! Generate a synthetic block-designed corpus, check its hierarchy and
//! write it as a manifest directory.
//!
//!     cargo run --example synth_corpus -- /tmp/caba-data

use caba_da::dataframe::{load_manifest, synth_generate, validate_dataset, write_manifest, SynthConfig};

fn main() -> caba_da::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synth-corpus".into());
    let cfg = SynthConfig {
        subjects: 4,
        sessions_per_subject: 3,
        blocks_per_session: 3,
        trials_per_block: 20,
        seed: 11,
        ..Default::default()
    };
    let index = synth_generate(&cfg)?;
    let report = validate_dataset(&index);
    println!("{} windows of shape {:?}", report.samples, index.shape().as_array());
    for (subject, counts) in &report.class_counts_per_subject {
        println!("subject {subject}: trials per class {counts:?}");
    }
    assert!(report.passes(), "{:?}", report.violations);

    write_manifest(&index, &out)?;
    let back = load_manifest(&out)?;
    assert_eq!(back, index);
    println!("wrote and re-read {out}");
    Ok(())
}
