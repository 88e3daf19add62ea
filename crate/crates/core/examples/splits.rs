//! The four split protocols and a cross-subject fold plan.

use caba_da::dataframe::{synth_generate, SynthConfig};
use caba_da::splits::{kfold_by_subject, split_by_axis, Axis, SplitSpec};

fn main() -> caba_da::Result<()> {
    let index = synth_generate(&SynthConfig {
        sessions_per_subject: 3,
        ..Default::default()
    })?;
    for axis in Axis::ALL {
        let split = split_by_axis(&index, &SplitSpec::new(axis, 1.0 / 3.0, 0))?;
        println!(
            "split-by-{axis:<8} train {:>4}  test {:>4}  held out {:?}",
            split.train.len(),
            split.test.len(),
            &split.held_out[..split.held_out.len().min(4)]
        );
    }

    let plan = kfold_by_subject(&index, 3, 0)?;
    for f in 0..plan.k {
        let (train, test) = plan.partition(&index, f);
        println!("fold {f}: test subjects {:?}, {} train windows", test.subjects(), train.len());
    }
    Ok(())
}
