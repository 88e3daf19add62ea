//! MMD, class-aware CDD and the block-aware CABA term on hand-made
//! features, with their gradients.

use caba_da::dataframe::DomainKey;
use caba_da::discrepancy::{caba, cdd, mmd2, FeatureBatch, KernelConfig, Pairing};

fn main() -> caba_da::Result<()> {
    // two subjects; subject 1's features are shifted by +1
    let rows = [
        ([0.0, 0.1], 0, DomainKey::new(0, 0, 0, 0)),
        ([1.0, 0.9], 1, DomainKey::new(0, 0, 0, 1)),
        ([0.2, 0.0], 0, DomainKey::new(0, 0, 1, 2)),
        ([1.1, 1.2], 1, DomainKey::new(0, 0, 1, 3)),
        ([1.0, 1.1], 0, DomainKey::new(1, 0, 0, 0)),
        ([2.0, 2.1], 1, DomainKey::new(1, 0, 0, 1)),
    ];
    let fb = |range: std::ops::Range<usize>| {
        FeatureBatch::new(
            rows[range.clone()].iter().flat_map(|r| r.0).collect(),
            2,
            rows[range.clone()].iter().map(|r| r.1).collect(),
            rows[range].iter().map(|r| r.2).collect(),
        )
    };
    let (source, target, all) = (fb(0..4)?, fb(4..6)?, fb(0..6)?);

    let kernel = KernelConfig {
        multi_scale: true,
        ..Default::default()
    }
    .resolve(&all.features, all.dim)?;
    println!("median-heuristic bandwidths {:?}", kernel.sigmas());

    let m = mmd2(&source, &target, &kernel)?;
    println!("mmd2 {:.5}  d/d(source row 0) {:?}", m.value, &m.grad_a[..2]);

    let c = cdd(&source, &target, 2, &kernel)?;
    println!(
        "cdd {:.5} = intra {:.5} - inter {:.5} ({} skipped pairs)",
        c.value,
        c.intra,
        c.inter,
        c.skipped.len()
    );

    let b = caba(&all, &kernel, Pairing::Block)?;
    println!("caba {:.5} over {} same-class block pairs", b.value, b.pairs);
    Ok(())
}
