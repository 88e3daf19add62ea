//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are expected to fail with the reference
//! configuration and do not fail the run; every other failure does.
//! Criterion 9 needs a real corpus and only runs when `CABA_TUFTS_DATA`
//! (dataset directory) and `CABA_TUFTS_FOLDS` (fold file) are set.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use caba_da::cli::{cmd_kfold, ModelSection, RunConfig};
use caba_da::dataframe::{load_manifest, synth_generate, write_manifest, DatasetIndex, DomainKey, SynthConfig};
use caba_da::discrepancy::{caba, cdd, class_domain_discrepancy, mmd2, FeatureBatch, KernelConfig, Pairing};
use caba_da::evalsuite::{
    evaluate, majority_rate, mask_importance, run_kfold, split_scenario_table, validation_carve, KfoldReport, WdConfig,
    WdOn,
};
use caba_da::mixer::{count_macs, init_params, MixerConfig};
use caba_da::splits::{kfold_by_subject, split_by_axis, Axis, FoldPlan, SplitSpec};
use caba_da::trainer::{finite_diff_check, train_fold, Assignment, DaMode, TrainConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNOWN_RED: &[u32] = &[6];
const REPLICATES: u64 = 5;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient correctness", c1_gradients),
        (2, "discrepancy oracles", c2_oracles),
        (3, "estimator identities", c3_identities),
        (4, "synthetic-shift efficacy", c4_efficacy),
        (5, "split-scenario ordering", c5_split_ordering),
        (6, "MAC count", c6_macs),
        (7, "determinism", c7_determinism),
        (8, "masking identity", c8_masking),
        (9, "real-corpus reproduction", c9_tufts),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut unexpected = 0;
    for (id, name, run) in criteria {
        if let Some(f) = &filter {
            if !name.contains(f.as_str()) && f != &id.to_string() {
                continue;
            }
        }
        let t = Instant::now();
        let v = run();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Skip(d) => ("SKIP", d),
            Verdict::Fail(d) if KNOWN_RED.contains(&id) => ("FAIL (expected)", d),
            Verdict::Fail(d) => {
                unexpected += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} [{name}]: {tag}: {detail} ({secs:.1}s)");
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn c1_gradients() -> Verdict {
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
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let index = synth_generate(&SynthConfig {
            subjects: 2,
            sessions_per_subject: 1,
            blocks_per_session: 2,
            trials_per_block: 2,
            shape: [8, 4, 2],
            seed,
            ..Default::default()
        })
        .unwrap();
        let batch = index.batch();
        let assignment = Assignment::by_subject(&batch);
        let tcfg = TrainConfig {
            alpha: 1.0,
            seed,
            ..Default::default()
        };
        let params = init_params(&mcfg, seed);
        let r = finite_diff_check(&params, &mcfg, &tcfg, &KernelConfig::default(), &batch, &assignment, 1e-4).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    verdict(worst < 1e-6, format!("max relative error {worst:.2e} over 10 seeds"))
}

fn c2_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut validity_mismatch = 0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=5);
        let classes = rng.random_range(1..=3);
        let kernel = random_kernel(&mut rng);
        let (na, nb) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_batch(&mut rng, na, dim, classes);
        let b = random_batch(&mut rng, nb, dim, classes);
        let mut diff = |got: f64, want: f64| worst = worst.max((got - want).abs());

        diff(mmd2(&a, &b, &kernel).unwrap().value, mmd_naive(&rows(&a), &rows(&b), &kernel));
        for c1 in 0..classes {
            for c2 in 0..classes {
                match (class_domain_discrepancy(&a, &b, c1, c2, &kernel), cdd_term_naive(&a, &b, c1, c2, &kernel)) {
                    (Ok(g), Some(w)) => diff(g.value, w),
                    (Err(_), None) => {}
                    _ => validity_mismatch += 1,
                }
            }
        }
        match (cdd(&a, &b, classes, &kernel), cdd_naive(&a, &b, classes, &kernel)) {
            (Ok(g), Some(w)) => diff(g.value, w),
            (Err(_), None) => {}
            _ => validity_mismatch += 1,
        }
        let n = rng.random_range(1..=16);
        let batch = random_batch(&mut rng, n, dim, classes);
        diff(caba(&batch, &kernel, Pairing::Block).unwrap().value, caba_naive(&batch, &kernel));
    }
    verdict(
        worst < 1e-12 && validity_mismatch == 0,
        format!("max |impl - oracle| {worst:.2e} over 100 batches, {validity_mismatch} validity mismatches"),
    )
}

fn c3_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut negative, mut cdd_mismatch, mut caba_mismatch, mut cdd_cases) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let dim = rng.random_range(1..=5);
        let kernel = random_kernel(&mut rng);
        let (na, nb) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let a = random_batch(&mut rng, na, dim, 3);
        let b = random_batch(&mut rng, nb, dim, 3);
        if mmd2(&a, &b, &kernel).unwrap().value < 0.0 {
            negative += 1;
        }

        let class = rng.random_range(0..3);
        let of = |x: &FeatureBatch| -> Vec<usize> { (0..x.len()).filter(|&i| x.labels[i] == class).collect() };
        let (ia, ib) = (of(&a), of(&b));
        if !ia.is_empty() && !ib.is_empty() {
            cdd_cases += 1;
            let got = class_domain_discrepancy(&a, &b, class, class, &kernel).unwrap().value;
            if got != mmd2(&a.subset(&ia), &b.subset(&ib), &kernel).unwrap().value {
                cdd_mismatch += 1;
            }
        }

        let mut joint = a.features.clone();
        joint.extend_from_slice(&b.features);
        let keys = (0..na + nb)
            .map(|i| DomainKey::new(0, 0, u32::from(i >= na), i as u32))
            .collect();
        let single = FeatureBatch::new(joint, dim, vec![0; na + nb], keys).unwrap();
        let one = caba(&single, &kernel, Pairing::Block).unwrap();
        let plain = mmd2(&a, &b, &kernel).unwrap().value;
        if one.pairs != 1 || one.value != plain {
            caba_mismatch += 1;
        }
    }
    verdict(
        negative == 0 && cdd_mismatch == 0 && caba_mismatch == 0,
        format!(
            "1000 cases: {negative} negative mmd2, {cdd_mismatch}/{cdd_cases} same-class mismatches, \
             {caba_mismatch} single-pair mismatches"
        ),
    )
}

fn reference_corpus(replicate: u64) -> DatasetIndex {
    synth_generate(&SynthConfig {
        subjects: 6,
        sessions_per_subject: 2,
        blocks_per_session: 3,
        trials_per_block: 12,
        block_shift: 1.0,
        class_signal: 1.0,
        noise_std: 0.5,
        seed: 100 + replicate,
        ..Default::default()
    })
    .unwrap()
}

fn small_mixer(index: &DatasetIndex, width: usize) -> MixerConfig {
    ModelSection {
        width,
        layers: 1,
        temporal_hidden: 16,
        channel_hidden: 16,
    }
    .for_data(index, 0.0)
    .unwrap()
}

fn reference_training(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 100,
        patience: 30,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

fn c4_efficacy() -> Verdict {
    let kernel = KernelConfig::default();
    let (mut acc_wins, mut mmd_wins) = (0, 0);
    let mut lines = Vec::new();
    for r in 0..REPLICATES {
        let index = reference_corpus(r);
        let mcfg = small_mixer(&index, 8);
        let plan = kfold_by_subject(&index, 6, r).unwrap();
        let ce = TrainConfig {
            alpha: 0.0,
            da_mode: DaMode::None,
            ..reference_training(r)
        };
        let da = TrainConfig {
            alpha: 0.5,
            da_mode: DaMode::Block,
            ..reference_training(r)
        };
        let a = run_kfold(&index, &plan, &mcfg, &ce, &kernel, 1).unwrap();
        let b = run_kfold(&index, &plan, &mcfg, &da, &kernel, 1).unwrap();
        let mmd = |rep: &KfoldReport| -> f64 {
            rep.folds.iter().map(|f| f.block_mmd.unwrap_or(f64::NAN)).sum::<f64>() / rep.folds.len() as f64
        };
        let (ma, mb) = (mmd(&a), mmd(&b));
        acc_wins += usize::from(b.mean_accuracy >= a.mean_accuracy);
        mmd_wins += usize::from(mb < ma);
        lines.push(format!(
            "acc {:.3}->{:.3} mmd {ma:.3}->{mb:.3}",
            a.mean_accuracy, b.mean_accuracy
        ));
    }
    verdict(
        acc_wins >= 4 && mmd_wins == REPLICATES as usize,
        format!(
            "accuracy not below CE-only in {acc_wins}/5, block MMD lower in {mmd_wins}/5 [{}]",
            lines.join("; ")
        ),
    )
}

fn c5_split_ordering() -> Verdict {
    let mut ok = 0;
    let mut lines = Vec::new();
    let wd = WdConfig {
        on: WdOn::Raw,
        ..Default::default()
    };
    for r in 0..REPLICATES {
        let index = reference_corpus(r);
        let mcfg = small_mixer(&index, 16);
        let scenarios = [SplitSpec::new(Axis::Trial, 1.0 / 3.0, r), SplitSpec::new(Axis::Block, 1.0 / 3.0, r)];
        let rows = split_scenario_table(&index, &mcfg, &reference_training(r), &scenarios, &wd, 1).unwrap();
        let (trial, block) = (&rows[0], &rows[1]);
        if trial.accuracy - block.accuracy >= 0.05 && trial.wd < block.wd {
            ok += 1;
        }
        lines.push(format!(
            "acc {:.3}/{:.3} wd {:.3}/{:.3}",
            trial.accuracy, block.accuracy, trial.wd, block.wd
        ));
    }
    verdict(
        ok >= 4,
        format!("ordering holds in {ok}/5 (trial/block) [{}]", lines.join("; ")),
    )
}

fn c6_macs() -> Verdict {
    let cfg = MixerConfig::tufts();
    let (t, g, f, c, n, th, ch, m) = (150u64, 2u64, 4u64, 16u64, 4u64, 64u64, 32u64, 2u64);
    let by_hand = t * g * f * c + n * (2 * c * t * th + 2 * t * c * ch) + c * m;
    let got = count_macs(&cfg);
    let reference = 2_370_000.0;
    let rel = (got as f64 - reference) / reference;
    verdict(
        got == by_hand && rel.abs() <= 0.2,
        format!(
            "count_macs {got}, hand derivation {by_hand} ({}), {:+.1}% from the target 2.37M",
            if got == by_hand { "match" } else { "mismatch" },
            100.0 * rel
        ),
    )
}

fn c7_determinism() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let index = synth_generate(&SynthConfig {
        subjects: 3,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    write_manifest(&index, &data).unwrap();
    let run = |name: &str| -> PathBuf {
        let out = tmp.path().join(name);
        let cfg = RunConfig {
            data: Some(data.clone()),
            out: Some(out.clone()),
            jobs: 1,
            model: ModelSection {
                width: 8,
                layers: 1,
                temporal_hidden: 16,
                channel_hidden: 16,
            },
            train: TrainConfig {
                max_epochs: 8,
                seed: 7,
                ..Default::default()
            },
            ..Default::default()
        };
        cmd_kfold(&cfg).unwrap();
        out
    };
    let (a, b) = (run("first"), run("second"));
    let same: Vec<&str> = ["summary.json", "history.jsonl", "folds.csv"]
        .into_iter()
        .filter(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap())
        .collect();
    verdict(same.len() == 3, format!("byte-identical: {}", same.join(", ")))
}

fn c8_masking() -> Verdict {
    let index = synth_generate(&SynthConfig { seed: 8, ..Default::default() }).unwrap();
    let mcfg = small_mixer(&index, 8);
    let split = split_by_axis(&index, &SplitSpec::new(Axis::Subject, 1.0 / 3.0, 8)).unwrap();
    let (train, val) = validation_carve(&split.train, 8).unwrap();
    let fit = train_fold(&train, &val, &mcfg, &reference_training(8), &KernelConfig::default()).unwrap();
    let plain = evaluate(&fit.params, &mcfg, &split.test).unwrap().accuracy;
    let all: BTreeSet<usize> = (0..mcfg.groups).collect();
    let report = mask_importance(&fit.params, &mcfg, &split.test, &[BTreeSet::new(), all]).unwrap();
    let majority = majority_rate(&split.test);
    let identity = report.accuracies[0].to_bits() == plain.to_bits();
    let degraded = (report.accuracies[1] - majority).abs() <= 0.03;
    verdict(
        identity && degraded,
        format!(
            "empty mask {:.4} vs evaluate {plain:.4} ({}), all channels masked {:.4} vs majority rate {majority:.4}",
            report.accuracies[0],
            if identity { "bit-exact" } else { "differs" },
            report.accuracies[1]
        ),
    )
}

fn c9_tufts() -> Verdict {
    let (Ok(data), Ok(folds)) = (std::env::var("CABA_TUFTS_DATA"), std::env::var("CABA_TUFTS_FOLDS")) else {
        return Verdict::Skip("set CABA_TUFTS_DATA and CABA_TUFTS_FOLDS to run".into());
    };
    let env_f64 = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let index = match load_manifest(&data) {
        Ok(i) => i,
        Err(e) => return Verdict::Fail(format!("cannot load {data}: {e}")),
    };
    let plan = match FoldPlan::load(&folds) {
        Ok(p) => p,
        Err(e) => return Verdict::Fail(format!("cannot load {folds}: {e}")),
    };
    let mcfg = MixerConfig {
        classes: index.class_count(),
        ..MixerConfig::tufts()
    };
    let tcfg = TrainConfig {
        alpha: env_f64("CABA_TUFTS_ALPHA", 1.0),
        learning_rate: env_f64("CABA_TUFTS_LR", 1e-3),
        dropout: env_f64("CABA_TUFTS_DROPOUT", 0.0),
        da_mode: DaMode::Block,
        ..Default::default()
    };
    match run_kfold(&index, &plan, &mcfg, &tcfg, &KernelConfig::default(), 0) {
        Ok(rep) => verdict(
            (rep.mean_accuracy - 0.6791).abs() <= 0.02,
            format!("mean accuracy {:.4} over {} folds, target 0.6791 +- 0.02", rep.mean_accuracy, plan.k),
        ),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}
