//! Train/test partitions along one axis of the experiment hierarchy, and
//! k-fold cross-subject plans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataframe::{DatasetIndex, DomainKey};
use crate::error::{Error, Result};

const MAX_STRATIFY_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Trial,
    Block,
    Session,
    Subject,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Trial, Axis::Block, Axis::Session, Axis::Subject];

    /// Length of the key prefix that identifies one value of this axis.
    /// Blocks are nested in sessions, sessions in subjects.
    fn depth(self) -> usize {
        match self {
            Axis::Subject => 1,
            Axis::Session => 2,
            Axis::Block => 3,
            Axis::Trial => 4,
        }
    }

    /// Identity of `key` along this axis (the key prefix down to this level).
    pub fn value_of(self, key: &DomainKey) -> Vec<u32> {
        let full = [key.subject, key.session, key.block, key.trial];
        full[..self.depth()].to_vec()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Trial => "trial",
            Axis::Block => "block",
            Axis::Session => "session",
            Axis::Subject => "subject",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trial" => Ok(Axis::Trial),
            "block" => Ok(Axis::Block),
            "session" => Ok(Axis::Session),
            "subject" => Ok(Axis::Subject),
            other => Err(Error::Config(format!(
                "split axis must be one of trial|block|session|subject, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub axis: Axis,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    1.0 / 3.0
}

impl Default for SplitSpec {
    /// A third of the subjects held out.
    fn default() -> Self {
        Self::new(Axis::Subject, default_test_fraction(), 0)
    }
}

impl SplitSpec {
    pub fn new(axis: Axis, test_fraction: f64, seed: u64) -> Self {
        Self {
            axis,
            test_fraction,
            seed,
        }
    }
}

/// A realized partition plus the axis values that were held out.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    /// Held-out axis values as key prefixes, e.g. `[subject, session]`.
    pub held_out: Vec<Vec<u32>>,
    /// Attempt number (0-based) that produced a class-complete train set.
    pub attempt: u64,
}

/// Holds out whole axis values. The held-out values are drawn within each
/// parent group: one or more sessions per subject, blocks per
/// (subject, session), trials per block; whole subjects for
/// `Axis::Subject`. Every window of a held-out trial goes to test.
pub fn split_by_axis(index: &DatasetIndex, spec: &SplitSpec) -> Result<Split> {
    if index.is_empty() {
        return Err(Error::Split("cannot split an empty dataset".into()));
    }
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }

    // parent prefix -> distinct child values along the axis
    let depth = spec.axis.depth();
    let mut groups: BTreeMap<Vec<u32>, BTreeSet<Vec<u32>>> = BTreeMap::new();
    for s in index.samples() {
        let value = spec.axis.value_of(&s.key);
        groups
            .entry(value[..depth - 1].to_vec())
            .or_default()
            .insert(value);
    }
    if groups.values().all(|v| v.len() < 2) {
        return Err(Error::Split(format!(
            "axis {} has a single distinct value in every group; nothing to hold out",
            spec.axis
        )));
    }

    for attempt in 0..MAX_STRATIFY_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt));
        let mut held_out = BTreeSet::new();
        for values in groups.values() {
            let n = values.len();
            if n < 2 {
                continue;
            }
            let take = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut v: Vec<&Vec<u32>> = values.iter().collect();
            v.shuffle(&mut rng);
            held_out.extend(v.into_iter().take(take).cloned());
        }
        let is_test = |k: &DomainKey| held_out.contains(&spec.axis.value_of(k));
        let train = index.filter(|s| !is_test(&s.key));
        if train.class_counts().iter().all(|&c| c > 0) {
            let test = index.filter(|s| is_test(&s.key));
            return Ok(Split {
                train,
                test,
                held_out: held_out.into_iter().collect(),
                attempt,
            });
        }
    }
    Err(Error::Split(format!(
        "no {} split with every class in train after {MAX_STRATIFY_ATTEMPTS} attempts",
        spec.axis
    )))
}

/// Disjoint subject sets covering every subject of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<u32>>,
}

impl FoldPlan {
    /// Checks disjointness and that the folds cover exactly `index`'s subjects.
    pub fn validate_for(&self, index: &DatasetIndex) -> Result<()> {
        if self.k != self.folds.len() || self.k == 0 {
            return Err(Error::Split(format!(
                "fold plan declares k={} but lists {} folds",
                self.k,
                self.folds.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for s in self.folds.iter().flatten() {
            if !seen.insert(*s) {
                return Err(Error::Split(format!("subject {s} appears in two folds")));
            }
        }
        let subjects: BTreeSet<u32> = index.subjects().into_iter().collect();
        if seen != subjects {
            return Err(Error::Split(
                "fold plan subjects do not match the dataset's subjects".into(),
            ));
        }
        Ok(())
    }

    /// `(train, test)` for fold `fold`: test holds that fold's subjects.
    pub fn partition(&self, index: &DatasetIndex, fold: usize) -> (DatasetIndex, DatasetIndex) {
        let held: BTreeSet<u32> = self.folds[fold].iter().copied().collect();
        (
            index.filter(|s| !held.contains(&s.key.subject)),
            index.filter(|s| held.contains(&s.key.subject)),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("fold file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("fold plan serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Shuffles subjects with `seed` and deals them round-robin into `k` folds,
/// so fold sizes differ by at most one.
pub fn kfold_by_subject(index: &DatasetIndex, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects = index.subjects();
    if k < 2 {
        return Err(Error::Split(format!(
            "k-fold needs k >= 2 to hold anything out, got {k}"
        )));
    }
    if k > subjects.len() {
        return Err(Error::Split(format!(
            "k={k} exceeds the {} available subjects",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, s) in subjects.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataframe::{synth_generate, SynthConfig};

    fn corpus(subjects: usize, sessions: usize, blocks: usize, trials: usize) -> DatasetIndex {
        synth_generate(&SynthConfig {
            subjects,
            sessions_per_subject: sessions,
            blocks_per_session: blocks,
            trials_per_block: trials,
            shape: [4, 2, 1],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn session_split_holds_out_one_session_per_subject() {
        let index = corpus(3, 3, 2, 4);
        let split = split_by_axis(&index, &SplitSpec::new(Axis::Session, 1.0 / 3.0, 5)).unwrap();
        for subject in 0..3 {
            let sessions: BTreeSet<u32> = split
                .test
                .samples()
                .iter()
                .filter(|s| s.key.subject == subject)
                .map(|s| s.key.session)
                .collect();
            assert_eq!(sessions.len(), 1);
            let session = *sessions.iter().next().unwrap();
            let total = index
                .samples()
                .iter()
                .filter(|s| s.key.subject == subject && s.key.session == session)
                .count();
            let in_test = split
                .test
                .samples()
                .iter()
                .filter(|s| s.key.subject == subject)
                .count();
            assert_eq!(total, in_test);
        }
    }

    #[test]
    fn block_split_membership_scan() {
        let index = corpus(2, 2, 3, 4);
        let split = split_by_axis(&index, &SplitSpec::new(Axis::Block, 1.0 / 3.0, 1)).unwrap();
        let mut test_blocks: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
        for s in split.test.samples() {
            test_blocks
                .entry((s.key.subject, s.key.session))
                .or_default()
                .insert(s.key.block);
        }
        assert_eq!(test_blocks.len(), 4);
        for ((subj, sess), blocks) in &test_blocks {
            assert_eq!(blocks.len(), 1);
            let b = *blocks.iter().next().unwrap();
            // the whole block is in test and none of it in train
            assert!(split
                .train
                .samples()
                .iter()
                .all(|s| !(s.key.subject == *subj && s.key.session == *sess && s.key.block == b)));
        }
        assert_eq!(split.train.len() + split.test.len(), index.len());
    }

    #[test]
    fn degenerate_trial_axis_errors() {
        let index = corpus(2, 1, 2, 1);
        assert!(split_by_axis(&index, &SplitSpec::new(Axis::Trial, 0.5, 0)).is_err());
    }

    #[test]
    fn stratification_redraws_then_errors() {
        // each subject holds trial 0 (class 0) and trial 1 (class 1)
        let index = corpus(2, 1, 1, 2);
        // class 1 only in subject 1: holding out subject 1 is redrawn
        let skewed = index.filter(|s| s.label == 0 || s.key.subject == 1);
        let split = split_by_axis(&skewed, &SplitSpec::new(Axis::Subject, 0.5, 0)).unwrap();
        assert_eq!(split.held_out, vec![vec![0]]);

        // class 1 only in subject 0 and class 0 only in subject 1
        let disjoint = index.filter(|s| (s.label == 1) == (s.key.subject == 0));
        assert!(split_by_axis(&disjoint, &SplitSpec::new(Axis::Subject, 0.5, 0)).is_err());
    }

    #[test]
    fn kfold_shapes() {
        let index = corpus(10, 1, 1, 2);
        let plan = kfold_by_subject(&index, 10, 3).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 1));
        plan.validate_for(&index).unwrap();
        assert!(kfold_by_subject(&index, 1, 3).is_err());
        assert!(kfold_by_subject(&index, 11, 3).is_err());

        let index = corpus(7, 1, 1, 2);
        let plan = kfold_by_subject(&index, 3, 9).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(plan, kfold_by_subject(&index, 3, 9).unwrap());
    }

    #[test]
    fn fold_plan_round_trips_through_json() {
        let index = corpus(4, 1, 1, 2);
        let plan = kfold_by_subject(&index, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("folds.json");
        plan.save(&p).unwrap();
        assert_eq!(FoldPlan::load(&p).unwrap(), plan);
        let bad = FoldPlan {
            k: 2,
            folds: vec![vec![0, 1], vec![1, 2, 3]],
        };
        assert!(bad.validate_for(&index).is_err());
    }
}
