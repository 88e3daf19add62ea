//! Training: the combined objective, the contrastive mini-batch sampler,
//! Adam, early stopping and grid search.
//!
//! The loss of one mini-batch is
//! `ce + alpha * (cdd + caba)`, where `cdd` contrasts a "source" and a
//! "target" subject drawn by the sampler and `caba` pulls same-class
//! features of different blocks (or sessions) of one subject together.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataframe::{Batch, DatasetIndex};
use crate::discrepancy::{caba, cdd, FeatureBatch, Kernel, KernelConfig, Pairing};
use crate::error::{Error, Result};
use crate::evalsuite;
use crate::mixer::{self, argmax, ForwardTrace, MixerConfig, MixerParams, Mode};
use crate::splits::FoldPlan;

/// Denominator floor of the relative error in [`finite_diff_check`].
pub const FD_REL_FLOOR: f64 = 1e-3;

/// Which domain structure the discrepancy terms exploit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaMode {
    /// Cross-entropy only.
    None,
    /// CDD across subjects; no block term.
    Subject,
    /// CDD across subjects, CABA across sessions of a subject.
    Session,
    /// CDD across subjects, CABA across blocks of a subject's session.
    #[default]
    Block,
}

impl DaMode {
    fn pairing(self) -> Option<Pairing> {
        match self {
            DaMode::Session => Some(Pairing::Session),
            DaMode::Block => Some(Pairing::Block),
            DaMode::None | DaMode::Subject => None,
        }
    }
}

impl fmt::Display for DaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DaMode::None => "none",
            DaMode::Subject => "subject",
            DaMode::Session => "session",
            DaMode::Block => "block",
        })
    }
}

impl FromStr for DaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DaMode::None),
            "subject" => Ok(DaMode::Subject),
            "session" => Ok(DaMode::Session),
            "block" => Ok(DaMode::Block),
            other => Err(Error::Config(format!(
                "train.da_mode must be none|subject|session|block, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the discrepancy terms.
    pub alpha: f64,
    pub learning_rate: f64,
    /// Overrides the model config's dropout during training.
    pub dropout: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub da_mode: DaMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            learning_rate: 1e-3,
            dropout: 0.0,
            batch_size: 32,
            patience: 50,
            max_epochs: 1000,
            adam: AdamConfig::default(),
            da_mode: DaMode::Block,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("train.alpha must be a non-negative real, got {}", self.alpha));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("train.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.patience == 0 {
            return bad("train.patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("train.max_epochs must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("train.adam needs beta1, beta2 in [0, 1) and a positive epsilon".into());
        }
        Ok(())
    }

    /// Whether the discrepancy terms enter the loss at all.
    pub fn uses_discrepancy(&self) -> bool {
        self.da_mode != DaMode::None
    }
}

// ---------------------------------------------------------------------------
// Sampler

/// Part a batch row plays in the CDD term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Pad,
}

/// One class quota of a batch composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Quota {
    pub role: Role,
    pub class: usize,
    pub subject: u32,
    /// Set when the quota was drawn from a single session.
    pub session: Option<u32>,
    /// Blocks the quota was drawn from.
    pub blocks: Vec<u32>,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SamplerPlan {
    pub quotas: Vec<Quota>,
    /// Uniform rows appended after the quotas.
    pub padding: usize,
}

impl SamplerPlan {
    pub fn total(&self) -> usize {
        self.quotas.iter().map(|q| q.count).sum::<usize>() + self.padding
    }
}

/// How the rows of a sampled batch are used by the objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub roles: Vec<Role>,
    pub source_subject: Option<u32>,
    pub target_subject: Option<u32>,
    pub plan: SamplerPlan,
    /// Set when no contrastive composition was possible and the batch is
    /// uniform.
    pub fallback: bool,
}

impl Assignment {
    /// Rows of the first subject in the batch are source, rows of the
    /// second are target, everything else is padding.
    pub fn by_subject(batch: &Batch) -> Self {
        let mut subjects: Vec<u32> = batch.keys.iter().map(|k| k.subject).collect();
        subjects.sort_unstable();
        subjects.dedup();
        let (src, tgt) = (subjects.first().copied(), subjects.get(1).copied());
        let roles = batch
            .keys
            .iter()
            .map(|k| match (Some(k.subject) == src, Some(k.subject) == tgt) {
                (true, _) => Role::Source,
                (_, true) => Role::Target,
                _ => Role::Pad,
            })
            .collect();
        Self {
            roles,
            source_subject: src,
            target_subject: tgt,
            plan: SamplerPlan::default(),
            fallback: tgt.is_none(),
        }
    }

    fn uniform(n: usize) -> Self {
        Self {
            roles: vec![Role::Pad; n],
            source_subject: None,
            target_subject: None,
            plan: SamplerPlan {
                quotas: Vec::new(),
                padding: n,
            },
            fallback: true,
        }
    }
}

/// Precomputed index of a training set for repeated batch draws.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    index: &'a DatasetIndex,
    batch_size: usize,
    subjects: Vec<u32>,
    /// subject -> class -> rows.
    by_subject_class: BTreeMap<u32, Vec<Vec<usize>>>,
    /// subject -> session -> class -> block -> rows.
    by_session: BTreeMap<u32, BTreeMap<u32, Vec<BTreeMap<u32, Vec<usize>>>>>,
}

impl<'a> Sampler<'a> {
    pub fn new(index: &'a DatasetIndex, batch_size: usize) -> Self {
        let m = index.class_count();
        let mut by_subject_class: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
        let mut by_session: BTreeMap<u32, BTreeMap<u32, Vec<BTreeMap<u32, Vec<usize>>>>> = BTreeMap::new();
        for (i, s) in index.samples().iter().enumerate() {
            let k = s.key;
            by_subject_class.entry(k.subject).or_insert_with(|| vec![Vec::new(); m])[s.label].push(i);
            by_session
                .entry(k.subject)
                .or_default()
                .entry(k.session)
                .or_insert_with(|| vec![BTreeMap::new(); m])[s.label]
                .entry(k.block)
                .or_default()
                .push(i);
        }
        Self {
            index,
            batch_size: batch_size.min(index.len()),
            subjects: by_subject_class.keys().copied().collect(),
            by_subject_class,
            by_session,
        }
    }

    /// Draws the rows of one mini-batch.
    ///
    /// Two distinct subjects are drawn as CDD source and target; each side
    /// gets `batch_size / (2 M)` samples per class (at least one). The
    /// source side takes every class from two blocks of one session,
    /// alternating between them, so same-class samples of distinct blocks
    /// land in the batch. The rest is filled uniformly.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, Assignment) {
        let b = self.batch_size;
        let m = self.index.class_count();
        if self.subjects.len() < 2 {
            let rows = self.uniform_rows(&[], b, rng);
            return (rows, Assignment::uniform(b));
        }
        let picked = rand::seq::index::sample(rng, self.subjects.len(), 2);
        let (src, tgt) = (self.subjects[picked.index(0)], self.subjects[picked.index(1)]);
        let per_class = (b / (2 * m)).max(1);

        let mut rows = Vec::with_capacity(b);
        let mut roles = Vec::with_capacity(b);
        let mut quotas = Vec::new();

        // source: one session, blocks interleaved
        let sessions = &self.by_session[&src];
        let multi_block: Vec<u32> = sessions
            .iter()
            .filter(|(_, classes)| {
                let mut blocks: Vec<u32> = classes.iter().flat_map(|c| c.keys().copied()).collect();
                blocks.sort_unstable();
                blocks.dedup();
                blocks.len() >= 2
            })
            .map(|(s, _)| *s)
            .collect();
        let candidates: Vec<u32> = if multi_block.is_empty() {
            sessions.keys().copied().collect()
        } else {
            multi_block
        };
        let session = candidates[rng.random_range(0..candidates.len())];
        let mut session_blocks: Vec<u32> = sessions[&session]
            .iter()
            .flat_map(|c| c.keys().copied())
            .collect();
        session_blocks.sort_unstable();
        session_blocks.dedup();
        session_blocks.shuffle(rng);
        let pair = &session_blocks[..session_blocks.len().min(2)];
        for class in 0..m {
            let all_blocks = &sessions[&session][class];
            let in_pair: BTreeMap<u32, Vec<usize>> = all_blocks
                .iter()
                .filter(|(b, _)| pair.contains(b))
                .map(|(b, r)| (*b, r.clone()))
                .collect();
            let blocks = if in_pair.len() >= 2 { &in_pair } else { all_blocks };
            if blocks.is_empty() {
                let pool = &self.by_subject_class[&src][class];
                let take = draw_from(pool, per_class, rng);
                if !take.is_empty() {
                    quotas.push(Quota {
                        role: Role::Source,
                        class,
                        subject: src,
                        session: None,
                        blocks: Vec::new(),
                        count: take.len(),
                    });
                }
                roles.extend(std::iter::repeat_n(Role::Source, take.len()));
                rows.extend(take);
                continue;
            }
            let mut order: Vec<(u32, Vec<usize>)> = blocks
                .iter()
                .map(|(blk, members)| {
                    let mut m = members.clone();
                    m.shuffle(rng);
                    (*blk, m)
                })
                .collect();
            order.shuffle(rng);
            let mut take = Vec::with_capacity(per_class);
            let mut used = Vec::new();
            let mut depth = 0;
            while take.len() < per_class {
                let mut any = false;
                for (blk, members) in &order {
                    if take.len() == per_class {
                        break;
                    }
                    if let Some(&r) = members.get(depth) {
                        take.push(r);
                        if !used.contains(blk) {
                            used.push(*blk);
                        }
                        any = true;
                    }
                }
                if !any {
                    break;
                }
                depth += 1;
            }
            used.sort_unstable();
            quotas.push(Quota {
                role: Role::Source,
                class,
                subject: src,
                session: Some(session),
                blocks: used,
                count: take.len(),
            });
            roles.extend(std::iter::repeat_n(Role::Source, take.len()));
            rows.extend(take);
        }

        // target: stratified over classes
        for class in 0..m {
            let pool = &self.by_subject_class[&tgt][class];
            let take = draw_from(pool, per_class, rng);
            if take.is_empty() {
                continue;
            }
            quotas.push(Quota {
                role: Role::Target,
                class,
                subject: tgt,
                session: None,
                blocks: Vec::new(),
                count: take.len(),
            });
            roles.extend(std::iter::repeat_n(Role::Target, take.len()));
            rows.extend(take);
        }
        rows.truncate(b);
        roles.truncate(b);

        let padding = b - rows.len();
        let pad = self.uniform_rows(&rows, padding, rng);
        rows.extend(pad);
        roles.extend(std::iter::repeat_n(Role::Pad, padding));
        (
            rows,
            Assignment {
                roles,
                source_subject: Some(src),
                target_subject: Some(tgt),
                plan: SamplerPlan { quotas, padding },
                fallback: false,
            },
        )
    }

    fn uniform_rows(&self, taken: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut free = vec![true; self.index.len()];
        for &t in taken {
            free[t] = false;
        }
        let mut pool: Vec<usize> = (0..self.index.len()).filter(|&i| free[i]).collect();
        let (head, _) = pool.partial_shuffle(rng, count);
        head.to_vec()
    }
}

fn draw_from(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = count.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// One contrastive mini-batch. Falls back to a uniform batch (flagged in
/// the assignment) when the index has fewer than two subjects.
pub fn sample_minibatch(index: &DatasetIndex, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Batch, Assignment)> {
    if index.is_empty() {
        return Err(Error::Config("cannot sample from an empty index".into()));
    }
    let (rows, assignment) = Sampler::new(index, cfg.batch_size).draw(rng);
    if assignment.fallback {
        log::warn!("fewer than two subjects: falling back to uniform mini-batches");
    }
    Ok((index.batch_of(&rows), assignment))
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub loss: f64,
    pub ce: f64,
    pub cdd: f64,
    pub caba: f64,
}

/// Loss value, its parts and the upstream gradients for [`mixer::backward`].
#[derive(Debug, Clone)]
pub struct Objective {
    pub components: Components,
    pub d_logits: Vec<f64>,
    pub d_pooled: Vec<f64>,
    /// Terms that could not be computed for this batch.
    pub skipped: Vec<&'static str>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for c in 0..classes {
            let p = (row[c] - log_z).exp();
            grad[i * classes + c] = (p - f64::from(u8::from(c == y))) / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// Combined objective on a forward trace. The kernel bandwidth is resolved
/// from the batch's pooled features and differentiated through.
pub fn objective(
    trace: &ForwardTrace,
    batch: &Batch,
    assignment: &Assignment,
    cfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
) -> Result<Objective> {
    if !cfg.uses_discrepancy() {
        return Ok(objective_parts(trace, batch, assignment, cfg, None)?.0);
    }
    let dim = trace.pooled.len() / batch.len().max(1);
    let kernel = kernel_cfg.resolve(&trace.pooled, dim)?;
    let (mut obj, grad_sigma) = objective_parts(trace, batch, assignment, cfg, Some(&kernel))?;
    let back = kernel_cfg.bandwidth_backward(&trace.pooled, dim, &grad_sigma)?;
    for (d, g) in obj.d_pooled.iter_mut().zip(back) {
        *d += g;
    }
    Ok(obj)
}

/// [`objective`] with a kernel fixed by the caller; the bandwidth is then a
/// constant of the loss.
pub fn objective_with_kernel(
    trace: &ForwardTrace,
    batch: &Batch,
    assignment: &Assignment,
    cfg: &TrainConfig,
    kernel: Option<&Kernel>,
) -> Result<Objective> {
    Ok(objective_parts(trace, batch, assignment, cfg, kernel)?.0)
}

/// Objective plus the loss gradient with respect to the kernel bandwidths.
fn objective_parts(
    trace: &ForwardTrace,
    batch: &Batch,
    assignment: &Assignment,
    cfg: &TrainConfig,
    kernel: Option<&Kernel>,
) -> Result<(Objective, Vec<f64>)> {
    let n = batch.len();
    if trace.len() != n || assignment.roles.len() != n {
        return Err(Error::Shape("trace, batch and assignment sizes differ".into()));
    }
    let classes = trace.logits.len() / n.max(1);
    let (ce, d_logits) = cross_entropy(&trace.logits, &batch.labels, classes);
    let dim = trace.pooled.len() / n.max(1);
    let mut d_pooled = vec![0.0; trace.pooled.len()];
    let mut skipped = Vec::new();
    let (mut cdd_v, mut caba_v) = (0.0, 0.0);
    let mut grad_sigma = vec![0.0; kernel.map_or(0, |k| k.sigmas().len())];

    if let (true, Some(kernel)) = (cfg.uses_discrepancy(), kernel) {
        let rows_of = |role: Role| -> Vec<usize> {
            (0..n).filter(|&i| assignment.roles[i] == role).collect()
        };
        let (src, tgt) = (rows_of(Role::Source), rows_of(Role::Target));
        let gather = |rows: &[usize]| -> Result<FeatureBatch> {
            let mut f = Vec::with_capacity(rows.len() * dim);
            for &r in rows {
                f.extend_from_slice(trace.pooled_of(r));
            }
            FeatureBatch::new(
                f,
                dim,
                rows.iter().map(|&r| batch.labels[r]).collect(),
                rows.iter().map(|&r| batch.keys[r]).collect(),
            )
        };

        let cdd_out = if src.is_empty() || tgt.is_empty() {
            Err(Error::Discrepancy("batch has no source/target pair".into()))
        } else {
            gather(&src)
                .and_then(|s| gather(&tgt).map(|t| (s, t)))
                .and_then(|(s, t)| cdd(&s, &t, classes, kernel))
        };
        match cdd_out {
            Ok(out) => {
                cdd_v = out.value;
                for (d, g) in grad_sigma.iter_mut().zip(&out.grad_sigma) {
                    *d += cfg.alpha * g;
                }
                for (k, &r) in src.iter().enumerate() {
                    for p in 0..dim {
                        d_pooled[r * dim + p] += cfg.alpha * out.grad_source[k * dim + p];
                    }
                }
                for (k, &r) in tgt.iter().enumerate() {
                    for p in 0..dim {
                        d_pooled[r * dim + p] += cfg.alpha * out.grad_target[k * dim + p];
                    }
                }
            }
            Err(e) => {
                log::warn!("skipping cdd term: {e}");
                skipped.push("cdd");
            }
        }

        if let Some(pairing) = cfg.da_mode.pairing() {
            let all: Vec<usize> = (0..n).collect();
            match gather(&all).and_then(|f| caba(&f, kernel, pairing)) {
                Ok(out) => {
                    caba_v = out.value;
                    for (d, g) in grad_sigma.iter_mut().zip(&out.grad_sigma) {
                        *d += cfg.alpha * g;
                    }
                    for (d, g) in d_pooled.iter_mut().zip(&out.grad) {
                        *d += cfg.alpha * g;
                    }
                }
                Err(e) => {
                    log::warn!("skipping caba term: {e}");
                    skipped.push("caba");
                }
            }
        }
    }

    let loss = if cfg.uses_discrepancy() {
        ce + cfg.alpha * (cdd_v + caba_v)
    } else {
        ce
    };
    let obj = Objective {
        components: Components {
            loss,
            ce,
            cdd: cdd_v,
            caba: caba_v,
        },
        d_logits,
        d_pooled,
        skipped,
    };
    Ok((obj, grad_sigma))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MixerParams,
    pub v: MixerParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MixerParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut MixerParams,
    grads: &MixerParams,
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    let shapes_match = |a: &MixerParams, b: &MixerParams| {
        let (x, y) = (a.tensors(), b.tensors());
        x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| p.1.shape == q.1.shape)
    };
    if !shapes_match(params, grads) || !shapes_match(params, &state.m) {
        return Err(Error::Shape("adam: parameter and gradient shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - adam.beta1.powf(t);
    let c2 = 1.0 - adam.beta2.powf(t);
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = adam.beta1 * m.data[i] + (1.0 - adam.beta1) * gi;
            v.data[i] = adam.beta2 * v.data[i] + (1.0 - adam.beta2) * gi * gi;
            let mhat = m.data[i] / c1;
            let vhat = v.data[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + adam.epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

/// One line of `history.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub cdd: f64,
    pub caba: f64,
    pub val_ce: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation cross-entropy.
    pub params: MixerParams,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of `params`.
    pub best_epoch: usize,
    pub best_val_ce: f64,
    /// Mini-batches that fell back to uniform sampling.
    pub fallback_batches: usize,
}

/// Mean cross-entropy and accuracy of the model on `index` (eval mode).
pub fn eval_loss(params: &MixerParams, mcfg: &MixerConfig, index: &DatasetIndex) -> Result<(f64, f64)> {
    let batch = index.batch();
    let (logits, _) = mixer::infer(params, mcfg, &batch)?;
    let (ce, _) = cross_entropy(&logits, &batch.labels, mcfg.classes);
    let m = mcfg.classes;
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&logits[i * m..(i + 1) * m]) == y)
        .count();
    Ok((ce, correct as f64 / batch.len() as f64))
}

/// Trains one model. Each epoch draws `ceil(|train| / batch_size)`
/// mini-batches; after every epoch the validation cross-entropy decides
/// early stopping. The model config's dropout is replaced by
/// `tcfg.dropout`.
pub fn train_fold(
    train: &DatasetIndex,
    val: &DatasetIndex,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    kernel_cfg.validate()?;
    let mcfg = MixerConfig {
        dropout: tcfg.dropout,
        ..*mcfg
    };
    mcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Split("training and validation sets must be non-empty".into()));
    }
    if train.class_count() != mcfg.classes {
        return Err(Error::Config(format!(
            "model.classes is {} but the data declares {} classes",
            mcfg.classes,
            train.class_count()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = mixer::init_params(&mcfg, rng.random());
    let mut adam = AdamState::new(&params);
    let sampler = Sampler::new(train, tcfg.batch_size);
    let steps = train.len().div_ceil(tcfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = Vec::new();
    let mut best = (params.clone(), f64::INFINITY, 0);
    let mut stale = 0;
    let mut fallback_batches = 0;
    for epoch in 1..=tcfg.max_epochs {
        let mut sums = Components::default();
        if !tcfg.uses_discrepancy() {
            order.shuffle(&mut rng);
        }
        for step in 0..steps {
            let (rows, assignment) = if tcfg.uses_discrepancy() {
                sampler.draw(&mut rng)
            } else {
                let end = ((step + 1) * tcfg.batch_size).min(order.len());
                let rows = order[step * tcfg.batch_size..end].to_vec();
                let n = rows.len();
                (rows, Assignment::uniform(n))
            };
            if assignment.fallback && tcfg.uses_discrepancy() {
                if fallback_batches == 0 {
                    log::warn!("fewer than two subjects: falling back to uniform mini-batches");
                }
                fallback_batches += 1;
            }
            let batch = train.batch_of(&rows);
            let trace = mixer::forward(&params, &mcfg, &batch, Mode::Train, rng.random())?;
            let obj = objective(&trace, &batch, &assignment, tcfg, kernel_cfg)?;
            let c = obj.components;
            if !c.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}: ce={} cdd={} caba={}",
                    c.ce, c.cdd, c.caba
                )));
            }
            let grads = mixer::backward(&trace, &params, &mcfg, &obj.d_logits, &obj.d_pooled)?;
            adam_step(&mut params, &grads.params, &mut adam, tcfg.learning_rate, &tcfg.adam)?;
            if !params.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters diverged at epoch {epoch}, step {step}"
                )));
            }
            sums.loss += c.loss;
            sums.ce += c.ce;
            sums.cdd += c.cdd;
            sums.caba += c.caba;
        }
        let (val_ce, val_acc) = eval_loss(&params, &mcfg, val)?;
        if !val_ce.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        let k = steps as f64;
        history.push(EpochRecord {
            epoch,
            loss: sums.loss / k,
            ce: sums.ce / k,
            cdd: sums.cdd / k,
            caba: sums.caba / k,
            val_ce,
            val_acc,
        });
        log::debug!("epoch {epoch}: loss {:.5} val_ce {val_ce:.5} val_acc {val_acc:.3}", sums.loss / k);
        if val_ce < best.1 {
            best = (params.clone(), val_ce, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.2,
        best_val_ce: best.1,
        fallback_batches,
    })
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpace {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 1e-3, 1e-2, 1e-1],
            dropouts: vec![0.0, 0.25, 0.5, 0.75],
            alphas: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1],
        }
    }
}

impl GridSpace {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.dropouts.is_empty() || self.alphas.is_empty() {
            return Err(Error::Config("grid: every axis needs at least one value".into()));
        }
        Ok(())
    }

    /// Grid points in (lr, dropout, alpha) lexicographic order.
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &d in &self.dropouts {
                for &a in &self.alphas {
                    out.push((lr, d, a));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub dropout: f64,
    pub alpha: f64,
    /// Mean k-fold test accuracy; `None` when training diverged.
    pub mean_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub best: TrainConfig,
    pub best_accuracy: f64,
    pub rows: Vec<GridRow>,
    /// Best mean accuracy per alpha over the other axes.
    pub alpha_curve: Vec<(f64, f64)>,
}

/// Exhaustive search by mean k-fold test accuracy. Ties go to the lower
/// learning rate, then lower dropout, then lower alpha. Diverged grid
/// points are reported and never selected.
pub fn grid_search(
    index: &DatasetIndex,
    plan: &FoldPlan,
    mcfg: &MixerConfig,
    base: &TrainConfig,
    kernel_cfg: &KernelConfig,
    space: &GridSpace,
    jobs: usize,
) -> Result<GridReport> {
    space.validate()?;
    let points = space.points();
    let results = evalsuite::par_map(jobs, &points, |&(lr, dropout, alpha)| {
        let tcfg = TrainConfig {
            learning_rate: lr,
            dropout,
            alpha,
            ..base.clone()
        };
        evalsuite::run_kfold(index, plan, mcfg, &tcfg, kernel_cfg, 1)
    })?;
    let mut rows = Vec::with_capacity(points.len());
    for (&(lr, dropout, alpha), res) in points.iter().zip(results) {
        let (mean_accuracy, error) = match res {
            Ok(r) => (Some(r.mean_accuracy), None),
            Err(e @ (Error::Numerical(_) | Error::NonFiniteActivation { .. })) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        rows.push(GridRow {
            learning_rate: lr,
            dropout,
            alpha,
            mean_accuracy,
            error,
        });
    }

    let key = |r: &GridRow| (r.learning_rate, r.dropout, r.alpha);
    let mut best: Option<&GridRow> = None;
    for r in &rows {
        let Some(acc) = r.mean_accuracy else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bacc = b.mean_accuracy.expect("selected rows have accuracy");
                acc > bacc || (acc == bacc && key(r) < key(b))
            }
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("every grid point diverged".into()))?;

    let mut alphas = space.alphas.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let alpha_curve = alphas
        .iter()
        .filter_map(|&a| {
            rows.iter()
                .filter(|r| r.alpha == a)
                .filter_map(|r| r.mean_accuracy)
                .reduce(f64::max)
                .map(|acc| (a, acc))
        })
        .collect();
    Ok(GridReport {
        best: TrainConfig {
            learning_rate: best.learning_rate,
            dropout: best.dropout,
            alpha: best.alpha,
            ..base.clone()
        },
        best_accuracy: best.mean_accuracy.expect("selected rows have accuracy"),
        rows,
        alpha_curve,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
}

/// Compares the analytic gradient of the full objective with five-point
/// central differences of step `epsilon`. Models with at most `exhaustive_limit`
/// parameters are checked everywhere, larger ones on a random 1% sample.
/// Dropout masks are held fixed across the perturbed evaluations; the
/// kernel bandwidth is re-resolved at each one. Relative errors use
/// `max(|analytic|, |numeric|, FD_REL_FLOOR)` as denominator.
pub fn finite_diff_check(
    params: &MixerParams,
    mcfg: &MixerConfig,
    tcfg: &TrainConfig,
    kernel_cfg: &KernelConfig,
    batch: &Batch,
    assignment: &Assignment,
    epsilon: f64,
) -> Result<FdReport> {
    const EXHAUSTIVE_LIMIT: usize = 5_000;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {epsilon}")));
    }
    let mcfg = MixerConfig {
        dropout: tcfg.dropout,
        ..*mcfg
    };
    let seed = tcfg.seed;
    let trace = mixer::forward(params, &mcfg, batch, Mode::Train, seed)?;
    let obj = objective(&trace, batch, assignment, tcfg, kernel_cfg)?;
    let grads = mixer::backward(&trace, params, &mcfg, &obj.d_logits, &obj.d_pooled)?;

    let loss_at = |p: &MixerParams| -> Result<f64> {
        let tr = mixer::forward(p, &mcfg, batch, Mode::Train, seed)?;
        Ok(objective(&tr, batch, assignment, tcfg, kernel_cfg)?.components.loss)
    };

    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    if total > EXHAUSTIVE_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = (total / 100).max(1);
        let (head, _) = coords.partial_shuffle(&mut rng, keep);
        coords = head.to_vec();
    }

    let analytic: Vec<Vec<f64>> = grads.params.tensors().iter().map(|(_, t)| t.data.clone()).collect();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &(t, i) in &coords {
        let orig = probe.tensors_mut()[t].data[i];
        let mut at = |k: f64| -> Result<f64> {
            probe.tensors_mut()[t].data[i] = orig + k * epsilon;
            loss_at(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        probe.tensors_mut()[t].data[i] = orig;
        let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * epsilon);
        let a = analytic[t][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(FdReport {
        max_rel_error: worst,
        checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataframe::{synth_generate, DomainKey, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_mcfg() -> MixerConfig {
        MixerConfig {
            seq_len: 8,
            groups: 2,
            features_per_group: 2,
            width: 4,
            layers: 1,
            temporal_hidden: 8,
            channel_hidden: 8,
            classes: 2,
            dropout: 0.0,
        }
    }

    fn corpus(subjects: usize, blocks: usize, seed: u64) -> DatasetIndex {
        synth_generate(&SynthConfig {
            subjects,
            sessions_per_subject: 1,
            blocks_per_session: blocks,
            trials_per_block: 8,
            shape: [8, 4, 2],
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn trace_for(batch: &Batch, logits: Vec<f64>, pooled: Vec<f64>) -> ForwardTrace {
        // a real trace, then overwrite its outputs
        let mcfg = MixerConfig {
            seq_len: batch.shape.seq_len,
            groups: batch.shape.groups,
            features_per_group: batch.shape.features_per_group(),
            width: pooled.len() / batch.len(),
            classes: logits.len() / batch.len(),
            ..tiny_mcfg()
        };
        let p = mixer::init_params(&mcfg, 0);
        let mut tr = mixer::forward(&p, &mcfg, batch, Mode::Eval, 0).unwrap();
        tr.logits = logits;
        tr.pooled = pooled;
        tr
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        for m in [2usize, 3, 7] {
            let (ce, _) = cross_entropy(&vec![0.3; 4 * m], &[0, 1, 1, 0], m);
            assert_abs_diff_eq!(ce, (m as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn alpha_zero_loss_is_ce() {
        let index = corpus(2, 2, 1);
        let cfg = TrainConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, asg) = sample_minibatch(&index, &cfg, &mut rng).unwrap();
        let mcfg = tiny_mcfg();
        let p = mixer::init_params(&mcfg, 2);
        let tr = mixer::forward(&p, &mcfg, &batch, Mode::Train, 0).unwrap();
        let obj = objective(&tr, &batch, &asg, &cfg, &KernelConfig::default()).unwrap();
        let c = obj.components;
        assert_eq!(c.loss, c.ce);
        assert!(c.cdd != 0.0 && c.caba != 0.0);
        assert!(obj.d_pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_features_closed_form() {
        // identical pooled features: every MMD is 0, so cdd = 0 - 0 and caba = 0
        let index = corpus(2, 2, 3);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, asg) = sample_minibatch(&index, &cfg, &mut rng).unwrap();
        let n = batch.len();
        let tr = trace_for(&batch, vec![0.0; 2 * n], vec![0.7; 4 * n]);
        let obj = objective(&tr, &batch, &asg, &cfg, &KernelConfig::fixed(vec![1.0])).unwrap();
        let c = obj.components;
        assert_abs_diff_eq!(c.cdd, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.caba, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.loss, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.loss, c.ce + cfg.alpha * (c.cdd + c.caba), epsilon = 1e-12);
    }

    #[test]
    fn da_modes_gate_terms() {
        let index = corpus(2, 2, 4);
        let mcfg = tiny_mcfg();
        let p = mixer::init_params(&mcfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, asg) = sample_minibatch(&index, &TrainConfig::default(), &mut rng).unwrap();
        let tr = mixer::forward(&p, &mcfg, &batch, Mode::Eval, 0).unwrap();
        let run = |mode| {
            let cfg = TrainConfig {
                da_mode: mode,
                ..Default::default()
            };
            objective(&tr, &batch, &asg, &cfg, &KernelConfig::default())
                .unwrap()
                .components
        };
        let none = run(DaMode::None);
        assert_eq!((none.loss, none.cdd, none.caba), (none.ce, 0.0, 0.0));
        let subject = run(DaMode::Subject);
        assert_eq!(subject.caba, 0.0);
        assert!(subject.cdd != 0.0);
        assert!(run(DaMode::Block).caba > 0.0);
        // one session per subject: session pairing has no pair
        assert_eq!(run(DaMode::Session).caba, 0.0);
    }

    #[test]
    fn single_subject_falls_back() {
        let index = corpus(1, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, asg) = sample_minibatch(&index, &TrainConfig::default(), &mut rng).unwrap();
        assert!(asg.fallback);
        assert_eq!(batch.len(), 16);
        assert!(asg.roles.iter().all(|&r| r == Role::Pad));
    }

    #[test]
    fn composition_counts() {
        let index = corpus(2, 2, 0);
        let cfg = TrainConfig {
            batch_size: 16,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (batch, asg) = sample_minibatch(&index, &cfg, &mut rng).unwrap();
            assert_eq!(batch.len(), 16);
            assert_eq!(asg.plan.total(), 16);
            for side in [Role::Source, Role::Target] {
                for class in 0..2 {
                    let count = (0..16)
                        .filter(|&i| asg.roles[i] == side && batch.labels[i] == class)
                        .count();
                    assert!(count >= 2, "{side:?} class {class}: {count}");
                }
            }
            let src: Vec<DomainKey> = (0..16)
                .filter(|&i| asg.roles[i] == Role::Source)
                .map(|i| batch.keys[i])
                .collect();
            assert!(src.iter().all(|k| Some(k.subject) == asg.source_subject));
            let mut blocks: Vec<u32> = src.iter().map(|k| k.block).collect();
            blocks.sort_unstable();
            blocks.dedup();
            assert_eq!(blocks.len(), 2);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let index = corpus(3, 3, 0);
        let cfg = TrainConfig::default();
        let a = sample_minibatch(&index, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_minibatch(&index, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn adam_cases() {
        let mcfg = tiny_mcfg();
        let p0 = mixer::init_params(&mcfg, 0);
        let mut p = p0.clone();
        let zero = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &zero, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, p0);

        // first step moves by lr * g / (|g| + eps)
        let mut p = p0.zeros_like();
        let mut g = p0.zeros_like();
        g.head_b.data[0] = 1.0;
        let mut st = AdamState::new(&p);
        let mut st2 = st.clone();
        let mut p2 = p.clone();
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_abs_diff_eq!(p.head_b.data[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        adam_step(&mut p2, &g, &mut st2, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, p2);
        assert_eq!(st, st2);

        let other = mixer::init_params(&MixerConfig { width: 5, ..mcfg }, 0);
        assert!(adam_step(&mut p, &other, &mut st, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn gradient_check_tiny_model() {
        let index = corpus(2, 2, 7);
        let mcfg = tiny_mcfg();
        for alpha in [0.0, 1.0] {
            let cfg = TrainConfig {
                alpha,
                batch_size: 8,
                dropout: 0.25,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (batch, asg) = sample_minibatch(&index, &cfg, &mut rng).unwrap();
            let p = mixer::init_params(&mcfg, 3);
            let r = finite_diff_check(&p, &mcfg, &cfg, &KernelConfig::default(), &batch, &asg, 1e-5).unwrap();
            assert_eq!(r.checked, mcfg.param_count());
            assert!(r.max_rel_error < 1e-6, "alpha {alpha}: {}", r.max_rel_error);
        }
        let cfg = TrainConfig::default();
        let batch = index.batch_of(&[0, 1]);
        let asg = Assignment::by_subject(&batch);
        let p = mixer::init_params(&mcfg, 0);
        assert!(finite_diff_check(&p, &mcfg, &cfg, &KernelConfig::default(), &batch, &asg, 0.0).is_err());
    }

    #[test]
    fn gradient_descent_is_monotone_for_small_steps() {
        let index = corpus(2, 2, 2);
        let mcfg = tiny_mcfg();
        let cfg = TrainConfig {
            alpha: 0.0,
            da_mode: DaMode::None,
            ..Default::default()
        };
        for seed in 0..10 {
            let mut p = mixer::init_params(&mcfg, seed);
            let batch = index.batch();
            let asg = Assignment::uniform(batch.len());
            let mut last = f64::INFINITY;
            for _ in 0..10 {
                let tr = mixer::forward(&p, &mcfg, &batch, Mode::Eval, 0).unwrap();
                let obj = objective(&tr, &batch, &asg, &cfg, &KernelConfig::default()).unwrap();
                assert!(obj.components.loss <= last);
                last = obj.components.loss;
                let g = mixer::backward(&tr, &p, &mcfg, &obj.d_logits, &obj.d_pooled).unwrap();
                let gt: Vec<Vec<f64>> = g.params.tensors().iter().map(|(_, t)| t.data.clone()).collect();
                for (w, gw) in p.tensors_mut().into_iter().zip(gt) {
                    for (x, d) in w.data.iter_mut().zip(gw) {
                        *x -= 1e-3 * d;
                    }
                }
            }
        }
    }

    #[test]
    fn one_epoch_bound_and_best_params() {
        let index = corpus(3, 2, 0);
        let (train, val) = (index.filter(|s| s.key.subject < 2), index.filter(|s| s.key.subject == 2));
        let mcfg = tiny_mcfg();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let out = train_fold(&train, &val, &mcfg, &cfg, &KernelConfig::default()).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_epoch, 1);
        let (ce, _) = eval_loss(&out.params, &mcfg, &val).unwrap();
        assert_eq!(ce, out.history[0].val_ce);
    }

    #[test]
    fn early_stopping_keeps_minimum() {
        let index = corpus(3, 2, 1);
        let (train, val) = (index.filter(|s| s.key.subject < 2), index.filter(|s| s.key.subject == 2));
        let mcfg = tiny_mcfg();
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 3,
            learning_rate: 0.05,
            ..Default::default()
        };
        let out = train_fold(&train, &val, &mcfg, &cfg, &KernelConfig::default()).unwrap();
        let min = out.history.iter().map(|h| h.val_ce).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_ce, min);
        assert_eq!(out.history[out.best_epoch - 1].val_ce, min);
        let (ce, _) = eval_loss(&out.params, &mcfg, &val).unwrap();
        assert_eq!(ce, min);
        if out.history.len() < 40 {
            assert_eq!(out.history.len(), out.best_epoch + 3);
        }
        for h in &out.history {
            assert_abs_diff_eq!(h.loss, h.ce + cfg.alpha * (h.cdd + h.caba), epsilon = 1e-12);
        }
    }

    #[test]
    fn patience_never_triggers_runs_to_max() {
        let index = corpus(3, 2, 1);
        let (train, val) = (index.filter(|s| s.key.subject < 2), index.filter(|s| s.key.subject == 2));
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 50,
            ..Default::default()
        };
        let out = train_fold(&train, &val, &tiny_mcfg(), &cfg, &KernelConfig::default()).unwrap();
        assert_eq!(out.history.len(), 4);
    }

    #[test]
    fn separable_data_is_fitted() {
        let index = synth_generate(&SynthConfig {
            subjects: 2,
            sessions_per_subject: 1,
            blocks_per_session: 2,
            trials_per_block: 8,
            shape: [8, 4, 2],
            subject_shift: 0.0,
            session_shift: 0.0,
            block_shift: 0.0,
            noise_std: 0.05,
            class_signal: 2.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            alpha: 0.0,
            da_mode: DaMode::None,
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 200,
            ..Default::default()
        };
        let out = train_fold(&index, &index, &tiny_mcfg(), &cfg, &KernelConfig::default()).unwrap();
        let (_, acc) = eval_loss(&out.params, &tiny_mcfg(), &index).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let index = corpus(3, 2, 5);
        let (train, val) = (index.filter(|s| s.key.subject < 2), index.filter(|s| s.key.subject == 2));
        let cfg = TrainConfig {
            max_epochs: 3,
            dropout: 0.25,
            ..Default::default()
        };
        let a = train_fold(&train, &val, &tiny_mcfg(), &cfg, &KernelConfig::default()).unwrap();
        let b = train_fold(&train, &val, &tiny_mcfg(), &cfg, &KernelConfig::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn diverging_learning_rate_is_reported() {
        let index = corpus(3, 2, 5);
        let (train, val) = (index.filter(|s| s.key.subject < 2), index.filter(|s| s.key.subject == 2));
        let cfg = TrainConfig {
            learning_rate: 1e300,
            max_epochs: 5,
            ..Default::default()
        };
        let err = train_fold(&train, &val, &tiny_mcfg(), &cfg, &KernelConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
