//! Sample model, manifest I/O, windowing and the synthetic corpus generator.
//!
//! A corpus is a flat list of fixed-shape windows. Every window carries the
//! (subject, session, block, trial) key of the recording it came from plus
//! the window offset inside that trial. Values are stored as `S x D`
//! row-major `f64` matrices with `D = G x F` laid out channel-major, so the
//! model can view each timestep as `G` spatial channels of `F` features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Manifest format understood by [`load_manifest`].
pub const FORMAT_VERSION: u32 = 1;

/// File name of the manifest header inside a dataset directory.
pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainKey {
    pub subject: u32,
    pub session: u32,
    pub block: u32,
    pub trial: u32,
}

impl DomainKey {
    pub fn new(subject: u32, session: u32, block: u32, trial: u32) -> Self {
        Self {
            subject,
            session,
            block,
            trial,
        }
    }
}

impl fmt::Display for DomainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(subject {}, session {}, block {}, trial {})",
            self.subject, self.session, self.block, self.trial
        )
    }
}

/// Declared window geometry: `seq_len` timesteps by `features` columns,
/// where `features = groups * features_per_group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub seq_len: usize,
    pub features: usize,
    pub groups: usize,
}

impl Shape {
    pub fn new(seq_len: usize, features: usize, groups: usize) -> Result<Self> {
        let shape = Self {
            seq_len,
            features,
            groups,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.features == 0 || self.groups == 0 {
            return Err(Error::Config(format!(
                "shape: all of S, D, G must be positive, got {:?}",
                self.as_array()
            )));
        }
        if self.features % self.groups != 0 {
            return Err(Error::Config(format!(
                "shape: D={} is not divisible by G={}",
                self.features, self.groups
            )));
        }
        Ok(())
    }

    pub fn features_per_group(&self) -> usize {
        self.features / self.groups
    }

    /// Number of values in one window.
    pub fn len(&self) -> usize {
        self.seq_len * self.features
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.seq_len, self.features, self.groups]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Row-major `S x D` matrix.
    pub values: Vec<f64>,
    pub label: usize,
    pub key: DomainKey,
    /// Start timestep of this window inside its trial.
    pub offset: usize,
}

/// Storage width for sample values. Computation is always `f64`; the
/// `F32` mode rounds every stored value through `f32`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn apply(self, values: &mut [f64]) {
        if self == Precision::F32 {
            for v in values {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// An immutable, manifest-ordered collection of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    samples: Vec<WindowSample>,
    shape: Shape,
    class_count: usize,
    sample_rate_hz: f64,
    provenance: String,
}

impl DatasetIndex {
    /// Builds an index, rejecting any sample that violates the declared
    /// shape, class count or finiteness.
    pub fn new(
        samples: Vec<WindowSample>,
        shape: Shape,
        class_count: usize,
        sample_rate_hz: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        shape.validate()?;
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        for s in &samples {
            check_sample(s, shape, class_count)?;
        }
        Ok(Self {
            samples,
            shape,
            class_count,
            sample_rate_hz,
            provenance: provenance.into(),
        })
    }

    pub fn samples(&self) -> &[WindowSample] {
        &self.samples
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.key.subject).collect();
        set.into_iter().collect()
    }

    /// New index holding the samples selected by `keep`, in manifest order.
    pub fn filter(&self, mut keep: impl FnMut(&WindowSample) -> bool) -> DatasetIndex {
        DatasetIndex {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            shape: self.shape,
            class_count: self.class_count,
            sample_rate_hz: self.sample_rate_hz,
            provenance: self.provenance.clone(),
        }
    }

    /// New index holding the samples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> DatasetIndex {
        DatasetIndex {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            shape: self.shape,
            class_count: self.class_count,
            sample_rate_hz: self.sample_rate_hz,
            provenance: self.provenance.clone(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn batch(&self) -> Batch {
        Batch::from_samples(self.samples.iter(), self.shape)
    }

    pub fn batch_of(&self, indices: &[usize]) -> Batch {
        Batch::from_samples(indices.iter().map(|&i| &self.samples[i]), self.shape)
    }
}

fn check_sample(s: &WindowSample, shape: Shape, class_count: usize) -> Result<()> {
    if s.values.len() != shape.len() {
        return Err(Error::Sample {
            key: s.key,
            reason: format!(
                "expected {} values ({}x{}), found {}",
                shape.len(),
                shape.seq_len,
                shape.features,
                s.values.len()
            ),
        });
    }
    if s.label >= class_count {
        return Err(Error::Sample {
            key: s.key,
            reason: format!("label {} outside [0, {class_count})", s.label),
        });
    }
    if let Some(pos) = s.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Sample {
            key: s.key,
            reason: format!(
                "non-finite value at row {}, column {}",
                pos / shape.features,
                pos % shape.features
            ),
        });
    }
    Ok(())
}

/// Stacked windows presented to the model and the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n x (S*D)` row-major.
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub keys: Vec<DomainKey>,
    pub shape: Shape,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a WindowSample>, shape: Shape) -> Self {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut keys = Vec::new();
        for s in samples {
            values.extend_from_slice(&s.values);
            labels.push(s.label);
            keys.push(s.key);
        }
        Self {
            values,
            labels,
            keys,
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.shape.len();
        &self.values[i * w..(i + 1) * w]
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format_version: u32,
    shape: [usize; 3],
    class_count: usize,
    sample_rate_hz: f64,
    #[serde(default)]
    provenance: String,
    samples: Vec<ManifestRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    subject: u32,
    session: u32,
    block: u32,
    trial: u32,
    label: usize,
    file: String,
    /// Byte offset of the matrix inside `file`.
    offset: u64,
    /// Window start inside the trial.
    #[serde(default)]
    window: usize,
}

/// Loads `dataset.json` (or the given manifest file) and every matrix it
/// references. `path` may name the dataset directory or the manifest itself.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    load_manifest_with(path, Precision::F64)
}

pub fn load_manifest_with(path: impl AsRef<Path>, precision: Precision) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let [s, d, g] = header.shape;
    let shape = Shape::new(s, d, g).map_err(|e| Error::Manifest(e.to_string()))?;
    let bytes_per_window = shape.len() * 8;

    let mut files: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(header.samples.len());
    for row in &header.samples {
        let key = DomainKey::new(row.subject, row.session, row.block, row.trial);
        if !files.contains_key(row.file.as_str()) {
            let p = dir.join(&row.file);
            let data = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            files.insert(row.file.as_str(), data);
        }
        let data = &files[row.file.as_str()];
        let start = row.offset as usize;
        let available = data.len().saturating_sub(start);
        if available < bytes_per_window {
            return Err(Error::Sample {
                key,
                reason: format!(
                    "matrix in {} at byte {} holds {} of {} rows",
                    row.file,
                    row.offset,
                    available / (shape.features * 8),
                    shape.seq_len
                ),
            });
        }
        let mut values: Vec<f64> = data[start..start + bytes_per_window]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        precision.apply(&mut values);
        samples.push(WindowSample {
            values,
            label: row.label,
            key,
            offset: row.window,
        });
    }
    DatasetIndex::new(
        samples,
        shape,
        header.class_count,
        header.sample_rate_hz,
        header.provenance,
    )
}

/// Writes `index` as `dataset.json` plus one little-endian `f64` matrix file
/// per subject. Output is byte-identical for identical indices.
pub fn write_manifest(index: &DatasetIndex, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut per_file: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(index.len());
    for s in index.samples() {
        let file = format!("subject_{:04}.f64", s.key.subject);
        let buf = per_file.entry(file.clone()).or_default();
        let offset = buf.len() as u64;
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        rows.push(ManifestRow {
            subject: s.key.subject,
            session: s.key.session,
            block: s.key.block,
            trial: s.key.trial,
            label: s.label,
            file,
            offset,
            window: s.offset,
        });
    }
    for (name, bytes) in &per_file {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&p, e))?;
    }
    let header = ManifestHeader {
        format_version: FORMAT_VERSION,
        shape: index.shape().as_array(),
        class_count: index.class_count(),
        sample_rate_hz: index.sample_rate_hz(),
        provenance: index.provenance().to_string(),
        samples: rows,
    };
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&header).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

// ---------------------------------------------------------------------------
// Windowing

/// Cuts a `T_total x D` trial recording (row-major, `cols = D`) into windows
/// of `window_len` rows starting every `stride` rows.
pub fn slice_windows(
    trial_series: &[f64],
    cols: usize,
    window_len: usize,
    stride: usize,
    key: DomainKey,
    label: usize,
) -> Result<Vec<WindowSample>> {
    if cols == 0 || trial_series.len() % cols != 0 {
        return Err(Error::Shape(format!(
            "trial series of {} values is not a matrix with {cols} columns",
            trial_series.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if window_len == 0 {
        return Err(Error::Config("window_len must be at least 1".into()));
    }
    let total = trial_series.len() / cols;
    if window_len > total {
        return Err(Error::Sample {
            key,
            reason: format!("window_len {window_len} exceeds trial length {total}"),
        });
    }
    let count = (total - window_len) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * stride;
            WindowSample {
                values: trial_series[start * cols..(start + window_len) * cols].to_vec(),
                label,
                key,
                offset: start,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic corpora

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sessions_per_subject: usize,
    pub blocks_per_session: usize,
    pub trials_per_block: usize,
    /// `[S, D, G]`.
    pub shape: [usize; 3],
    pub class_count: usize,
    pub subject_shift: f64,
    pub session_shift: f64,
    pub block_shift: f64,
    pub class_signal: f64,
    pub noise_std: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            sessions_per_subject: 2,
            blocks_per_session: 3,
            trials_per_block: 12,
            shape: [16, 16, 2],
            class_count: 2,
            subject_shift: 0.5,
            session_shift: 0.5,
            block_shift: 1.0,
            class_signal: 1.0,
            noise_std: 0.5,
            sample_rate_hz: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Shape> {
        let positive = [
            ("subjects", self.subjects),
            ("sessions_per_subject", self.sessions_per_subject),
            ("blocks_per_session", self.blocks_per_session),
            ("trials_per_block", self.trials_per_block),
            ("class_count", self.class_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth.{name} must be positive")));
            }
        }
        let [s, d, g] = self.shape;
        let shape = Shape::new(s, d, g)
            .map_err(|e| Error::Config(format!("synth.shape: {e}")))?;
        for (name, v) in [
            ("subject_shift", self.subject_shift),
            ("session_shift", self.session_shift),
            ("block_shift", self.block_shift),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("synth.{name} must be non-negative")));
            }
        }
        if !(self.class_signal.is_finite() && self.class_signal > 0.0) {
            return Err(Error::Config("synth.class_signal must be positive".into()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config("synth.sample_rate_hz must be positive".into()));
        }
        Ok(shape)
    }
}

/// Unit-norm response template of `class` over an `S x D` window.
///
/// Each feature column mixes a positive half-sine bump (sustained
/// activation) with a zero-mean full-sine swing; the mixing angle rotates
/// with class and feature so distinct classes get distinct templates.
pub fn class_template(class: usize, class_count: usize, shape: Shape) -> Vec<f64> {
    let (s, d) = (shape.seq_len, shape.features);
    let mut out = vec![0.0; s * d];
    for t in 0..s {
        let phase = std::f64::consts::PI * (t as f64 + 0.5) / s as f64;
        let bump = phase.sin();
        let swing = (2.0 * phase).sin();
        for f in 0..d {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / class_count as f64
                + std::f64::consts::PI * f as f64 / d as f64;
            out[t * d + f] = angle.cos() * bump + angle.sin() * swing;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    out
}

/// Draws a corpus with nested subject / session / block offsets.
///
/// `value = class_signal * template[label] + subject + session + block
/// offsets (constant over time) + N(0, noise_std^2)`. Labels cycle through
/// the classes, continuing across the blocks of a session, so each block is
/// as balanced as its trial count allows.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetIndex> {
    let shape = cfg.validate()?;
    let (s, d) = (shape.seq_len, shape.features);
    let templates: Vec<Vec<f64>> = (0..cfg.class_count)
        .map(|c| class_template(c, cfg.class_count, shape))
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| scale * std_normal.sample(rng)).collect()
    };

    let total = cfg.subjects * cfg.sessions_per_subject * cfg.blocks_per_session * cfg.trials_per_block;
    let mut samples = Vec::with_capacity(total);
    for subject in 0..cfg.subjects {
        let subj_off = draw(cfg.subject_shift, &mut rng);
        for session in 0..cfg.sessions_per_subject {
            let sess_off = draw(cfg.session_shift, &mut rng);
            for block in 0..cfg.blocks_per_session {
                let block_off = draw(cfg.block_shift, &mut rng);
                let offset: Vec<f64> = (0..d)
                    .map(|f| subj_off[f] + sess_off[f] + block_off[f])
                    .collect();
                for trial in 0..cfg.trials_per_block {
                    let label = (block * cfg.trials_per_block + trial) % cfg.class_count;
                    let template = &templates[label];
                    let mut values = vec![0.0; s * d];
                    for t in 0..s {
                        for f in 0..d {
                            let i = t * d + f;
                            let noise = cfg.noise_std * std_normal.sample(&mut rng);
                            values[i] = cfg.class_signal * template[i] + offset[f] + noise;
                        }
                    }
                    samples.push(WindowSample {
                        values,
                        label,
                        key: DomainKey::new(
                            subject as u32,
                            session as u32,
                            block as u32,
                            trial as u32,
                        ),
                        offset: 0,
                    });
                }
            }
        }
    }
    DatasetIndex::new(
        samples,
        shape,
        cfg.class_count,
        cfg.sample_rate_hz,
        format!("synthetic seed={}", cfg.seed),
    )
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub subjects: usize,
    pub sessions_per_subject: BTreeMap<u32, usize>,
    /// Keyed by `"subject/session"`.
    pub blocks_per_session: BTreeMap<String, usize>,
    /// Keyed by `"subject/session/block"`.
    pub trials_per_block: BTreeMap<String, usize>,
    pub trials_per_subject: BTreeMap<u32, usize>,
    pub class_counts: Vec<usize>,
    /// `class_counts_per_subject[subject][class]`.
    pub class_counts_per_subject: BTreeMap<u32, Vec<usize>>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Summarizes the experiment hierarchy of `index` and lists invariant
/// violations. Trials are counted as distinct keys, so several windows cut
/// from one trial count once.
pub fn validate_dataset(index: &DatasetIndex) -> ValidationReport {
    let shape = index.shape();
    let m = index.class_count();
    let mut report = ValidationReport {
        samples: index.len(),
        class_counts: vec![0; m],
        ..Default::default()
    };

    let mut sessions: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut blocks: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
    let mut trials: BTreeMap<(u32, u32, u32), BTreeSet<u32>> = BTreeMap::new();
    let mut trial_labels: BTreeMap<DomainKey, usize> = BTreeMap::new();
    let mut seen: BTreeSet<(DomainKey, usize)> = BTreeSet::new();

    for s in index.samples() {
        let k = s.key;
        if let Err(e) = check_sample(s, shape, m) {
            report.violations.push(e.to_string());
            continue;
        }
        if !seen.insert((k, s.offset)) {
            report
                .violations
                .push(format!("duplicate sample {k} at window offset {}", s.offset));
        }
        match trial_labels.get(&k) {
            Some(&l) if l != s.label => report
                .violations
                .push(format!("trial {k} carries labels {l} and {}", s.label)),
            Some(_) => {}
            None => {
                trial_labels.insert(k, s.label);
            }
        }
        report.class_counts[s.label] += 1;
        sessions.entry(k.subject).or_default().insert(k.session);
        blocks.entry((k.subject, k.session)).or_default().insert(k.block);
        trials
            .entry((k.subject, k.session, k.block))
            .or_default()
            .insert(k.trial);
    }

    report.subjects = sessions.len();
    report.sessions_per_subject = sessions.iter().map(|(&s, v)| (s, v.len())).collect();
    report.blocks_per_session = blocks
        .iter()
        .map(|(&(s, e), v)| (format!("{s}/{e}"), v.len()))
        .collect();
    report.trials_per_block = trials
        .iter()
        .map(|(&(s, e, b), v)| (format!("{s}/{e}/{b}"), v.len()))
        .collect();
    for (k, &label) in &trial_labels {
        *report.trials_per_subject.entry(k.subject).or_default() += 1;
        report
            .class_counts_per_subject
            .entry(k.subject)
            .or_insert_with(|| vec![0; m])[label] += 1;
    }
    report
}
