//! Kernel two-sample discrepancies and their feature gradients.
//!
//! Every loss here is a weighted sum of Gaussian kernel evaluations over
//! one stacked feature matrix, `sum_ij W_ij k(x_i, x_j)`. MMD, each
//! class-pair term of CDD and each block-pair term of CABA contribute a
//! block of weights to `W`; a single pass then yields the value and the
//! exact gradient with respect to every feature entry. Bandwidths are
//! resolved from the data before the pass and are held constant by the
//! gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataframe::DomainKey;
use crate::error::{Error, Result};

/// How bandwidths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    /// `"median"`: median pairwise distance of the batch.
    Named(BandwidthRule),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// With the median rule, use `{sigma/2, sigma, 2 sigma}` instead of `sigma`.
    pub multi_scale: bool,
    /// Per-bandwidth weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Use `2 / (n_a^2 n_b^2)` for the MMD cross term instead of the
    /// standard `2 / (n_a n_b)`. Only for comparison runs: the result is no
    /// longer a squared RKHS distance and may be negative.
    pub literal_cross_term: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Named(BandwidthRule::Median),
            multi_scale: false,
            weights: None,
            literal_cross_term: false,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigmas: Vec<f64>) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigmas),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = &self.bandwidth {
            if s.is_empty() || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(
                    "kernel.bandwidth must be \"median\" or a non-empty list of positive reals".into(),
                ));
            }
        }
        if let Some(w) = &self.weights {
            let expected = match &self.bandwidth {
                Bandwidth::Fixed(s) => s.len(),
                Bandwidth::Named(_) if self.multi_scale => 3,
                Bandwidth::Named(_) => 1,
            };
            if w.len() != expected || w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!(
                    "kernel.weights must hold {expected} positive reals"
                )));
            }
        }
        Ok(())
    }

    /// Chains a gradient with respect to the resolved bandwidths back to the
    /// features they were resolved from. Zero for fixed bandwidths.
    pub fn bandwidth_backward(&self, features: &[f64], dim: usize, grad_sigma: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; features.len()];
        let scales: &[f64] = match (&self.bandwidth, self.multi_scale) {
            (Bandwidth::Fixed(_), _) => return Ok(grad),
            (Bandwidth::Named(BandwidthRule::Median), true) => &[0.5, 1.0, 2.0],
            (Bandwidth::Named(BandwidthRule::Median), false) => &[1.0],
        };
        if grad_sigma.len() != scales.len() {
            return Err(Error::Discrepancy(format!(
                "expected {} bandwidth gradients, got {}",
                scales.len(),
                grad_sigma.len()
            )));
        }
        let d_median: f64 = scales.iter().zip(grad_sigma).map(|(c, g)| c * g).sum();
        if d_median == 0.0 {
            return Ok(grad);
        }
        for (i, j, d, c) in median_pairs(features, dim)? {
            let g = d_median * c / d;
            for p in 0..dim {
                let diff = features[i * dim + p] - features[j * dim + p];
                grad[i * dim + p] += g * diff;
                grad[j * dim + p] -= g * diff;
            }
        }
        Ok(grad)
    }

    /// Fixes the bandwidths for one batch of `dim`-dimensional features.
    pub fn resolve(&self, features: &[f64], dim: usize) -> Result<Kernel> {
        self.validate()?;
        let sigmas = match &self.bandwidth {
            Bandwidth::Fixed(s) => s.clone(),
            Bandwidth::Named(BandwidthRule::Median) => {
                let sigma = median_bandwidth(features, dim)?;
                if self.multi_scale {
                    vec![sigma / 2.0, sigma, 2.0 * sigma]
                } else {
                    vec![sigma]
                }
            }
        };
        let weights = match &self.weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
            None => vec![1.0 / sigmas.len() as f64; sigmas.len()],
        };
        Kernel::new(sigmas, weights).map(|k| Kernel {
            literal_cross_term: self.literal_cross_term,
            ..k
        })
    }
}

/// A Gaussian mixture kernel with concrete bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    literal_cross_term: bool,
}

impl Kernel {
    pub fn new(sigmas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.len() != weights.len() {
            return Err(Error::Discrepancy(
                "kernel needs one weight per bandwidth and at least one bandwidth".into(),
            ));
        }
        if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Discrepancy(format!("non-positive bandwidth {s}")));
        }
        Ok(Self {
            sigmas,
            weights,
            literal_cross_term: false,
        })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma], vec![1.0])
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_literal_cross_term(mut self, on: bool) -> Self {
        self.literal_cross_term = on;
        self
    }

    fn eval_sq(&self, sq_dist: f64) -> f64 {
        self.sigmas
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-sq_dist / (2.0 * s * s)).exp())
            .sum()
    }

    /// `k(d)` and `dk/d(d^2)`.
    fn eval_with_slope(&self, sq_dist: f64) -> (f64, f64) {
        let mut k = 0.0;
        let mut slope = 0.0;
        for (s, w) in self.sigmas.iter().zip(&self.weights) {
            let inv = 1.0 / (2.0 * s * s);
            let e = w * (-sq_dist * inv).exp();
            k += e;
            slope -= e * inv;
        }
        (k, slope)
    }
}

/// `sum_b w_b exp(-|u - v|^2 / (2 sigma_b^2))`.
pub fn gaussian_kernel(u: &[f64], v: &[f64], kernel: &Kernel) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Discrepancy(format!(
            "kernel arguments differ in dimension ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    Ok(kernel.eval_sq(sq_dist(u, v)))
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median of the pairwise Euclidean distances between distinct rows,
/// ignoring zero distances. Falls back to 1 when every distance is zero.
pub fn median_bandwidth(features: &[f64], dim: usize) -> Result<f64> {
    let pairs = median_pairs(features, dim)?;
    if pairs.is_empty() {
        return Ok(1.0);
    }
    Ok(pairs.iter().map(|&(_, _, d, c)| c * d).sum())
}

/// The one or two row pairs whose distances make up the median, as
/// `(i, j, distance, coefficient)`. Empty when every distance is zero.
fn median_pairs(features: &[f64], dim: usize) -> Result<Vec<(usize, usize, f64, f64)>> {
    let n = if dim == 0 { 0 } else { features.len() / dim };
    if n < 2 {
        return Err(Error::Discrepancy(format!(
            "median bandwidth needs at least 2 rows, got {n}"
        )));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(row(features, dim, i), row(features, dim, j)).sqrt();
            if v > 0.0 {
                d.push((v, i, j));
            }
        }
    }
    if d.is_empty() {
        return Ok(Vec::new());
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let m = d.len();
    let pick = |k: usize, c: f64| (d[k].1, d[k].2, d[k].0, c);
    Ok(if m % 2 == 1 {
        vec![pick(m / 2, 1.0)]
    } else {
        vec![pick(m / 2 - 1, 0.5), pick(m / 2, 0.5)]
    })
}

fn row(x: &[f64], dim: usize, i: usize) -> &[f64] {
    &x[i * dim..(i + 1) * dim]
}

/// Features at the hooked layer together with their labels and domain keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    /// `n x dim` row-major.
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub keys: Vec<DomainKey>,
}

impl FeatureBatch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, keys: Vec<DomainKey>) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim || keys.len() != labels.len() {
            return Err(Error::Discrepancy(format!(
                "inconsistent feature batch: {} values, dim {dim}, {} labels, {} keys",
                features.len(),
                labels.len(),
                keys.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Discrepancy("feature batch contains non-finite values".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            keys,
        })
    }

    /// Unlabelled batch with default keys, for plain two-sample use.
    pub fn unlabelled(features: Vec<f64>, dim: usize) -> Result<Self> {
        let n = if dim == 0 { 0 } else { features.len() / dim };
        Self::new(features, dim, vec![0; n], vec![DomainKey::default(); n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        row(&self.features, self.dim, i)
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> FeatureBatch {
        FeatureBatch {
            features: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            keys: indices.iter().map(|&i| self.keys[i]).collect(),
        }
    }

    fn stacked(a: &FeatureBatch, b: &FeatureBatch) -> Result<FeatureBatch> {
        if a.dim != b.dim {
            return Err(Error::Discrepancy(format!(
                "feature dimensions differ ({} vs {})",
                a.dim, b.dim
            )));
        }
        let mut out = a.clone();
        out.features.extend_from_slice(&b.features);
        out.labels.extend_from_slice(&b.labels);
        out.keys.extend_from_slice(&b.keys);
        Ok(out)
    }
}

/// Dense weight matrix of a kernel quadratic form over `n` stacked rows.
#[derive(Debug, Clone)]
pub(crate) struct QuadForm {
    n: usize,
    w: Vec<f64>,
}

impl QuadForm {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            n,
            w: vec![0.0; n * n],
        }
    }

    /// Adds `coef * MMD^2(rows a, rows b)`.
    pub(crate) fn add_mmd(&mut self, a: &[usize], b: &[usize], coef: f64, literal: bool) {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let waa = coef / (na * na);
        let wbb = coef / (nb * nb);
        let wab = if literal {
            coef / (na * na * nb * nb)
        } else {
            coef / (na * nb)
        };
        for &i in a {
            for &j in a {
                self.w[i * self.n + j] += waa;
            }
            for &j in b {
                self.w[i * self.n + j] -= wab;
                self.w[j * self.n + i] -= wab;
            }
        }
        for &i in b {
            for &j in b {
                self.w[i * self.n + j] += wbb;
            }
        }
    }

    /// `sum_ij W_ij k(x_i, x_j)` with its gradients with respect to `x` and
    /// to each bandwidth.
    pub(crate) fn evaluate(&self, x: &[f64], dim: usize, kernel: &Kernel) -> Eval {
        let n = self.n;
        let mut value = 0.0;
        let mut grad = vec![0.0; n * dim];
        let mut grad_sigma = vec![0.0; kernel.sigmas.len()];
        for i in 0..n {
            let xi = row(x, dim, i);
            let wii = self.w[i * n + i];
            value += wii * kernel.eval_sq(0.0);
            for j in i + 1..n {
                let wsym = self.w[i * n + j] + self.w[j * n + i];
                if wsym == 0.0 {
                    continue;
                }
                let xj = row(x, dim, j);
                let d2 = sq_dist(xi, xj);
                let (k, slope) = kernel.eval_with_slope(d2);
                value += wsym * k;
                for (b, (sg, w)) in grad_sigma.iter_mut().zip(&kernel.weights).enumerate() {
                    let s = kernel.sigmas[b];
                    *sg += wsym * w * (-d2 / (2.0 * s * s)).exp() * d2 / (s * s * s);
                }
                // d k(|xi - xj|^2) / d xi = slope * 2 (xi - xj)
                let g = 2.0 * wsym * slope;
                for p in 0..dim {
                    let diff = xi[p] - xj[p];
                    grad[i * dim + p] += g * diff;
                    grad[j * dim + p] -= g * diff;
                }
            }
        }
        Eval {
            value,
            grad,
            grad_sigma,
        }
    }
}

pub(crate) struct Eval {
    value: f64,
    grad: Vec<f64>,
    grad_sigma: Vec<f64>,
}

/// Value of a two-sample discrepancy with gradients for both samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    /// Same layout as the first batch's features.
    pub grad_a: Vec<f64>,
    /// Same layout as the second batch's features.
    pub grad_b: Vec<f64>,
    /// Gradient with respect to each kernel bandwidth.
    pub grad_sigma: Vec<f64>,
}

fn split_grad(e: Eval, first_len: usize) -> PairGrad {
    let mut grad_a = e.grad;
    let grad_b = grad_a.split_off(first_len);
    PairGrad {
        value: e.value,
        grad_a,
        grad_b,
        grad_sigma: e.grad_sigma,
    }
}

/// Biased squared MMD between two batches:
/// `mean k(a, a') + mean k(b, b') - 2 mean k(a, b)`.
pub fn mmd2(a: &FeatureBatch, b: &FeatureBatch, kernel: &Kernel) -> Result<PairGrad> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Discrepancy("mmd2 needs two non-empty batches".into()));
    }
    let joint = FeatureBatch::stacked(a, b)?;
    let ia: Vec<usize> = (0..a.len()).collect();
    let ib: Vec<usize> = (a.len()..joint.len()).collect();
    let mut q = QuadForm::new(joint.len());
    q.add_mmd(&ia, &ib, 1.0, kernel.literal_cross_term);
    Ok(split_grad(q.evaluate(&joint.features, joint.dim, kernel), a.features.len()))
}

/// Indicator `mu_{c1 c2}(y1, y2)`: 1 when `y1 = c1` and `y2 = c2`.
pub fn class_mask(y1: usize, y2: usize, c1: usize, c2: usize) -> u8 {
    u8::from(y1 == c1 && y2 == c2)
}

fn indices_of(labels: &[usize], class: usize, base: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| base + i)
        .collect()
}

/// Class-aware discrepancy `e1 + e2 - 2 e3` between class `c1` of the
/// source batch and class `c2` of the target batch. With mask-normalized
/// weights this is the MMD between the two class-filtered subsets.
///
/// Returns an error when either masked subset is empty; callers that
/// average over class pairs skip such pairs.
pub fn class_domain_discrepancy(
    source: &FeatureBatch,
    target: &FeatureBatch,
    c1: usize,
    c2: usize,
    kernel: &Kernel,
) -> Result<PairGrad> {
    let joint = FeatureBatch::stacked(source, target)?;
    let a = indices_of(&source.labels, c1, 0);
    let b = indices_of(&target.labels, c2, source.len());
    if a.is_empty() || b.is_empty() {
        return Err(Error::Discrepancy(format!(
            "class pair ({c1}, {c2}) has an empty masked subset"
        )));
    }
    let mut q = QuadForm::new(joint.len());
    q.add_mmd(&a, &b, 1.0, false);
    Ok(split_grad(q.evaluate(&joint.features, joint.dim, kernel), source.features.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CddOutput {
    pub value: f64,
    pub grad_source: Vec<f64>,
    pub grad_target: Vec<f64>,
    pub grad_sigma: Vec<f64>,
    /// Mean of the valid intra-class terms.
    pub intra: f64,
    /// Mean of the valid inter-class terms (0 when there are none).
    pub inter: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    /// Class pairs skipped for an empty masked subset.
    pub skipped: Vec<(usize, usize)>,
}

/// Contrastive domain discrepancy: mean intra-class term minus mean
/// inter-class term, averaged over the class pairs present in both batches.
pub fn cdd(source: &FeatureBatch, target: &FeatureBatch, class_count: usize, kernel: &Kernel) -> Result<CddOutput> {
    let joint = FeatureBatch::stacked(source, target)?;
    let src: Vec<Vec<usize>> = (0..class_count)
        .map(|c| indices_of(&source.labels, c, 0))
        .collect();
    let tgt: Vec<Vec<usize>> = (0..class_count)
        .map(|c| indices_of(&target.labels, c, source.len()))
        .collect();

    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let mut skipped = Vec::new();
    for c1 in 0..class_count {
        for c2 in 0..class_count {
            if src[c1].is_empty() || tgt[c2].is_empty() {
                skipped.push((c1, c2));
            } else if c1 == c2 {
                intra.push((c1, c2));
            } else {
                inter.push((c1, c2));
            }
        }
    }
    if intra.is_empty() {
        return Err(Error::Discrepancy(
            "cdd: no class is present in both source and target".into(),
        ));
    }

    let n = joint.len();
    let mut q_intra = QuadForm::new(n);
    for &(c, _) in &intra {
        q_intra.add_mmd(&src[c], &tgt[c], 1.0 / intra.len() as f64, false);
    }
    let Eval {
        value: intra_v,
        mut grad,
        mut grad_sigma,
    } = q_intra.evaluate(&joint.features, joint.dim, kernel);
    let mut inter_v = 0.0;
    if !inter.is_empty() {
        let mut q_inter = QuadForm::new(n);
        for &(c1, c2) in &inter {
            q_inter.add_mmd(&src[c1], &tgt[c2], 1.0 / inter.len() as f64, false);
        }
        let e = q_inter.evaluate(&joint.features, joint.dim, kernel);
        inter_v = e.value;
        for (a, b) in grad.iter_mut().zip(e.grad) {
            *a -= b;
        }
        for (a, b) in grad_sigma.iter_mut().zip(e.grad_sigma) {
            *a -= b;
        }
    }
    let grad_target = grad.split_off(source.features.len());
    Ok(CddOutput {
        value: intra_v - inter_v,
        grad_source: grad,
        grad_target,
        grad_sigma,
        intra: intra_v,
        inter: inter_v,
        intra_pairs: intra.len(),
        inter_pairs: inter.len(),
        skipped,
    })
}

/// Which sub-domains CABA pairs inside a subject.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Blocks of the same (subject, session, class).
    #[default]
    Block,
    /// Sessions of the same (subject, class), for corpora without blocks.
    Session,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CabaOutput {
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_sigma: Vec<f64>,
    pub pairs: usize,
    /// Set when no valid pair exists and the value is 0 by convention.
    pub degenerate: bool,
}

/// Class-aware block-aware discrepancy: the mean squared MMD between
/// same-class samples of every pair of distinct blocks within one
/// subject's session (or of distinct sessions within one subject).
pub fn caba(batch: &FeatureBatch, kernel: &Kernel, pairing: Pairing) -> Result<CabaOutput> {
    if batch.is_empty() {
        return Err(Error::Discrepancy("caba needs a non-empty batch".into()));
    }
    let groups = caba_groups(batch, pairing);
    let mut pairs = Vec::new();
    for domains in groups.values() {
        let members: Vec<&Vec<usize>> = domains.values().collect();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                pairs.push((members[i], members[j]));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(CabaOutput {
            value: 0.0,
            grad: vec![0.0; batch.features.len()],
            grad_sigma: vec![0.0; kernel.sigmas.len()],
            pairs: 0,
            degenerate: true,
        });
    }
    let mut q = QuadForm::new(batch.len());
    let coef = 1.0 / pairs.len() as f64;
    for (a, b) in &pairs {
        q.add_mmd(a, b, coef, kernel.literal_cross_term);
    }
    let e = q.evaluate(&batch.features, batch.dim, kernel);
    Ok(CabaOutput {
        value: e.value,
        grad: e.grad,
        grad_sigma: e.grad_sigma,
        pairs: pairs.len(),
        degenerate: false,
    })
}

/// `(subject, session-or-MAX, class) -> domain id -> row indices`.
fn caba_groups(batch: &FeatureBatch, pairing: Pairing) -> BTreeMap<(u32, u32, usize), BTreeMap<u32, Vec<usize>>> {
    let mut groups: BTreeMap<(u32, u32, usize), BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, (k, &label)) in batch.keys.iter().zip(&batch.labels).enumerate() {
        let (group, domain) = match pairing {
            Pairing::Block => ((k.subject, k.session, label), k.block),
            Pairing::Session => ((k.subject, u32::MAX, label), k.session),
        };
        groups.entry(group).or_default().entry(domain).or_default().push(i);
    }
    groups
}

/// Number of valid CABA pairs a batch would produce.
pub fn caba_pair_count(batch: &FeatureBatch, pairing: Pairing) -> usize {
    caba_groups(batch, pairing)
        .values()
        .map(|d| d.len() * d.len().saturating_sub(1) / 2)
        .sum()
}

/// Mean over feature dimensions of the empirical 1-Wasserstein distance
/// between the two marginals. Unequal sizes are matched at the smaller
/// sample's quantile levels `(i + 0.5) / m` by linear interpolation in the
/// larger sample.
pub fn wasserstein1_diag(a: &FeatureBatch, b: &FeatureBatch) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Discrepancy("wasserstein needs two non-empty batches".into()));
    }
    if a.dim != b.dim {
        return Err(Error::Discrepancy(format!(
            "feature dimensions differ ({} vs {})",
            a.dim, b.dim
        )));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let column = |x: &FeatureBatch, p: usize| {
        let mut c: Vec<f64> = (0..x.len()).map(|i| x.row(i)[p]).collect();
        c.sort_by(f64::total_cmp);
        c
    };
    let mut total = 0.0;
    for p in 0..a.dim {
        let s = column(small, p);
        let l = column(large, p);
        let m = s.len();
        let dist: f64 = if m == l.len() {
            s.iter().zip(&l).map(|(x, y)| (x - y).abs()).sum()
        } else {
            s.iter()
                .enumerate()
                .map(|(i, x)| (x - quantile(&l, (i as f64 + 0.5) / m as f64)).abs())
                .sum()
        };
        total += dist / m as f64;
    }
    Ok(total / a.dim as f64)
}

/// Empirical quantile of sorted `x` at level `q`, placing order statistic
/// `i` at level `(i + 0.5) / n`.
fn quantile(x: &[f64], q: f64) -> f64 {
    let n = x.len();
    let pos = (q * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    x[lo] + frac * (x[hi] - x[lo])
}
