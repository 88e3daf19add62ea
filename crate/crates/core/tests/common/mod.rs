//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use caba_da::dataframe::DomainKey;
use caba_da::discrepancy::{FeatureBatch, Kernel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn k_naive(u: &[f64], v: &[f64], sigmas: &[f64], weights: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for p in 0..u.len() {
        d2 += (u[p] - v[p]) * (u[p] - v[p]);
    }
    let mut out = 0.0;
    for b in 0..sigmas.len() {
        out += weights[b] * (-d2 / (2.0 * sigmas[b] * sigmas[b])).exp();
    }
    out
}

pub fn rows(batch: &FeatureBatch) -> Vec<Vec<f64>> {
    (0..batch.len()).map(|i| batch.row(i).to_vec()).collect()
}

pub fn mmd_naive(a: &[Vec<f64>], b: &[Vec<f64>], k: &Kernel) -> f64 {
    let (s, w) = (k.sigmas(), k.weights());
    let mean = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut t = 0.0;
        for u in x {
            for v in y {
                t += k_naive(u, v, s, w);
            }
        }
        t / (x.len() * y.len()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

/// `e1 + e2 - 2 e3` with explicit pairwise indicators.
pub fn cdd_term_naive(src: &FeatureBatch, tgt: &FeatureBatch, c1: usize, c2: usize, k: &Kernel) -> Option<f64> {
    let (s, w) = (k.sigmas(), k.weights());
    let (xs, xt) = (rows(src), rows(tgt));
    let (mut e1, mut n1, mut e2, mut n2, mut e3, mut n3) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            let m = f64::from(u8::from(src.labels[i] == c1 && src.labels[j] == c1));
            e1 += m * k_naive(&xs[i], &xs[j], s, w);
            n1 += m;
        }
    }
    for i in 0..xt.len() {
        for j in 0..xt.len() {
            let m = f64::from(u8::from(tgt.labels[i] == c2 && tgt.labels[j] == c2));
            e2 += m * k_naive(&xt[i], &xt[j], s, w);
            n2 += m;
        }
    }
    for i in 0..xs.len() {
        for j in 0..xt.len() {
            let m = f64::from(u8::from(src.labels[i] == c1 && tgt.labels[j] == c2));
            e3 += m * k_naive(&xs[i], &xt[j], s, w);
            n3 += m;
        }
    }
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some(e1 / n1 + e2 / n2 - 2.0 * e3 / n3)
}

pub fn cdd_naive(src: &FeatureBatch, tgt: &FeatureBatch, m: usize, k: &Kernel) -> Option<f64> {
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for c1 in 0..m {
        for c2 in 0..m {
            if let Some(v) = cdd_term_naive(src, tgt, c1, c2, k) {
                if c1 == c2 {
                    intra.push(v);
                } else {
                    inter.push(v);
                }
            }
        }
    }
    if intra.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Some(mean(&intra) - mean(&inter))
}

pub fn caba_naive(batch: &FeatureBatch, k: &Kernel) -> f64 {
    let x = rows(batch);
    let groups: BTreeSet<(u32, u32, usize)> = (0..batch.len())
        .map(|i| (batch.keys[i].subject, batch.keys[i].session, batch.labels[i]))
        .collect();
    let mut terms = Vec::new();
    for (subj, sess, class) in groups {
        let in_group = |i: usize| {
            batch.keys[i].subject == subj && batch.keys[i].session == sess && batch.labels[i] == class
        };
        let blocks: BTreeSet<u32> = (0..batch.len()).filter(|&i| in_group(i)).map(|i| batch.keys[i].block).collect();
        let blocks: Vec<u32> = blocks.into_iter().collect();
        for a in 0..blocks.len() {
            for b in a + 1..blocks.len() {
                let pick = |blk: u32| -> Vec<Vec<f64>> {
                    (0..batch.len())
                        .filter(|&i| in_group(i) && batch.keys[i].block == blk)
                        .map(|i| x[i].clone())
                        .collect()
                };
                terms.push(mmd_naive(&pick(blocks[a]), &pick(blocks[b]), k));
            }
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

pub fn random_kernel(rng: &mut ChaCha8Rng) -> Kernel {
    let n = rng.random_range(1..=3);
    let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Kernel::new(sigmas, raw.iter().map(|w| w / total).collect()).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> FeatureBatch {
    let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let keys = (0..n)
        .map(|t| DomainKey::new(rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..3), t as u32))
        .collect();
    FeatureBatch::new(features, dim, labels, keys).unwrap()
}
