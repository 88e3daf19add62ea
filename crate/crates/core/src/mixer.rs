//! MLP-Mixer classifier for multichannel time series.
//!
//! Per window: every timestep (G spatial channels x F features) is embedded
//! to a `C`-wide token by one fully connected layer; `N` mixer layers follow,
//! each a pre-norm temporal-mixing MLP (along time, per token channel) and
//! a pre-norm channel-mixing MLP (along the token width, per timestep), both
//! with skip connections; a final layer norm, global average pooling over
//! time and a linear head produce the logits. The pooled vector is the
//! feature the discrepancy losses consume.
//!
//! Gradients are hand-derived reverse mode over cached intermediates.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataframe::Batch;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Checkpoint format written by [`save_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    /// Timesteps per window (`T`).
    pub seq_len: usize,
    /// Spatial channels (`G`).
    pub groups: usize,
    /// Features per spatial channel (`F`).
    pub features_per_group: usize,
    /// Token width (`C`).
    pub width: usize,
    /// Mixer layers (`N`).
    pub layers: usize,
    /// Hidden width of the temporal-mixing MLP.
    pub temporal_hidden: usize,
    /// Hidden width of the channel-mixing MLP.
    pub channel_hidden: usize,
    pub classes: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl MixerConfig {
    /// The Tufts-scale configuration: 150 timesteps of 2 channels x 4 features.
    pub fn tufts() -> Self {
        Self {
            seq_len: 150,
            groups: 2,
            features_per_group: 4,
            width: 16,
            layers: 4,
            temporal_hidden: 64,
            channel_hidden: 32,
            classes: 2,
            dropout: 0.0,
        }
    }

    pub fn input_features(&self) -> usize {
        self.groups * self.features_per_group
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("seq_len", self.seq_len),
            ("groups", self.groups),
            ("features_per_group", self.features_per_group),
            ("width", self.width),
            ("temporal_hidden", self.temporal_hidden),
            ("channel_hidden", self.channel_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (t, d, c) = (self.seq_len, self.input_features(), self.width);
        let (th, ch, m) = (self.temporal_hidden, self.channel_hidden, self.classes);
        let layer = 2 * c + (t * th + th + th * t + t) + 2 * c + (c * ch + ch + ch * c + c);
        d * c + c + self.layers * layer + 2 * c + c * m + m
    }
}

/// Multiply-accumulates of one eval-mode forward pass for one window.
/// Layer norms, activations and bias additions count as zero.
pub fn count_macs(cfg: &MixerConfig) -> u64 {
    let (t, d, c) = (cfg.seq_len as u64, cfg.input_features() as u64, cfg.width as u64);
    let (th, ch, m) = (
        cfg.temporal_hidden as u64,
        cfg.channel_hidden as u64,
        cfg.classes as u64,
    );
    let per_layer = 2 * c * t * th + 2 * t * c * ch;
    t * d * c + cfg.layers as u64 * per_layer + c * m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayer {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `T x T_h`.
    pub temporal_w1: Tensor,
    pub temporal_b1: Tensor,
    /// `T_h x T`.
    pub temporal_w2: Tensor,
    pub temporal_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// `C x C_h`.
    pub channel_w1: Tensor,
    pub channel_b1: Tensor,
    /// `C_h x C`.
    pub channel_w2: Tensor,
    pub channel_b2: Tensor,
}

impl MixerLayer {
    fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("temporal_w1", &self.temporal_w1),
            ("temporal_b1", &self.temporal_b1),
            ("temporal_w2", &self.temporal_w2),
            ("temporal_b2", &self.temporal_b2),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("channel_w1", &self.channel_w1),
            ("channel_b1", &self.channel_b1),
            ("channel_w2", &self.channel_w2),
            ("channel_b2", &self.channel_b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.temporal_w1,
            &mut self.temporal_b1,
            &mut self.temporal_w2,
            &mut self.temporal_b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.channel_w1,
            &mut self.channel_b1,
            &mut self.channel_w2,
            &mut self.channel_b2,
        ]
    }
}

/// All trainable weights. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    /// `(G*F) x C`.
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub layers: Vec<MixerLayer>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    /// `C x M`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl MixerParams {
    /// All-zero tensors with the shapes `cfg` declares.
    pub fn zeros(cfg: &MixerConfig) -> Self {
        let (t, d, c) = (cfg.seq_len, cfg.input_features(), cfg.width);
        let (th, ch, m) = (cfg.temporal_hidden, cfg.channel_hidden, cfg.classes);
        let layer = || MixerLayer {
            ln1_gamma: Tensor::zeros(&[c]),
            ln1_beta: Tensor::zeros(&[c]),
            temporal_w1: Tensor::zeros(&[t, th]),
            temporal_b1: Tensor::zeros(&[th]),
            temporal_w2: Tensor::zeros(&[th, t]),
            temporal_b2: Tensor::zeros(&[t]),
            ln2_gamma: Tensor::zeros(&[c]),
            ln2_beta: Tensor::zeros(&[c]),
            channel_w1: Tensor::zeros(&[c, ch]),
            channel_b1: Tensor::zeros(&[ch]),
            channel_w2: Tensor::zeros(&[ch, c]),
            channel_b2: Tensor::zeros(&[c]),
        };
        Self {
            embed_w: Tensor::zeros(&[d, c]),
            embed_b: Tensor::zeros(&[c]),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_gamma: Tensor::zeros(&[c]),
            final_beta: Tensor::zeros(&[c]),
            head_w: Tensor::zeros(&[c, m]),
            head_b: Tensor::zeros(&[m]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_gamma".into(), &self.final_gamma));
        out.push(("final_beta".into(), &self.final_beta));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`MixerParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// True when every tensor matches the shape `cfg` declares.
    pub fn matches(&self, cfg: &MixerConfig) -> bool {
        let reference = MixerParams::zeros(cfg);
        let a = self.tensors();
        let b = reference.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.1.shape == y.1.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &MixerConfig, seed: u64) -> MixerParams {
    let mut p = MixerParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glorot = |t: &mut Tensor, rng: &mut ChaCha8Rng| {
        let (fan_in, fan_out) = (t.shape[0], t.shape[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut t.data {
            *v = rng.random_range(-limit..limit);
        }
    };
    glorot(&mut p.embed_w, &mut rng);
    for l in &mut p.layers {
        l.ln1_gamma.data.fill(1.0);
        l.ln2_gamma.data.fill(1.0);
        glorot(&mut l.temporal_w1, &mut rng);
        glorot(&mut l.temporal_w2, &mut rng);
        glorot(&mut l.channel_w1, &mut rng);
        glorot(&mut l.channel_w2, &mut rng);
    }
    p.final_gamma.data.fill(1.0);
    glorot(&mut p.head_w, &mut rng);
    p
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer-norm intermediates for one window (per timestep over `C`).
#[derive(Debug, Clone, Default)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    ln1: NormCache,
    /// LN1 output, `T x C`.
    u: Vec<f64>,
    /// Temporal pre-activation, `C x T_h`.
    z1: Vec<f64>,
    /// Temporal hidden after GELU and dropout, `C x T_h`.
    a1: Vec<f64>,
    /// Dropout scale per hidden unit (empty when no dropout).
    m1: Vec<f64>,
    ln2: NormCache,
    /// LN2 output, `T x C`.
    v: Vec<f64>,
    /// Channel pre-activation, `T x C_h`.
    z3: Vec<f64>,
    a3: Vec<f64>,
    m3: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct SampleCache {
    layers: Vec<LayerCache>,
    final_ln: NormCache,
}

/// Result of a forward pass with everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `n x M`.
    pub logits: Vec<f64>,
    /// `n x C`.
    pub pooled: Vec<f64>,
    pub mode: Mode,
    /// Seed the dropout masks were drawn from.
    pub seed: u64,
    cache: Vec<SampleCache>,
    input: Vec<f64>,
    classes: usize,
    width: usize,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pooled_of(&self, i: usize) -> &[f64] {
        &self.pooled[i * self.width..(i + 1) * self.width]
    }

    /// Argmax per sample, ties to the lower class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| argmax(self.logits_of(i)))
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize, out: &mut [f64]) -> NormCache {
    let mut cache = NormCache {
        xhat: vec![0.0; rows * cols],
        rstd: vec![0.0; rows],
    };
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[r] = rstd;
        for c in 0..cols {
            let xh = (row[c] - mean) * rstd;
            cache.xhat[r * cols + c] = xh;
            out[r * cols + c] = gamma[c] * xh + beta[c];
        }
    }
    cache
}

/// Accumulates gain/shift gradients and returns the input gradient.
fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    rows: usize,
    cols: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            dgamma[c] += dy[i] * cache.xhat[i];
            dbeta[c] += dy[i];
            dxhat[c] = dy[i] * gamma[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * cache.xhat[i];
        }
        mean_d /= cols as f64;
        mean_dx /= cols as f64;
        for c in 0..cols {
            let i = r * cols + c;
            dx[i] = cache.rstd[r] * (dxhat[c] - mean_d - cache.xhat[i] * mean_dx);
        }
    }
    dx
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

fn check_batch(cfg: &MixerConfig, batch: &Batch) -> Result<()> {
    let s = batch.shape;
    if s.seq_len != cfg.seq_len || s.features != cfg.input_features() || s.groups != cfg.groups {
        return Err(Error::Shape(format!(
            "batch windows are {}x{} with {} groups, model expects {}x{} with {} groups",
            s.seq_len,
            s.features,
            s.groups,
            cfg.seq_len,
            cfg.input_features(),
            cfg.groups
        )));
    }
    if batch.values.len() != batch.len() * s.len() {
        return Err(Error::Shape("batch value buffer does not match its labels".into()));
    }
    Ok(())
}

/// Runs the model on every window of `batch`. In `Mode::Train` dropout
/// masks are drawn from `seed`; `Mode::Eval` ignores the seed.
///
/// Non-finite activations are reported with the layer they appeared in:
/// 0 for the embedding, `1..=N` for mixer layers, `N + 1` for the head.
pub fn forward(params: &MixerParams, cfg: &MixerConfig, batch: &Batch, mode: Mode, seed: u64) -> Result<ForwardTrace> {
    check_batch(cfg, batch)?;
    if !params.matches(cfg) {
        return Err(Error::Shape("parameters do not match the model config".into()));
    }
    let (t, d, c) = (cfg.seq_len, cfg.input_features(), cfg.width);
    let (th, ch, m) = (cfg.temporal_hidden, cfg.channel_hidden, cfg.classes);
    let n = batch.len();
    let dropout = mode == Mode::Train && cfg.dropout > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut trace = ForwardTrace {
        logits: vec![0.0; n * m],
        pooled: vec![0.0; n * c],
        mode,
        seed,
        cache: Vec::with_capacity(n),
        input: batch.values.clone(),
        classes: m,
        width: c,
    };

    let mut h = vec![0.0; t * c];
    let mut z2 = vec![0.0; t];
    for s in 0..n {
        let x = batch.window(s);
        let mut sc = SampleCache::default();

        // token embedding
        for ti in 0..t {
            let xr = &x[ti * d..(ti + 1) * d];
            let hr = &mut h[ti * c..(ti + 1) * c];
            hr.copy_from_slice(&params.embed_b.data);
            for (k, xv) in xr.iter().enumerate() {
                let wr = &params.embed_w.data[k * c..(k + 1) * c];
                for j in 0..c {
                    hr[j] += xv * wr[j];
                }
            }
        }
        check_finite(&h, 0)?;

        for (li, lp) in params.layers.iter().enumerate() {
            let mut lc = LayerCache {
                u: vec![0.0; t * c],
                z1: vec![0.0; c * th],
                a1: vec![0.0; c * th],
                v: vec![0.0; t * c],
                z3: vec![0.0; t * ch],
                a3: vec![0.0; t * ch],
                ..Default::default()
            };

            // temporal mixing: per token channel, along time
            lc.ln1 = layer_norm(&h, &lp.ln1_gamma.data, &lp.ln1_beta.data, t, c, &mut lc.u);
            if dropout {
                lc.m1 = dropout_mask(&mut rng, c * th, cfg.dropout);
            }
            for col in 0..c {
                let z = &mut lc.z1[col * th..(col + 1) * th];
                z.copy_from_slice(&lp.temporal_b1.data);
                for ti in 0..t {
                    let uv = lc.u[ti * c + col];
                    let wr = &lp.temporal_w1.data[ti * th..(ti + 1) * th];
                    for k in 0..th {
                        z[k] += uv * wr[k];
                    }
                }
                for k in 0..th {
                    let mut a = gelu(z[k]);
                    if dropout {
                        a *= lc.m1[col * th + k];
                    }
                    lc.a1[col * th + k] = a;
                }
                z2.copy_from_slice(&lp.temporal_b2.data);
                for k in 0..th {
                    let a = lc.a1[col * th + k];
                    let wr = &lp.temporal_w2.data[k * t..(k + 1) * t];
                    for ti in 0..t {
                        z2[ti] += a * wr[ti];
                    }
                }
                for ti in 0..t {
                    h[ti * c + col] += z2[ti];
                }
            }

            // channel mixing: per timestep, along the token width
            lc.ln2 = layer_norm(&h, &lp.ln2_gamma.data, &lp.ln2_beta.data, t, c, &mut lc.v);
            if dropout {
                lc.m3 = dropout_mask(&mut rng, t * ch, cfg.dropout);
            }
            for ti in 0..t {
                let vr = &lc.v[ti * c..(ti + 1) * c];
                let z = &mut lc.z3[ti * ch..(ti + 1) * ch];
                z.copy_from_slice(&lp.channel_b1.data);
                for (j, vv) in vr.iter().enumerate() {
                    let wr = &lp.channel_w1.data[j * ch..(j + 1) * ch];
                    for k in 0..ch {
                        z[k] += vv * wr[k];
                    }
                }
                for k in 0..ch {
                    let mut a = gelu(z[k]);
                    if dropout {
                        a *= lc.m3[ti * ch + k];
                    }
                    lc.a3[ti * ch + k] = a;
                }
                let hr = &mut h[ti * c..(ti + 1) * c];
                for j in 0..c {
                    hr[j] += lp.channel_b2.data[j];
                }
                for k in 0..ch {
                    let a = lc.a3[ti * ch + k];
                    let wr = &lp.channel_w2.data[k * c..(k + 1) * c];
                    for j in 0..c {
                        hr[j] += a * wr[j];
                    }
                }
            }
            check_finite(&h, li + 1)?;
            sc.layers.push(lc);
        }

        let mut y = vec![0.0; t * c];
        sc.final_ln = layer_norm(&h, &params.final_gamma.data, &params.final_beta.data, t, c, &mut y);
        let pooled = &mut trace.pooled[s * c..(s + 1) * c];
        for ti in 0..t {
            for j in 0..c {
                pooled[j] += y[ti * c + j];
            }
        }
        for v in pooled.iter_mut() {
            *v /= t as f64;
        }
        let logits = &mut trace.logits[s * m..(s + 1) * m];
        logits.copy_from_slice(&params.head_b.data);
        for j in 0..c {
            let wr = &params.head_w.data[j * m..(j + 1) * m];
            for k in 0..m {
                logits[k] += pooled[j] * wr[k];
            }
        }
        check_finite(logits, cfg.layers + 1)?;
        check_finite(pooled, cfg.layers + 1)?;
        trace.cache.push(sc);
    }
    Ok(trace)
}

/// Eval-mode logits (`n x M`) and pooled features (`n x C`), computed in
/// chunks so large test sets do not hold every activation at once.
pub fn infer(params: &MixerParams, cfg: &MixerConfig, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
    const CHUNK: usize = 256;
    check_batch(cfg, batch)?;
    let mut logits = Vec::with_capacity(batch.len() * cfg.classes);
    let mut pooled = Vec::with_capacity(batch.len() * cfg.width);
    let w = batch.shape.len();
    for start in (0..batch.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(batch.len());
        let chunk = Batch {
            values: batch.values[start * w..end * w].to_vec(),
            labels: batch.labels[start..end].to_vec(),
            keys: batch.keys[start..end].to_vec(),
            shape: batch.shape,
        };
        let tr = forward(params, cfg, &chunk, Mode::Eval, 0)?;
        logits.extend_from_slice(&tr.logits);
        pooled.extend_from_slice(&tr.pooled);
    }
    Ok((logits, pooled))
}

/// Gradients of a scalar loss with respect to parameters and inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: MixerParams,
    /// Same layout as the batch values.
    pub input: Vec<f64>,
}

/// Reverse pass. `d_logits` (`n x M`) and `d_pooled` (`n x C`) are the
/// upstream gradients of the loss; either may be empty to mean zero.
pub fn backward(
    trace: &ForwardTrace,
    params: &MixerParams,
    cfg: &MixerConfig,
    d_logits: &[f64],
    d_pooled: &[f64],
) -> Result<Gradients> {
    let (t, d, c) = (cfg.seq_len, cfg.input_features(), cfg.width);
    let (th, ch, m) = (cfg.temporal_hidden, cfg.channel_hidden, cfg.classes);
    let n = trace.len();
    if !params.matches(cfg)
        || trace.classes != m
        || trace.width != c
        || trace.cache.iter().any(|s| s.layers.len() != cfg.layers)
        || trace.input.len() != n * t * d
    {
        return Err(Error::Shape("trace does not match parameters/config".into()));
    }
    if !(d_logits.is_empty() || d_logits.len() == n * m) || !(d_pooled.is_empty() || d_pooled.len() == n * c) {
        return Err(Error::Shape("upstream gradient has the wrong size".into()));
    }

    let mut g = params.zeros_like();
    let mut d_input = vec![0.0; n * t * d];
    let mut dp = vec![0.0; c];
    let mut dh = vec![0.0; t * c];
    let mut da = vec![0.0; th.max(ch)];
    let mut dz2 = vec![0.0; t];

    for s in 0..n {
        let sc = &trace.cache[s];
        let pooled = trace.pooled_of(s);

        // head
        dp.fill(0.0);
        if !d_pooled.is_empty() {
            dp.copy_from_slice(&d_pooled[s * c..(s + 1) * c]);
        }
        if !d_logits.is_empty() {
            let dl = &d_logits[s * m..(s + 1) * m];
            for k in 0..m {
                g.head_b.data[k] += dl[k];
            }
            for j in 0..c {
                let wr = &params.head_w.data[j * m..(j + 1) * m];
                let gw = &mut g.head_w.data[j * m..(j + 1) * m];
                for k in 0..m {
                    gw[k] += pooled[j] * dl[k];
                    dp[j] += wr[k] * dl[k];
                }
            }
        }

        // pooling then final norm
        for ti in 0..t {
            for j in 0..c {
                dh[ti * c + j] = dp[j] / t as f64;
            }
        }
        dh = layer_norm_backward(
            &dh,
            &sc.final_ln,
            &params.final_gamma.data,
            t,
            c,
            &mut g.final_gamma.data,
            &mut g.final_beta.data,
        );

        for (li, lp) in params.layers.iter().enumerate().rev() {
            let lc = &sc.layers[li];
            let gl = &mut g.layers[li];

            // channel mixing
            let mut dv = vec![0.0; t * c];
            for ti in 0..t {
                let dhr = &dh[ti * c..(ti + 1) * c];
                for j in 0..c {
                    gl.channel_b2.data[j] += dhr[j];
                }
                for k in 0..ch {
                    let a = lc.a3[ti * ch + k];
                    let wr = &lp.channel_w2.data[k * c..(k + 1) * c];
                    let gw = &mut gl.channel_w2.data[k * c..(k + 1) * c];
                    let mut acc = 0.0;
                    for j in 0..c {
                        gw[j] += a * dhr[j];
                        acc += wr[j] * dhr[j];
                    }
                    let mut dz = acc * gelu_grad(lc.z3[ti * ch + k]);
                    if !lc.m3.is_empty() {
                        dz *= lc.m3[ti * ch + k];
                    }
                    da[k] = dz;
                }
                for k in 0..ch {
                    gl.channel_b1.data[k] += da[k];
                }
                let vr = &lc.v[ti * c..(ti + 1) * c];
                let dvr = &mut dv[ti * c..(ti + 1) * c];
                for j in 0..c {
                    let wr = &lp.channel_w1.data[j * ch..(j + 1) * ch];
                    let gw = &mut gl.channel_w1.data[j * ch..(j + 1) * ch];
                    let mut acc = 0.0;
                    for k in 0..ch {
                        gw[k] += vr[j] * da[k];
                        acc += wr[k] * da[k];
                    }
                    dvr[j] = acc;
                }
            }
            let dres = layer_norm_backward(
                &dv,
                &lc.ln2,
                &lp.ln2_gamma.data,
                t,
                c,
                &mut gl.ln2_gamma.data,
                &mut gl.ln2_beta.data,
            );
            for (a, b) in dh.iter_mut().zip(&dres) {
                *a += b;
            }

            // temporal mixing
            let mut du = vec![0.0; t * c];
            for col in 0..c {
                for ti in 0..t {
                    dz2[ti] = dh[ti * c + col];
                    gl.temporal_b2.data[ti] += dz2[ti];
                }
                for k in 0..th {
                    let a = lc.a1[col * th + k];
                    let wr = &lp.temporal_w2.data[k * t..(k + 1) * t];
                    let gw = &mut gl.temporal_w2.data[k * t..(k + 1) * t];
                    let mut acc = 0.0;
                    for ti in 0..t {
                        gw[ti] += a * dz2[ti];
                        acc += wr[ti] * dz2[ti];
                    }
                    let mut dz = acc * gelu_grad(lc.z1[col * th + k]);
                    if !lc.m1.is_empty() {
                        dz *= lc.m1[col * th + k];
                    }
                    da[k] = dz;
                }
                for k in 0..th {
                    gl.temporal_b1.data[k] += da[k];
                }
                for ti in 0..t {
                    let uv = lc.u[ti * c + col];
                    let wr = &lp.temporal_w1.data[ti * th..(ti + 1) * th];
                    let gw = &mut gl.temporal_w1.data[ti * th..(ti + 1) * th];
                    let mut acc = 0.0;
                    for k in 0..th {
                        gw[k] += uv * da[k];
                        acc += wr[k] * da[k];
                    }
                    du[ti * c + col] = acc;
                }
            }
            let dres = layer_norm_backward(
                &du,
                &lc.ln1,
                &lp.ln1_gamma.data,
                t,
                c,
                &mut gl.ln1_gamma.data,
                &mut gl.ln1_beta.data,
            );
            for (a, b) in dh.iter_mut().zip(&dres) {
                *a += b;
            }
        }

        // embedding
        let x = &trace.input[s * t * d..(s + 1) * t * d];
        let dx = &mut d_input[s * t * d..(s + 1) * t * d];
        for ti in 0..t {
            let dhr = &dh[ti * c..(ti + 1) * c];
            for j in 0..c {
                g.embed_b.data[j] += dhr[j];
            }
            for k in 0..d {
                let xv = x[ti * d + k];
                let wr = &params.embed_w.data[k * c..(k + 1) * c];
                let gw = &mut g.embed_w.data[k * c..(k + 1) * c];
                let mut acc = 0.0;
                for j in 0..c {
                    gw[j] += xv * dhr[j];
                    acc += wr[j] * dhr[j];
                }
                dx[ti * d + k] = acc;
            }
        }
    }
    Ok(Gradients {
        params: g,
        input: d_input,
    })
}

/// Copy of `batch` with every feature of the listed spatial channels set
/// to zero at every timestep.
pub fn mask_channels(batch: &Batch, mask: &BTreeSet<usize>) -> Result<Batch> {
    let shape = batch.shape;
    if let Some(&bad) = mask.iter().find(|&&g| g >= shape.groups) {
        return Err(Error::Config(format!(
            "mask channel {bad} out of range for {} channels",
            shape.groups
        )));
    }
    let f = shape.features_per_group();
    let mut out = batch.clone();
    for row in out.values.chunks_exact_mut(shape.features) {
        for &g in mask {
            row[g * f..(g + 1) * f].fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: MixerConfig,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Layout: `u64` little-endian header length, JSON header, then every
/// tensor as little-endian `f64` in header order.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &MixerConfig, params: &MixerParams) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: *cfg,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, t)| CheckpointEntry {
                name,
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut buf = Vec::with_capacity(8 + json.len() + params.param_count() * 8);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in params.tensors() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MixerConfig, MixerParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Manifest(format!("checkpoint {}: {why}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad("unsupported format_version"));
    }
    header.config.validate()?;
    let mut params = MixerParams::zeros(&header.config);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(bad("tensor count does not match config"));
    }
    let mut pos = 8 + hlen;
    for ((t, entry), name) in params.tensors_mut().into_iter().zip(&header.tensors).zip(&names) {
        if &entry.name != name || entry.shape != t.shape {
            return Err(bad(&format!("tensor {} does not match config", entry.name)));
        }
        let len = t.len() * 8;
        let raw = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated tensor data"))?;
        for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        pos += len;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.config, params))
}
