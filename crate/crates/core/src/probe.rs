//! Linear probing classifier: softmax regression with an elastic-net penalty,
//! trained with seeded minibatch Adam.
//!
//! The loss for a minibatch is the mean cross-entropy plus
//! `lambda1 * sum|theta| + lambda2 * sum(theta^2)` over the full weight matrix.
//! The L1 term is optimized with its subgradient (`sign(0) = 0`), so trained
//! weights are small but rarely exactly zero. The bias is never penalized.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AlignedCorpus;
use crate::error::{LcaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RegularizationConfig {
    pub const NONE: RegularizationConfig = RegularizationConfig {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let reg = RegularizationConfig { lambda1, lambda2 };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(LcaError::InvalidConfig(format!(
                "lambdas must be finite and non-negative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }

    /// `lambda1 * sum|theta| + lambda2 * sum(theta^2)`
    pub fn penalty(&self, theta: &Array2<f64>) -> f64 {
        let (l1, l2) = theta
            .iter()
            .fold((0.0, 0.0), |(a, b), &w| (a + w.abs(), b + w * w));
        self.lambda1 * l1 + self.lambda2 * l2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_bias: bool,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Z-score each neuron with statistics from the training split.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            use_bias: true,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LcaError::InvalidConfig(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(LcaError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-neuron affine transform applied before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(features: ArrayView2<'_, f32>) -> Standardization {
        let n = features.nrows().max(1) as f64;
        let dim = features.ncols();
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in features.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in features.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v as f64 - mean[j];
                sq[j] += d * d;
            }
        }
        let scale = sq
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, scale }
    }

    fn select(&self, columns: &[usize]) -> Standardization {
        Standardization {
            mean: columns.iter().map(|&c| self.mean[c]).collect(),
            scale: columns.iter().map(|&c| self.scale[c]).collect(),
        }
    }
}

/// Boolean keep-mask over feature columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronMask {
    keep: Vec<bool>,
}

impl NeuronMask {
    pub fn from_indices(indices: &[usize], dim: usize) -> Result<NeuronMask> {
        let mut keep = vec![false; dim];
        for &i in indices {
            if i >= dim {
                return Err(LcaError::IndexOutOfRange {
                    index: i,
                    limit: dim,
                });
            }
            keep[i] = true;
        }
        Ok(NeuronMask { keep })
    }

    pub fn all(dim: usize) -> NeuronMask {
        NeuronMask {
            keep: vec![true; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.keep.len()
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// tags x features, row order matches `tag_vocab`
    pub theta: Array2<f64>,
    pub bias: Array1<f64>,
    pub tag_vocab: Vec<String>,
    pub use_bias: bool,
    pub standardization: Option<Standardization>,
    pub reg: RegularizationConfig,
    pub train_config: TrainConfig,
}

/// A borrowed minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f32>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn of(corpus: &'a AlignedCorpus) -> Batch<'a> {
        Batch {
            features: corpus.features.view(),
            labels: &corpus.labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grad_theta: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl LinearProbe {
    /// All-zero probe; the starting point of training.
    pub fn zeros(tag_vocab: Vec<String>, feature_dim: usize, use_bias: bool) -> LinearProbe {
        let t = tag_vocab.len();
        LinearProbe {
            theta: Array2::zeros((t, feature_dim)),
            bias: Array1::zeros(t),
            tag_vocab,
            use_bias,
            standardization: None,
            reg: RegularizationConfig::NONE,
            train_config: TrainConfig {
                use_bias,
                ..TrainConfig::default()
            },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn num_tags(&self) -> usize {
        self.theta.nrows()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.feature_dim() {
            return Err(LcaError::FeatureDimMismatch {
                expected: self.feature_dim(),
                found,
            });
        }
        Ok(())
    }

    /// Converts raw rows to the probe's input space: standardizes, then zeroes
    /// columns outside `mask`.
    fn prepare(&self, rows: ArrayView2<'_, f32>, mask: Option<&NeuronMask>) -> Array2<f64> {
        let mut x = rows.mapv(|v| v as f64);
        if let Some(st) = &self.standardization {
            for mut row in x.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - st.mean[j]) / st.scale[j];
                }
            }
        }
        if let Some(mask) = mask {
            for mut row in x.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    if !mask.keeps(j) {
                        *v = 0.0;
                    }
                }
            }
        }
        x
    }

    fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.theta.t());
        if self.use_bias {
            z += &self.bias;
        }
        z
    }

    /// Argmax tag (lowest index on ties) and softmax probabilities.
    pub fn predict_tag(
        &self,
        features: ArrayView1<'_, f32>,
        mask: Option<&NeuronMask>,
    ) -> Result<(usize, Vec<f64>)> {
        self.check_dim(features.len())?;
        if let Some(m) = mask {
            self.check_dim(m.dim())?;
        }
        let x = self.prepare(features.insert_axis(Axis(0)), mask);
        let z = self.logits(&x);
        let probs = softmax(z.row(0));
        Ok((argmax(z.row(0)), probs.to_vec()))
    }

    fn count_correct(&self, rows: ArrayView2<'_, f32>, labels: &[usize], mask: Option<&NeuronMask>) -> usize {
        let z = self.logits(&self.prepare(rows, mask));
        z.rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &gold)| argmax(*row) == gold)
            .count()
    }

    /// Copy with the weight columns outside `mask` set to zero.
    pub fn zero_columns_outside(&self, mask: &NeuronMask) -> LinearProbe {
        let mut out = self.clone();
        for (j, mut col) in out.theta.columns_mut().into_iter().enumerate() {
            if !mask.keeps(j) {
                col.fill(0.0);
            }
        }
        out
    }

    /// Copy restricted to `columns`, in the order given.
    pub fn select_columns(&self, columns: &[usize]) -> LinearProbe {
        LinearProbe {
            theta: self.theta.select(Axis(1), columns),
            standardization: self.standardization.as_ref().map(|s| s.select(columns)),
            ..self.clone()
        }
    }

    pub fn to_file(&self) -> ProbeFile {
        ProbeFile {
            tag_vocab: self.tag_vocab.clone(),
            feature_dim: self.feature_dim(),
            use_bias: self.use_bias,
            theta: self.theta.iter().copied().collect(),
            bias: self.bias.to_vec(),
            reg: self.reg,
            train_config: self.train_config.clone(),
            seed: self.train_config.seed,
            standardization: self.standardization.clone(),
        }
    }

    pub fn from_file(file: ProbeFile) -> Result<LinearProbe> {
        let t = file.tag_vocab.len();
        let f = file.feature_dim;
        if file.theta.len() != t * f || file.bias.len() != t {
            return Err(LcaError::InvalidRecord(format!(
                "probe theta has {} entries and bias {}, expected {}x{}",
                file.theta.len(),
                file.bias.len(),
                t,
                f
            )));
        }
        if file.theta.iter().chain(&file.bias).any(|w| !w.is_finite()) {
            return Err(LcaError::InvalidRecord("probe weights are not finite".into()));
        }
        if let Some(st) = &file.standardization {
            if st.mean.len() != f || st.scale.len() != f {
                return Err(LcaError::InvalidRecord(
                    "standardization width differs from feature_dim".into(),
                ));
            }
        }
        let theta = Array2::from_shape_vec((t, f), file.theta)
            .map_err(|e| LcaError::InvalidRecord(e.to_string()))?;
        Ok(LinearProbe {
            theta,
            bias: Array1::from(file.bias),
            tag_vocab: file.tag_vocab,
            use_bias: file.use_bias,
            standardization: file.standardization,
            reg: file.reg,
            train_config: TrainConfig {
                seed: file.seed,
                ..file.train_config
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text + "\n").map_err(|e| LcaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LinearProbe> {
        let text = std::fs::read_to_string(path).map_err(|e| LcaError::io(path, e))?;
        let file: ProbeFile = serde_json::from_str(&text)
            .map_err(|e| LcaError::InvalidRecord(format!("{}: {e}", path.display())))?;
        LinearProbe::from_file(file)
    }
}

/// On-disk probe: theta is row-major `tags x feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub tag_vocab: Vec<String>,
    pub feature_dim: usize,
    pub use_bias: bool,
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
    pub reg: RegularizationConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = row.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Mean cross-entropy and its gradient on prepared inputs (no penalty).
fn cross_entropy(probe: &LinearProbe, x: &Array2<f64>, labels: &[usize]) -> LossGradient {
    let n = x.nrows() as f64;
    let mut g = probe.logits(x);
    let mut loss = 0.0;
    for (mut row, &gold) in g.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let gold_shifted = row[gold] - max;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - gold_shifted;
        row /= sum;
        row[gold] -= 1.0;
    }
    g /= n;
    let grad_theta = g.t().dot(x);
    let grad_bias = if probe.use_bias {
        g.sum_axis(Axis(0))
    } else {
        Array1::zeros(probe.num_tags())
    };
    LossGradient {
        loss: loss / n,
        grad_theta,
        grad_bias,
    }
}

fn add_penalty(lg: &mut LossGradient, theta: &Array2<f64>, reg: &RegularizationConfig) {
    if reg.lambda1 == 0.0 && reg.lambda2 == 0.0 {
        return;
    }
    lg.loss += reg.penalty(theta);
    ndarray::Zip::from(&mut lg.grad_theta)
        .and(theta)
        .for_each(|g, &w| {
            let sign = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g += reg.lambda1 * sign + 2.0 * reg.lambda2 * w;
        });
}

/// Mean cross-entropy over `batch` plus the elastic-net penalty, with
/// gradients for theta and bias.
pub fn loss_and_gradient(
    probe: &LinearProbe,
    batch: Batch<'_>,
    reg: &RegularizationConfig,
) -> Result<LossGradient> {
    probe.check_dim(batch.features.ncols())?;
    if batch.labels.is_empty() || batch.labels.len() != batch.features.nrows() {
        return Err(LcaError::EmptyCorpus);
    }
    let x = probe.prepare(batch.features, None);
    let mut lg = cross_entropy(probe, &x, batch.labels);
    add_penalty(&mut lg, &probe.theta, reg);
    Ok(lg)
}

struct AdamState {
    m_theta: Array2<f64>,
    v_theta: Array2<f64>,
    m_bias: Array1<f64>,
    v_bias: Array1<f64>,
    step: i32,
}

/// Trains a probe from zero initialization. One seeded shuffle per epoch,
/// the final partial batch included; output is bit-identical for identical
/// inputs.
pub fn train_probe(
    corpus: &AlignedCorpus,
    reg: &RegularizationConfig,
    cfg: &TrainConfig,
) -> Result<LinearProbe> {
    reg.validate()?;
    cfg.validate()?;
    if corpus.num_samples() == 0 {
        return Err(LcaError::EmptyCorpus);
    }
    let mut present = vec![false; corpus.num_tags()];
    for &l in &corpus.labels {
        present[l] = true;
    }
    if corpus.num_tags() < 2 || present.iter().filter(|&&p| p).count() < 2 {
        return Err(LcaError::SingleClassCorpus);
    }

    let mut probe = LinearProbe::zeros(corpus.tag_vocab.clone(), corpus.feature_dim(), cfg.use_bias);
    probe.reg = *reg;
    probe.train_config = cfg.clone();
    if cfg.standardize {
        probe.standardization = Some(Standardization::fit(corpus.features.view()));
    }

    let (t, f) = probe.theta.dim();
    let mut adam = AdamState {
        m_theta: Array2::zeros((t, f)),
        v_theta: Array2::zeros((t, f)),
        m_bias: Array1::zeros(t),
        v_bias: Array1::zeros(t),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.num_samples()).collect();
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows = corpus.features.select(Axis(0), chunk);
            labels.clear();
            labels.extend(chunk.iter().map(|&i| corpus.labels[i]));
            let x = probe.prepare(rows.view(), None);
            let mut lg = cross_entropy(&probe, &x, &labels);
            add_penalty(&mut lg, &probe.theta, reg);
            adam_step(&mut probe, &mut adam, &lg, cfg);
        }
    }
    Ok(probe)
}

fn adam_step(probe: &mut LinearProbe, st: &mut AdamState, lg: &LossGradient, cfg: &TrainConfig) {
    st.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(st.step);
    let c2 = 1.0 - b2.powi(st.step);
    let lr = cfg.learning_rate;
    let eps = cfg.epsilon;
    let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    ndarray::Zip::from(&mut probe.theta)
        .and(&mut st.m_theta)
        .and(&mut st.v_theta)
        .and(&lg.grad_theta)
        .for_each(|w, m, v, &g| update(w, m, v, g));
    if probe.use_bias {
        ndarray::Zip::from(&mut probe.bias)
            .and(&mut st.m_bias)
            .and(&mut st.v_bias)
            .and(&lg.grad_bias)
            .for_each(|w, m, v, &g| update(w, m, v, g));
    }
}

const EVAL_CHUNK: usize = 1024;

/// Fraction of samples (in `[0, 1]`) whose masked prediction equals the gold
/// tag. Columns outside `mask` are zeroed before scoring.
pub fn evaluate_accuracy(
    probe: &LinearProbe,
    corpus: &AlignedCorpus,
    mask: Option<&NeuronMask>,
) -> Result<f64> {
    probe.check_dim(corpus.feature_dim())?;
    if let Some(m) = mask {
        probe.check_dim(m.dim())?;
    }
    let n = corpus.num_samples();
    if n == 0 {
        return Err(LcaError::EmptyCorpus);
    }
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let correct: usize = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_CHUNK).min(n);
            probe.count_correct(
                corpus.features.slice(ndarray::s![s..e, ..]),
                &corpus.labels[s..e],
                mask,
            )
        })
        .sum();
    Ok(correct as f64 / n as f64)
}
