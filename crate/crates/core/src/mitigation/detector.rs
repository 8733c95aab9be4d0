use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use adaperf_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adnn::{hash_json, AdnnModel};
use crate::error::{Error, Result};
use crate::eval::{forward_latency, TestSuite};

/// Flattened first-stage activations of `model` on `x`.
pub fn extract_features(model: &AdnnModel, x: &Tensor) -> Result<Vec<f32>> {
    model.first_stage_features(x)
}

/// Identifies the feature extractor a detector was trained against.
pub fn feature_hash(model: &AdnnModel) -> String {
    let stem = model.spec().stem_output_shape();
    let mut h = format!("{}:{stem:?}", model.spec().hash());
    for name in ["stem.w", "stem.b"] {
        if let Some(id) = model.params().id(name) {
            h.push_str(&format!("{:?}", model.params().get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
        }
    }
    hash_json(&h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorDiagnostics {
    pub train_accuracy: f64,
    pub mean_hinge: f64,
    pub benign: usize,
    pub attack: usize,
}

/// Linear classifier over standardized features; positive scores flag
/// generated inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub threshold: f64,
    pub feature_hash: String,
    /// Seeds whose features were used for training.
    pub train_seed_ids: Vec<usize>,
    pub config: DetectorConfig,
    pub diagnostics: DetectorDiagnostics,
}

fn check_rows(rows: &[Vec<f32>], dim: usize, what: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty(format!("{what} features")));
    }
    match rows.iter().find(|r| r.len() != dim) {
        Some(r) => Err(Error::Length {
            expected: dim,
            actual: r.len(),
        }),
        None => Ok(()),
    }
}

/// Hinge-loss linear SVM trained with Pegasos-style stochastic subgradient
/// steps on standardized features.
pub fn train_detector(benign: &[Vec<f32>], attack: &[Vec<f32>], config: &DetectorConfig) -> Result<DetectorModel> {
    if benign.is_empty() || attack.is_empty() {
        return Err(Error::Invalid("detector training needs both benign and attack features".into()));
    }
    if !(config.lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let dim = benign[0].len();
    check_rows(benign, dim, "benign")?;
    check_rows(attack, dim, "attack")?;
    let rows: Vec<(&[f32], f64)> = benign
        .iter()
        .map(|r| (r.as_slice(), -1.0))
        .chain(attack.iter().map(|r| (r.as_slice(), 1.0)))
        .collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for (r, _) in &rows {
        for (m, &v) in mean.iter_mut().zip(*r) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; dim];
    for (r, _) in &rows {
        for ((s, &v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let scale: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { 1.0 / s } else { 0.0 }).collect();
    let z: Vec<(Vec<f64>, f64)> = rows
        .iter()
        .map(|(r, y)| (r.iter().zip(&mean).zip(&scale).map(|((&v, m), s)| (f64::from(v) - m) * s).collect(), *y))
        .collect();

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut t = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (config.lambda * t as f64);
            let (x, y) = &z[i];
            let margin = y * (dot(&w, x) + b);
            let shrink = 1.0 - eta * config.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wv, xv) in w.iter_mut().zip(x) {
                    *wv += eta * y * xv;
                }
                b += eta * y;
            }
        }
    }
    let (mut correct, mut hinge) = (0usize, 0.0f64);
    for (x, y) in &z {
        let s = dot(&w, x) + b;
        correct += usize::from(s * y > 0.0);
        hinge += (1.0 - y * s).max(0.0);
    }
    Ok(DetectorModel {
        weights: w,
        bias: b,
        feature_mean: mean,
        feature_scale: scale,
        threshold: 0.0,
        feature_hash: String::new(),
        train_seed_ids: Vec::new(),
        config: config.clone(),
        diagnostics: DetectorDiagnostics {
            train_accuracy: correct as f64 / n,
            mean_hinge: hinge / n,
            benign: benign.len(),
            attack: attack.len(),
        },
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Features of the seeds (benign) and generated samples (attack) of a suite.
pub fn suite_features(model: &AdnnModel, suite: &TestSuite) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let benign = suite.entries.iter().map(|e| extract_features(model, &e.seed)).collect::<Result<_>>()?;
    let attack = suite.entries.iter().map(|e| extract_features(model, &e.generated)).collect::<Result<_>>()?;
    Ok((benign, attack))
}

/// Trains a detector on the seeds and generated samples of `suite`.
pub fn train_detector_on_suite(model: &AdnnModel, suite: &TestSuite, config: &DetectorConfig) -> Result<DetectorModel> {
    let (benign, attack) = suite_features(model, suite)?;
    let mut d = train_detector(&benign, &attack, config)?;
    d.feature_hash = feature_hash(model);
    d.train_seed_ids = suite.seed_ids();
    Ok(d)
}

impl DetectorModel {
    pub fn score_features(&self, features: &[f32]) -> Result<f64> {
        if features.len() != self.weights.len() {
            return Err(Error::Length {
                expected: self.weights.len(),
                actual: features.len(),
            });
        }
        let mut s = self.bias;
        for (((&v, m), sc), w) in features.iter().zip(&self.feature_mean).zip(&self.feature_scale).zip(&self.weights) {
            s += (f64::from(v) - m) * sc * w;
        }
        Ok(s)
    }

    fn check_model(&self, model: &AdnnModel) -> Result<()> {
        let found = feature_hash(model);
        if found != self.feature_hash {
            return Err(Error::HashMismatch {
                expected: self.feature_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Score of a raw input; refuses models other than the one trained against.
    pub fn score(&self, model: &AdnnModel, x: &Tensor) -> Result<f64> {
        self.check_model(model)?;
        self.score_features(&extract_features(model, x)?)
    }

    pub fn flags(&self, model: &AdnnModel, x: &Tensor) -> Result<bool> {
        Ok(self.score(model, x)? > self.threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Area under the ROC curve by the Mann-Whitney statistic with average ranks
/// for ties. `labels[i]` is true for the positive class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Length {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub auc: f64,
    pub accuracy: f64,
    /// Median per-input seconds for feature extraction plus scoring.
    pub extra_latency_s: f64,
    /// Median per-input seconds of a full adaptive forward pass.
    pub inference_latency_s: f64,
    pub overhead_fraction: f64,
    pub heldout: usize,
}

/// AUC and overhead on a suite whose seeds were not used for training.
pub fn evaluate_detector(
    detector: &DetectorModel,
    model: &AdnnModel,
    heldout: &TestSuite,
    repeats: usize,
) -> Result<DetectorEvaluation> {
    detector.check_model(model)?;
    if heldout.is_empty() {
        return Err(Error::Empty("held-out suite".into()));
    }
    let train: HashSet<usize> = detector.train_seed_ids.iter().copied().collect();
    if let Some(id) = heldout.seed_ids().into_iter().find(|id| train.contains(id)) {
        return Err(Error::Invalid(format!("held-out seed {id} was used to train the detector")));
    }
    let mut scores = Vec::with_capacity(2 * heldout.len());
    let mut labels = Vec::with_capacity(2 * heldout.len());
    for e in &heldout.entries {
        scores.push(detector.score(model, &e.seed)?);
        labels.push(false);
        scores.push(detector.score(model, &e.generated)?);
        labels.push(true);
    }
    let correct = scores.iter().zip(&labels).filter(|(s, &l)| (**s > detector.threshold) == l).count();

    let repeats = repeats.max(1);
    let probe: Vec<&Tensor> = heldout.entries.iter().take(20).map(|e| &e.generated).collect();
    let mut extra = Vec::new();
    let mut full = Vec::new();
    for x in &probe {
        detector.score(model, x)?;
        for _ in 0..repeats {
            let t = Instant::now();
            let f = extract_features(model, x)?;
            std::hint::black_box(detector.score_features(&f)?);
            extra.push(t.elapsed().as_secs_f64());
        }
        full.push(forward_latency(model, x, repeats)?.median_s);
    }
    let extra_latency_s = crate::eval::median_of(&extra);
    let inference_latency_s = crate::eval::median_of(&full);
    Ok(DetectorEvaluation {
        auc: auc(&scores, &labels)?,
        accuracy: correct as f64 / scores.len() as f64,
        extra_latency_s,
        inference_latency_s,
        overhead_fraction: extra_latency_s / inference_latency_s,
        heldout: heldout.len(),
    })
}
