//! Chunk features and the linear redundancy classifier.
//!
//! A chunk is a fixed window of consecutive generated tokens. Its hidden
//! states (taken at one layer) are mean-pooled into a single feature vector,
//! and a logistic model maps that vector to `p_red`, the probability that the
//! chunk is redundant reasoning. `Redundant` is the positive class.
//!
//! Training is plain per-example SGD on the L2-regularized logistic loss,
//! starting from zero weights, with the example order reshuffled every epoch
//! from the configured seed. The same data and seed always give the same
//! model, bit for bit.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_file, ArtifactReader, ArtifactWriter};
use crate::error::{ensure_dim, Error, Result};

/// Probabilities are kept this far away from 0 and 1.
const PROB_FLOOR: f64 = 1e-15;

fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(what, format!("component {i} is not finite"))),
        None => Ok(()),
    }
}

/// A hidden state of the model at the feature layer, for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HiddenVector(Vec<f64>);

impl HiddenVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("hidden vector", &values)?;
        Ok(HiddenVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for HiddenVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        HiddenVector::new(v)
    }
}

impl From<HiddenVector> for Vec<f64> {
    fn from(h: HiddenVector) -> Self {
        h.0
    }
}

/// Mean-pooled hidden states of one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ChunkFeatures(Vec<f64>);

impl ChunkFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite("chunk features", &values)?;
        Ok(ChunkFeatures(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ChunkFeatures {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ChunkFeatures::new(v)
    }
}

impl From<ChunkFeatures> for Vec<f64> {
    fn from(c: ChunkFeatures) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedundancyLabel {
    Required,
    Redundant,
}

impl RedundancyLabel {
    /// Logistic target: 1 for redundant, 0 for required.
    pub fn target(self) -> f64 {
        match self {
            RedundancyLabel::Required => 0.0,
            RedundancyLabel::Redundant => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            RedundancyLabel::Required => RedundancyLabel::Redundant,
            RedundancyLabel::Redundant => RedundancyLabel::Required,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RedundancyLabel::Required => "required",
            RedundancyLabel::Redundant => "redundant",
        }
    }
}

impl fmt::Display for RedundancyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RedundancyLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "required" => Ok(RedundancyLabel::Required),
            "redundant" => Ok(RedundancyLabel::Redundant),
            other => Err(Error::invalid("label", format!("`{other}` is not required/redundant"))),
        }
    }
}

/// Where features come from: the layer index and chunk length in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub feature_layer: usize,
    pub chunk_size: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout {
            feature_layer: 20,
            chunk_size: 24,
        }
    }
}

/// Componentwise arithmetic mean of a chunk's hidden states.
pub fn pool_chunk(hidden_states: &[HiddenVector]) -> Result<ChunkFeatures> {
    let first = hidden_states
        .first()
        .ok_or_else(|| Error::invalid("chunk", "cannot pool an empty chunk"))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for h in hidden_states {
        ensure_dim("pool_chunk", dim, h.dim())?;
        for (s, x) in sum.iter_mut().zip(h.as_slice()) {
            *s += x;
        }
    }
    let n = hidden_states.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    ChunkFeatures::new(sum)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Per-dimension z-scoring fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Standard deviation per dimension, or 1 where the training data is constant.
    pub scale: Vec<f64>,
}

impl Standardization {
    fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_penalty: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Z-score features with training-set statistics before fitting.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 50,
            l2_penalty: 1e-4,
            seed: 0,
            shuffle: true,
            standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("train config", "learning_rate must be finite and > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train config", "epochs must be >= 1"));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::invalid("train config", "l2_penalty must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Linear logistic classifier over pooled chunk features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_layer: usize,
    pub chunk_size: usize,
    pub standardization: Option<Standardization>,
    /// Hash of the harness configuration that produced the model, if any.
    pub config_hash: Option<String>,
}

const MODEL_MAGIC: &str = "pidsteer-classifier";
const MODEL_VERSION: u32 = 1;

impl ClassifierModel {
    /// A model that answers 0.5 everywhere.
    pub fn zero(dim: usize, layout: FeatureLayout) -> Self {
        ClassifierModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            feature_layer: layout.feature_layer,
            chunk_size: layout.chunk_size,
            standardization: None,
            config_hash: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_finite("classifier weights", &self.weights)?;
        if !self.bias.is_finite() {
            return Err(Error::invalid("classifier", "bias is not finite"));
        }
        if self.chunk_size == 0 {
            return Err(Error::invalid("classifier", "chunk_size must be >= 1"));
        }
        if let Some(s) = &self.standardization {
            ensure_dim("standardization mean", self.dim(), s.mean.len())?;
            ensure_dim("standardization scale", self.dim(), s.scale.len())?;
            if s.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid("classifier", "standardization scale must be > 0"));
            }
        }
        Ok(())
    }

    fn logit(&self, x: &[f64]) -> f64 {
        match &self.standardization {
            Some(s) => dot(&self.weights, &s.apply(x)) + self.bias,
            None => dot(&self.weights, x) + self.bias,
        }
    }

    pub fn predict_proba(&self, x: &ChunkFeatures) -> Result<f64> {
        ensure_dim("predict_proba", self.dim(), x.dim())?;
        Ok(sigmoid(self.logit(x.as_slice())))
    }

    /// Fraction of examples whose thresholded prediction (p > 0.5) matches the label.
    pub fn accuracy(&self, data: &[(ChunkFeatures, RedundancyLabel)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("dataset", "cannot score an empty dataset"));
        }
        let mut correct = 0usize;
        for (x, y) in data {
            let predicted = if self.predict_proba(x)? > 0.5 {
                RedundancyLabel::Redundant
            } else {
                RedundancyLabel::Required
            };
            correct += usize::from(predicted == *y);
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean logistic loss plus `0.5 * l2 * |w|^2`.
    pub fn loss(&self, data: &[(ChunkFeatures, RedundancyLabel)], l2_penalty: f64) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data {
            let p = self.predict_proba(x)?;
            total -= if *y == RedundancyLabel::Redundant {
                p.ln()
            } else {
                (1.0 - p).ln()
            };
        }
        Ok(total / data.len().max(1) as f64 + 0.5 * l2_penalty * dot(&self.weights, &self.weights))
    }

    pub fn to_artifact_string(&self) -> String {
        let mut w = ArtifactWriter::new(MODEL_MAGIC, MODEL_VERSION);
        w.field("dim", self.dim())
            .field("chunk_size", self.chunk_size)
            .field("feature_layer", self.feature_layer)
            .field("standardized", self.standardization.is_some());
        if let Some(h) = &self.config_hash {
            w.field("config_hash", h);
        }
        w.reals("bias", &[self.bias]).reals("weights", &self.weights);
        if let Some(s) = &self.standardization {
            w.reals("mean", &s.mean).reals("scale", &s.scale);
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_artifact_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(&ArtifactReader::open(path, MODEL_MAGIC, MODEL_VERSION)?)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::from_reader(&ArtifactReader::parse(path, text, MODEL_MAGIC, MODEL_VERSION)?)
    }

    fn from_reader(r: &ArtifactReader) -> Result<Self> {
        let dim = r.usize("dim")?;
        let standardization = if r.bool("standardized")? {
            Some(Standardization {
                mean: r.reals("mean", dim)?,
                scale: r.reals("scale", dim)?,
            })
        } else {
            None
        };
        let model = ClassifierModel {
            weights: r.reals("weights", dim)?,
            bias: r.real("bias")?,
            feature_layer: r.usize("feature_layer")?,
            chunk_size: r.usize("chunk_size")?,
            standardization,
            config_hash: r.optional_str("config_hash")?,
        };
        model
            .validate()
            .map_err(|e| Error::format(r.path(), 1, e.to_string()))?;
        Ok(model)
    }
}

pub fn predict_proba(model: &ClassifierModel, x: &ChunkFeatures) -> Result<f64> {
    model.predict_proba(x)
}

pub fn train(
    data: &[(ChunkFeatures, RedundancyLabel)],
    cfg: &TrainConfig,
    layout: FeatureLayout,
) -> Result<ClassifierModel> {
    train_with_history(data, cfg, layout).map(|(m, _)| m)
}

/// Trains and also returns the regularized training loss before the first
/// epoch and after each epoch (`epochs + 1` values).
pub fn train_with_history(
    data: &[(ChunkFeatures, RedundancyLabel)],
    cfg: &TrainConfig,
    layout: FeatureLayout,
) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate()?;
    if layout.chunk_size == 0 {
        return Err(Error::invalid("feature layout", "chunk_size must be >= 1"));
    }
    if data.len() < 2 {
        return Err(Error::invalid("dataset", "need at least 2 examples"));
    }
    let dim = data[0].0.dim();
    if dim == 0 {
        return Err(Error::invalid("dataset", "features have zero dimension"));
    }
    for (x, _) in data {
        ensure_dim("training data", dim, x.dim())?;
    }
    let redundant = data.iter().filter(|(_, y)| *y == RedundancyLabel::Redundant).count();
    if redundant == 0 || redundant == data.len() {
        return Err(Error::invalid("dataset", "both labels must be present"));
    }

    let standardization = cfg.standardize.then(|| {
        let rows: Vec<&[f64]> = data.iter().map(|(x, _)| x.as_slice()).collect();
        Standardization::fit(&rows)
    });
    let rows: Vec<Vec<f64>> = data
        .iter()
        .map(|(x, _)| match &standardization {
            Some(s) => s.apply(x.as_slice()),
            None => x.as_slice().to_vec(),
        })
        .collect();
    let targets: Vec<f64> = data.iter().map(|(_, y)| y.target()).collect();

    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let lr = cfg.learning_rate;
    let lambda = cfg.l2_penalty;

    let loss = |w: &[f64], b: f64| -> f64 {
        let mut total = 0.0;
        for (x, y) in rows.iter().zip(&targets) {
            let p = sigmoid(dot(w, x) + b);
            total -= if *y > 0.5 { p.ln() } else { (1.0 - p).ln() };
        }
        total / rows.len() as f64 + 0.5 * lambda * dot(w, w)
    };

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(loss(&weights, bias));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for &i in &order {
            let x = &rows[i];
            let residual = sigmoid(dot(&weights, x) + bias) - targets[i];
            for (w, xi) in weights.iter_mut().zip(x) {
                *w -= lr * (residual * xi + lambda * *w);
            }
            bias -= lr * residual;
        }
        history.push(loss(&weights, bias));
    }

    let model = ClassifierModel {
        weights,
        bias,
        feature_layer: layout.feature_layer,
        chunk_size: layout.chunk_size,
        standardization,
        config_hash: None,
    };
    model.validate()?;
    Ok((model, history))
}
