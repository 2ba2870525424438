//! Steering direction extraction and application.
//!
//! The direction is the difference of mean pooled chunk features between
//! the required and redundant sets, so adding it pushes representations
//! toward required reasoning. Averaging is over chunks, not tokens.

use std::path::Path;

use crate::artifact::{write_file, ArtifactReader, ArtifactWriter};
use crate::error::{ensure_dim, Error, Result};
use crate::features::{dot, ChunkFeatures, HiddenVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    direction: Vec<f64>,
    pub n_required: usize,
    pub n_redundant: usize,
    pub feature_layer: usize,
    /// Direction was rescaled to unit length after extraction.
    pub normalized: bool,
    pub config_hash: Option<String>,
}

const VECTOR_MAGIC: &str = "pidsteer-vector";
const VECTOR_VERSION: u32 = 1;

fn mean_of(set: &[ChunkFeatures], dim: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    for x in set {
        ensure_dim("extract", dim, x.dim())?;
        for (a, v) in acc.iter_mut().zip(x.as_slice()) {
            *a += v;
        }
    }
    let n = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `mean(required) - mean(redundant)`, componentwise.
pub fn extract(required: &[ChunkFeatures], redundant: &[ChunkFeatures]) -> Result<ControlVector> {
    if required.is_empty() || redundant.is_empty() {
        return Err(Error::invalid("control vector", "both sample sets must be non-empty"));
    }
    let dim = required[0].dim();
    let mean_req = mean_of(required, dim)?;
    let mean_red = mean_of(redundant, dim)?;
    let direction = mean_req.iter().zip(&mean_red).map(|(a, b)| a - b).collect();
    ControlVector::from_parts(direction, required.len(), redundant.len(), 20)
}

/// `h + alpha * v`.
pub fn apply_steering(h: &HiddenVector, alpha: f64, v: &ControlVector) -> Result<HiddenVector> {
    ensure_dim("apply_steering", v.dim(), h.dim())?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(
            "steering strength",
            format!("{alpha} must be finite and >= 0"),
        ));
    }
    let steered = h
        .as_slice()
        .iter()
        .zip(&v.direction)
        .map(|(x, d)| x + alpha * d)
        .collect();
    HiddenVector::new(steered)
}

impl ControlVector {
    pub fn from_parts(
        direction: Vec<f64>,
        n_required: usize,
        n_redundant: usize,
        feature_layer: usize,
    ) -> Result<Self> {
        let v = ControlVector {
            direction,
            n_required,
            n_redundant,
            feature_layer,
            normalized: false,
            config_hash: None,
        };
        v.validate()?;
        Ok(v)
    }

    /// All-zero direction; steering with it is a no-op.
    pub fn zero(dim: usize, feature_layer: usize) -> Self {
        ControlVector {
            direction: vec![0.0; dim],
            n_required: 1,
            n_redundant: 1,
            feature_layer,
            normalized: false,
            config_hash: None,
        }
    }

    pub fn with_feature_layer(mut self, layer: usize) -> Self {
        self.feature_layer = layer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction.is_empty() {
            return Err(Error::invalid("control vector", "direction has zero dimension"));
        }
        if self.direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("control vector", "direction is not finite"));
        }
        if self.n_required == 0 || self.n_redundant == 0 {
            return Err(Error::invalid("control vector", "sample counts must be >= 1"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn norm(&self) -> f64 {
        dot(&self.direction, &self.direction).sqrt()
    }

    /// Rescale to unit length. A zero direction is left unchanged.
    pub fn normalize(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.direction.iter_mut().for_each(|d| *d /= n);
            self.normalized = true;
        }
        self
    }

    pub fn negated(&self) -> Self {
        ControlVector {
            direction: self.direction.iter().map(|d| -d).collect(),
            n_required: self.n_redundant,
            n_redundant: self.n_required,
            ..self.clone()
        }
    }

    /// Cosine similarity with `other`; zero if either has zero norm.
    pub fn cosine(&self, other: &[f64]) -> Result<f64> {
        ensure_dim("cosine", self.dim(), other.len())?;
        let denom = self.norm() * dot(other, other).sqrt();
        Ok(if denom > 0.0 {
            dot(&self.direction, other) / denom
        } else {
            0.0
        })
    }

    pub fn to_artifact_string(&self) -> String {
        let mut w = ArtifactWriter::new(VECTOR_MAGIC, VECTOR_VERSION);
        w.field("dim", self.dim())
            .field("feature_layer", self.feature_layer)
            .field("n_required", self.n_required)
            .field("n_redundant", self.n_redundant)
            .field("normalized", self.normalized);
        if let Some(h) = &self.config_hash {
            w.field("config_hash", h);
        }
        w.reals("direction", &self.direction);
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_artifact_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(&ArtifactReader::open(path, VECTOR_MAGIC, VECTOR_VERSION)?)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::from_reader(&ArtifactReader::parse(path, text, VECTOR_MAGIC, VECTOR_VERSION)?)
    }

    fn from_reader(r: &ArtifactReader) -> Result<Self> {
        let dim = r.usize("dim")?;
        let v = ControlVector {
            direction: r.reals("direction", dim)?,
            n_required: r.usize("n_required")?,
            n_redundant: r.usize("n_redundant")?,
            feature_layer: r.usize("feature_layer")?,
            normalized: r.bool("normalized")?,
            config_hash: r.optional_str("config_hash")?,
        };
        v.validate().map_err(|e| Error::format(r.path(), 1, e.to_string()))?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cf(v: &[f64]) -> ChunkFeatures {
        ChunkFeatures::new(v.to_vec()).unwrap()
    }

    #[test]
    fn extract_small_cases() {
        let same = [cf(&[1.0, 2.0]), cf(&[3.0, -1.0])];
        let v = extract(&same, &same).unwrap();
        assert_eq!(v.direction(), &[0.0, 0.0]);

        let v = extract(&[cf(&[1.0, 0.0])], &[cf(&[0.0, 1.0])]).unwrap();
        assert_eq!(v.direction(), &[1.0, -1.0]);
        assert_eq!((v.n_required, v.n_redundant), (1, 1));
    }

    #[test]
    fn extract_errors() {
        assert!(extract(&[], &[cf(&[1.0])]).is_err());
        assert!(extract(&[cf(&[1.0])], &[]).is_err());
        assert!(extract(&[cf(&[1.0])], &[cf(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn apply_small_cases() {
        let h = HiddenVector::new(vec![1.0, 1.0]).unwrap();
        let v = ControlVector::from_parts(vec![2.0, -2.0], 1, 1, 20).unwrap();
        assert_eq!(apply_steering(&h, 0.0, &v).unwrap(), h);
        assert_eq!(apply_steering(&h, 0.5, &v).unwrap().as_slice(), &[2.0, 0.0]);
        assert!(apply_steering(&h, -0.1, &v).is_err());
        let short = HiddenVector::new(vec![1.0]).unwrap();
        assert!(apply_steering(&short, 0.1, &v).is_err());
    }

    #[test]
    fn normalize_and_round_trip() {
        let v = ControlVector::from_parts(vec![3.0, 4.0], 2, 5, 7).unwrap().normalize();
        assert!((v.norm() - 1.0).abs() < 1e-15);
        assert!(v.normalized);
        let back = ControlVector::parse(Path::new("v"), &v.to_artifact_string()).unwrap();
        assert_eq!(back, v);
        assert!(ControlVector::zero(2, 20)
            .normalize()
            .direction()
            .iter()
            .all(|d| *d == 0.0));
    }

    #[test]
    fn load_rejects_mismatched_dim_and_truncation() {
        let v = ControlVector::from_parts(vec![3.0, 4.0], 2, 5, 7).unwrap();
        let text = v.to_artifact_string();
        assert!(ControlVector::parse(Path::new("v"), &text.replace("dim 2", "dim 3")).is_err());
        assert!(ControlVector::parse(Path::new("v"), &text[..text.len() - 4]).is_err());
    }
}
