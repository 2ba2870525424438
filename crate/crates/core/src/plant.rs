//! Simulated reasoning process used in place of a language model.
//!
//! Each step emits one chunk of hidden states drawn from either the
//! "required" or the "redundant" Gaussian cluster. Which cluster is chosen is
//! a Bernoulli draw on a running log-odds that steering pushes down: on every
//! step the log-odds drop by `steering_coupling * s`, where `s` is the applied
//! strength projected onto the true separating direction
//! `u = mu_required - mu_redundant`:
//!
//! ```text
//! s = alpha * (v . u) / |u|^2
//! ```
//!
//! The emitted states are shifted by `alpha * v`, so a downstream classifier
//! sees steered representations. The episode ends once enough required chunks
//! have accumulated or the token budget runs out. A finished episode counts as
//! solved with probability `max(0, 1 - distraction_penalty * redundant_chunks)`.
//!
//! Randomness is split into independent streams (mode draws, noise, and the
//! final solve draw) so that two plants with the same seed consume identical
//! random numbers step for step regardless of the steering they receive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{dot, sigmoid, HiddenVector, RedundancyLabel};
use crate::vector::{apply_steering, ControlVector};

const MODE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const SOLVE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub dim: usize,
    pub chunk_size: usize,
    pub mu_required: Vec<f64>,
    pub mu_redundant: Vec<f64>,
    pub noise_sigma: f64,
    pub base_redundancy_logit: f64,
    pub steering_coupling: f64,
    pub required_chunks_to_solve: usize,
    pub max_tokens: usize,
    pub distraction_penalty: f64,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let dim = 64;
        let axis = |v: f64| (0..dim).map(|i| if i < 8 { v } else { 0.0 }).collect::<Vec<_>>();
        PlantConfig {
            dim,
            chunk_size: 24,
            mu_required: axis(0.5),
            mu_redundant: axis(-0.5),
            noise_sigma: 1.0,
            base_redundancy_logit: 0.4,
            steering_coupling: 3.0,
            required_chunks_to_solve: 20,
            max_tokens: 2048,
            distraction_penalty: 0.004,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("plant config", reason));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be >= 1");
        }
        ensure_dim("plant mu_required", self.dim, self.mu_required.len())?;
        ensure_dim("plant mu_redundant", self.dim, self.mu_redundant.len())?;
        if self
            .mu_required
            .iter()
            .chain(&self.mu_redundant)
            .any(|x| !x.is_finite())
        {
            return bad("cluster means must be finite");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma must be finite and > 0");
        }
        if !self.base_redundancy_logit.is_finite() {
            return bad("base_redundancy_logit must be finite");
        }
        if !(self.steering_coupling.is_finite() && self.steering_coupling >= 0.0) {
            return bad("steering_coupling must be finite and >= 0");
        }
        if !(self.distraction_penalty.is_finite() && self.distraction_penalty >= 0.0) {
            return bad("distraction_penalty must be finite and >= 0");
        }
        if self.required_chunks_to_solve == 0 {
            return bad("required_chunks_to_solve must be >= 1");
        }
        if self.max_tokens < self.chunk_size {
            return bad("max_tokens must be >= chunk_size");
        }
        Ok(())
    }

    /// `mu_required - mu_redundant`.
    pub fn true_gap(&self) -> Vec<f64> {
        self.mu_required
            .iter()
            .zip(&self.mu_redundant)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PlantConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkEmission {
    pub hidden_states: Vec<HiddenVector>,
    pub true_label: RedundancyLabel,
    pub tokens_emitted: usize,
    pub done: bool,
    /// Meaningful only when `done`.
    pub solved: bool,
}

#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    gap: Vec<f64>,
    gap_norm_sq: f64,
    logit: f64,
    required: usize,
    redundant: usize,
    tokens: usize,
    done: bool,
    solve_draw: f64,
    mode_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self> {
        cfg.validate()?;
        let gap = cfg.true_gap();
        let gap_norm_sq = dot(&gap, &gap);
        let solve_draw = stream(cfg.seed, SOLVE_STREAM).random::<f64>();
        Ok(Plant {
            logit: cfg.base_redundancy_logit,
            mode_rng: stream(cfg.seed, MODE_STREAM),
            noise_rng: stream(cfg.seed, NOISE_STREAM),
            cfg,
            gap,
            gap_norm_sq,
            required: 0,
            redundant: 0,
            tokens: 0,
            done: false,
            solve_draw,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn tokens_emitted(&self) -> usize {
        self.tokens
    }

    pub fn redundant_chunks(&self) -> usize {
        self.redundant
    }

    pub fn required_chunks(&self) -> usize {
        self.required
    }

    /// Current log-odds of emitting a redundant chunk.
    pub fn redundancy_logit(&self) -> f64 {
        self.logit
    }

    /// Applied strength projected onto the true separating direction.
    pub fn effective_steering(&self, alpha: f64, v: &ControlVector) -> f64 {
        if self.gap_norm_sq > 0.0 {
            alpha * dot(v.direction(), &self.gap) / self.gap_norm_sq
        } else {
            0.0
        }
    }

    pub fn step(&mut self, alpha: f64, v: &ControlVector) -> Result<ChunkEmission> {
        self.step_within(alpha, v, usize::MAX)
    }

    /// Like [`step`](Self::step) but emits at most `token_limit` tokens.
    pub fn step_within(&mut self, alpha: f64, v: &ControlVector, token_limit: usize) -> Result<ChunkEmission> {
        if self.done {
            return Err(Error::PlantFinished);
        }
        ensure_dim("plant step", self.cfg.dim, v.dim())?;
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid(
                "steering strength",
                format!("{alpha} must be finite and >= 0"),
            ));
        }
        if token_limit == 0 {
            return Err(Error::invalid("token limit", "must allow at least one token"));
        }

        self.logit -= self.cfg.steering_coupling * self.effective_steering(alpha, v);
        let p_redundant = sigmoid(self.logit);
        let label = if self.mode_rng.random::<f64>() < p_redundant {
            RedundancyLabel::Redundant
        } else {
            RedundancyLabel::Required
        };
        let mean = match label {
            RedundancyLabel::Required => &self.cfg.mu_required,
            RedundancyLabel::Redundant => &self.cfg.mu_redundant,
        };

        let n = self
            .cfg
            .chunk_size
            .min(self.cfg.max_tokens - self.tokens)
            .min(token_limit);
        let sigma = self.cfg.noise_sigma;
        let mut hidden_states = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = mean
                .iter()
                .map(|m| m + sigma * self.noise_rng.sample::<f64, _>(StandardNormal))
                .collect();
            hidden_states.push(apply_steering(&HiddenVector::new(raw)?, alpha, v)?);
        }

        self.tokens += n;
        match label {
            RedundancyLabel::Required => self.required += 1,
            RedundancyLabel::Redundant => self.redundant += 1,
        }
        let reached = self.required >= self.cfg.required_chunks_to_solve;
        self.done = reached || self.tokens >= self.cfg.max_tokens;
        let quality = (1.0 - self.cfg.distraction_penalty * self.redundant as f64).max(0.0);
        let solved = self.done && reached && self.solve_draw < quality;

        Ok(ChunkEmission {
            hidden_states,
            true_label: label,
            tokens_emitted: n,
            done: self.done,
            solved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_v(dim: usize) -> ControlVector {
        ControlVector::zero(dim, 20)
    }

    #[test]
    fn default_plant_starts_at_token_zero() {
        let p = Plant::new(PlantConfig::default()).unwrap();
        assert_eq!(p.tokens_emitted(), 0);
        assert!(!p.is_done());
        assert_eq!(p.redundancy_logit(), 0.4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = PlantConfig::default();
        assert!(Plant::new(PlantConfig {
            max_tokens: 10,
            ..base.clone()
        })
        .is_err());
        assert!(Plant::new(PlantConfig {
            noise_sigma: 0.0,
            ..base.clone()
        })
        .is_err());
        assert!(Plant::new(PlantConfig { dim: 0, ..base.clone() }).is_err());
        assert!(Plant::new(PlantConfig {
            chunk_size: 0,
            ..base.clone()
        })
        .is_err());
        assert!(Plant::new(PlantConfig {
            mu_required: vec![0.0; 3],
            ..base.clone()
        })
        .is_err());
        assert!(Plant::new(PlantConfig {
            steering_coupling: -1.0,
            ..base
        })
        .is_err());
    }

    #[test]
    fn same_seed_same_emissions() {
        let cfg = PlantConfig {
            seed: 9,
            ..PlantConfig::default()
        };
        let v = ControlVector::from_parts(cfg.true_gap(), 1, 1, 20).unwrap();
        let mut a = Plant::new(cfg.clone()).unwrap();
        let mut b = Plant::new(cfg).unwrap();
        let mut i = 0;
        while !a.is_done() {
            let alpha = 0.01 * i as f64;
            assert_eq!(a.step(alpha, &v).unwrap(), b.step(alpha, &v).unwrap());
            i += 1;
        }
        assert!(b.is_done());
    }

    #[test]
    fn saturated_required_mode_solves_at_threshold() {
        let cfg = PlantConfig {
            base_redundancy_logit: -10.0,
            ..PlantConfig::default()
        };
        let mut p = Plant::new(cfg.clone()).unwrap();
        let v = zero_v(cfg.dim);
        let mut chunks = 0;
        loop {
            let e = p.step(0.0, &v).unwrap();
            chunks += 1;
            assert_eq!(e.true_label, RedundancyLabel::Required);
            if e.done {
                assert!(e.solved);
                break;
            }
        }
        assert_eq!(chunks, cfg.required_chunks_to_solve);
        assert_eq!(p.tokens_emitted(), cfg.required_chunks_to_solve * cfg.chunk_size);
        assert!(matches!(p.step(0.0, &v), Err(Error::PlantFinished)));
    }

    #[test]
    fn budget_truncates_final_chunk() {
        let cfg = PlantConfig {
            base_redundancy_logit: 10.0,
            max_tokens: 50,
            ..PlantConfig::default()
        };
        let mut p = Plant::new(cfg.clone()).unwrap();
        let v = zero_v(cfg.dim);
        let sizes: Vec<usize> =
            std::iter::from_fn(|| (!p.is_done()).then(|| p.step(0.0, &v).unwrap().tokens_emitted)).collect();
        assert_eq!(sizes, vec![24, 24, 2]);
        assert_eq!(p.tokens_emitted(), 50);
    }

    #[test]
    fn emitted_states_carry_the_steering_shift() {
        let cfg = PlantConfig {
            seed: 3,
            ..PlantConfig::default()
        };
        let v = ControlVector::from_parts(cfg.true_gap(), 1, 1, 20).unwrap();
        let cfg = PlantConfig {
            steering_coupling: 0.0,
            ..cfg
        };
        let mut steered = Plant::new(cfg.clone()).unwrap();
        let mut plain = Plant::new(cfg).unwrap();
        let a = steered.step(0.25, &v).unwrap();
        let b = plain.step(0.0, &v).unwrap();
        assert_eq!(a.true_label, b.true_label);
        for (x, y) in a.hidden_states.iter().zip(&b.hidden_states) {
            for ((xi, yi), d) in x.as_slice().iter().zip(y.as_slice()).zip(v.direction()) {
                assert!((xi - yi - 0.25 * d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn effective_steering_projects_onto_gap() {
        let cfg = PlantConfig::default();
        let p = Plant::new(cfg.clone()).unwrap();
        let v = ControlVector::from_parts(cfg.true_gap(), 1, 1, 20).unwrap();
        assert!((p.effective_steering(0.4, &v) - 0.4).abs() < 1e-15);
        assert_eq!(p.effective_steering(0.4, &v.negated()), -0.4);
    }
}
