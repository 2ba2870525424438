//! The closed steering loop over one generation episode.
//!
//! Chunks are aligned to the start of generation. After each completed chunk
//! the classifier scores the pooled features, and if the chunk's last token
//! index `t` satisfies `t_init <= t <= t_init + t_window` the controller is
//! updated. The current strength is handed to the source for every chunk it
//! generates, so steering keeps being applied with a frozen `alpha` after the
//! window closes. The controller starts from the zero state every episode.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{pool_chunk, ChunkFeatures, ClassifierModel, HiddenVector, RedundancyLabel};
use crate::pid::{PidController, PidGains, PidUpdateTrace};
use crate::plant::Plant;
use crate::vector::ControlVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringSchedule {
    /// Tokens generated before the controller may act.
    pub t_init: usize,
    /// Length of the update window that follows `t_init`.
    pub t_window: usize,
    pub max_tokens: usize,
}

impl Default for SteeringSchedule {
    fn default() -> Self {
        SteeringSchedule {
            t_init: 80,
            t_window: 60,
            max_tokens: 2048,
        }
    }
}

impl SteeringSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::invalid("schedule", "max_tokens must be >= 1"));
        }
        // t_init == max_tokens is allowed and means the controller never acts
        if self.t_init > self.max_tokens {
            return Err(Error::invalid("schedule", "t_init must not exceed max_tokens"));
        }
        Ok(())
    }

    /// Whether a chunk ending at token index `last_token` may update the controller.
    pub fn in_window(&self, last_token: usize) -> bool {
        last_token >= self.t_init && last_token - self.t_init <= self.t_window
    }
}

/// What a source hands back for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkPayload {
    Tokens(Vec<HiddenVector>),
    Pooled(ChunkFeatures),
}

impl ChunkPayload {
    pub fn pooled(&self) -> Result<ChunkFeatures> {
        match self {
            ChunkPayload::Tokens(states) => pool_chunk(states),
            ChunkPayload::Pooled(f) => Ok(f.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceChunk {
    pub payload: ChunkPayload,
    pub tokens: usize,
    pub label: Option<RedundancyLabel>,
    pub done: bool,
    pub solved: Option<bool>,
}

/// Anything that produces chunks of hidden states under a steering strength.
pub trait ChunkSource {
    fn dim(&self) -> usize;

    /// Produce the next chunk using at most `token_budget` tokens, or `None`
    /// when the source has nothing left. Closed-loop sources apply
    /// `alpha * v` to the states they emit.
    fn next_chunk(&mut self, alpha: f64, v: &ControlVector, token_budget: usize) -> Result<Option<SourceChunk>>;
}

impl ChunkSource for Plant {
    fn dim(&self) -> usize {
        self.config().dim
    }

    fn next_chunk(&mut self, alpha: f64, v: &ControlVector, token_budget: usize) -> Result<Option<SourceChunk>> {
        if self.is_done() {
            return Ok(None);
        }
        let e = self.step_within(alpha, v, token_budget)?;
        Ok(Some(SourceChunk {
            payload: ChunkPayload::Tokens(e.hidden_states),
            tokens: e.tokens_emitted,
            label: Some(e.true_label),
            done: e.done,
            solved: e.done.then_some(e.solved),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeResult {
    pub solved: bool,
    pub tokens_used: usize,
    /// Strength in effect after each chunk.
    pub alpha_trace: Vec<f64>,
    pub p_red_trace: Vec<f64>,
    /// Ground-truth redundant count, when every chunk carried a label.
    pub redundant_chunks: Option<usize>,
    /// Controller terms for chunks inside the window, `None` elsewhere.
    pub pid_traces: Vec<Option<PidUpdateTrace>>,
}

impl EpisodeResult {
    pub fn chunks(&self) -> usize {
        self.alpha_trace.len()
    }

    pub fn final_alpha(&self) -> f64 {
        self.alpha_trace.last().copied().unwrap_or(0.0)
    }

    /// Classifier output at the last controller update of the episode.
    pub fn final_window_p_red(&self) -> Option<f64> {
        self.pid_traces
            .iter()
            .rposition(Option::is_some)
            .map(|i| self.p_red_trace[i])
    }

    pub fn updates(&self) -> usize {
        self.pid_traces.iter().flatten().count()
    }

    /// First chunk index after which `alpha` sat at `ceiling`.
    pub fn saturation_chunk(&self, ceiling: f64) -> Option<usize> {
        self.alpha_trace.iter().position(|a| *a >= ceiling)
    }
}

fn check_components(model: &ClassifierModel, v: &ControlVector, source_dim: usize) -> Result<()> {
    ensure_dim("classifier vs control vector", model.dim(), v.dim())?;
    ensure_dim("classifier vs source", model.dim(), source_dim)?;
    Ok(())
}

pub fn run_episode<S: ChunkSource + ?Sized>(
    source: &mut S,
    model: &ClassifierModel,
    v: &ControlVector,
    gains: &PidGains,
    schedule: &SteeringSchedule,
) -> Result<EpisodeResult> {
    schedule.validate()?;
    check_components(model, v, source.dim())?;
    let mut pid = PidController::new(*gains)?;
    let mut result = EpisodeResult::default();
    let mut redundant = 0usize;
    let mut all_labeled = true;

    while result.tokens_used < schedule.max_tokens {
        let budget = schedule.max_tokens - result.tokens_used;
        let index = result.chunks();
        let ctx = |e: Error| Error::Step {
            chunk: index,
            source: Box::new(e),
        };
        let Some(chunk) = source.next_chunk(pid.alpha(), v, budget).map_err(ctx)? else {
            break;
        };
        if chunk.tokens == 0 || chunk.tokens > budget {
            return Err(ctx(Error::Invariant(format!(
                "source emitted {} tokens with {budget} remaining",
                chunk.tokens
            ))));
        }
        let features = chunk.payload.pooled().map_err(ctx)?;
        ensure_dim("chunk features", model.dim(), features.dim()).map_err(ctx)?;
        result.tokens_used += chunk.tokens;

        let p_red = model.predict_proba(&features).map_err(ctx)?;
        let trace = if schedule.in_window(result.tokens_used - 1) {
            Some(pid.update(p_red).map_err(ctx)?)
        } else {
            None
        };
        result.alpha_trace.push(pid.alpha());
        result.p_red_trace.push(p_red);
        result.pid_traces.push(trace);

        match chunk.label {
            Some(RedundancyLabel::Redundant) => redundant += 1,
            Some(RedundancyLabel::Required) => {}
            None => all_labeled = false,
        }
        if chunk.done {
            result.solved = chunk.solved.unwrap_or(false);
            break;
        }
    }
    result.redundant_chunks = all_labeled.then_some(redundant);
    Ok(result)
}

/// Aggregate outcome of one arm of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub solve_rate: f64,
    pub mean_tokens: f64,
    /// `1 - mean_tokens / baseline_mean_tokens`.
    pub mean_token_reduction_vs_baseline: f64,
    /// Mean classifier output at each episode's last controller update.
    pub mean_terminal_p_red: Option<f64>,
}

impl RunMetrics {
    pub fn from_results(results: &[EpisodeResult], baseline_mean_tokens: f64) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("metrics", "need at least one episode"));
        }
        let n = results.len() as f64;
        let solve_rate = results.iter().filter(|r| r.solved).count() as f64 / n;
        let mean_tokens = results.iter().map(|r| r.tokens_used as f64).sum::<f64>() / n;
        let terminal: Vec<f64> = results.iter().filter_map(EpisodeResult::final_window_p_red).collect();
        let mean_terminal_p_red = (!terminal.is_empty()).then(|| terminal.iter().sum::<f64>() / terminal.len() as f64);
        let reduction = if baseline_mean_tokens > 0.0 {
            1.0 - mean_tokens / baseline_mean_tokens
        } else {
            0.0
        };
        Ok(RunMetrics {
            episodes: results.len(),
            solve_rate,
            mean_tokens,
            mean_token_reduction_vs_baseline: reduction,
            mean_terminal_p_red,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureLayout;
    use crate::plant::PlantConfig;

    fn components(cfg: &PlantConfig) -> (ClassifierModel, ControlVector) {
        let mut model = ClassifierModel::zero(cfg.dim, FeatureLayout::default());
        // leans redundant on the redundant side of the gap
        model.weights = cfg.true_gap().iter().map(|g| -2.0 * g).collect();
        let v = ControlVector::from_parts(cfg.true_gap(), 1, 1, 20).unwrap();
        (model, v)
    }

    #[test]
    fn window_bounds() {
        let s = SteeringSchedule::default();
        assert!(!s.in_window(79));
        assert!(s.in_window(80));
        assert!(s.in_window(140));
        assert!(!s.in_window(141));
        assert!(SteeringSchedule { t_init: 2049, ..s }.validate().is_err());
        assert!(SteeringSchedule { t_init: 2048, ..s }.validate().is_ok());
    }

    #[test]
    fn default_schedule_updates_twice_at_most() {
        let cfg = PlantConfig {
            seed: 1,
            ..PlantConfig::default()
        };
        let (model, v) = components(&cfg);
        let mut plant = Plant::new(cfg).unwrap();
        let r = run_episode(
            &mut plant,
            &model,
            &v,
            &PidGains::default(),
            &SteeringSchedule::default(),
        )
        .unwrap();
        // chunks end at token indices 95 and 119
        let idx: Vec<usize> = r
            .pid_traces
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|_| i))
            .collect();
        assert_eq!(idx, vec![3, 4]);
        assert_eq!(r.chunks(), r.p_red_trace.len());
        assert_eq!(r.chunks(), r.pid_traces.len());
        assert!(r.tokens_used <= 2048);
        assert!(r.redundant_chunks.is_some());
    }

    #[test]
    fn empty_window_keeps_alpha_zero() {
        let cfg = PlantConfig {
            seed: 2,
            ..PlantConfig::default()
        };
        let (model, v) = components(&cfg);
        let schedule = SteeringSchedule {
            t_init: 2048,
            t_window: 60,
            max_tokens: 2048,
        };
        let mut plant = Plant::new(cfg).unwrap();
        let r = run_episode(&mut plant, &model, &v, &PidGains::default(), &schedule).unwrap();
        assert!(r.alpha_trace.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn schedule_budget_caps_tokens() {
        let cfg = PlantConfig {
            seed: 4,
            base_redundancy_logit: 5.0,
            ..PlantConfig::default()
        };
        let (model, v) = components(&cfg);
        let schedule = SteeringSchedule {
            t_init: 10,
            t_window: 60,
            max_tokens: 100,
        };
        let mut plant = Plant::new(cfg).unwrap();
        let r = run_episode(&mut plant, &model, &v, &PidGains::default(), &schedule).unwrap();
        assert_eq!(r.tokens_used, 100);
        assert!(!r.solved);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = PlantConfig::default();
        let (model, _) = components(&cfg);
        let v = ControlVector::zero(3, 20);
        let mut plant = Plant::new(cfg).unwrap();
        assert!(matches!(
            run_episode(
                &mut plant,
                &model,
                &v,
                &PidGains::default(),
                &SteeringSchedule::default()
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_episode_metrics_are_that_episode() {
        let r = EpisodeResult {
            solved: true,
            tokens_used: 480,
            alpha_trace: vec![0.0, 0.1],
            p_red_trace: vec![0.9, 0.2],
            redundant_chunks: Some(1),
            pid_traces: vec![None, None],
        };
        let m = RunMetrics::from_results(std::slice::from_ref(&r), 480.0).unwrap();
        assert_eq!(m.episodes, 1);
        assert_eq!(m.solve_rate, 1.0);
        assert_eq!(m.mean_tokens, 480.0);
        assert_eq!(m.mean_token_reduction_vs_baseline, 0.0);
        assert_eq!(m.mean_terminal_p_red, None);
        assert!(RunMetrics::from_results(&[], 1.0).is_err());
    }
}
