//! Many independent episodes, optionally run across threads.
//!
//! Each episode gets its own plant, controller and random streams; episode
//! `i` of every arm uses the same seed, so steered and baseline runs are
//! paired. Results are always returned in episode order, so the parallel
//! and sequential paths produce identical output.

use crate::episode::{run_episode, EpisodeResult, RunMetrics, SteeringSchedule};
use crate::error::{Error, Result};
use crate::features::ClassifierModel;
use crate::pid::PidGains;
use crate::plant::{Plant, PlantConfig};
use crate::trace::{RecordingSource, Trace};
use crate::vector::ControlVector;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon thread pool. Falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// SplitMix64 finalizer over the master seed and episode index.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| episode_seed(master, i)).collect()
}

/// Everything an episode needs apart from its seed.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub plant: &'a PlantConfig,
    pub model: &'a ClassifierModel,
    pub vector: &'a ControlVector,
    pub gains: PidGains,
    pub schedule: SteeringSchedule,
}

impl EpisodeSetup<'_> {
    /// The same setup with steering switched off.
    pub fn baseline(&self) -> Self {
        EpisodeSetup {
            gains: self.gains.disabled(),
            ..*self
        }
    }

    pub fn run_one(&self, seed: u64) -> Result<EpisodeResult> {
        let mut plant = Plant::new(self.plant.with_seed(seed))?;
        run_episode(&mut plant, self.model, self.vector, &self.gains, &self.schedule)
    }

    pub fn run_recorded(&self, seed: u64) -> Result<(EpisodeResult, Trace)> {
        let plant = Plant::new(self.plant.with_seed(seed))?;
        let mut source = RecordingSource::new(plant, self.plant.chunk_size);
        let result = run_episode(&mut source, self.model, self.vector, &self.gains, &self.schedule)?;
        Ok((result, source.into_trace()))
    }
}

fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let wrap = |i: usize| {
        f(i).map_err(|e| Error::Episode {
            index: i,
            source: Box::new(e),
        })
    };
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(wrap).collect(),
        _ => (0..n).map(wrap).collect(),
    }
}

pub fn run_arm(setup: &EpisodeSetup<'_>, seeds: &[u64], exec: Execution) -> Result<Vec<EpisodeResult>> {
    map_indexed(seeds.len(), exec, |i| setup.run_one(seeds[i]))
}

pub fn run_arm_recorded(
    setup: &EpisodeSetup<'_>,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<(EpisodeResult, Trace)>> {
    map_indexed(seeds.len(), exec, |i| setup.run_recorded(seeds[i]))
}

/// Both arms of a matched-seed comparison.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub baseline: Vec<EpisodeResult>,
    pub steered: Vec<EpisodeResult>,
    pub baseline_metrics: RunMetrics,
    pub steered_metrics: RunMetrics,
}

pub fn run_paired(setup: &EpisodeSetup<'_>, seeds: &[u64], exec: Execution) -> Result<BatchOutcome> {
    if seeds.is_empty() {
        return Err(Error::invalid("batch", "n_episodes must be >= 1"));
    }
    let baseline = run_arm(&setup.baseline(), seeds, exec)?;
    let steered = run_arm(setup, seeds, exec)?;
    let baseline_metrics = RunMetrics::from_results(&baseline, 0.0)?;
    let steered_metrics = RunMetrics::from_results(&steered, baseline_metrics.mean_tokens)?;
    Ok(BatchOutcome {
        baseline,
        steered,
        baseline_metrics,
        steered_metrics,
    })
}

/// Steered-arm metrics over `n_episodes` seeds derived from `master_seed`,
/// with the token reduction measured against the matched baseline.
pub fn run_batch(setup: &EpisodeSetup<'_>, n_episodes: usize, master_seed: u64, exec: Execution) -> Result<RunMetrics> {
    run_paired(setup, &episode_seeds(master_seed, n_episodes), exec).map(|o| o.steered_metrics)
}
