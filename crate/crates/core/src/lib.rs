//! PID-modulated activation steering.
//!
//! A chunk-level classifier estimates how likely the current stretch of
//! reasoning is redundant; a clamped PID law turns that estimate into a
//! steering strength `alpha`, and the hidden states are shifted by
//! `alpha * v` along a control vector `v` extracted from labeled examples.
//!
//! Since the intended plant is a language model, the crate also ships a
//! small stochastic stand-in ([`plant`]) so the loop can be exercised end to
//! end, plus a replay path ([`trace`]) for recorded activations.

pub(crate) mod artifact;
pub mod batch;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod features;
pub mod pid;
pub mod plant;
pub mod trace;
pub mod vector;

pub use batch::{episode_seed, episode_seeds, run_arm, run_batch, run_paired, EpisodeSetup, Execution};
pub use episode::{run_episode, ChunkSource, EpisodeResult, RunMetrics, SteeringSchedule};
pub use error::{Error, Result};
pub use features::{
    pool_chunk, predict_proba, train, train_with_history, ChunkFeatures, ClassifierModel, FeatureLayout, HiddenVector,
    RedundancyLabel, TrainConfig,
};
pub use pid::{compute_error, init_state, update, PidController, PidGains, PidState, PidUpdateTrace};
pub use plant::{ChunkEmission, Plant, PlantConfig};
pub use trace::{replay_trace, Trace, TraceHeader, TraceMode, TraceRecord};
pub use vector::{apply_steering, extract, ControlVector};
