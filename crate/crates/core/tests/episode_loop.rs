mod common;

use pidsteer::{
    episode_seeds, replay_trace, run_arm, run_batch, run_episode, run_paired, ChunkFeatures, ControlVector,
    EpisodeSetup, Execution, PidGains, Plant, PlantConfig, RunMetrics, SteeringSchedule, Trace, TraceHeader, TraceMode,
    TraceRecord,
};
use proptest::prelude::*;

fn setup_parts() -> (PlantConfig, pidsteer::ClassifierModel, ControlVector) {
    let cfg = PlantConfig::default();
    let (model, v) = common::fitted_components(&cfg, 42);
    (cfg, model, v)
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn zero_ceiling_matches_unsteered_plant() {
    let (cfg, model, v) = setup_parts();
    let gains = PidGains::default().disabled();
    let schedule = SteeringSchedule::default();
    for seed in episode_seeds(1, 20) {
        let mut plant = Plant::new(cfg.with_seed(seed)).unwrap();
        let steered = run_episode(&mut plant, &model, &v, &gains, &schedule).unwrap();
        let zero_v = ControlVector::zero(cfg.dim, 20);
        let mut plant = Plant::new(cfg.with_seed(seed)).unwrap();
        let free = run_episode(&mut plant, &model, &zero_v, &PidGains::default(), &schedule).unwrap();
        assert!(steered.alpha_trace.iter().all(|a| *a == 0.0));
        assert_eq!(steered.tokens_used, free.tokens_used);
        assert_eq!(steered.solved, free.solved);
        assert_eq!(bits(&steered.p_red_trace), bits(&free.p_red_trace));
    }
}

#[test]
fn empty_window_never_updates() {
    let (cfg, model, v) = setup_parts();
    let schedule = SteeringSchedule {
        t_init: 2048,
        t_window: 60,
        max_tokens: 2048,
    };
    let mut plant = Plant::new(cfg.with_seed(3)).unwrap();
    let r = run_episode(&mut plant, &model, &v, &PidGains::default(), &schedule).unwrap();
    assert_eq!(r.updates(), 0);
    assert!(r.alpha_trace.iter().all(|a| *a == 0.0));
}

#[test]
fn updates_only_for_chunks_ending_inside_window() {
    let (cfg, model, v) = setup_parts();
    let schedule = SteeringSchedule::default();
    for seed in episode_seeds(2, 20) {
        let mut plant = Plant::new(cfg.with_seed(seed)).unwrap();
        let r = run_episode(&mut plant, &model, &v, &PidGains::default(), &schedule).unwrap();
        let mut end = 0;
        for (i, t) in r.pid_traces.iter().enumerate() {
            end += cfg.chunk_size;
            let last = end - 1;
            assert_eq!(t.is_some(), (80..=140).contains(&last), "chunk {i} ends at {last}");
        }
        // chunks ending at tokens 95 and 119
        assert_eq!(r.updates(), 2);
        let frozen = r.alpha_trace[4];
        assert!(r.alpha_trace[4..].iter().all(|a| *a == frozen));
        assert!(r.alpha_trace[..3].iter().all(|a| *a == 0.0));
    }
}

#[test]
fn frozen_alpha_keeps_shifting_states() {
    // with no coupling both runs share labels and noise, so recorded
    // features differ by exactly the applied shift
    let cfg = PlantConfig {
        steering_coupling: 0.0,
        ..PlantConfig::default()
    };
    let (model, v) = common::fitted_components(&cfg, 42);
    let setup = EpisodeSetup {
        plant: &cfg,
        model: &model,
        vector: &v,
        gains: PidGains::default(),
        schedule: SteeringSchedule::default(),
    };
    let (steered, st) = setup.run_recorded(17).unwrap();
    let (_, free) = setup.baseline().run_recorded(17).unwrap();
    let alpha = steered.final_alpha();
    assert!(alpha > 0.0);
    assert_eq!(st.records.len(), free.records.len());
    for (i, (a, b)) in st.records.iter().zip(&free.records).enumerate() {
        // states of chunk i were produced under the strength set after chunk i-1
        let applied = if i == 0 { 0.0 } else { steered.alpha_trace[i - 1] };
        for ((x, y), d) in a.features.iter().zip(&b.features).zip(v.direction()) {
            assert!((x - y - applied * d).abs() < 1e-12);
        }
    }
}

#[test]
fn episodes_do_not_share_controller_state() {
    let (cfg, model, v) = setup_parts();
    let setup = EpisodeSetup {
        plant: &cfg,
        model: &model,
        vector: &v,
        gains: PidGains::default(),
        schedule: SteeringSchedule::default(),
    };
    let seeds = episode_seeds(4, 12);
    let forward = run_arm(&setup, &seeds, Execution::Sequential).unwrap();
    let mut reversed_seeds = seeds.clone();
    reversed_seeds.reverse();
    let mut backward = run_arm(&setup, &reversed_seeds, Execution::Sequential).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
    assert_eq!(forward, run_arm(&setup, &seeds, Execution::Parallel).unwrap());
}

#[test]
fn batch_aggregation_identities() {
    let (cfg, model, v) = setup_parts();
    let setup = EpisodeSetup {
        plant: &cfg,
        model: &model,
        vector: &v,
        gains: PidGains::default(),
        schedule: SteeringSchedule::default(),
    };
    let one = run_batch(&setup, 1, 8, Execution::Sequential).unwrap();
    let r = setup.run_one(episode_seeds(8, 1)[0]).unwrap();
    assert_eq!(one.episodes, 1);
    assert_eq!(one.mean_tokens, r.tokens_used as f64);
    assert_eq!(one.solve_rate, if r.solved { 1.0 } else { 0.0 });

    let off = EpisodeSetup {
        gains: PidGains::default().disabled(),
        ..setup
    };
    let o = run_paired(&off, &episode_seeds(8, 30), Execution::Parallel).unwrap();
    assert_eq!(o.steered_metrics.mean_token_reduction_vs_baseline, 0.0);
    assert!(run_paired(&setup, &[], Execution::Sequential).is_err());
    assert!(RunMetrics::from_results(&[], 0.0).is_err());
}

#[test]
fn recorded_episodes_replay_bitwise() {
    let (cfg, model, v) = setup_parts();
    let dir = tempfile::tempdir().unwrap();
    let gains = PidGains::default();
    let schedule = SteeringSchedule::default();
    let setup = EpisodeSetup {
        plant: &cfg,
        model: &model,
        vector: &v,
        gains,
        schedule,
    };
    for (i, seed) in episode_seeds(6, 10).into_iter().enumerate() {
        let (live, trace) = setup.run_recorded(seed).unwrap();
        let path = dir.path().join(format!("{i}.jsonl"));
        trace.save(&path).unwrap();
        let back = Trace::load(&path).unwrap();
        assert_eq!(back, trace);
        let replayed = replay_trace(&back, &model, &v, &gains, &schedule).unwrap();
        assert_eq!(bits(&replayed.alpha_trace), bits(&live.alpha_trace));
        assert_eq!(bits(&replayed.p_red_trace), bits(&live.p_red_trace));
        assert_eq!(replayed.tokens_used, live.tokens_used);
        assert_eq!(replayed.solved, live.solved);
    }
}

#[test]
fn empty_trace_replays_to_nothing() {
    let (cfg, model, v) = setup_parts();
    let trace = Trace::new(TraceHeader::new(cfg.dim, cfg.chunk_size, TraceMode::Pooled));
    let r = replay_trace(&trace, &model, &v, &PidGains::default(), &SteeringSchedule::default()).unwrap();
    assert_eq!(r.tokens_used, 0);
    assert_eq!(r.chunks(), 0);
}

fn constant_trace(features: &[f64], chunks: usize) -> Trace {
    let mut t = Trace::new(TraceHeader::new(features.len(), 24, TraceMode::Pooled));
    t.records = (0..chunks)
        .map(|i| TraceRecord {
            step: i as u64,
            features: features.to_vec(),
            label: None,
            tokens: None,
            solved: None,
        })
        .collect();
    t
}

#[test]
fn constant_redundant_features_follow_scalar_recurrence() {
    let (cfg, model, v) = setup_parts();
    let p = model
        .predict_proba(&ChunkFeatures::new(cfg.mu_redundant.clone()).unwrap())
        .unwrap();
    assert!(p > 0.99);
    let trace = constant_trace(&cfg.mu_redundant, 40);

    let schedule = SteeringSchedule::default();
    let r = replay_trace(&trace, &model, &v, &PidGains::default(), &schedule).unwrap();
    let oracle = common::alpha_trajectory(p, 2);
    assert_eq!(r.updates(), 2);
    assert!((r.alpha_trace[3] - oracle[0]).abs() < 1e-12);
    assert!((r.alpha_trace[4] - oracle[1]).abs() < 1e-12);
    // two updates cannot reach the ceiling
    assert_eq!(r.saturation_chunk(0.40), None);

    // a window covering the whole trace does saturate, on the oracle's step
    let wide = SteeringSchedule {
        t_init: 80,
        t_window: 2048,
        max_tokens: 2048,
    };
    let r = replay_trace(&trace, &model, &v, &PidGains::default(), &wide).unwrap();
    let oracle = common::alpha_trajectory(p, 37);
    let oracle_step = oracle.iter().position(|a| *a >= 0.40).expect("oracle saturates");
    assert_eq!(r.saturation_chunk(0.40), Some(3 + oracle_step));
    assert_eq!(r.final_alpha(), 0.40);
}

#[test]
fn dimension_mismatches_are_reported() {
    let (cfg, model, _) = setup_parts();
    let bad_v = ControlVector::zero(cfg.dim + 1, 20);
    let mut plant = Plant::new(cfg.clone()).unwrap();
    let err = run_episode(
        &mut plant,
        &model,
        &bad_v,
        &PidGains::default(),
        &SteeringSchedule::default(),
    );
    assert!(matches!(err, Err(pidsteer::Error::DimensionMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn budget_and_trace_lengths_hold(
        seed in any::<u64>(),
        t_init in 0usize..300,
        t_window in 0usize..300,
        max_tokens in 300usize..2500,
    ) {
        let cfg = PlantConfig { seed, ..PlantConfig::default() };
        let (model, v) = common::fitted_components(&cfg, 1);
        let schedule = SteeringSchedule { t_init, t_window, max_tokens };
        let mut plant = Plant::new(cfg).unwrap();
        let r = run_episode(&mut plant, &model, &v, &PidGains::default(), &schedule).unwrap();
        prop_assert!(r.tokens_used <= max_tokens);
        prop_assert_eq!(r.alpha_trace.len(), r.chunks());
        prop_assert_eq!(r.p_red_trace.len(), r.chunks());
        prop_assert_eq!(r.pid_traces.len(), r.chunks());
        prop_assert!(r.alpha_trace.iter().all(|a| (0.0..=0.40).contains(a)));
    }
}
