//! Subcommand implementations behind the `pidsteer` binary.
//!
//! Each command takes a validated [`Context`], writes its files under the
//! output directory, and returns the text to print. Output files embed the
//! configuration hash and never contain timestamps or absolute paths, so
//! the same configuration and seed always reproduce them byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{fmt_real, write_file};
use crate::batch::{episode_seeds, run_arm, EpisodeSetup, Execution};
use crate::config::HarnessConfig;
use crate::dataset;
use crate::episode::{EpisodeResult, RunMetrics};
use crate::error::{ensure_dim, Error, Result};
use crate::features::{train_with_history, ClassifierModel};
use crate::pid::PidGains;
use crate::trace::{replay_trace, write_traces, Trace};
use crate::vector::{extract, ControlVector};

pub struct Context {
    pub cfg: HarnessConfig,
    pub hash: String,
    pub exec: Execution,
}

impl Context {
    pub fn new(cfg: HarnessConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        Ok(Context {
            cfg,
            hash,
            exec: Execution::default(),
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(name)
    }

    fn artifact(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(p)
    }

    fn seeds(&self) -> Vec<u64> {
        episode_seeds(self.cfg.seed, self.cfg.n_episodes)
    }

    /// Loads model and vector and checks them against the plant.
    fn components(&self) -> Result<(ClassifierModel, ControlVector)> {
        let model = ClassifierModel::load(&self.artifact(&self.cfg.paths.model))?;
        let vector = ControlVector::load(&self.artifact(&self.cfg.paths.vector))?;
        let plant = &self.cfg.plant;
        ensure_dim("classifier vs plant", plant.dim, model.dim())?;
        ensure_dim("control vector vs plant", plant.dim, vector.dim())?;
        if model.chunk_size != plant.chunk_size {
            return Err(Error::invalid(
                "classifier",
                format!(
                    "trained on {}-token chunks but the plant emits {}-token chunks",
                    model.chunk_size, plant.chunk_size
                ),
            ));
        }
        Ok((model, vector))
    }
}

/// Fixed-format CSV document with a leading `# config_hash=` comment.
fn csv_doc(hash: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invariant(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    let body = w.into_inner().map_err(|e| Error::Invariant(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(format!("# config_hash={hash}\n{body}"))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Invariant(e.to_string()))
}

pub fn gen_data(ctx: &Context) -> Result<String> {
    let cfg = &ctx.cfg;
    let train = dataset::generate(&cfg.plant, cfg.n_train_chunks, cfg.seed)?;
    let heldout = dataset::generate(&cfg.plant, cfg.n_train_chunks, cfg.seed ^ 0x5EED_4E1D_0000_0001)?;
    let train_path = ctx.artifact(&cfg.paths.dataset);
    let heldout_path = ctx.artifact(&cfg.paths.heldout);
    dataset::write(&train_path, &train, cfg.plant.chunk_size, &ctx.hash)?;
    dataset::write(&heldout_path, &heldout, cfg.plant.chunk_size, &ctx.hash)?;

    let (req, red) = dataset::split_by_label(&train);
    let mut out = String::new();
    let _ = writeln!(out, "wrote {} training chunks to {}", train.len(), train_path.display());
    let _ = writeln!(out, "  required: {}  redundant: {}", req.len(), red.len());
    let _ = writeln!(
        out,
        "wrote {} held-out chunks to {}",
        heldout.len(),
        heldout_path.display()
    );
    Ok(out)
}

pub fn train_classifier(ctx: &Context) -> Result<String> {
    let cfg = &ctx.cfg;
    let data = dataset::read(&ctx.artifact(&cfg.paths.dataset))?;
    let (mut model, losses) = train_with_history(&data, &cfg.train, cfg.layout())?;
    model.config_hash = Some(ctx.hash.clone());
    let model_path = ctx.artifact(&cfg.paths.model);
    model.save(&model_path)?;

    let mut out = String::new();
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    let _ = writeln!(out, "trained on {} chunks, {} epochs", data.len(), cfg.train.epochs);
    let _ = writeln!(out, "final training loss: {final_loss:.6}");
    let _ = writeln!(out, "training accuracy: {:.4}", model.accuracy(&data)?);
    let heldout_path = ctx.artifact(&cfg.paths.heldout);
    if heldout_path.exists() {
        let heldout = dataset::read(&heldout_path)?;
        let _ = writeln!(out, "held-out accuracy: {:.4}", model.accuracy(&heldout)?);
    }
    let _ = writeln!(out, "wrote {}", model_path.display());
    Ok(out)
}

pub fn extract_vector(ctx: &Context) -> Result<String> {
    let cfg = &ctx.cfg;
    let data = dataset::read(&ctx.artifact(&cfg.paths.dataset))?;
    let (required, redundant) = dataset::split_by_label(&data);
    let mut v = extract(&required, &redundant)?.with_feature_layer(cfg.feature_layer);
    if cfg.normalize_vector {
        v = v.normalize();
    }
    v.config_hash = Some(ctx.hash.clone());
    let path = ctx.artifact(&cfg.paths.vector);
    v.save(&path)?;

    let cosine = v.cosine(&cfg.plant.true_gap())?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "extracted from {} required / {} redundant chunks",
        v.n_required, v.n_redundant
    );
    let _ = writeln!(out, "norm: {:.6}", v.norm());
    let _ = writeln!(out, "cosine vs configured gap: {cosine:.4}");
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Steered,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Steered => "steered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub mean_final_alpha: f64,
    pub mean_redundant_chunks: Option<f64>,
}

fn summarize(ctx: &Context, arm: Arm, results: &[EpisodeResult], baseline_tokens: f64) -> Result<ArmSummary> {
    let mut metrics = RunMetrics::from_results(results, baseline_tokens)?;
    if arm == Arm::Baseline {
        metrics.mean_token_reduction_vs_baseline = 0.0;
    }
    let n = results.len() as f64;
    let redundant: Option<Vec<usize>> = results.iter().map(|r| r.redundant_chunks).collect();
    Ok(ArmSummary {
        arm: arm.name().to_string(),
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        metrics,
        mean_final_alpha: results.iter().map(EpisodeResult::final_alpha).sum::<f64>() / n,
        mean_redundant_chunks: redundant.map(|r| r.iter().sum::<usize>() as f64 / n),
    })
}

fn episodes_csv(ctx: &Context, seeds: &[u64], results: &[EpisodeResult]) -> Result<String> {
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    let rows = results.iter().zip(seeds).enumerate().map(|(i, (r, seed))| {
        vec![
            i.to_string(),
            seed.to_string(),
            r.solved.to_string(),
            r.tokens_used.to_string(),
            r.chunks().to_string(),
            r.redundant_chunks.map(|c| c.to_string()).unwrap_or_default(),
            r.updates().to_string(),
            fmt_real(r.final_alpha()),
            opt(r.final_window_p_red()),
        ]
    });
    csv_doc(
        &ctx.hash,
        &[
            "episode",
            "seed",
            "solved",
            "tokens_used",
            "chunks",
            "redundant_chunks",
            "updates",
            "final_alpha",
            "final_window_p_red",
        ],
        rows,
    )
}

fn traces_csv(ctx: &Context, results: &[EpisodeResult]) -> Result<String> {
    let rows = results.iter().enumerate().flat_map(|(i, r)| {
        r.alpha_trace
            .iter()
            .zip(&r.p_red_trace)
            .enumerate()
            .map(move |(c, (a, p))| vec![i.to_string(), c.to_string(), fmt_real(*a), fmt_real(*p)])
    });
    csv_doc(&ctx.hash, &["episode", "chunk", "alpha", "p_red"], rows)
}

fn describe(s: &ArmSummary) -> String {
    let p = s
        .metrics
        .mean_terminal_p_red
        .map_or("n/a".to_string(), |p| format!("{p:.4}"));
    format!(
        "{:<9} episodes={} solve_rate={:.4} mean_tokens={:.2} reduction={:.4} terminal_p_red={} final_alpha={:.5}",
        s.arm,
        s.metrics.episodes,
        s.metrics.solve_rate,
        s.metrics.mean_tokens,
        s.metrics.mean_token_reduction_vs_baseline,
        p,
        s.mean_final_alpha
    )
}

/// Which arms `simulate` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmSelection {
    Both,
    Steered,
    Baseline,
}

pub fn simulate(ctx: &Context, selection: ArmSelection, record: usize) -> Result<String> {
    let cfg = &ctx.cfg;
    let seeds = ctx.seeds();
    let components = match (selection, ctx.components()) {
        (_, Ok(c)) => Some(c),
        (ArmSelection::Baseline, Err(Error::Io { .. })) => None,
        (_, Err(e)) => return Err(e),
    };
    // the baseline arm never steers, so it can run without artifacts
    let (model, vector) = components.clone().unwrap_or_else(|| {
        (
            ClassifierModel::zero(cfg.plant.dim, cfg.layout()),
            ControlVector::zero(cfg.plant.dim, cfg.feature_layer),
        )
    });
    let setup = EpisodeSetup {
        plant: &cfg.plant,
        model: &model,
        vector: &vector,
        gains: cfg.gains,
        schedule: cfg.schedule,
    };

    let baseline = run_arm(&setup.baseline(), &seeds, ctx.exec)?;
    let mut baseline_summary = summarize(ctx, Arm::Baseline, &baseline, 0.0)?;
    if components.is_none() {
        baseline_summary.metrics.mean_terminal_p_red = None;
    }
    let mut out = String::new();
    let mut emit = |arm: Arm, results: &[EpisodeResult], summary: &ArmSummary| -> Result<()> {
        let name = arm.name();
        write_file(
            &ctx.out(&format!("{name}_episodes.csv")),
            &episodes_csv(ctx, &seeds, results)?,
        )?;
        write_file(&ctx.out(&format!("{name}_traces.csv")), &traces_csv(ctx, results)?)?;
        write_file(&ctx.out(&format!("{name}_summary.json")), &to_json(summary)?)?;
        let _ = writeln!(out, "{}", describe(summary));
        Ok(())
    };

    if selection != ArmSelection::Steered {
        emit(Arm::Baseline, &baseline, &baseline_summary)?;
    }
    if selection != ArmSelection::Baseline {
        let steered = run_arm(&setup, &seeds, ctx.exec)?;
        let summary = summarize(ctx, Arm::Steered, &steered, baseline_summary.metrics.mean_tokens)?;
        emit(Arm::Steered, &steered, &summary)?;
        if record > 0 {
            let traces = seeds
                .iter()
                .take(record)
                .enumerate()
                .map(|(i, seed)| {
                    let (_, mut trace) = setup.run_recorded(*seed)?;
                    trace.header.config_hash = Some(ctx.hash.clone());
                    Ok((i, trace))
                })
                .collect::<Result<Vec<_>>>()?;
            let written = write_traces(&ctx.out("traces"), &traces)?;
            let _ = writeln!(
                out,
                "recorded {} episode traces under {}",
                written.len(),
                ctx.out("traces").display()
            );
        }
    }
    Ok(out)
}

/// Candidate values per gain; the sweep runs their Cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    pub p_target: Vec<f64>,
}

impl SweepGrid {
    pub fn single(gains: &PidGains) -> Self {
        SweepGrid {
            kp: vec![gains.kp],
            ki: vec![gains.ki],
            kd: vec![gains.kd],
            p_target: vec![gains.p_target],
        }
    }

    pub fn points(&self, base: &PidGains) -> Result<Vec<PidGains>> {
        if self.kp.is_empty() || self.ki.is_empty() || self.kd.is_empty() || self.p_target.is_empty() {
            return Err(Error::invalid("sweep grid", "every axis needs at least one value"));
        }
        let mut points = Vec::new();
        for &kp in &self.kp {
            for &ki in &self.ki {
                for &kd in &self.kd {
                    for &p_target in &self.p_target {
                        let g = PidGains {
                            kp,
                            ki,
                            kd,
                            p_target,
                            ..*base
                        };
                        g.validate()?;
                        points.push(g);
                    }
                }
            }
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub gains: PidGains,
    pub metrics: RunMetrics,
    pub meets_floor: bool,
}

/// Runs every grid point against one shared baseline and orders rows that
/// clear the solve-rate floor first, each group by ascending mean tokens.
pub fn sweep_rows(ctx: &Context, grid: &SweepGrid, solve_margin: f64) -> Result<(RunMetrics, Vec<SweepRow>)> {
    let cfg = &ctx.cfg;
    let points = grid.points(&cfg.gains)?;
    let (model, vector) = ctx.components()?;
    let seeds = ctx.seeds();
    let setup = EpisodeSetup {
        plant: &cfg.plant,
        model: &model,
        vector: &vector,
        gains: cfg.gains,
        schedule: cfg.schedule,
    };
    let baseline = RunMetrics::from_results(&run_arm(&setup.baseline(), &seeds, ctx.exec)?, 0.0)?;
    let floor = baseline.solve_rate - solve_margin;
    let mut rows = Vec::with_capacity(points.len());
    for (index, gains) in points.into_iter().enumerate() {
        let results = run_arm(&EpisodeSetup { gains, ..setup }, &seeds, ctx.exec)?;
        let metrics = RunMetrics::from_results(&results, baseline.mean_tokens)?;
        rows.push(SweepRow {
            index,
            gains,
            meets_floor: metrics.solve_rate >= floor,
            metrics,
        });
    }
    rows.sort_by(|a, b| {
        b.meets_floor
            .cmp(&a.meets_floor)
            .then(a.metrics.mean_tokens.total_cmp(&b.metrics.mean_tokens))
            .then(a.index.cmp(&b.index))
    });
    Ok((baseline, rows))
}

pub fn sweep(ctx: &Context, grid: &SweepGrid, solve_margin: f64) -> Result<String> {
    let (baseline, rows) = sweep_rows(ctx, grid, solve_margin)?;
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    let doc = csv_doc(
        &ctx.hash,
        &[
            "rank",
            "point",
            "kp",
            "ki",
            "kd",
            "p_target",
            "episodes",
            "solve_rate",
            "mean_tokens",
            "token_reduction",
            "mean_terminal_p_red",
            "meets_solve_floor",
        ],
        rows.iter().enumerate().map(|(rank, r)| {
            vec![
                rank.to_string(),
                r.index.to_string(),
                fmt_real(r.gains.kp),
                fmt_real(r.gains.ki),
                fmt_real(r.gains.kd),
                fmt_real(r.gains.p_target),
                r.metrics.episodes.to_string(),
                fmt_real(r.metrics.solve_rate),
                fmt_real(r.metrics.mean_tokens),
                fmt_real(r.metrics.mean_token_reduction_vs_baseline),
                opt(r.metrics.mean_terminal_p_red),
                r.meets_floor.to_string(),
            ]
        }),
    )?;
    let path = ctx.out("sweep.csv");
    write_file(&path, &doc)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "baseline: solve_rate={:.4} mean_tokens={:.2} (floor {:.4})",
        baseline.solve_rate,
        baseline.mean_tokens,
        baseline.solve_rate - solve_margin
    );
    for (rank, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "#{rank:<3} kp={} ki={} kd={} p_target={} solve_rate={:.4} mean_tokens={:.2} reduction={:.4}{}",
            r.gains.kp,
            r.gains.ki,
            r.gains.kd,
            r.gains.p_target,
            r.metrics.solve_rate,
            r.metrics.mean_tokens,
            r.metrics.mean_token_reduction_vs_baseline,
            if r.meets_floor { "" } else { "  (below floor)" }
        );
    }
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub config_hash: String,
    pub trace_config_hash: Option<String>,
    pub chunks: usize,
    pub tokens_used: usize,
    pub updates: usize,
    pub final_alpha: f64,
    pub saturation_chunk: Option<usize>,
    pub final_window_p_red: Option<f64>,
    pub solved: bool,
}

pub fn replay_summary(ctx: &Context, trace: &Trace, result: &EpisodeResult) -> ReplaySummary {
    let alpha_max = ctx.cfg.gains.alpha_max;
    ReplaySummary {
        config_hash: ctx.hash.clone(),
        trace_config_hash: trace.header.config_hash.clone(),
        chunks: result.chunks(),
        tokens_used: result.tokens_used,
        updates: result.updates(),
        final_alpha: result.final_alpha(),
        saturation_chunk: (alpha_max > 0.0).then(|| result.saturation_chunk(alpha_max)).flatten(),
        final_window_p_red: result.final_window_p_red(),
        solved: result.solved,
    }
}

pub fn replay(ctx: &Context, trace_path: &Path) -> Result<String> {
    let cfg = &ctx.cfg;
    let trace = Trace::load(trace_path)?;
    let (model, vector) = ctx.components()?;
    let result = replay_trace(&trace, &model, &vector, &cfg.gains, &cfg.schedule)?;
    let summary = replay_summary(ctx, &trace, &result);

    let chunk_rows = |values: &[f64]| {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), fmt_real(*v)])
            .collect::<Vec<_>>()
    };
    write_file(
        &ctx.out("replay_alpha.csv"),
        &csv_doc(&ctx.hash, &["chunk", "alpha"], chunk_rows(&result.alpha_trace))?,
    )?;
    write_file(
        &ctx.out("replay_p_red.csv"),
        &csv_doc(&ctx.hash, &["chunk", "p_red"], chunk_rows(&result.p_red_trace))?,
    )?;
    write_file(&ctx.out("replay_summary.json"), &to_json(&summary)?)?;

    let mut out = String::new();
    let _ = writeln!(out, "chunk  alpha        p_red        update");
    for (i, ((a, p), t)) in result
        .alpha_trace
        .iter()
        .zip(&result.p_red_trace)
        .zip(&result.pid_traces)
        .enumerate()
    {
        let tag = match t {
            Some(t) if t.engaged => "engaged",
            Some(_) => "gated",
            None => "",
        };
        let _ = writeln!(out, "{i:<6} {a:<12.8} {p:<12.8} {tag}");
    }
    let sat = summary.saturation_chunk.map_or("never".to_string(), |c| c.to_string());
    let _ = writeln!(
        out,
        "chunks={} tokens={} updates={} final_alpha={} saturation_chunk={} solved={}",
        summary.chunks, summary.tokens_used, summary.updates, summary.final_alpha, sat, summary.solved
    );
    Ok(out)
}

fn read_summary(path: &Path) -> Result<ArmSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e.to_string()))
}

pub fn report(ctx: &Context) -> Result<String> {
    let baseline = read_summary(&ctx.out("baseline_summary.json"))?;
    let steered = read_summary(&ctx.out("steered_summary.json"))?;
    if baseline.config_hash != steered.config_hash {
        return Err(Error::invalid(
            "report",
            format!(
                "summaries come from different configurations ({} vs {})",
                baseline.config_hash, steered.config_hash
            ),
        ));
    }
    let mut out = String::new();
    let _ = writeln!(out, "config_hash {}  seed {}", steered.config_hash, steered.seed);
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>12} {:>12} {:>15}",
        "arm", "episodes", "solve_rate", "mean_tokens", "terminal_p_red"
    );
    for s in [&baseline, &steered] {
        let p = s
            .metrics
            .mean_terminal_p_red
            .map_or("n/a".to_string(), |p| format!("{p:.4}"));
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>12.4} {:>12.2} {:>15}",
            s.arm, s.metrics.episodes, s.metrics.solve_rate, s.metrics.mean_tokens, p
        );
    }
    let _ = writeln!(
        out,
        "token reduction: {:.2}%  solve-rate change: {:+.2} points",
        100.0 * steered.metrics.mean_token_reduction_vs_baseline,
        100.0 * (steered.metrics.solve_rate - baseline.metrics.solve_rate)
    );
    write_file(&ctx.out("report.txt"), &out)?;
    Ok(out)
}

/// Parses a comma-separated list of reals; blank entries are skipped.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::invalid("grid value", format!("`{t}` is not a real")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("0.1, 0.2,").unwrap(), vec![0.1, 0.2]);
        assert!(parse_list("").unwrap().is_empty());
        assert!(parse_list("x").is_err());
    }

    #[test]
    fn grid_cardinality_and_validation() {
        let base = PidGains::default();
        let grid = SweepGrid {
            kp: vec![0.0, 0.01, 0.02],
            ki: vec![0.0005],
            kd: vec![0.005],
            p_target: vec![0.2, 0.3, 0.4],
        };
        assert_eq!(grid.points(&base).unwrap().len(), 9);
        let empty = SweepGrid {
            kp: vec![],
            ..grid.clone()
        };
        assert!(empty.points(&base).is_err());
        let bad = SweepGrid { kd: vec![2.0], ..grid };
        assert!(bad.points(&base).is_err());
    }
}
