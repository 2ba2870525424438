//! Recorded chunk traces and open-loop replay.
//!
//! A trace file is line-delimited JSON. The first line is a header:
//!
//! ```text
//! {"format":"pidsteer-trace","version":1,"dim":64,"chunk_size":24,"mode":"pooled"}
//! ```
//!
//! Every following line is one record:
//!
//! ```text
//! {"step":0,"features":[...],"label":"redundant","tokens":24}
//! ```
//!
//! * `step` is strictly increasing.
//! * In `pooled` mode a record is one chunk: `features` holds the pooled
//!   chunk features and `tokens` (default `chunk_size`) its length.
//! * In `per_token` mode a record is one token: `features` is that token's
//!   hidden state and `tokens`, if present, must be 1. Consecutive groups of
//!   `chunk_size` records form chunks, the last group may be shorter.
//! * `label` (`required`/`redundant`) and `solved` are optional. `solved`
//!   marks the outcome on the final record of an episode.
//!
//! The header may carry `config_hash` to tie a trace to the run that
//! produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_file;
use crate::episode::{run_episode, ChunkPayload, ChunkSource, EpisodeResult, SourceChunk, SteeringSchedule};
use crate::error::{Error, Result};
use crate::features::{pool_chunk, ClassifierModel, HiddenVector, RedundancyLabel};
use crate::pid::PidGains;
use crate::vector::ControlVector;

pub const TRACE_FORMAT: &str = "pidsteer-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Pooled,
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub chunk_size: usize,
    pub mode: TraceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl TraceHeader {
    pub fn new(dim: usize, chunk_size: usize, mode: TraceMode) -> Self {
        TraceHeader {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_VERSION,
            dim,
            chunk_size,
            mode,
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: u64,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<RedundancyLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solved: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Trace {
            header,
            records: Vec::new(),
        }
    }

    /// Checks header fields and every record, reporting 1-based file line numbers
    /// (the header is line 1).
    pub fn validate(&self, path: &Path) -> Result<()> {
        let h = &self.header;
        if h.format != TRACE_FORMAT {
            return Err(Error::format(path, 1, format!("unknown trace format `{}`", h.format)));
        }
        if h.version != TRACE_VERSION {
            return Err(Error::format(
                path,
                1,
                format!("unsupported trace version {}", h.version),
            ));
        }
        if h.dim == 0 || h.chunk_size == 0 {
            return Err(Error::format(path, 1, "dim and chunk_size must be >= 1"));
        }
        let mut prev: Option<u64> = None;
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if prev.is_some_and(|p| r.step <= p) {
                return Err(Error::format(path, line, format!("step {} is not increasing", r.step)));
            }
            prev = Some(r.step);
            if r.features.len() != h.dim {
                return Err(Error::format(
                    path,
                    line,
                    format!("record has {} features, header declares {}", r.features.len(), h.dim),
                ));
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(path, line, "non-finite feature value"));
            }
            match (h.mode, r.tokens) {
                (_, Some(0)) => return Err(Error::format(path, line, "tokens must be >= 1")),
                (TraceMode::PerToken, Some(t)) if t != 1 => {
                    return Err(Error::format(path, line, "per-token records carry exactly one token"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let enc = |e: serde_json::Error| Error::Invariant(e.to_string());
        let mut out = serde_json::to_string(&self.header).map_err(enc)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(enc)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header_line = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => break (i + 1, l),
                None => return Err(Error::format(path, 1, "empty trace file (missing header)")),
            }
        };
        let header: TraceHeader = serde_json::from_str(header_line.1)
            .map_err(|e| Error::format(path, header_line.0, format!("bad header: {e}")))?;
        let mut trace = Trace::new(header);
        let mut numbers = Vec::new();
        for (i, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(l).map_err(|e| Error::format(path, i + 1, format!("bad record: {e}")))?;
            trace.records.push(rec);
            numbers.push(i + 1);
        }
        // re-map validation line numbers onto real file lines
        trace.validate(path).map_err(|e| match e {
            Error::Format { path, line, message } if line >= 2 => Error::Format {
                path,
                line: numbers[line - 2],
                message,
            },
            other => other,
        })?;
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_jsonl()?)
    }
}

/// Feeds recorded chunks back in order. Steering is not fed back: recorded
/// states cannot respond to it.
#[derive(Debug)]
pub struct TraceSource<'a> {
    trace: &'a Trace,
    cursor: usize,
}

impl<'a> TraceSource<'a> {
    pub fn new(trace: &'a Trace) -> Self {
        TraceSource { trace, cursor: 0 }
    }
}

impl ChunkSource for TraceSource<'_> {
    fn dim(&self) -> usize {
        self.trace.header.dim
    }

    fn next_chunk(&mut self, _alpha: f64, _v: &ControlVector, token_budget: usize) -> Result<Option<SourceChunk>> {
        let records = &self.trace.records;
        if self.cursor >= records.len() || token_budget == 0 {
            return Ok(None);
        }
        match self.trace.header.mode {
            TraceMode::Pooled => {
                let r = &records[self.cursor];
                self.cursor += 1;
                let tokens = r.tokens.unwrap_or(self.trace.header.chunk_size).min(token_budget);
                let done = self.cursor == records.len();
                Ok(Some(SourceChunk {
                    payload: ChunkPayload::Pooled(r.features.clone().try_into()?),
                    tokens,
                    label: r.label,
                    done,
                    solved: if done { r.solved } else { None },
                }))
            }
            TraceMode::PerToken => {
                let take = self
                    .trace
                    .header
                    .chunk_size
                    .min(token_budget)
                    .min(records.len() - self.cursor);
                let group = &records[self.cursor..self.cursor + take];
                self.cursor += take;
                let states = group
                    .iter()
                    .map(|r| HiddenVector::new(r.features.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let done = self.cursor == records.len();
                Ok(Some(SourceChunk {
                    payload: ChunkPayload::Tokens(states),
                    tokens: take,
                    label: group.iter().find_map(|r| r.label),
                    done,
                    solved: if done {
                        group.last().and_then(|r| r.solved)
                    } else {
                        None
                    },
                }))
            }
        }
    }
}

/// Runs the control path over a recorded trace.
pub fn replay_trace(
    trace: &Trace,
    model: &ClassifierModel,
    v: &ControlVector,
    gains: &PidGains,
    schedule: &SteeringSchedule,
) -> Result<EpisodeResult> {
    trace.validate(Path::new("<trace>"))?;
    run_episode(&mut TraceSource::new(trace), model, v, gains, schedule)
}

/// Wraps a source and writes every chunk it yields into a pooled trace.
#[derive(Debug)]
pub struct RecordingSource<S> {
    inner: S,
    trace: Trace,
}

impl<S: ChunkSource> RecordingSource<S> {
    pub fn new(inner: S, chunk_size: usize) -> Self {
        let header = TraceHeader::new(inner.dim(), chunk_size, TraceMode::Pooled);
        RecordingSource {
            inner,
            trace: Trace::new(header),
        }
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn into_parts(self) -> (S, Trace) {
        (self.inner, self.trace)
    }
}

impl<S: ChunkSource> ChunkSource for RecordingSource<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn next_chunk(&mut self, alpha: f64, v: &ControlVector, token_budget: usize) -> Result<Option<SourceChunk>> {
        let chunk = self.inner.next_chunk(alpha, v, token_budget)?;
        if let Some(c) = &chunk {
            let features = match &c.payload {
                ChunkPayload::Tokens(states) => pool_chunk(states)?,
                ChunkPayload::Pooled(f) => f.clone(),
            };
            self.trace.records.push(TraceRecord {
                step: self.trace.records.len() as u64,
                features: features.into_inner(),
                label: c.label,
                tokens: Some(c.tokens),
                solved: if c.done { c.solved } else { None },
            });
        }
        Ok(chunk)
    }
}

/// Writes one trace file per episode under `dir`.
pub fn write_traces(dir: &Path, traces: &[(usize, Trace)]) -> Result<Vec<PathBuf>> {
    traces
        .iter()
        .map(|(index, trace)| {
            let path = dir.join(format!("episode_{index:04}.jsonl"));
            trace.save(&path).map(|_| path)
        })
        .collect()
}
