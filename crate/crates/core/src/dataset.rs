//! Labeled chunk datasets drawn from the unsteered plant, stored as CSV.
//!
//! ```text
//! # pidsteer-dataset v1 dim=64 chunk_size=24 config_hash=...
//! label,f0,f1,...
//! redundant,0.13,...
//! ```

use std::path::Path;

use crate::artifact::{fmt_real, write_file};
use crate::batch::episode_seed;
use crate::error::{Error, Result};
use crate::features::{pool_chunk, ChunkFeatures, RedundancyLabel};
use crate::plant::{Plant, PlantConfig};
use crate::vector::ControlVector;

pub type LabeledChunk = (ChunkFeatures, RedundancyLabel);

/// Pools `n` full-length chunks from unsteered plant episodes seeded from
/// `seed`. Truncated end-of-budget chunks are skipped.
pub fn generate(plant: &PlantConfig, n: usize, seed: u64) -> Result<Vec<LabeledChunk>> {
    plant.validate()?;
    let idle = ControlVector::zero(plant.dim, 0);
    let mut out = Vec::with_capacity(n);
    let mut episode = 0;
    while out.len() < n {
        let mut p = Plant::new(plant.with_seed(episode_seed(seed, episode)))?;
        episode += 1;
        while !p.is_done() && out.len() < n {
            let e = p.step(0.0, &idle)?;
            if e.tokens_emitted == plant.chunk_size {
                out.push((pool_chunk(&e.hidden_states)?, e.true_label));
            }
        }
    }
    Ok(out)
}

pub fn split_by_label(data: &[LabeledChunk]) -> (Vec<ChunkFeatures>, Vec<ChunkFeatures>) {
    let mut required = Vec::new();
    let mut redundant = Vec::new();
    for (x, y) in data {
        match y {
            RedundancyLabel::Required => required.push(x.clone()),
            RedundancyLabel::Redundant => redundant.push(x.clone()),
        }
    }
    (required, redundant)
}

pub fn to_csv(data: &[LabeledChunk], chunk_size: usize, config_hash: &str) -> Result<String> {
    let dim = data.first().map_or(0, |(x, _)| x.dim());
    let mut out = format!("# pidsteer-dataset v1 dim={dim} chunk_size={chunk_size} config_hash={config_hash}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("label".to_string()).chain((0..dim).map(|i| format!("f{i}")));
    w.write_record(header).map_err(|e| Error::Invariant(e.to_string()))?;
    for (x, y) in data {
        let row = std::iter::once(y.as_str().to_string()).chain(x.as_slice().iter().map(|v| fmt_real(*v)));
        w.write_record(row).map_err(|e| Error::Invariant(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Invariant(e.to_string()))?;
    out.push_str(&String::from_utf8(body).map_err(|e| Error::Invariant(e.to_string()))?);
    Ok(out)
}

pub fn write(path: &Path, data: &[LabeledChunk], chunk_size: usize, config_hash: &str) -> Result<()> {
    write_file(path, &to_csv(data, chunk_size, config_hash)?)
}

pub fn read(path: &Path) -> Result<Vec<LabeledChunk>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let dim = {
        let headers = reader.headers().map_err(|e| Error::format(path, 1, e.to_string()))?;
        if headers.get(0) != Some("label") || headers.len() < 2 {
            return Err(Error::format(path, 1, "expected header `label,f0,...`"));
        }
        headers.len() - 1
    };
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::format(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(Error::format(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let label: RedundancyLabel = rec[0]
            .parse()
            .map_err(|e: Error| Error::format(path, line, e.to_string()))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, line, format!("`{v}` is not a real")))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = ChunkFeatures::new(values).map_err(|e| Error::format(path, line, e.to_string()))?;
        out.push((features, label));
    }
    Ok(out)
}
