//! Line-oriented text format shared by classifier and control-vector files.
//!
//! ```text
//! <magic> <version>
//! <key> <value...>
//! ...
//! end
//! ```
//!
//! Each line after the magic line is a key followed by whitespace-separated
//! values. Reals are written in Rust's shortest round-trip notation, so a
//! save/load cycle is bit-exact. A file without the trailing `end` line is
//! treated as truncated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) const END: &str = "end";

#[derive(Debug, Default)]
pub(crate) struct ArtifactWriter {
    buf: String,
}

impl ArtifactWriter {
    pub fn new(magic: &str, version: u32) -> Self {
        let mut w = ArtifactWriter::default();
        let _ = writeln!(w.buf, "{magic} {version}");
        w
    }

    pub fn field(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{key} {value}");
        self
    }

    pub fn reals(&mut self, key: &str, values: &[f64]) -> &mut Self {
        self.buf.push_str(key);
        for v in values {
            let _ = write!(self.buf, " {}", fmt_real(*v));
        }
        self.buf.push('\n');
        self
    }

    pub fn finish(mut self) -> String {
        self.buf.push_str(END);
        self.buf.push('\n');
        self.buf
    }
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug)]
pub(crate) struct ArtifactEntry {
    pub line: usize,
    pub key: String,
    pub values: Vec<String>,
}

/// Parsed artifact body with line numbers kept for error reporting.
#[derive(Debug)]
pub(crate) struct ArtifactReader {
    path: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactReader {
    pub fn open(path: &Path, magic: &str, version: u32) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text, magic, version)
    }

    pub fn parse(path: &Path, text: &str, magic: &str, version: u32) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (_, first) = lines.next().ok_or_else(|| Error::format(path, 1, "empty file"))?;
        let mut head = first.split_whitespace();
        if head.next() != Some(magic) {
            return Err(Error::format(path, 1, format!("expected `{magic}` header")));
        }
        let found = head.next().unwrap_or("");
        if found != version.to_string() {
            return Err(Error::format(
                path,
                1,
                format!("unsupported format version `{found}` (expected {version})"),
            ));
        }

        let mut entries = Vec::new();
        let mut last_line = 1;
        let mut ended = false;
        for (line, content) in lines {
            last_line = line;
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            if ended {
                return Err(Error::format(path, line, "content after `end`"));
            }
            if content == END {
                ended = true;
                continue;
            }
            let mut parts = content.split_whitespace();
            let key = parts.next().unwrap_or_default().to_string();
            if entries.iter().any(|e: &ArtifactEntry| e.key == key) {
                return Err(Error::format(path, line, format!("duplicate key `{key}`")));
            }
            entries.push(ArtifactEntry {
                line,
                key,
                values: parts.map(str::to_string).collect(),
            });
        }
        if !ended {
            return Err(Error::format(path, last_line, "file is truncated (missing `end` line)"));
        }
        Ok(ArtifactReader {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn last_line(&self) -> usize {
        self.entries.last().map_or(1, |e| e.line)
    }

    pub fn entry(&self, key: &str) -> Option<&ArtifactEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn required(&self, key: &str) -> Result<&ArtifactEntry> {
        self.entry(key)
            .ok_or_else(|| Error::format(&self.path, self.last_line(), format!("missing `{key}`")))
    }

    fn single<'a>(&self, entry: &'a ArtifactEntry) -> Result<&'a str> {
        match entry.values.as_slice() {
            [v] => Ok(v),
            _ => Err(Error::format(
                &self.path,
                entry.line,
                format!("`{}` expects exactly one value", entry.key),
            )),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let e = self.required(key)?;
        let v = self.single(e)?;
        v.parse()
            .map_err(|_| Error::format(&self.path, e.line, format!("`{key}`: `{v}` is not a count")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        let e = self.required(key)?;
        let v = self.single(e)?;
        v.parse()
            .map_err(|_| Error::format(&self.path, e.line, format!("`{key}`: `{v}` is not a flag")))
    }

    pub fn optional_str(&self, key: &str) -> Result<Option<String>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => self.single(e).map(|s| Some(s.to_string())),
        }
    }

    pub fn real(&self, key: &str) -> Result<f64> {
        let e = self.required(key)?;
        let v = self.single(e)?;
        parse_real(&self.path, e.line, key, v)
    }

    /// A vector of exactly `dim` finite reals.
    pub fn reals(&self, key: &str, dim: usize) -> Result<Vec<f64>> {
        let e = self.required(key)?;
        if e.values.len() != dim {
            return Err(Error::format(
                &self.path,
                e.line,
                format!(
                    "`{key}` has {} components but header declares dim {dim}",
                    e.values.len()
                ),
            ));
        }
        e.values
            .iter()
            .map(|v| parse_real(&self.path, e.line, key, v))
            .collect()
    }
}

fn parse_real(path: &Path, line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::format(path, line, format!("`{key}`: `{v}` is not a real")))?;
    if !x.is_finite() {
        return Err(Error::format(path, line, format!("`{key}`: non-finite value `{v}`")));
    }
    Ok(x)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
