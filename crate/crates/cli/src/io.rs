//! File helpers: hashing inputs, collecting outputs, manifests and CSV reading.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{input_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn read_input(path: &Path) -> CliResult<(String, InputRecord)> {
    let bytes = fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let record = InputRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    let text = String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{} is not UTF-8", path.display())))?;
    Ok((text, record))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Writes files under one root and remembers their relative paths.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| CliError::Io { path: root.clone(), source })?;
        Ok(Self { root, written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, relative: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        write_file(&self.root.join(relative), contents.as_ref())?;
        self.written.push(relative.to_string());
        Ok(())
    }

    pub fn record(&mut self, relative: String) {
        self.written.push(relative);
    }

    /// Writes `manifest.json` listing every output written so far.
    pub fn finish<P: Serialize>(mut self, command: &str, parameters: &P, inputs: Vec<InputRecord>) -> CliResult<()> {
        self.written.sort();
        let manifest = Manifest {
            tool: "homcar",
            version: env!("CARGO_PKG_VERSION"),
            command,
            parameters,
            inputs,
            outputs: &self.written,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_file(&self.root.join("manifest.json"), format!("{json}\n").as_bytes())
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

#[derive(Serialize)]
struct Manifest<'a, P: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    parameters: &'a P,
    inputs: Vec<InputRecord>,
    outputs: &'a [String],
}

/// A CSV table with named columns; `#` lines are comments.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    source: String,
}

impl Table {
    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| CliError::Input(format!("{source}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| CliError::Input(format!("{source}: {e}")))
            })
            .collect::<CliResult<Vec<Vec<String>>>>()?;
        Ok(Self { headers, rows, source: source.to_string() })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str) -> CliResult<usize> {
        self.column(name)
            .ok_or_else(|| CliError::Input(format!("{}: missing column `{name}`", self.source)))
    }

    pub fn strings(&self, col: usize) -> Vec<String> {
        self.rows.iter().map(|r| r[col].clone()).collect()
    }

    pub fn parsed<T: std::str::FromStr>(&self, col: usize) -> CliResult<Vec<T>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r[col].parse::<T>().map_err(|_| {
                    CliError::Input(format!(
                        "{}: row {}: cannot parse `{}` in column `{}`",
                        self.source,
                        k + 2,
                        r[col],
                        self.headers[col]
                    ))
                })
            })
            .collect()
    }
}

/// Reorders per-unit values given as `(id, value)` rows into graph order.
pub fn align_to_units<T: Clone>(unit_ids: &[String], ids: &[String], values: &[T], source: &str) -> CliResult<Vec<T>> {
    if ids.len() != unit_ids.len() {
        return input_err(format!("{source}: {} rows for {} graph units", ids.len(), unit_ids.len()));
    }
    let index: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    if index.len() != ids.len() {
        return input_err(format!("{source}: duplicate unit ids"));
    }
    unit_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&k| values[k].clone())
                .ok_or_else(|| CliError::Input(format!("{source}: no row for unit `{id}`")))
        })
        .collect()
}
