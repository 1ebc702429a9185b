//! CSV files with a `#`-prefixed metadata block ahead of the header row.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Bumped whenever a column is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

pub const OUT_DIR_ENV: &str = "JCAS_OUT_DIR";

/// Flag, then config, then `JCAS_OUT_DIR`, then `./jcas-out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("jcas-out"))
}

#[derive(Debug, Clone)]
pub struct Meta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Extra `key: value` lines.
    pub extra: Vec<(String, String)>,
}

impl Meta {
    pub fn new(command: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Meta {
            command: command.into(),
            seed,
            config_hash: config_hash.into(),
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }
}

pub struct Table {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl Table {
    /// Creates the file and writes metadata and header. The header is
    /// present even if no row follows.
    pub fn create(path: &Path, meta: &Meta, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# jcas {} schema {SCHEMA_VERSION}", env!("CARGO_PKG_VERSION"))?;
        writeln!(out, "# command: {}", meta.command)?;
        writeln!(out, "# seed: {}", meta.seed)?;
        writeln!(out, "# config_sha256: {}", meta.config_hash)?;
        for (k, v) in &meta.extra {
            writeln!(out, "# {k}: {v}")?;
        }
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(header)?;
        Ok(Table {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.writer.flush()?;
        log::info!("wrote {}", self.path.display());
        Ok(self.path)
    }
}

/// Shortest text that parses back to the same float; NaN for missing values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        x.to_string()
    }
}
