//! CSV and JSON emission.
//!
//! CSV bodies depend only on the config and seed: floats use Rust's shortest
//! round-trip formatting and rows come out in a fixed order. Wall-clock data
//! lives only in the `metadata` block of the JSON summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use crate::config::FORMAT_VERSION;
use crate::error::CliError;

/// Output directory for one run.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Opens `name` for CSV output with the given header.
    pub fn csv(&self, name: &str, header: &[&str]) -> Result<Csv, CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        let mut out = Csv { path, writer };
        out.row(header.iter().map(|h| h.to_string()))?;
        Ok(out)
    }

    /// Writes `summary.json` with the resolved config and the results.
    pub fn summary<C: Serialize, R: Serialize>(
        &self,
        command: &str,
        config: &C,
        result: &R,
        threads: usize,
    ) -> Result<(), CliError> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let doc = json!({
            "format_version": FORMAT_VERSION,
            "command": command,
            "config": config,
            "result": result,
            "metadata": {
                "created_unix_s": created,
                "threads": threads,
                "tool_version": env!("CARGO_PKG_VERSION"),
            },
        });
        let path = self.path("summary.json");
        let text = serde_json::to_string_pretty(&doc).expect("summary is plain data");
        let mut f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| CliError::io(&path, e))
    }
}

pub struct Csv {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl Csv {
    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), CliError> {
        self.writer
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .map_err(|e| self.err(e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }

    fn err(&self, e: csv::Error) -> CliError {
        let io = match e.into_kind() {
            csv::ErrorKind::Io(io) => io,
            other => std::io::Error::other(format!("{other:?}")),
        };
        CliError::io(&self.path, io)
    }
}

/// Formats an optional number, empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `fields!(a, b, c)` turns displayable values into a CSV record.
#[macro_export]
macro_rules! fields {
    ($($v:expr),* $(,)?) => {
        vec![$($v.to_string()),*]
    };
}
