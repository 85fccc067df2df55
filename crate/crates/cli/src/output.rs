//! Artifact sink: a directory of exclusively created files, or stdout.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format, CliError> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(CliError::Usage(format!("unknown format {other:?} (expected csv or json)"))),
        }
    }
}

pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub struct Sink {
    pub dir: Option<PathBuf>,
    pub force: bool,
    pub format: Format,
    artifacts: Vec<Artifact>,
}

impl Sink {
    pub fn new(dir: Option<PathBuf>, force: bool, format: Format) -> Sink {
        Sink { dir, force, format, artifacts: Vec::new() }
    }

    /// Records in the selected format under `stem.<ext>`.
    pub fn records<T: Serialize>(&mut self, stem: &str, rows: &[T]) -> Result<(), CliError> {
        match self.format {
            Format::Csv => self.csv(&format!("{stem}.csv"), rows),
            Format::Json => self.json(&format!("{stem}.json"), &rows),
        }
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(|e| CliError::Runtime(format!("csv encoding of {name}: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv encoding of {name}: {e}")))?;
        self.push(name, bytes);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes =
            serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(format!("json encoding of {name}: {e}")))?;
        bytes.push(b'\n');
        self.push(name, bytes);
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: String) {
        self.push(name, text.into_bytes());
    }

    fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push(Artifact { name: name.to_string(), bytes });
    }

    pub fn writes_files(&self) -> bool {
        self.dir.is_some()
    }

    /// Writes everything or nothing: existing targets are checked first.
    pub fn flush(self) -> Result<Vec<PathBuf>, CliError> {
        let Some(dir) = self.dir else {
            let mut out = std::io::stdout().lock();
            for a in &self.artifacts {
                writeln!(out, "# {}", a.name).and_then(|_| out.write_all(&a.bytes)).map_err(io_err)?;
            }
            return Ok(Vec::new());
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let paths: Vec<PathBuf> = self.artifacts.iter().map(|a| dir.join(&a.name)).collect();
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::Runtime(format!("{} already exists (use --force to overwrite)", p.display())));
            }
        }
        for (a, path) in self.artifacts.iter().zip(&paths) {
            let mut opts = OpenOptions::new();
            opts.write(true);
            if self.force {
                opts.create(true).truncate(true);
            } else {
                opts.create_new(true);
            }
            let mut f =
                opts.open(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
            f.write_all(&a.bytes).map_err(io_err)?;
        }
        Ok(paths)
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("write failed: {e}"))
}
