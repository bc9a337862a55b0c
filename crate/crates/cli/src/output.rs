//! Output directory handling. Every file is written to a temporary sibling
//! and renamed into place, so an interrupted run never leaves a torn file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_with(&self, name: &str, fill: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<PathBuf> {
        let target = self.path(name);
        let io = |e: std::io::Error| CliError::Data(format!("writing {}: {e}", target.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(io)?;
        {
            let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
            fill(&mut buf)?;
            buf.flush().map_err(io)?;
        }
        tmp.persist(&target).map_err(|e| io(e.error))?;
        Ok(target)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(crate::error::data)?;
            w.write_all(b"\n").map_err(crate::error::data)
        })
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        self.write_with(name, |w| w.write_all(text.as_bytes()).map_err(crate::error::data))
    }
}

/// Named wall-clock phases, in milliseconds.
#[derive(Debug, Default)]
pub struct Timings {
    phases: IndexMap<String, f64>,
}

impl Timings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.phases.insert(phase.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn into_map(self) -> IndexMap<String, f64> {
        self.phases
    }
}
