//! Run directories and the manifest written into each.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::{Failure, OutArgs};

pub const OUT_ENV: &str = "MDAT_LAB_OUT";

pub fn output_root(out: &OutArgs) -> PathBuf {
    out.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// A fresh `<kind>-<UTC timestamp>` directory under `root`. Never reuses an
/// existing directory; same-second collisions get a numeric suffix.
pub fn create_run_dir(root: &Path, kind: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    for n in 1.. {
        let name = if n == 1 {
            format!("{kind}-{stamp}")
        } else {
            format!("{kind}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("unbounded suffix search")
}

#[derive(Debug, Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Diverged,
    Failed,
}

/// Written as manifest.json in every run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created: String,
    pub run_dir: String,
    pub status: Status,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Rendered config, one entry per key.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, String>,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
    pub results: serde_json::Value,
    /// Whole command, including data generation and file output.
    pub wall_seconds: f64,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str, dir: &Path) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            run_dir: dir.display().to_string(),
            status: Status::Success,
            exit_code: 0,
            message: None,
            config: BTreeMap::new(),
            files: Vec::new(),
            results: serde_json::Value::Null,
            wall_seconds: 0.0,
            started: Instant::now(),
        }
    }

    pub fn with_config(mut self, rendered: &str) -> Self {
        self.config = rendered
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        self
    }

    /// Marks the run failed with the code the process will exit with.
    pub fn fail(&mut self, f: &Failure) {
        self.status = match f {
            Failure::Divergence(_) => Status::Diverged,
            _ => Status::Failed,
        };
        self.exit_code = f.code();
        self.message = Some(f.message().to_owned());
    }

    pub fn write(&mut self, dir: &Path) -> Result<(), Failure> {
        self.wall_seconds = self.started.elapsed().as_secs_f64();
        let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Creates `dir/rel` (and parents), records it, and hands back a writer.
pub fn create_file(dir: &Path, rel: &str, files: &mut Vec<String>) -> Result<BufWriter<fs::File>, Failure> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let f = fs::File::create(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    files.push(rel.to_owned());
    Ok(BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_never_reused() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "train").unwrap();
        let b = create_run_dir(root.path(), "train").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        assert!(a.file_name().unwrap().to_str().unwrap().starts_with("train-"));
    }

    #[test]
    fn manifest_records_failure() {
        let mut m = RunManifest::new("train", Path::new("runs/x")).with_config("alpha = 1\nmethod = mdat\n");
        assert_eq!(m.config["alpha"], "1");
        m.fail(&Failure::Divergence("loss blew up".into()));
        assert_eq!((m.status, m.exit_code), (Status::Diverged, 2));
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["status"], "diverged");
        assert_eq!(v["message"], "loss blew up");
    }
}
