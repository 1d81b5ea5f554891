//! Staged atomic writes and per-run manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use tempfile::NamedTempFile;

/// `<path><suffix>`, e.g. `model.txt` + `.cv.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Output files collected in memory and committed together.
///
/// Every file is first written to a temporary file in its target directory;
/// only when all of them are on disk are they renamed into place.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    pub fn paths(&self) -> Vec<String> {
        self.files.iter().map(|(p, _)| p.display().to_string()).collect()
    }

    pub fn commit(self) -> Result<()> {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = NamedTempFile::new_in(dir)
                .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            tmp.persist(path)
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }
}

/// Wall-clock phases of a run, in milliseconds.
pub struct Timer {
    start: Instant,
    last: Instant,
    phases: BTreeMap<String, f64>,
}

impl Timer {
    pub fn start() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            phases: BTreeMap::new(),
        }
    }

    /// Closes the current phase under `name` and returns its length in ms.
    pub fn lap(&mut self, name: &str) -> f64 {
        let now = Instant::now();
        let ms = now.duration_since(self.last).as_secs_f64() * 1e3;
        self.phases.insert(name.to_string(), ms);
        self.last = now;
        ms
    }

    /// Records a derived timing that is not a phase of its own.
    pub fn record(&mut self, name: &str, ms: f64) {
        self.phases.insert(name.to_string(), ms);
    }

    fn finish(mut self) -> BTreeMap<String, f64> {
        let total = self.start.elapsed().as_secs_f64() * 1e3;
        self.phases.insert("total".into(), total);
        self.phases
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    threads: usize,
    config: &'a BTreeMap<String, Value>,
    inputs: &'a [String],
    outputs: &'a [String],
    timings_ms: BTreeMap<String, f64>,
}

/// Everything a command reports about itself besides its primary outputs.
pub struct Run {
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, Value>,
    pub inputs: Vec<String>,
    pub timer: Timer,
}

impl Run {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            seed: None,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            timer: Timer::start(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("config value serializes"));
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Adds the manifest for `primary` and commits everything.
    pub fn finish(self, primary: &Path, mut outputs: Outputs) -> Result<()> {
        let manifest_path = sibling(primary, ".manifest.json");
        let listed = outputs.paths();
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            threads: rayon::current_num_threads(),
            config: &self.config,
            inputs: &self.inputs,
            outputs: &listed,
            timings_ms: self.timer.finish(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        outputs.add(manifest_path, text);
        outputs.commit()
    }
}
