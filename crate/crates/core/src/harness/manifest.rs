use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

/// What a command ran and wrote. Numeric outputs depend only on the config
/// hash and the seed root; timings are informational.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed_root: u64,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    started: Option<Instant>,
    #[serde(skip)]
    dir: PathBuf,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    data: &'a T,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_owned(),
            artifact_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: cfg.hash(),
            seed_root: cfg.seed,
            wall_clock_seconds: 0.0,
            stages: Vec::new(),
            outputs: Vec::new(),
            started: Some(Instant::now()),
            dir: cfg.output.clone(),
        }
    }

    pub fn hash(&self) -> &str {
        &self.config_hash
    }

    /// Runs `f`, recording its wall-clock time under `name`.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            name: name.to_owned(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    /// Creates `name` in the output directory and records it.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        let file = File::create(&path)?;
        self.outputs.push(path);
        Ok(BufWriter::new(file))
    }

    /// Records a file written by other means.
    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `{"config_hash": …, "data": value}`.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let hash = self.config_hash.clone();
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(
            &mut w,
            &Stamped {
                config_hash: &hash,
                data: value,
            },
        )?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Stops the clock and writes `manifest_<command>.json`.
    pub fn finish(mut self) -> Result<Self> {
        if let Some(t0) = self.started.take() {
            self.wall_clock_seconds = t0.elapsed().as_secs_f64();
        }
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(format!("manifest_{}.json", self.command));
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(self)
    }
}
