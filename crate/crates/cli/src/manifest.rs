//! Per-invocation record written next to each command's outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::Serialize;

use segt::checkpoint::CHECKPOINT_VERSION;
use segt::embedding::EMBEDDING_VERSION;

use crate::error::CliResult;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: IndexMap<&'static str, PathBuf>,
    pub outputs: IndexMap<&'static str, PathBuf>,
    pub formats: IndexMap<&'static str, u32>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let formats = [("embedding", EMBEDDING_VERSION), ("checkpoint", CHECKPOINT_VERSION)]
            .into_iter()
            .collect();
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_paths: Vec::new(),
            seed: None,
            inputs: IndexMap::new(),
            outputs: IndexMap::new(),
            formats,
            started_unix_secs: started,
            wall_clock_secs: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, role: &'static str, path: &Path) -> &mut Self {
        self.inputs.insert(role, path.to_path_buf());
        self
    }

    pub fn output(&mut self, role: &'static str, path: &Path) -> &mut Self {
        self.outputs.insert(role, path.to_path_buf());
        self
    }

    pub fn config(&mut self, path: Option<&Path>) -> &mut Self {
        self.config_paths.extend(path.map(Path::to_path_buf));
        self
    }

    pub fn finish(mut self, path: &Path) -> CliResult<()> {
        if let Some(c) = self.clock {
            self.wall_clock_secs = c.elapsed().as_secs_f64();
        }
        std::fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

/// Manifest path for a command whose output is a single file.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

pub const DIR_MANIFEST: &str = "run.json";
