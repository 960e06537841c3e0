//! Per-run manifest, written last so that its presence marks success.

use std::path::{Path, PathBuf};
use std::time::Instant;

use agm_core::store::write_atomic;
use agm_core::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub struct RunManifest {
    command: String,
    config: String,
    seeds: Vec<(String, u64)>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: String::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, text: &str) {
        self.config = text.to_string();
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn render(&self) -> String {
        let mut s = String::from("run-manifest v1\n");
        s += &format!("command={}\n", self.command);
        s += &format!("build={}\n", env!("CARGO_PKG_VERSION"));
        s += &format!("wall_clock_seconds={:.3}\n", self.started.elapsed().as_secs_f64());
        for (name, v) in &self.seeds {
            s += &format!("seed.{name}={v}\n");
        }
        for p in &self.outputs {
            s += &format!("output={}\n", p.display());
        }
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            s += &format!("config.{line}\n");
        }
        s
    }

    /// Writes `manifest.txt` into `dir` once every listed output exists.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(agm_core::Error::Contract(format!(
                "output {} was not written",
                missing.display()
            )));
        }
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, self.render().as_bytes())?;
        Ok(path)
    }
}
