//! Layout of a run directory:
//!
//! ```text
//! <run>/config.toml          snapshot written before step 0
//! <run>/metrics.csv          one row per logged step
//! <run>/timing.csv           wall-clock seconds per logged step
//! <run>/checkpoints/phi.*    pretrained parameters
//! <run>/checkpoints/step_NNNNNN/   trainer state after NNNNNN updates
//! <run>/plots/*.svg
//! <run>/abort_step_NNNNNN.json     offending groups of a numeric abort
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::checkpoint::write_new;
use crate::io::config::RunConfig;

/// Environment variable overriding the default parent directory of runs.
pub const RUN_ROOT_ENV: &str = "CRD_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// `$CRD_RUN_ROOT/<name>`, or `runs/<name>` when the variable is unset.
    pub fn default_path(name: &str) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(name)
    }

    /// Creates a fresh run directory and snapshots `config` into it. Fails if
    /// the directory already holds a run.
    pub fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        let dir = Self { root: root.into() };
        if dir.config_path().exists() {
            return Err(Error::InvalidInput(format!(
                "{} already holds a run; pick another --out or use --resume",
                root.display()
            )));
        }
        for d in [dir.root.clone(), dir.checkpoints(), dir.plots()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        write_new(&dir.config_path(), config.to_toml().as_bytes())?;
        Ok(dir)
    }

    /// Opens an existing run directory.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = Self { root: root.into() };
        if !dir.config_path().exists() {
            return Err(Error::InvalidInput(format!("{} is not a run directory", root.display())));
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn phi_stem(&self) -> PathBuf {
        self.checkpoints().join("phi")
    }

    pub fn step_dir(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}"))
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn abort_dump(&self, step: usize) -> PathBuf {
        self.root.join(format!("abort_step_{step:06}.json"))
    }

    /// Highest-numbered complete step checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(step) = step {
                if path.join("state.json").exists() && best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}
