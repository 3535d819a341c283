//! Experiment configuration files.
//!
//! One JSON document per experiment. Unknown keys are errors, and every
//! relative path (output directory, data directories, teacher checkpoints,
//! augmentation sources) is resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitPlan;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::protocols::{RunConfig, SurfaceSpec};

pub const SCHEMA: u32 = 1;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cka_examples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub optimizers: Vec<OptimizerConfig>,
    /// Epoch budgets.
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<RunConfig>,
    /// Trial seeds for multi-seed protocols. Empty means the student's seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    /// D0/D1 split for recycling; defaults to halves seeded by the teacher seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f32>>,
    #[serde(default)]
    pub surface: SurfaceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
    #[serde(default = "default_cka_examples")]
    pub cka_examples: usize,
    /// Directory the file was loaded from; relative paths were resolved against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_run(base: &Path, run: &mut RunConfig) {
    run.data.resolve_paths(base);
    for t in &mut run.teachers {
        resolve(base, t);
    }
}

impl ConfigFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<ConfigFile> {
        let mut cfg: ConfigFile =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema != SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema {} (expected {SCHEMA})",
                cfg.schema
            )));
        }
        cfg.base_dir = base_dir.to_path_buf();
        resolve(base_dir, &mut cfg.output_dir);
        for run in [&mut cfg.teacher, &mut cfg.student].into_iter().flatten() {
            resolve_run(base_dir, run);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        ConfigFile::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the run seeds and, when set, the trial seed list.
    pub fn override_seed(&mut self, seed: u64) {
        for run in [&mut self.teacher, &mut self.student].into_iter().flatten() {
            run.seed = seed;
        }
        if !self.seeds.is_empty() {
            self.seeds = vec![seed];
        }
    }

    pub fn teacher(&self) -> Result<&RunConfig> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `teacher` section".into()))
    }

    pub fn student(&self) -> Result<&RunConfig> {
        self.student
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `student` section".into()))
    }

    pub fn trial_seeds(&self) -> Result<Vec<u64>> {
        if !self.seeds.is_empty() {
            return Ok(self.seeds.clone());
        }
        Ok(vec![self.student()?.seed])
    }
}
