//! Experiment recipes built from the lower modules.
//!
//! Every protocol is a pure function of its [`RunConfig`]s and seeds. Cells that
//! do not depend on each other (seeds, λ values, optimizer cells, grid rows) run
//! on a rayon pool capped by `DISTILAB_THREADS`, and results are merged in cell
//! order so reports do not depend on scheduling.

mod studies;
mod surface;
mod train;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentationPolicy, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::DistillLossConfig;
use crate::nn::Network;
use crate::optim::{OptimizerConfig, ScheduleConfig};
use crate::tensor::Tensor;

pub use studies::{
    convex_init_sweep, optimizer_ablation, recycling_protocol, shared_init_study, AblationReport,
    AblationRow, ConvexPoint, ConvexSweep, RecyclingOutcome, SharedInitReport, SharedInitRow,
    DEFAULT_LAMBDAS,
};
pub use surface::{loss_surface, SurfaceGrid, SurfaceHeader, SurfaceSpec};
pub use train::{
    distill, ensemble_logits_on, evaluate, student_init, train_ensemble, train_teacher,
    EnsembleOutcome, TrainOutcome,
};

/// Evaluation chunk for whole-dataset passes.
const EVAL_CHUNK: usize = 1024;

/// Train-vs-test agreement gap beyond which a student report is flagged.
pub const FIDELITY_GAP_FLAG: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    D0,
    D1,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSelection {
    pub plan: SplitPlan,
    pub part: Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSpec {
    pub n: usize,
    pub seed: u64,
}

/// Where the training data comes from. The split is applied before the subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Directory holding the four MNIST IDX files.
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetSpec>,
}

/// Train and test views used by one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSpec {
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.dir.is_relative() {
            self.dir = base.join(&self.dir);
        }
    }

    /// Applies split and subset to already-loaded train/test datasets.
    pub fn select(&self, train: &Dataset, test: &Dataset) -> Result<TrainData> {
        let mut t = train.clone();
        if let Some(sel) = &self.split {
            let (d0, d1) = data::split(&t, &sel.plan)?;
            t = match sel.part {
                Part::D0 => d0,
                Part::D1 => d1,
                Part::Both => d0.union(&d1)?,
            };
        }
        if let Some(s) = self.subset {
            t = data::subset(&t, s.n, s.seed)?;
        }
        Ok(TrainData {
            train: t,
            test: test.clone(),
        })
    }

    pub fn load(&self) -> Result<TrainData> {
        let (train, test) = Dataset::load_mnist(&self.dir)?;
        self.select(&train, &test)
    }
}

/// How a student's weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Fresh initialization from the run seed.
    #[default]
    Random,
    /// The first teacher's own initial weights (re-derived from its seed).
    TeacherInit,
    /// `λ·θ_t + (1 − λ)·θ_r`, with θ_r the fresh initialization from the run seed.
    Interpolate { lambda: f32 },
}

/// One training run, teacher or student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub role: Role,
    pub arch: String,
    pub data: DataSpec,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    pub optimizer: OptimizerConfig,
    /// Per-epoch schedule; defaults to cosine from `optimizer.lr` to 0 over `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillLossConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teachers: Vec<PathBuf>,
    #[serde(default)]
    pub init: InitSpec,
    pub seed: u64,
}

impl RunConfig {
    /// Checks internal consistency. Students must name at least one teacher
    /// checkpoint unless the protocol supplies its teachers (`teachers_supplied`).
    pub fn validate(&self, teachers_supplied: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        crate::nn::Architecture::parse(&self.arch)?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
            if s.total_steps < self.epochs {
                return bad(format!(
                    "schedule covers {} epochs, run has {}",
                    s.total_steps, self.epochs
                ));
            }
        }
        match self.role {
            Role::Teacher => {
                if self.distill.is_some() || !self.teachers.is_empty() {
                    return bad("teacher runs take no distill config or teacher checkpoints".into());
                }
                if self.augmentation.destroys_labels() {
                    return bad(
                        "teacher runs need labels; mixup, noise and external mixing remove them"
                            .into(),
                    );
                }
                if self.init != InitSpec::Random {
                    return bad("teacher runs use random initialization".into());
                }
            }
            Role::Student => {
                let d = self
                    .distill
                    .as_ref()
                    .ok_or_else(|| Error::Config("student run needs a distill config".into()))?;
                d.validate()?;
                if d.alpha > 0.0 && self.augmentation.destroys_labels() {
                    return bad(
                        "α > 0 needs labels, but the augmentation policy removes them".into(),
                    );
                }
                if self.teachers.is_empty() && !teachers_supplied {
                    return bad("student run references no teacher checkpoint".into());
                }
                if let InitSpec::Interpolate { lambda } = self.init {
                    if !(0.0..=1.0).contains(&lambda) {
                        return bad(format!("init λ {lambda} outside [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule
            .clone()
            .unwrap_or_else(|| ScheduleConfig::cosine(self.optimizer.lr, 0.0, self.epochs.max(1)))
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Cooperative cancellation shared by all cells of a run.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Interrupted)
        } else {
            Ok(())
        }
    }
}

/// Shared runtime settings for protocol calls.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub cancel: CancelToken,
    /// Base for relative augmentation source paths.
    pub base_dir: Option<PathBuf>,
}

/// Worker count from `DISTILAB_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("DISTILAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs independent cells in parallel and returns their results in cell order.
pub fn run_cells<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let threads = thread_cap().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

/// Eval-mode logits of `net` over a whole dataset.
pub fn predict_dataset(net: &Network, ds: &Dataset) -> Result<Tensor> {
    let classes = net.classes();
    let mut out = Vec::with_capacity(ds.len() * classes);
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let x = ds.inputs(start, (start + EVAL_CHUNK).min(ds.len()))?;
        out.extend_from_slice(net.predict(&x)?.data());
    }
    Tensor::new(vec![ds.len(), classes], out)
}

/// Identifier recorded in reports for a trained network.
pub fn network_id(net: &Network) -> String {
    format!("{}/seed={}", net.arch().unwrap_or("custom"), net.seed())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher_cfg() -> RunConfig {
        RunConfig {
            role: Role::Teacher,
            arch: "mlp-8".into(),
            data: DataSpec {
                dir: "data".into(),
                split: None,
                subset: None,
            },
            augmentation: AugmentationPolicy::none(),
            optimizer: OptimizerConfig::sgd(0.1, 0.9, true, 0.0),
            schedule: None,
            epochs: 2,
            batch_size: 4,
            distill: None,
            teachers: vec![],
            init: InitSpec::Random,
            seed: 0,
        }
    }

    #[test]
    fn role_invariants() {
        assert!(teacher_cfg().validate(false).is_ok());
        let mut t = teacher_cfg();
        t.distill = Some(DistillLossConfig {
            alpha: 0.0,
            tau: 4.0,
        });
        assert!(t.validate(false).is_err());
        let mut s = teacher_cfg();
        s.role = Role::Student;
        assert!(s.validate(true).is_err());
        s.distill = Some(DistillLossConfig {
            alpha: 0.0,
            tau: 4.0,
        });
        assert!(s.validate(false).is_err());
        assert!(s.validate(true).is_ok());
        s.augmentation
            .steps
            .push(data::AugStep::Mixup { lambda: None });
        s.distill = Some(DistillLossConfig {
            alpha: 0.5,
            tau: 4.0,
        });
        assert!(s.validate(true).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(teacher_cfg()).unwrap();
        v["learning_rate"] = 0.1.into();
        let err = serde_json::from_value::<RunConfig>(v)
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn cells_keep_order() {
        let out = run_cells(5, |i| Ok(i * i)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
        assert!(run_cells(3, |i| if i == 1 {
            Err(Error::Interrupted)
        } else {
            Ok(i)
        })
        .is_err());
    }
}
