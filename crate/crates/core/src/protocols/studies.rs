use serde::{Deserialize, Serialize};

use super::{
    distill, network_id, run_cells, train_teacher, Context, InitSpec, RunConfig, TrainData,
    TrainOutcome,
};
use crate::data::{split, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::TeacherEnsemble;
use crate::metrics::{linear_cka, MetricStat, MetricsReport};
use crate::nn::Network;
use crate::optim::OptimizerConfig;

pub const DEFAULT_LAMBDAS: [f32; 9] = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

fn stat(reports: &[MetricsReport], name: &str) -> Result<MetricStat> {
    let agg = MetricsReport::aggregate(reports)?;
    agg.metrics
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("metric `{name}` missing")))
}

fn fmt_std(s: Option<f64>) -> String {
    s.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct RecyclingOutcome {
    pub teacher: TrainOutcome,
    pub d0_len: usize,
    pub d1_len: usize,
    /// `s0`, `s1` and `s01`, distilled on D0, D1 and D0 ∪ D1.
    pub students: Vec<(String, TrainOutcome)>,
}

/// Teacher on D0, then three label-free students on D0, D1 and their union.
pub fn recycling_protocol(
    teacher_cfg: &RunConfig,
    student_cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    plan: &SplitPlan,
    ctx: &Context,
) -> Result<RecyclingOutcome> {
    if student_cfg.distill.map_or(true, |d| d.alpha != 0.0) {
        return Err(Error::Config(
            "recycling students learn from teacher targets only; set alpha to 0".into(),
        ));
    }
    let (d0, d1) = split(train, plan)?;
    let teacher = train_teacher(
        teacher_cfg,
        &TrainData {
            train: d0.clone(),
            test: test.clone(),
        },
        ctx,
    )?;
    let ensemble = TeacherEnsemble::new(vec![teacher.network.clone()])?;
    let sets = [
        ("s0", d0.clone()),
        ("s1", d1.clone()),
        ("s01", d0.union(&d1)?),
    ];
    let students = run_cells(sets.len(), |k| {
        let data = TrainData {
            train: sets[k].1.clone(),
            test: test.clone(),
        };
        let mut out = distill(student_cfg, &ensemble, &data, ctx)?;
        out.report.set_meta("student", sets[k].0);
        out.report
            .set_meta("teacher_id", network_id(&teacher.network));
        Ok((sets[k].0.to_string(), out))
    })?;
    Ok(RecyclingOutcome {
        teacher,
        d0_len: d0.len(),
        d1_len: d1.len(),
        students,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPoint {
    pub lambda: f32,
    pub seed: u64,
    pub initial_train_agreement: f64,
    pub final_train_loss: f64,
    pub train_agreement: f64,
    pub test_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSweep {
    pub teacher_id: String,
    pub points: Vec<ConvexPoint>,
}

impl ConvexSweep {
    /// Seed-averaged value of `f` at `lambda`.
    pub fn mean(&self, lambda: f32, f: impl Fn(&ConvexPoint) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.lambda == lambda)
            .map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "lambda,seed,initial_train_agreement,final_train_loss,train_agreement,test_agreement\n",
        );
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.lambda,
                p.seed,
                p.initial_train_agreement,
                p.final_train_loss,
                p.train_agreement,
                p.test_agreement
            ));
        }
        s
    }
}

/// Students started at `λ·θ_t + (1 − λ)·θ_r` for every λ and seed. One θ_r per
/// seed (the fresh initialization from that seed) is shared across the λ grid.
pub fn convex_init_sweep(
    student_cfg: &RunConfig,
    teacher: &Network,
    data: &TrainData,
    lambdas: &[f32],
    seeds: &[u64],
    ctx: &Context,
) -> Result<ConvexSweep> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "convex sweep needs at least one λ and one seed".into(),
        ));
    }
    let ensemble = TeacherEnsemble::new(vec![teacher.clone()])?;
    let cells: Vec<(f32, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let points = run_cells(cells.len(), |k| {
        let (lambda, seed) = cells[k];
        let cfg = RunConfig {
            init: InitSpec::Interpolate { lambda },
            ..student_cfg.with_seed(seed)
        };
        let r = distill(&cfg, &ensemble, data, ctx)?.report;
        let get = |n: &str| {
            r.get(n)
                .ok_or_else(|| Error::InvalidArgument(format!("metric `{n}` missing")))
        };
        Ok(ConvexPoint {
            lambda,
            seed,
            initial_train_agreement: get("initial_train_agreement")?,
            final_train_loss: get("final_train_loss")?,
            train_agreement: get("train_agreement")?,
            test_agreement: get("test_agreement")?,
        })
    })?;
    Ok(ConvexSweep {
        teacher_id: network_id(teacher),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub optimizer: String,
    pub lr: f32,
    pub epochs: usize,
    pub train_agreement: MetricStat,
    pub test_agreement: MetricStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub teacher_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "optimizer,lr,epochs,trials,train_agreement,train_agreement_std,test_agreement,test_agreement_std\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.optimizer,
                r.lr,
                r.epochs,
                r.train_agreement.trials,
                r.train_agreement.mean,
                fmt_std(r.train_agreement.std),
                r.test_agreement.mean,
                fmt_std(r.test_agreement.std),
            ));
        }
        s
    }
}

fn optimizer_name(o: &OptimizerConfig) -> String {
    let kind = serde_json::to_value(o.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string));
    let kind = kind.unwrap_or_default();
    if o.nesterov {
        format!("{kind}-nesterov")
    } else {
        kind
    }
}

/// One distillation per (optimizer, epoch budget, seed), without weight decay.
pub fn optimizer_ablation(
    student_cfg: &RunConfig,
    teachers: &TeacherEnsemble,
    data: &TrainData,
    optimizers: &[OptimizerConfig],
    budgets: &[usize],
    seeds: &[u64],
    ctx: &Context,
) -> Result<AblationReport> {
    if optimizers.is_empty() || budgets.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs optimizers, budgets and seeds".into(),
        ));
    }
    let cells: Vec<(usize, usize, u64)> = (0..optimizers.len())
        .flat_map(|o| (0..budgets.len()).flat_map(move |b| seeds.iter().map(move |&s| (o, b, s))))
        .collect();
    let reports = run_cells(cells.len(), |k| {
        let (o, b, seed) = cells[k];
        let mut opt = optimizers[o].clone();
        if opt.weight_decay != 0.0 {
            log::warn!(
                "optimizer ablation runs without weight decay; ignoring {}",
                opt.weight_decay
            );
            opt.weight_decay = 0.0;
        }
        let cfg = RunConfig {
            optimizer: opt,
            epochs: budgets[b],
            schedule: student_cfg
                .schedule
                .clone()
                .map(|s| crate::optim::ScheduleConfig {
                    total_steps: budgets[b].max(1),
                    ..s
                }),
            ..student_cfg.with_seed(seed)
        };
        Ok(distill(&cfg, teachers, data, ctx)?.report)
    })?;
    let per = seeds.len();
    let mut rows = Vec::new();
    for (o, opt) in optimizers.iter().enumerate() {
        for (b, &epochs) in budgets.iter().enumerate() {
            let start = (o * budgets.len() + b) * per;
            let cell = &reports[start..start + per];
            rows.push(AblationRow {
                optimizer: optimizer_name(opt),
                lr: opt.lr,
                epochs,
                train_agreement: stat(cell, "train_agreement")?,
                test_agreement: stat(cell, "test_agreement")?,
            });
        }
    }
    Ok(AblationReport {
        teacher_ids: teachers.components().iter().map(network_id).collect(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedInitRow {
    /// `random` or `teacher`.
    pub init: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedInitReport {
    pub teacher_id: String,
    pub stages: Vec<String>,
    pub cka_examples: usize,
    pub rows: Vec<SharedInitRow>,
}

impl SharedInitReport {
    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = ["Init", "Agree", "Agree_std", "KL", "KL_std"]
            .map(String::from)
            .to_vec();
        for s in &self.stages {
            c.push(format!("CKA_{s}"));
            c.push(format!("CKA_{s}_std"));
        }
        c.push("CKA_self".into());
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns().join(",") + "\n";
        for row in &self.rows {
            let m = &row.report.metrics;
            let cell = |name: &str| {
                m.get(name)
                    .map(|x| (x.mean.to_string(), fmt_std(x.std)))
                    .unwrap_or_default()
            };
            let mut fields = vec![row.init.clone()];
            for name in ["test_agreement", "test_kl"]
                .into_iter()
                .map(String::from)
                .chain(self.stages.iter().map(|st| format!("cka_{st}")))
            {
                let (mean, std) = cell(&name);
                fields.push(mean);
                fields.push(std);
            }
            fields.push(cell("cka_self").0);
            s.push_str(&(fields.join(",") + "\n"));
        }
        s
    }
}

/// Students from a fresh initialization versus from the teacher's own initial
/// weights, compared on test agreement, predictive KL and per-stage CKA.
pub fn shared_init_study(
    student_cfg: &RunConfig,
    teacher: &Network,
    data: &TrainData,
    seeds: &[u64],
    cka_examples: usize,
    ctx: &Context,
) -> Result<SharedInitReport> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "shared-init study needs at least one seed".into(),
        ));
    }
    if seeds.contains(&teacher.seed()) {
        return Err(Error::Config(format!(
            "trial seed {} equals the teacher seed, so the random arm would share its init",
            teacher.seed()
        )));
    }
    let ensemble = TeacherEnsemble::new(vec![teacher.clone()])?;
    let probe = data
        .test
        .select(&(0..cka_examples.min(data.test.len())).collect::<Vec<_>>())?;
    let x = probe.inputs(0, probe.len())?;
    let stages = teacher.stage_ids();
    let stage_refs: Vec<&str> = stages.iter().map(String::as_str).collect();
    let teacher_feats = teacher.capture_preactivations(&x, &stage_refs)?;
    let cka_self = linear_cka(&teacher_feats[&stages[0]], &teacher_feats[&stages[0]])?;

    let arms = [
        ("random", InitSpec::Random),
        ("teacher", InitSpec::TeacherInit),
    ];
    let cells: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let reports = run_cells(cells.len(), |k| {
        let (arm, seed) = cells[k];
        let cfg = RunConfig {
            init: arms[arm].1,
            ..student_cfg.with_seed(seed)
        };
        let out = distill(&cfg, &ensemble, data, ctx)?;
        let feats = out.network.capture_preactivations(&x, &stage_refs)?;
        let mut r = MetricsReport::new();
        r.insert(
            "test_agreement",
            out.report.get("test_agreement").unwrap_or(f64::NAN),
        )?;
        r.insert("test_kl", out.report.get("test_kl").unwrap_or(f64::NAN))?;
        for s in &stages {
            r.insert(
                &format!("cka_{s}"),
                linear_cka(&teacher_feats[s], &feats[s])?,
            )?;
        }
        r.insert("cka_self", cka_self)?;
        Ok(r)
    })?;
    let rows = arms
        .iter()
        .enumerate()
        .map(|(a, (name, _))| {
            let mut report =
                MetricsReport::aggregate(&reports[a * seeds.len()..(a + 1) * seeds.len()])?;
            report.set_meta("seeds", seeds.to_vec());
            Ok(SharedInitRow {
                init: name.to_string(),
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SharedInitReport {
        teacher_id: network_id(teacher),
        stages,
        cka_examples: probe.len(),
        rows,
    })
}
