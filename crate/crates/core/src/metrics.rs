//! Generalization and fidelity metrics.
//!
//! All metrics use untempered (τ = 1) predictive distributions and sequential
//! f64 accumulation. Argmax ties resolve to the lowest class index, for teacher
//! and student alike.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::log_softmax_row;
use crate::tensor::Tensor;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Per-example teacher logits, student logits and labels for one evaluation split.
/// `labels` may be empty when the inputs carry no ground truth (fidelity only).
#[derive(Debug, Clone)]
pub struct EvalBatchResult {
    pub teacher: Tensor,
    pub student: Tensor,
    pub labels: Vec<usize>,
}

impl EvalBatchResult {
    pub fn new(teacher: Tensor, student: Tensor, labels: Vec<usize>) -> Result<Self> {
        if teacher.shape() != student.shape() || teacher.shape().len() != 2 {
            return Err(Error::shape(
                "eval result",
                teacher.shape(),
                student.shape(),
            ));
        }
        if !labels.is_empty() && labels.len() != teacher.shape()[0] {
            return Err(Error::shape(
                "eval result labels",
                teacher.shape(),
                &[labels.len()],
            ));
        }
        for t in [&teacher, &student] {
            if !t.is_finite() {
                return Err(Error::NumericFault { op: "eval logits" });
            }
        }
        Ok(EvalBatchResult {
            teacher,
            student,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.teacher.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.teacher.shape()[1]
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn rows(t: &Tensor) -> std::slice::Chunks<'_, f32> {
    t.data().chunks(t.shape()[1])
}

/// Fraction of examples whose teacher and student argmax coincide.
pub fn top1_agreement(res: &EvalBatchResult) -> f64 {
    let hits = rows(&res.teacher)
        .zip(rows(&res.student))
        .filter(|(t, s)| argmax(t) == argmax(s))
        .count();
    hits as f64 / res.n() as f64
}

/// Mean KL(p_t ‖ p_s) from log-softmax differences.
pub fn predictive_kl(res: &EvalBatchResult) -> f64 {
    let mut total = 0.0;
    for (t, s) in rows(&res.teacher).zip(rows(&res.student)) {
        let lt = log_softmax_row(t, 1.0);
        let ls = log_softmax_row(s, 1.0);
        total += lt
            .iter()
            .zip(&ls)
            .map(|(a, b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    (total / res.n() as f64).max(0.0)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = rows(logits)
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean negative log-likelihood of the labels.
pub fn nll(logits: &Tensor, labels: &[usize]) -> f64 {
    let total: f64 = rows(logits)
        .zip(labels)
        .map(|(r, &y)| -log_softmax_row(r, 1.0)[y])
        .sum();
    total / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccNll {
    pub teacher_accuracy: f64,
    pub teacher_nll: f64,
    pub student_accuracy: f64,
    pub student_nll: f64,
}

pub fn accuracy_nll(res: &EvalBatchResult) -> AccNll {
    AccNll {
        teacher_accuracy: accuracy(&res.teacher, &res.labels),
        teacher_nll: nll(&res.teacher, &res.labels),
        student_accuracy: accuracy(&res.student, &res.labels),
        student_nll: nll(&res.student, &res.labels),
    }
}

/// Per-bin summary used by [`ece`] and reliability dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width bins on (0, 1] over the max softmax probability.
pub fn calibration_bins(
    logits: &Tensor,
    labels: &[usize],
    bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (r, &y) in rows(logits).zip(labels) {
        let lp = log_softmax_row(r, 1.0);
        let pred = argmax(r);
        let conf = lp[pred].exp();
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    Ok((0..bins)
        .map(|b| CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            accuracy: if count[b] > 0 {
                correct[b] as f64 / count[b] as f64
            } else {
                0.0
            },
            confidence: if count[b] > 0 {
                conf_sum[b] / count[b] as f64
            } else {
                0.0
            },
        })
        .collect())
}

/// Expected calibration error: `Σ_b (n_b / n)·|acc_b − conf_b|`.
pub fn ece(logits: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    let n = labels.len() as f64;
    Ok(calibration_bins(logits, labels, bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

fn centered(x: &Tensor) -> (usize, usize, Vec<f64>) {
    let (n, d) = x.as_matrix();
    let mut m: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| m[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            m[i * d + j] -= mean;
        }
    }
    (n, d, m)
}

/// `Σ_ij (aᵀb)_ij²` style contractions for the two CKA routes.
fn cross_frobenius_sq(n: usize, a: &[f64], da: usize, b: &[f64], db: usize) -> f64 {
    // ‖bᵀa‖²_F in feature space: (db × da) matrix of column inner products.
    let mut total = 0.0;
    let mut col = vec![0.0; da];
    for q in 0..db {
        col.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let bv = b[i * db + q];
            if bv != 0.0 {
                let row = &a[i * da..(i + 1) * da];
                for (c, av) in col.iter_mut().zip(row) {
                    *c += bv * av;
                }
            }
        }
        total += col.iter().map(|v| v * v).sum::<f64>();
    }
    total
}

fn gram(n: usize, a: &[f64], d: usize) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let ri = &a[i * d..(i + 1) * d];
        for j in 0..=i {
            let rj = &a[j * d..(j + 1) * d];
            let v: f64 = ri.iter().zip(rj).map(|(p, q)| p * q).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Linear CKA on column-centered features: `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, _) = x.as_matrix();
    let (ny, _) = y.as_matrix();
    if nx != ny {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    if nx < 2 {
        return Err(Error::InvalidArgument(
            "linear_cka needs at least two examples".into(),
        ));
    }
    let (n, dx, xc) = centered(x);
    let (_, dy, yc) = centered(y);
    let (cross, sx, sy) = if dx * dy <= n * n {
        (
            cross_frobenius_sq(n, &xc, dx, &yc, dy),
            cross_frobenius_sq(n, &xc, dx, &xc, dx).sqrt(),
            cross_frobenius_sq(n, &yc, dy, &yc, dy).sqrt(),
        )
    } else {
        let (kx, ky) = (gram(n, &xc, dx), gram(n, &yc, dy));
        (
            kx.iter().zip(&ky).map(|(a, b)| a * b).sum(),
            kx.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ky.iter().map(|v| v * v).sum::<f64>().sqrt(),
        )
    };
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / (sx * sy)).clamp(0.0, 1.0))
}

/// Metric names a [`MetricsReport`] may carry.
pub const VOCABULARY: &[&str] = &[
    "train_accuracy",
    "train_nll",
    "train_ece",
    "test_accuracy",
    "test_nll",
    "test_ece",
    "ensemble_test_accuracy",
    "ensemble_test_nll",
    "ensemble_test_ece",
    "teacher_test_accuracy",
    "teacher_test_nll",
    "teacher_test_ece",
    "student_test_accuracy",
    "student_test_nll",
    "student_test_ece",
    "train_agreement",
    "train_kl",
    "test_agreement",
    "test_kl",
    "initial_train_agreement",
    "final_train_loss",
    "examples_per_epoch",
    "cka_stage1",
    "cka_stage2",
    "cka_stage3",
    "cka_logits",
    "cka_self",
];

/// Vocabulary names, plus `cka_stageN` for networks with more hidden stages.
pub fn is_known_metric(name: &str) -> bool {
    VOCABULARY.contains(&name)
        || name
            .strip_prefix("cka_stage")
            .is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, MetricStat>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a single-trial value.
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !is_known_metric(name) {
            return Err(Error::InvalidArgument(format!(
                "`{name}` is not a known metric"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NumericFault {
                op: "metrics report",
            });
        }
        self.metrics.insert(
            name.to_string(),
            MetricStat {
                mean: value,
                std: None,
                trials: 1,
            },
        );
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.mean)
    }

    /// Mean and sample standard deviation per metric over single-trial reports.
    /// Metadata comes from the first report.
    pub fn aggregate(trials: &[MetricsReport]) -> Result<MetricsReport> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InvalidArgument("no trials to aggregate".into()))?;
        let mut out = MetricsReport {
            metrics: BTreeMap::new(),
            metadata: first.metadata.clone(),
        };
        for name in first.metrics.keys() {
            let vals: Vec<f64> = trials.iter().filter_map(|r| r.get(name)).collect();
            if vals.len() != trials.len() {
                return Err(Error::InvalidArgument(format!(
                    "metric `{name}` missing from some trials"
                )));
            }
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = (n >= 2).then(|| {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            out.metrics.insert(
                name.clone(),
                MetricStat {
                    mean,
                    std,
                    trials: n,
                },
            );
        }
        out.set_meta("trials", trials.len());
        Ok(out)
    }

    /// Flat CSV, one row per metric in name order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,trials\n");
        for (name, m) in &self.metrics {
            let std = m.std.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{name},{},{std},{}\n", m.mean, m.trials));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Fidelity and generalization metrics for one evaluation split, under `prefix`
/// (`train` or `test`).
pub fn fidelity_metrics(
    report: &mut MetricsReport,
    prefix: &str,
    res: &EvalBatchResult,
) -> Result<()> {
    report.insert(&format!("{prefix}_agreement"), top1_agreement(res))?;
    report.insert(&format!("{prefix}_kl"), predictive_kl(res))?;
    Ok(())
}

/// Accuracy, NLL and ECE of one model under `prefix`.
pub fn generalization_metrics(
    report: &mut MetricsReport,
    prefix: &str,
    logits: &Tensor,
    labels: &[usize],
) -> Result<()> {
    report.insert(&format!("{prefix}_accuracy"), accuracy(logits, labels))?;
    report.insert(&format!("{prefix}_nll"), nll(logits, labels))?;
    report.insert(
        &format!("{prefix}_ece"),
        ece(logits, labels, DEFAULT_ECE_BINS)?,
    )?;
    Ok(())
}
