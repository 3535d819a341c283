use serde_json::json;

use super::{
    network_id, predict_dataset, run_cells, Context, InitSpec, Role, RunConfig, TrainData,
    FIDELITY_GAP_FLAG,
};
use crate::autodiff::Tape;
use crate::data::{epoch_batches, Augmenter, Dataset};
use crate::error::{Error, Result};
use crate::losses::{kd_loss_value, nll_loss, one_hot, student_loss, TeacherEnsemble};
use crate::metrics::{self, EvalBatchResult, MetricsReport};
use crate::nn::{interpolate_weights, Mode, Network};
use crate::optim::{lr_at, Optimizer};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub report: MetricsReport,
    /// Mean training loss of each epoch, over the examples actually seen.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub members: Vec<TrainOutcome>,
    pub report: MetricsReport,
}

fn check_input(net: &Network, ds: &Dataset) -> Result<()> {
    if net.input_shape() != ds.image_shape() {
        return Err(Error::ArchitectureMismatch(format!(
            "network expects {:?} inputs, dataset `{}` has {:?}",
            net.input_shape(),
            ds.name(),
            ds.image_shape()
        )));
    }
    if net.classes() != ds.classes() {
        return Err(Error::ArchitectureMismatch(format!(
            "network has {} classes, dataset `{}` has {}",
            net.classes(),
            ds.name(),
            ds.classes()
        )));
    }
    Ok(())
}

/// One augmented, normalized batch.
struct Batch {
    x: Tensor,
    labels: Option<Vec<usize>>,
    n: usize,
}

fn make_batch(
    ds: &Dataset,
    aug: &Augmenter,
    positions: &[usize],
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<Batch> {
    let (px, ys) = ds.gather(positions);
    let ab = aug.apply(px, ys, seed, epoch, index);
    Ok(Batch {
        x: ds.normalize(&ab.pixels)?,
        labels: ab.labels,
        n: ab.n,
    })
}

/// Trains `net` in place and returns per-epoch mean losses.
fn fit(
    net: &mut Network,
    cfg: &RunConfig,
    ds: &Dataset,
    teacher: Option<&TeacherEnsemble>,
    aug: &Augmenter,
    ctx: &Context,
) -> Result<Vec<f64>> {
    let sched = cfg.schedule();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let classes = net.classes();
    let mut losses = Vec::with_capacity(cfg.epochs);
    net.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let last_good = net.weights();
        let mut run_epoch = || -> Result<f64> {
            opt.set_lr(lr_at(&sched, epoch)?);
            let (mut total, mut count) = (0.0f64, 0usize);
            for (b, pos) in epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch)
                .iter()
                .enumerate()
            {
                ctx.cancel.check()?;
                let batch = make_batch(ds, aug, pos, cfg.seed, epoch, b)?;
                let zt = teacher.map(|t| t.logits(&batch.x)).transpose()?;
                let mut tape = Tape::new();
                let xv = tape.constant(batch.x);
                let fwd = net.forward(&mut tape, xv, true)?;
                let y = batch
                    .labels
                    .as_deref()
                    .map(|l| one_hot(l, classes))
                    .transpose()?;
                let loss = match (&zt, cfg.distill.as_ref()) {
                    (Some(zt), Some(d)) => student_loss(&mut tape, fwd.logits, zt, y.as_ref(), d)?,
                    _ => {
                        let y = y.ok_or_else(|| {
                            Error::InvalidArgument("supervised training needs labels".into())
                        })?;
                        nll_loss(&mut tape, fwd.logits, &y)?
                    }
                };
                total += f64::from(tape.value(loss).item()) * batch.n as f64;
                count += batch.n;
                tape.backward(loss)?;
                let grads: Vec<Option<&[f32]>> = fwd.params.iter().map(|&p| tape.grad(p)).collect();
                opt.step(&mut net.trainable_mut(), &grads)?;
            }
            Ok(total / count as f64)
        };
        match run_epoch() {
            Ok(l) => {
                log::debug!("epoch {epoch}: loss {l:.6}");
                losses.push(l);
            }
            Err(e) if e.is_numeric() => {
                net.set_mode(Mode::Eval);
                return Err(Error::TrainingFault {
                    epoch,
                    source: Box::new(e),
                    last_good: Some(Box::new(last_good)),
                });
            }
            Err(e) => {
                net.set_mode(Mode::Eval);
                return Err(e);
            }
        }
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}

fn teacher_report(
    net: &Network,
    data: &TrainData,
    cfg: &RunConfig,
    losses: &[f64],
) -> Result<MetricsReport> {
    let mut r = MetricsReport::new();
    let train_logits = predict_dataset(net, &data.train)?;
    metrics::generalization_metrics(&mut r, "train", &train_logits, &data.train.labels())?;
    let test_logits = predict_dataset(net, &data.test)?;
    metrics::generalization_metrics(&mut r, "test", &test_logits, &data.test.labels())?;
    r.set_meta("role", "teacher");
    r.set_meta("model_id", network_id(net));
    r.set_meta("train_examples", data.train.len());
    r.set_meta("epoch_losses", losses.to_vec());
    r.set_meta("config", serde_json::to_value(cfg)?);
    Ok(r)
}

/// Supervised training of one teacher network.
pub fn train_teacher(cfg: &RunConfig, data: &TrainData, ctx: &Context) -> Result<TrainOutcome> {
    if cfg.role != Role::Teacher {
        return Err(Error::Config("train_teacher needs a teacher config".into()));
    }
    cfg.validate(false)?;
    let mut net = Network::from_preset(&cfg.arch, cfg.seed)?;
    check_input(&net, &data.train)?;
    let aug = Augmenter::new(
        &cfg.augmentation,
        data.train.image_shape(),
        ctx.base_dir.as_deref(),
    )?;
    let losses = fit(&mut net, cfg, &data.train, None, &aug, ctx)?;
    let report = teacher_report(&net, data, cfg, &losses)?;
    Ok(TrainOutcome {
        network: net,
        report,
        epoch_losses: losses,
    })
}

/// `m` independently trained teachers with seeds `cfg.seed + i`, plus a report
/// on the fused ensemble.
pub fn train_ensemble(
    cfg: &RunConfig,
    m: usize,
    data: &TrainData,
    ctx: &Context,
) -> Result<EnsembleOutcome> {
    if m == 0 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let members = run_cells(m, |i| {
        train_teacher(&cfg.with_seed(cfg.seed + i as u64), data, ctx)
    })?;
    let ensemble = TeacherEnsemble::new(members.iter().map(|o| o.network.clone()).collect())?;
    let logits = ensemble_logits_on(&ensemble, &data.test)?;
    let mut report = MetricsReport::new();
    let labels = data.test.labels();
    report.insert(
        "ensemble_test_accuracy",
        metrics::accuracy(&logits, &labels),
    )?;
    report.insert("ensemble_test_nll", metrics::nll(&logits, &labels))?;
    report.insert(
        "ensemble_test_ece",
        metrics::ece(&logits, &labels, metrics::DEFAULT_ECE_BINS)?,
    )?;
    let component: Vec<f64> = members
        .iter()
        .map(|o| o.report.get("test_accuracy").unwrap_or(0.0))
        .collect();
    report.set_meta("component_test_accuracy", component);
    report.set_meta(
        "members",
        members
            .iter()
            .map(|o| network_id(&o.network))
            .collect::<Vec<_>>(),
    );
    report.set_meta("config", serde_json::to_value(cfg)?);
    Ok(EnsembleOutcome { members, report })
}

/// Eval-mode ensemble logits over a whole dataset.
pub fn ensemble_logits_on(t: &TeacherEnsemble, ds: &Dataset) -> Result<Tensor> {
    let mut out = Vec::with_capacity(ds.len() * t.classes());
    for start in (0..ds.len()).step_by(1024) {
        let x = ds.inputs(start, (start + 1024).min(ds.len()))?;
        out.extend_from_slice(t.logits(&x)?.data());
    }
    Tensor::new(vec![ds.len(), t.classes()], out)
}

/// Agreement and KL of `student` against `teachers` on `ds`, plus accuracy,
/// NLL and ECE of both models when `ds` is the test split.
pub fn evaluate(
    student: &Network,
    teachers: &TeacherEnsemble,
    ds: &Dataset,
) -> Result<MetricsReport> {
    let prefix = match ds.split_tag() {
        "train" => "train",
        "test" => "test",
        other => {
            return Err(Error::InvalidArgument(format!(
                "cannot evaluate on split `{other}`"
            )))
        }
    };
    if teachers.classes() != student.classes() {
        return Err(Error::ArchitectureMismatch(format!(
            "teacher has {} classes, student {}",
            teachers.classes(),
            student.classes()
        )));
    }
    check_input(student, ds)?;
    let zt = ensemble_logits_on(teachers, ds)?;
    let zs = predict_dataset(student, ds)?;
    let labels = ds.labels();
    let mut report = MetricsReport::new();
    metrics::fidelity_metrics(
        &mut report,
        prefix,
        &EvalBatchResult::new(zt.clone(), zs.clone(), labels.clone())?,
    )?;
    if prefix == "test" {
        metrics::generalization_metrics(&mut report, "test", &zs, &labels)?;
        metrics::generalization_metrics(&mut report, "teacher_test", &zt, &labels)?;
    }
    report.set_meta("student_id", network_id(student));
    report.set_meta(
        "teacher_ids",
        teachers
            .components()
            .iter()
            .map(network_id)
            .collect::<Vec<_>>(),
    );
    report.set_meta("examples", ds.len());
    Ok(report)
}

/// The student network a config starts from.
pub fn student_init(cfg: &RunConfig, teachers: &TeacherEnsemble) -> Result<Network> {
    let mut net = Network::from_preset(&cfg.arch, cfg.seed)?;
    let first = &teachers.components()[0];
    match cfg.init {
        InitSpec::Random => {}
        InitSpec::TeacherInit => {
            let arch = first.arch().ok_or_else(|| {
                Error::ArchitectureMismatch("teacher has no preset to re-derive its init".into())
            })?;
            let init = Network::from_preset(arch, first.seed())?;
            net.load_weights(&init.weights())?;
        }
        InitSpec::Interpolate { lambda } => {
            let w = interpolate_weights(&first.weights(), &net.weights(), lambda)?;
            net.load_weights(&w)?;
        }
    }
    Ok(net)
}

/// Teacher and student eval-mode logits on one epoch's augmented batches.
struct FrozenPass {
    teacher: Tensor,
    student: Tensor,
    loss: f64,
    examples: usize,
}

fn frozen_pass(
    student: &Network,
    teachers: &TeacherEnsemble,
    cfg: &RunConfig,
    ds: &Dataset,
    aug: &Augmenter,
    epoch: usize,
    ctx: &Context,
) -> Result<FrozenPass> {
    let d = cfg.distill.expect("validated student config");
    let classes = student.classes();
    let (mut zt_all, mut zs_all) = (Vec::new(), Vec::new());
    let (mut loss, mut examples) = (0.0, 0usize);
    for (b, pos) in epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch)
        .iter()
        .enumerate()
    {
        ctx.cancel.check()?;
        let batch = make_batch(ds, aug, pos, cfg.seed, epoch, b)?;
        let zt = teachers.logits(&batch.x)?;
        let zs = student.predict(&batch.x)?;
        let mut l = (1.0 - f64::from(d.alpha)) * kd_loss_value(&zs, &zt, d.tau)?;
        if d.alpha > 0.0 {
            let labels = batch.labels.as_ref().expect("α > 0 keeps labels");
            l += f64::from(d.alpha) * metrics::nll(&zs, labels);
        }
        loss += l * batch.n as f64;
        examples += batch.n;
        zt_all.extend_from_slice(zt.data());
        zs_all.extend_from_slice(zs.data());
    }
    Ok(FrozenPass {
        teacher: Tensor::new(vec![examples, classes], zt_all)?,
        student: Tensor::new(vec![examples, classes], zs_all)?,
        loss: loss / examples as f64,
        examples,
    })
}

/// Distills a student from `teachers` on `data.train` and reports generalization
/// and fidelity on the test split plus fidelity on the final epoch's augmented
/// training inputs.
pub fn distill(
    cfg: &RunConfig,
    teachers: &TeacherEnsemble,
    data: &TrainData,
    ctx: &Context,
) -> Result<TrainOutcome> {
    if cfg.role != Role::Student {
        return Err(Error::Config("distill needs a student config".into()));
    }
    cfg.validate(true)?;
    let mut net = student_init(cfg, teachers)?;
    if teachers.classes() != net.classes() {
        return Err(Error::ArchitectureMismatch(format!(
            "teacher has {} classes, student {}",
            teachers.classes(),
            net.classes()
        )));
    }
    check_input(&net, &data.train)?;
    check_input(&teachers.components()[0], &data.train)?;
    let aug = Augmenter::new(
        &cfg.augmentation,
        data.train.image_shape(),
        ctx.base_dir.as_deref(),
    )?;

    let initial = frozen_pass(&net, teachers, cfg, &data.train, &aug, 0, ctx)?;
    let initial_agreement = metrics::top1_agreement(&EvalBatchResult::new(
        initial.teacher,
        initial.student,
        vec![],
    )?);

    let losses = fit(&mut net, cfg, &data.train, Some(teachers), &aug, ctx)?;

    let last = frozen_pass(
        &net,
        teachers,
        cfg,
        &data.train,
        &aug,
        cfg.epochs.saturating_sub(1),
        ctx,
    )?;
    let train_res = EvalBatchResult::new(last.teacher, last.student, vec![])?;

    let test_labels = data.test.labels();
    let zt_test = ensemble_logits_on(teachers, &data.test)?;
    let zs_test = predict_dataset(&net, &data.test)?;
    let mut r = MetricsReport::new();
    metrics::generalization_metrics(&mut r, "test", &zs_test, &test_labels)?;
    metrics::generalization_metrics(&mut r, "teacher_test", &zt_test, &test_labels)?;
    let test_res = EvalBatchResult::new(zt_test, zs_test, test_labels)?;
    metrics::fidelity_metrics(&mut r, "test", &test_res)?;
    metrics::fidelity_metrics(&mut r, "train", &train_res)?;
    r.insert("final_train_loss", last.loss)?;
    r.insert("initial_train_agreement", initial_agreement)?;
    r.insert("examples_per_epoch", last.examples as f64)?;

    let gap = r.get("test_agreement").unwrap_or(0.0) - r.get("train_agreement").unwrap_or(0.0);
    let flagged = gap > FIDELITY_GAP_FLAG;
    if flagged {
        log::warn!(
            "train agreement is {:.1} points below test agreement",
            100.0 * gap
        );
    }
    r.set_meta("role", "student");
    r.set_meta("model_id", network_id(&net));
    r.set_meta(
        "teacher_ids",
        teachers
            .components()
            .iter()
            .map(network_id)
            .collect::<Vec<_>>(),
    );
    r.set_meta("train_examples", data.train.len());
    r.set_meta("fidelity_gap_flag", flagged);
    r.set_meta("epoch_losses", losses.clone());
    r.set_meta("config", json!(cfg));
    Ok(TrainOutcome {
        network: net,
        report: r,
        epoch_losses: losses,
    })
}
