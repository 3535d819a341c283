use std::path::{Path, PathBuf};

use serde::Deserialize;

use distilab::config::ConfigFile;
use distilab::data::{Dataset, SplitPlan};
use distilab::losses::TeacherEnsemble;
use distilab::nn::Network;
use distilab::persist::{self, LogitSidecar};
use distilab::protocols::{
    self, CancelToken, Context, DataSpec, RunConfig, SplitSelection, SubsetSpec, TrainOutcome,
    DEFAULT_LAMBDAS,
};
use distilab::{Error, Result};

use crate::{Command, Format};

const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Which {
    Train,
    Test,
}

/// Data selection for `eval` and `dump-logits`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalData {
    dir: PathBuf,
    split: Which,
    #[serde(default)]
    data_split: Option<SplitSelection>,
    #[serde(default)]
    subset: Option<SubsetSpec>,
}

fn load_eval_data(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Config(format!("{}: {e}", path.display())),
    })?;
    let spec: EvalData = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut dir = spec.dir;
    if dir.is_relative() {
        dir = path.parent().unwrap_or(Path::new(".")).join(dir);
    }
    let (train, test) = Dataset::load_mnist(&dir)?;
    Ok(match spec.split {
        Which::Train => {
            DataSpec {
                dir,
                split: spec.data_split,
                subset: spec.subset,
            }
            .select(&train, &test)?
            .train
        }
        Which::Test => match spec.subset {
            Some(s) => distilab::data::subset(&test, s.n, s.seed)?,
            None => test,
        },
    })
}

fn load_teachers(paths: &[PathBuf]) -> Result<TeacherEnsemble> {
    TeacherEnsemble::new(
        paths
            .iter()
            .map(|p| persist::load_network(p))
            .collect::<Result<_>>()?,
    )
}

fn first_teacher(run: &RunConfig) -> Result<Network> {
    let p = run
        .teachers
        .first()
        .ok_or_else(|| Error::Config("student section lists no teacher checkpoint".into()))?;
    persist::load_network(p)
}

fn save_outcome(out: &Path, name: &str, o: &TrainOutcome) -> Result<()> {
    persist::save_network(&out.join(format!("{name}.ckpt")), &o.network)?;
    persist::write_report(out, name, &o.report)?;
    log::info!("wrote {}", out.join(format!("{name}.ckpt")).display());
    Ok(())
}

/// Keeps the last clean weights of an aborted run next to the outputs.
fn keep_last_good(out: &Path, name: &str, run: &RunConfig, e: Error) -> Error {
    if let Error::TrainingFault {
        last_good: Some(w), ..
    } = &e
    {
        let p = out.join(format!("{name}.last_good.ckpt"));
        match persist::write_checkpoint(&p, &run.arch, run.seed, w) {
            Ok(()) => log::warn!("training aborted; last good weights in {}", p.display()),
            Err(w) => log::warn!("could not save last good weights: {w}"),
        }
    }
    e
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ConfigFile> {
    let mut cfg = ConfigFile::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

/// Runs `f` against the config's output directory, labeling it as partial
/// if the run is interrupted.
fn in_output_dir(cfg: &ConfigFile, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("output dir {}: {e}", out.display())))?;
    let marker = out.join(PARTIAL_MARKER);
    let _ = std::fs::remove_file(&marker);
    let r = f(out);
    if r.as_ref().is_err_and(|e| matches!(e, Error::Interrupted) || matches!(e, Error::TrainingFault { source, .. } if matches!(**source, Error::Interrupted))) {
        let _ = std::fs::write(&marker, "interrupted: outputs in this directory are incomplete\n");
    }
    r
}

pub fn run(cmd: Command, seed: Option<u64>, cancel: CancelToken) -> Result<()> {
    let ctx_for = |cfg: &ConfigFile| Context {
        cancel: cancel.clone(),
        base_dir: Some(cfg.base_dir.clone()),
    };
    match cmd {
        Command::TrainTeacher { config } => {
            let cfg = load_config(&config, seed)?;
            let t = cfg.teacher()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let data = t.data.load()?;
                let o = protocols::train_teacher(t, &data, &ctx)
                    .map_err(|e| keep_last_good(out, "teacher", t, e))?;
                save_outcome(out, "teacher", &o)
            })
        }
        Command::TrainEnsemble { config, m } => {
            let cfg = load_config(&config, seed)?;
            let t = cfg.teacher()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let data = t.data.load()?;
                let o = protocols::train_ensemble(t, m, &data, &ctx)?;
                for (i, member) in o.members.iter().enumerate() {
                    save_outcome(out, &format!("teacher-{i}"), member)?;
                }
                persist::write_report(out, "ensemble", &o.report)
            })
        }
        Command::Distill { config } => {
            let cfg = load_config(&config, seed)?;
            let s = cfg.student()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let teachers = load_teachers(&s.teachers)?;
                let data = s.data.load()?;
                let init = protocols::student_init(s, &teachers)?;
                persist::save_network(&out.join("student.init.ckpt"), &init)?;
                let o = protocols::distill(s, &teachers, &data, &ctx)
                    .map_err(|e| keep_last_good(out, "student", s, e))?;
                save_outcome(out, "student", &o)
            })
        }
        Command::Eval {
            student,
            teacher,
            data,
            out,
        } => {
            let student = persist::load_network(&student)?;
            let teachers = load_teachers(&teacher)?;
            let ds = load_eval_data(&data)?;
            let report = protocols::evaluate(&student, &teachers, &ds)?;
            if let Some(dir) = out {
                persist::write_report(&dir, "eval", &report)?;
            }
            print!("{}", report.to_json()?);
            Ok(())
        }
        Command::Recycle { config } => {
            let cfg = load_config(&config, seed)?;
            let (t, s) = (cfg.teacher()?, cfg.student()?);
            let plan = cfg
                .split
                .clone()
                .unwrap_or_else(|| SplitPlan::halves(t.seed));
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let (train, test) = Dataset::load_mnist(&t.data.dir)?;
                let o = protocols::recycling_protocol(t, s, &train, &test, &plan, &ctx)?;
                save_outcome(out, "teacher", &o.teacher)?;
                for (name, student) in &o.students {
                    save_outcome(out, name, student)?;
                }
                persist::write_json(
                    &out.join("recycle.json"),
                    &serde_json::json!({ "split": plan, "d0_len": o.d0_len, "d1_len": o.d1_len }),
                )
            })
        }
        Command::ConvexSweep { config, lambdas } => {
            let cfg = load_config(&config, seed)?;
            let s = cfg.student()?;
            let lambdas = lambdas
                .or_else(|| cfg.lambdas.clone())
                .unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
            let seeds = cfg.trial_seeds()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let teacher = first_teacher(s)?;
                let data = s.data.load()?;
                let sweep =
                    protocols::convex_init_sweep(s, &teacher, &data, &lambdas, &seeds, &ctx)?;
                persist::write_json(&out.join("convex.json"), &sweep)?;
                persist::atomic_write(&out.join("convex.csv"), sweep.to_csv().as_bytes())
            })
        }
        Command::Surface {
            teacher,
            init,
            final_,
            config,
        } => {
            let cfg = load_config(&config, seed)?;
            let s = cfg.student()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let teacher = persist::load_network(&teacher)?;
                let init = persist::read_checkpoint(&init)?.weights;
                let final_ = persist::read_checkpoint(&final_)?.weights;
                let data = s.data.load()?;
                let grid = protocols::loss_surface(
                    &teacher,
                    &init,
                    &final_,
                    &data.train,
                    &cfg.surface,
                    &ctx,
                )?;
                persist::atomic_write(&out.join("surface.csv"), grid.to_csv().as_bytes())?;
                persist::atomic_write(&out.join("surface.json"), grid.header_json()?.as_bytes())
            })
        }
        Command::OptAblation { config } => {
            let cfg = load_config(&config, seed)?;
            let s = cfg.student()?;
            let spec = cfg
                .ablation
                .clone()
                .ok_or_else(|| Error::Config("config has no `ablation` section".into()))?;
            let seeds = cfg.trial_seeds()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let teachers = load_teachers(&s.teachers)?;
                let data = s.data.load()?;
                let r = protocols::optimizer_ablation(
                    s,
                    &teachers,
                    &data,
                    &spec.optimizers,
                    &spec.budgets,
                    &seeds,
                    &ctx,
                )?;
                persist::write_json(&out.join("ablation.json"), &r)?;
                persist::atomic_write(&out.join("ablation.csv"), r.to_csv().as_bytes())
            })
        }
        Command::SharedInit { config } => {
            let cfg = load_config(&config, seed)?;
            let s = cfg.student()?;
            let seeds = cfg.trial_seeds()?;
            let ctx = ctx_for(&cfg);
            in_output_dir(&cfg, |out| {
                let teacher = first_teacher(s)?;
                let data = s.data.load()?;
                let r = protocols::shared_init_study(
                    s,
                    &teacher,
                    &data,
                    &seeds,
                    cfg.cka_examples,
                    &ctx,
                )?;
                persist::write_json(&out.join("shared_init.json"), &r)?;
                persist::atomic_write(&out.join("shared_init.csv"), r.to_csv().as_bytes())
            })
        }
        Command::DumpLogits { ckpt, data, out } => {
            let net = persist::load_network(&ckpt)?;
            let ds = load_eval_data(&data)?;
            let logits = protocols::predict_dataset(&net, &ds)?;
            let sidecar = LogitSidecar {
                model_id: protocols::network_id(&net),
                split: ds.split_tag().to_string(),
                seed: net.seed(),
                rows: ds.len(),
                classes: net.classes(),
                tau_note:
                    "raw logits at tau = 1; divide by tau before softmax for tempered targets"
                        .into(),
            };
            persist::write_logit_dump(&out, &logits, &ds.labels(), &sidecar)
        }
        Command::Report { input, format } => {
            let reports = persist::collect_reports(&input)?;
            if reports.is_empty() {
                return Err(Error::MissingFile(input.join("*.json")));
            }
            match format {
                Format::Csv => print!("{}", persist::summary_csv(&reports)),
                Format::Json => print!("{}", persist::summary_json(&reports)?),
            }
            Ok(())
        }
        Command::PlotSurface { input, out } => persist::plot_surface(&input, &out),
    }
}
