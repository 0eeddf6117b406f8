//! Subcommands. Each one reads its inputs, runs a pipeline stage, and
//! leaves a manifest plus a re-runnable config echo in every directory it
//! writes to.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use unlearnlab::autograd::Real;
use unlearnlab::evalkit::{emit_report, EvalReport, SuperficialVerdict};
use unlearnlab::microlm::{
    read_checkpoint, write_checkpoint, EpochStats, ModelState, CHECKPOINT_VERSION,
};
use unlearnlab::unlearn::{
    unlearn_run_with, write_history, NeuronSelection, RunHistory, UnlearnError,
};
use unlearnlab::worldgen::{read_dataset, write_dataset, Dataset, KindCounts, FORMAT_VERSION};

use crate::pipeline::{evaluate, generate, kind_accuracy, train_model};
use crate::{CliError, Precision, RunConfig};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const UNLEARNED_CHECKPOINT: &str = "unlearned.ckpt";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Keys a sweep may not vary: they select inputs or outputs, not the run.
const UNSWEEPABLE: [&str; 7] = [
    "data_dir",
    "checkpoint",
    "out_dir",
    "precision",
    "sweep_key",
    "sweep_values",
    "eval_checkpoint",
];

/// `<command>.manifest.json` and `<command>.conf` in `dir`. The `.conf`
/// file reproduces the run with `--config`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    outputs: serde_json::Value,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "dataset_format": FORMAT_VERSION,
        "checkpoint_format": CHECKPOINT_VERSION,
        "seeds": cfg.seeds()?,
        "config": cfg.as_map(),
        "outputs": outputs,
    });
    write_json(&dir.join(format!("{command}.manifest.json")), &manifest)?;
    fs::write(dir.join(format!("{command}.conf")), cfg.to_text())?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(anyhow::Error::from)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.data_dir();
    read_dataset(&dir)
        .map_err(|e| CliError::Other(anyhow::anyhow!("reading dataset in {}: {e}", dir.display())))
}

fn load_model<T: Real>(path: &Path) -> Result<ModelState<T>, CliError> {
    read_checkpoint(path)
        .map(|m| m.into_precision())
        .map_err(|e| {
            CliError::Other(anyhow::anyhow!(
                "reading checkpoint {}: {e}",
                path.display()
            ))
        })
}

#[derive(Clone, Debug, Serialize)]
pub struct GenSummary {
    pub counts: KindCounts,
    pub forget: usize,
    pub retain: usize,
    pub test: usize,
    pub warnings: Vec<String>,
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    let world = generate(cfg)?;
    let ds = &world.dataset;
    let dir = cfg.data_dir();
    write_dataset(ds, &dir)?;
    let summary = GenSummary {
        counts: ds.counts(),
        forget: ds.splits.forget.len(),
        retain: ds.splits.retain.len(),
        test: ds.splits.test.len(),
        warnings: world.warnings.clone(),
    };
    write_manifest(
        &dir,
        "gen",
        cfg,
        serde_json::to_value(&summary).map_err(anyhow::Error::from)?,
    )?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let c = &summary.counts;
    println!("kind          items");
    println!("base          {}", c.base);
    println!("paraphrased   {}", c.paraphrased);
    println!("multihop      {}", c.multihop);
    println!("same_answer   {}", c.same_answer);
    println!(
        "clusters {} (forget {}, retain {}, test {}); vocabulary {}",
        c.clusters,
        summary.forget,
        summary.retain,
        summary.test,
        ds.vocab.size()
    );
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub step_start: u64,
    pub step_end: u64,
    /// Percent of base items memorized at the end.
    pub base_accuracy: f64,
    pub target_accuracy: f64,
    pub reached_target: bool,
    pub kind_accuracy: BTreeMap<String, f64>,
    pub history: Vec<EpochStats>,
}

/// Trains to the memorization target and writes the checkpoint even when
/// the target is missed, so the run can be resumed.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    match cfg.precision()? {
        Precision::F32 => train_impl::<f32>(cfg),
        Precision::F64 => train_impl::<f64>(cfg),
    }
}

fn train_impl<T: Real>(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let ds = load_dataset(cfg)?;
    let resume = match cfg.get("resume") {
        "" => None,
        p => Some(load_model::<T>(Path::new(p))?),
    };
    let step_start = resume.as_ref().map_or(0, |m| m.step);
    let (model, report) = train_model(cfg, &ds, resume, |s| {
        if s.epoch % 10 == 0 {
            eprintln!(
                "epoch {:>4}  loss {:.4}  base {:.1}%",
                s.epoch,
                s.mean_loss,
                100.0 * s.accuracy
            );
        }
    })?;

    let ckpt = cfg.checkpoint_path();
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir)?;
    write_checkpoint(&model, &ckpt)?;
    let target = cfg.train_config()?.target_accuracy;
    let summary = TrainSummary {
        epochs: report.epochs,
        step_start,
        step_end: model.step,
        base_accuracy: 100.0 * report.accuracy,
        target_accuracy: 100.0 * target,
        reached_target: report.reached_target,
        kind_accuracy: kind_accuracy(&model, &ds)?,
        history: report.history,
    };
    write_json(&dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    write_manifest(
        &dir,
        "train",
        cfg,
        json!({
            "checkpoint": ckpt,
            "epochs": summary.epochs,
            "base_accuracy": summary.base_accuracy,
            "reached_target": summary.reached_target,
            "step_start": summary.step_start,
            "step_end": summary.step_end,
        }),
    )?;
    println!(
        "trained {} epochs (steps {}..{}); base memorization {:.2}% (target {:.2}%)",
        summary.epochs,
        summary.step_start,
        summary.step_end,
        summary.base_accuracy,
        summary.target_accuracy
    );
    for (kind, acc) in &summary.kind_accuracy {
        println!("  {kind:<12} {acc:.2}%");
    }
    if !summary.reached_target {
        let tail: Vec<String> = summary
            .history
            .iter()
            .rev()
            .take(3)
            .map(|s| {
                format!(
                    "epoch {} loss {:.4} base {:.1}%",
                    s.epoch,
                    s.mean_loss,
                    100.0 * s.accuracy
                )
            })
            .collect();
        return Err(CliError::Convergence(format!(
            "base memorization {:.2}% is below the {:.2}% target after {} epochs; last epochs: {}; checkpoint kept at {}",
            summary.base_accuracy,
            summary.target_accuracy,
            summary.epochs,
            tail.join("; "),
            ckpt.display()
        )));
    }
    Ok(summary)
}

/// What one unlearning run left behind.
#[derive(Clone, Debug)]
pub struct UnlearnSummary {
    pub label: String,
    pub history: RunHistory,
    pub report: EvalReport,
    pub verdicts: Vec<SuperficialVerdict>,
}

impl UnlearnSummary {
    pub fn superficial_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.is_superficial).count()
    }
}

fn method_label(cfg: &RunConfig) -> Result<String, CliError> {
    let ucfg = cfg.unlearn_config()?;
    Ok(match ucfg.neuron_selection {
        NeuronSelection::Random if ucfg.method == unlearnlab::unlearn::Method::Klue => {
            format!("{}_random", ucfg.method)
        }
        _ => ucfg.method.to_string(),
    })
}

/// Unlearns from the memorized checkpoint, then evaluates against it.
pub fn cmd_unlearn(cfg: &RunConfig) -> Result<UnlearnSummary, CliError> {
    match cfg.precision()? {
        Precision::F32 => {
            let ds = load_dataset(cfg)?;
            let model = load_model::<f32>(&cfg.checkpoint_path())?;
            unlearn_into(cfg, &model, &ds, &cfg.out_dir())
        }
        Precision::F64 => {
            let ds = load_dataset(cfg)?;
            let model = load_model::<f64>(&cfg.checkpoint_path())?;
            unlearn_into(cfg, &model, &ds, &cfg.out_dir())
        }
    }
}

/// One unlearning run writing its report, history, final checkpoint and
/// manifest into `dir`. A non-finite step leaves a diagnostic file instead.
pub fn unlearn_into<T: Real>(
    cfg: &RunConfig,
    model: &ModelState<T>,
    ds: &Dataset,
    dir: &Path,
) -> Result<UnlearnSummary, CliError> {
    let ucfg = cfg.unlearn_config()?;
    let every: usize = cfg.parse("checkpoint_every")?;
    let label = method_label(cfg)?;
    fs::create_dir_all(dir)?;
    let run = unlearn_run_with(model, ds, &ucfg, |rec, state| {
        eprintln!(
            "{label} epoch {:>3}  UA {:6.2}  forget {:.4}  retain {:.4}",
            rec.epoch, rec.ua, rec.forget_loss, rec.retain_loss
        );
        if every > 0 && rec.epoch % every == 0 {
            write_checkpoint(state, &dir.join(format!("epoch-{}.ckpt", rec.epoch)))?;
        }
        Ok(())
    });
    let (after, history) = match run {
        Ok(r) => r,
        Err(UnlearnError::NonFinite(diag)) => {
            write_json(&dir.join(DIAGNOSTIC_FILE), &diag)?;
            write_manifest(
                dir,
                "unlearn",
                cfg,
                json!({ "status": "numeric_abort", "diagnostic": DIAGNOSTIC_FILE }),
            )?;
            return Err(UnlearnError::NonFinite(diag).into());
        }
        Err(e) => return Err(e.into()),
    };
    let (report, verdicts) = evaluate(model, &after, ds)?;
    write_checkpoint(&after, &dir.join(UNLEARNED_CHECKPOINT))?;
    write_history(&history, &dir.join(HISTORY_FILE))?;
    emit_report(&label, &report, &verdicts, dir)?;
    let summary = UnlearnSummary {
        label,
        history,
        report,
        verdicts,
    };
    write_manifest(
        dir,
        "unlearn",
        cfg,
        json!({
            "status": if summary.history.stopped_early { "stopped" } else { "epoch_cap" },
            "method": ucfg.method,
            "lr": ucfg.lr,
            "unlearn_seed": ucfg.seed,
            "epochs": summary.history.epochs.len(),
            "initial_ua": summary.history.initial_ua,
            "final_ua": summary.history.final_ua(),
            "score": summary.report.score,
            "superficial_clusters": summary.superficial_count(),
        }),
    )?;
    print_report(&summary.label, &summary.report);
    println!(
        "  epochs {} ({}), superficial forget clusters {}/{}",
        summary.history.epochs.len(),
        if summary.history.stopped_early {
            "stopped"
        } else {
            "epoch cap"
        },
        summary.superficial_count(),
        summary.verdicts.len()
    );
    Ok(summary)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: UA {} UA‡ {} TA {} SA {} MA_f {} MA_t {} MA {} Score {}",
        pct(r.ua),
        pct(r.ua_ext),
        pct(r.ta),
        pct(r.sa),
        pct(r.ma_f),
        pct(r.ma_t),
        pct(r.ma),
        pct(r.score)
    );
}

/// Scores `eval_checkpoint` against `checkpoint` without training.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(EvalReport, Vec<SuperficialVerdict>), CliError> {
    match cfg.precision()? {
        Precision::F32 => eval_impl::<f32>(cfg),
        Precision::F64 => eval_impl::<f64>(cfg),
    }
}

fn eval_impl<T: Real>(cfg: &RunConfig) -> Result<(EvalReport, Vec<SuperficialVerdict>), CliError> {
    let ds = load_dataset(cfg)?;
    let before_path = cfg.checkpoint_path();
    let after_path = match cfg.get("eval_checkpoint") {
        "" => before_path.clone(),
        p => PathBuf::from(p),
    };
    let before = load_model::<T>(&before_path)?;
    let after = load_model::<T>(&after_path)?;
    let (report, verdicts) = evaluate(&before, &after, &ds)?;
    let dir = cfg.out_dir();
    emit_report("eval", &report, &verdicts, &dir)?;
    write_manifest(
        &dir,
        "eval",
        cfg,
        json!({ "before": before_path, "after": after_path, "score": report.score }),
    )?;
    print_report("eval", &report);
    Ok((report, verdicts))
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    /// `stopped`, `epoch_cap` or `numeric_abort`.
    pub status: String,
    pub run: Option<UnlearnSummary>,
}

/// One unlearning run per value of `sweep_key`, each in its own
/// subdirectory, plus one CSV row per value. A numeric abort is recorded
/// as a row and does not end the sweep.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let key = cfg.get("sweep_key").to_string();
    if UNSWEEPABLE.contains(&key.as_str()) {
        return Err(CliError::Config(format!(
            "sweep_key {key:?} cannot be swept"
        )));
    }
    let values = cfg.sweep_values();
    if values.is_empty() {
        return Err(CliError::Config("sweep_values is empty".into()));
    }
    let subs = values
        .iter()
        .map(|v| {
            let sub = cfg.clone().with(&key, v)?;
            sub.unlearn_config()?;
            Ok(sub)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    match cfg.precision()? {
        Precision::F32 => sweep_impl::<f32>(cfg, &key, &values, &subs),
        Precision::F64 => sweep_impl::<f64>(cfg, &key, &values, &subs),
    }
}

fn sweep_impl<T: Real>(
    cfg: &RunConfig,
    key: &str,
    values: &[String],
    subs: &[RunConfig],
) -> Result<Vec<SweepRow>, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model::<T>(&cfg.checkpoint_path())?;
    let out = cfg.out_dir();
    let mut rows = Vec::new();
    for (value, sub) in values.iter().zip(subs) {
        let dir = out.join(format!("{key}={value}"));
        let row = match unlearn_into(sub, &model, &ds, &dir) {
            Ok(run) => SweepRow {
                value: value.clone(),
                status: if run.history.stopped_early {
                    "stopped"
                } else {
                    "epoch_cap"
                }
                .into(),
                run: Some(run),
            },
            Err(CliError::Numeric(msg)) => {
                eprintln!("{key}={value}: {msg}");
                SweepRow {
                    value: value.clone(),
                    status: "numeric_abort".into(),
                    run: None,
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    write_sweep_csv(key, &rows, &out.join(SWEEP_FILE))?;
    write_manifest(
        &out,
        "sweep",
        cfg,
        json!({
            "table": SWEEP_FILE,
            "runs": rows.iter().map(|r| json!({ "value": r.value, "status": r.status })).collect::<Vec<_>>(),
        }),
    )?;
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 14] = [
    "key",
    "value",
    "method",
    "status",
    "epochs",
    "UA",
    "UA‡",
    "TA",
    "SA",
    "MA_f",
    "MA_t",
    "MA",
    "Score",
    "superficial",
];

fn write_sweep_csv(key: &str, rows: &[SweepRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(anyhow::Error::from)?;
    w.write_record(SWEEP_HEADER).map_err(anyhow::Error::from)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for row in rows {
        let mut rec = vec![key.to_string(), row.value.clone()];
        match &row.run {
            Some(run) => {
                let r = &run.report;
                rec.push(run.label.clone());
                rec.push(row.status.clone());
                rec.push(run.history.epochs.len().to_string());
                rec.extend([r.ua, r.ua_ext, r.ta, r.sa, r.ma_f, r.ma_t, r.ma, r.score].map(cell));
                rec.push(run.superficial_count().to_string());
            }
            None => {
                rec.push(String::new());
                rec.push(row.status.clone());
                rec.extend(std::iter::repeat_n(String::new(), SWEEP_HEADER.len() - 4));
            }
        }
        w.write_record(&rec).map_err(anyhow::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
