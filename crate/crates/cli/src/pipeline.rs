//! The experiment stages as library calls; the subcommands add file I/O.

use std::collections::BTreeMap;

use unlearnlab::autograd::Real;
use unlearnlab::evalkit::{
    accuracy, classify_superficial, memorization_many, metric_suite, EvalReport, SuperficialVerdict,
};
use unlearnlab::microlm::{
    init_model, train_memorization, CandidateQuery, EpochStats, ModelState, TrainReport,
};
use unlearnlab::rng::stream;
use unlearnlab::unlearn::{unlearn_run_with, EpochRecord, RunHistory, UnlearnConfig};
use unlearnlab::worldgen::{generate_world, Dataset, ItemKind, World};

use crate::{CliError, RunConfig};

pub fn generate(cfg: &RunConfig) -> Result<World, CliError> {
    Ok(generate_world(&cfg.world_config()?, cfg.seeds()?.world)?)
}

/// Base questions of every cluster with their answers.
pub fn base_monitor(dataset: &Dataset) -> Vec<(CandidateQuery<'_>, usize)> {
    dataset
        .clusters
        .iter()
        .map(|c| {
            (
                CandidateQuery {
                    question: &c.base.question,
                    candidates: &c.base.candidates,
                },
                c.base.answer,
            )
        })
        .collect()
}

/// Memorizes every training pair of `dataset`, starting from `resume` or
/// from a fresh model. Batch order comes from the model stream.
pub fn train_model<T: Real>(
    cfg: &RunConfig,
    dataset: &Dataset,
    resume: Option<ModelState<T>>,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelState<T>, TrainReport), CliError> {
    let model_cfg = cfg.model_config(dataset.vocab.size())?;
    let mut model = match resume {
        Some(m) => {
            if m.config.vocab_size != model_cfg.vocab_size {
                return Err(CliError::Config(format!(
                    "resume checkpoint has vocabulary {}, dataset has {}",
                    m.config.vocab_size, model_cfg.vocab_size
                )));
            }
            m
        }
        None => init_model(&model_cfg)?,
    };
    let train_cfg = cfg.train_config()?;
    let pairs = dataset.training_pairs();
    let monitor = base_monitor(dataset);
    let mut rng = stream(cfg.seeds()?.model, "order");
    let report = train_memorization(&mut model, &pairs, &monitor, &train_cfg, &mut rng, on_epoch)?;
    Ok((model, report))
}

/// Memorization accuracy in percent per item kind over all clusters.
pub fn kind_accuracy<T: Real>(
    model: &ModelState<T>,
    dataset: &Dataset,
) -> Result<BTreeMap<String, f64>, CliError> {
    let mut out = BTreeMap::new();
    for (kind, name) in [
        (ItemKind::Base, "base"),
        (ItemKind::Paraphrased, "paraphrased"),
        (ItemKind::Multihop, "multihop"),
        (ItemKind::SameAnswer, "same_answer"),
    ] {
        let items: Vec<_> = dataset
            .clusters
            .iter()
            .flat_map(|c| c.items())
            .filter(|it| it.kind == kind)
            .collect();
        if let Some(a) = accuracy(&memorization_many(model, &items)?) {
            out.insert(name.to_string(), a);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome<T: Real> {
    pub model: ModelState<T>,
    pub history: RunHistory,
    pub report: EvalReport,
    pub verdicts: Vec<SuperficialVerdict>,
}

/// Unlearns the forget split, then scores the result and classifies every
/// forget cluster against the model as it was before.
pub fn unlearn_eval<T: Real>(
    model: &ModelState<T>,
    dataset: &Dataset,
    ucfg: &UnlearnConfig,
    on_epoch: impl FnMut(&EpochRecord, &ModelState<T>) -> unlearnlab::unlearn::Result<()>,
) -> Result<UnlearnOutcome<T>, CliError> {
    let (after, history) = unlearn_run_with(model, dataset, ucfg, on_epoch)?;
    let (report, verdicts) = evaluate(model, &after, dataset)?;
    Ok(UnlearnOutcome {
        model: after,
        history,
        report,
        verdicts,
    })
}

pub fn evaluate<T: Real>(
    before: &ModelState<T>,
    after: &ModelState<T>,
    dataset: &Dataset,
) -> Result<(EvalReport, Vec<SuperficialVerdict>), CliError> {
    let report = metric_suite(before, after, dataset)?;
    let verdicts = classify_superficial(before, after, &dataset.clusters, &dataset.splits.forget)?;
    Ok((report, verdicts))
}
