use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attribution::mean_map;
use super::{
    attribute_items, loss_for_method, make_loss_items, random_mask, regularize_with,
    select_neurons, select_unforgotten, Method, NeuronMask, NeuronSelection, ReferenceModel,
    Result, UnlearnConfig, UnlearnError,
};
use crate::autograd::{AutogradError, Real, Tape};
use crate::evalkit::{accuracy, memorization_many};
use crate::microlm::{bind_params, ModelError, ModelState};
use crate::rng::{stream, UNLEARN};
use crate::worldgen::{Dataset, QAItem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub method: Method,
    /// UA on forget base items after the epoch, in percent.
    pub ua: f64,
    pub steps: usize,
    /// Forget items left out by sample selection this epoch.
    pub skipped: Vec<String>,
    /// Mean unweighted forget and retain terms over the epoch's steps.
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub loss: f64,
    pub mean_mask_size: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub initial_ua: f64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl RunHistory {
    pub fn final_ua(&self) -> f64 {
        self.epochs.last().map_or(self.initial_ua, |e| e.ua)
    }
}

/// State at the step that produced a non-finite loss or gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericDiagnostic {
    pub epoch: usize,
    pub step: usize,
    pub batch_ids: Vec<String>,
    pub loss: f64,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub grad_norm: Option<f64>,
    /// Checksum of the parameters before the failing step.
    pub checksum: String,
}

/// [`unlearn_run_with`] without a per-epoch observer.
pub fn unlearn_run<T: Real>(
    model: &ModelState<T>,
    dataset: &Dataset,
    cfg: &UnlearnConfig,
) -> Result<(ModelState<T>, RunHistory)> {
    unlearn_run_with(model, dataset, cfg, |_, _| Ok(()))
}

/// Unlearns the forget split's base items from a copy of `model`.
///
/// Each epoch reshuffles the forget items (only still-memorized ones under
/// sample selection), pairs every forget batch with the next retain batch,
/// takes one SGD step per pair and then measures UA. The run stops once UA
/// is at or below the threshold, or after `max_epochs`. `on_epoch` sees
/// every record with the model as of that epoch.
pub fn unlearn_run_with<T: Real>(
    model: &ModelState<T>,
    dataset: &Dataset,
    cfg: &UnlearnConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState<T>) -> Result<()>,
) -> Result<(ModelState<T>, RunHistory)> {
    cfg.validate(&model.config)?;
    let mut state = model.clone();
    state.clear_grads();
    let forget: Vec<&QAItem> = dataset
        .clusters_in(&dataset.splits.forget)
        .map(|c| &c.base)
        .collect();
    let retain: Vec<&QAItem> = dataset
        .clusters_in(&dataset.splits.retain)
        .map(|c| &c.base)
        .collect();
    if forget.len() != dataset.splits.forget.len() || retain.len() != dataset.splits.retain.len() {
        return Err(UnlearnError::Config(
            "split names a cluster missing from the dataset".into(),
        ));
    }
    let ua = |m: &ModelState<T>| -> Result<f64> {
        Ok(accuracy(&memorization_many(m, &forget)?).unwrap_or(0.0))
    };

    let mut history = RunHistory {
        initial_ua: ua(&state)?,
        ..Default::default()
    };
    if cfg.max_epochs == 0 || forget.is_empty() {
        return Ok((state, history));
    }

    let reference = cfg
        .method
        .needs_reference()
        .then(|| ReferenceModel::new(model));
    let pool: Vec<&QAItem> = forget.iter().chain(&retain).copied().collect();
    let mut rng = stream(cfg.seed, UNLEARN);
    let mut retain_order: Vec<&QAItem> = retain.clone();
    retain_order.shuffle(&mut rng);
    let mut retain_cursor = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut active = if cfg.sample_selection {
            select_unforgotten(&state, &forget)?
        } else {
            forget.clone()
        };
        let skipped: Vec<String> = if cfg.sample_selection {
            let kept: std::collections::HashSet<&str> =
                active.iter().map(|it| it.id.as_str()).collect();
            forget
                .iter()
                .filter(|it| !kept.contains(it.id.as_str()))
                .map(|it| it.id.clone())
                .collect()
        } else {
            Vec::new()
        };
        active.shuffle(&mut rng);

        let (mut f_sum, mut r_sum, mut l_sum, mut mask_sum) = (0.0, 0.0, 0.0, 0usize);
        let mut steps = 0;
        for batch in active.chunks(cfg.batch_size) {
            let retain_batch: Vec<&QAItem> = if cfg.method.uses_retain() && !retain_order.is_empty()
            {
                (0..cfg.batch_size.min(retain_order.len()))
                    .map(|_| {
                        if retain_cursor == retain_order.len() {
                            retain_order.shuffle(&mut rng);
                            retain_cursor = 0;
                        }
                        retain_cursor += 1;
                        retain_order[retain_cursor - 1]
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let mask = match cfg.method {
                Method::Klue => Some(klue_mask(&state, batch, &pool, cfg, &mut rng)?),
                _ => None,
            };

            let forget_items = make_loss_items(cfg.method, batch, &mut rng);
            let retain_items = make_loss_items(cfg.method, &retain_batch, &mut rng);
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, &state, true);
            let diagnostic = |state: &ModelState<T>, losses: [f64; 3], grad_norm| {
                UnlearnError::NonFinite(Box::new(NumericDiagnostic {
                    epoch,
                    step: steps,
                    batch_ids: batch.iter().map(|it| it.id.clone()).collect(),
                    loss: losses[0],
                    forget_loss: losses[1],
                    retain_loss: losses[2],
                    grad_norm,
                    checksum: state.checksum(),
                }))
            };
            let loss = match loss_for_method(
                &mut tape,
                &vars,
                &state,
                reference.as_ref(),
                &forget_items,
                &retain_items,
                cfg,
            ) {
                Err(e) if is_non_finite(&e) => return Err(diagnostic(&state, [f64::NAN; 3], None)),
                other => other?,
            };
            let value = tape.value(loss.total).item().f64();
            let losses = [value, loss.forget, loss.retain];
            if !value.is_finite() {
                return Err(diagnostic(&state, losses, None));
            }
            if tape.has_lineage(loss.total) {
                match tape.backward(loss.total) {
                    Err(AutogradError::NonFinite { .. }) => {
                        return Err(diagnostic(&state, losses, None))
                    }
                    other => other?,
                };
            }
            state.collect_grads(&tape, &vars)?;
            let norm = state.grad_norm()?;
            if !norm.is_finite() {
                return Err(diagnostic(&state, losses, Some(norm)));
            }
            if let Some(c) = cfg.clip_norm {
                state.clip_grad_norm(c)?;
            }
            state.apply_gradients_with_momentum(cfg.lr, cfg.momentum, mask.as_ref())?;

            f_sum += loss.forget;
            r_sum += loss.retain;
            l_sum += value;
            mask_sum += mask.as_ref().map_or(0, NeuronMask::len);
            steps += 1;
        }

        let per = |s: f64| if steps == 0 { 0.0 } else { s / steps as f64 };
        let record = EpochRecord {
            epoch,
            method: cfg.method,
            ua: ua(&state)?,
            steps,
            skipped,
            forget_loss: per(f_sum),
            retain_loss: per(r_sum),
            loss: per(l_sum),
            mean_mask_size: (cfg.method == Method::Klue).then(|| per(mask_sum as f64)),
        };
        on_epoch(&record, &state)?;
        let done = record.ua <= cfg.ua_stop_threshold;
        history.epochs.push(record);
        if done {
            history.stopped_early = true;
            break;
        }
    }
    Ok((state, history))
}

fn is_non_finite(e: &UnlearnError) -> bool {
    matches!(
        e,
        UnlearnError::Autograd(AutogradError::NonFinite { .. })
            | UnlearnError::Model(ModelError::Autograd(AutogradError::NonFinite { .. }))
    )
}

/// Mask for one KLUE step on `batch`.
fn klue_mask<T: Real, R: Rng>(
    model: &ModelState<T>,
    batch: &[&QAItem],
    pool: &[&QAItem],
    cfg: &UnlearnConfig,
    rng: &mut R,
) -> Result<NeuronMask> {
    let (n_layers, d_ffn) = (model.config.n_layers, model.config.d_ffn);
    match &cfg.neuron_selection {
        NeuronSelection::Fixed(mask) => Ok(mask.clone()),
        NeuronSelection::Random => random_mask(n_layers, d_ffn, cfg.neuron_ratio, rng),
        NeuronSelection::Attribution => {
            let mut pairs: Vec<(&[usize], usize)> = batch
                .iter()
                .map(|it| (it.question.as_slice(), it.answer))
                .collect();
            for it in batch {
                let others: Vec<&QAItem> = pool
                    .iter()
                    .copied()
                    .filter(|q| q.answer != it.answer)
                    .collect();
                pairs.extend(
                    others
                        .choose_multiple(rng, cfg.n_mismatch)
                        .map(|q| (q.question.as_slice(), it.answer)),
                );
            }
            let maps = attribute_items(model, &pairs)?;
            let (own, mismatched) = maps.split_at(batch.len());
            let mut base = mean_map(n_layers, d_ffn, own);
            base.batch_ids = batch.iter().map(|it| it.id.clone()).collect();
            let scores = regularize_with(&base, mismatched, cfg.alpha)?;
            select_neurons(&scores, cfg.neuron_ratio)
        }
    }
}

/// History as one JSON record per epoch after a header line.
pub fn write_history(history: &RunHistory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = serde_json::json!({
        "initial_ua": history.initial_ua,
        "stopped_early": history.stopped_early,
        "epochs": history.epochs.len(),
    });
    writeln!(w, "{header}")?;
    for e in &history.epochs {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<RunHistory> {
    #[derive(Deserialize)]
    struct Header {
        initial_ua: f64,
        stopped_early: bool,
        epochs: usize,
    }
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let bad = |detail: String| {
        UnlearnError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, detail))
    };
    let first = lines
        .next()
        .ok_or_else(|| bad("empty history file".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("line 1: {e}")))?;
    let mut epochs = Vec::with_capacity(header.epochs);
    for (i, line) in lines.enumerate() {
        epochs.push(serde_json::from_str(&line?).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
    }
    if epochs.len() != header.epochs {
        return Err(bad(format!(
            "header promises {} epochs, found {}",
            header.epochs,
            epochs.len()
        )));
    }
    Ok(RunHistory {
        initial_ua: header.initial_ua,
        epochs,
        stopped_early: header.stopped_early,
    })
}
