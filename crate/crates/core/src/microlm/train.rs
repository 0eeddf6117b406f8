//! Memorization training: fits the model to every question of a dataset.
//!
//! This stage uses Adam; unlearning updates go through the plain SGD of
//! [`ModelState::apply_gradients`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{answer_log_probs, bind_params, forward, CandidateQuery, ForwardSpec};
use super::{ModelError, ModelState, Result};
use crate::autograd::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this fraction of monitor items is memorized.
    pub target_accuracy: f64,
    /// Epochs to keep training once the target is first reached, so that
    /// memorized items are not sitting on the decision boundary.
    pub consolidation_epochs: usize,
    /// Mass moved from the answer to a uniform distribution over the
    /// vocabulary in the training target; bounds answer confidence.
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 300,
            target_accuracy: 0.95,
            consolidation_epochs: 15,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub accuracy: f64,
    pub reached_target: bool,
    pub history: Vec<EpochStats>,
}

/// Index of the chosen candidate: highest probability, ties to the lowest
/// token id.
pub fn candidate_argmax(candidates: &[usize], probs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        let better =
            probs[i] > probs[best] || (probs[i] == probs[best] && candidates[i] < candidates[best]);
        if better {
            best = i;
        }
    }
    best
}

/// Fraction of `(query, answer)` pairs whose candidate argmax is the answer.
pub fn memorized_fraction<T: Real>(
    state: &ModelState<T>,
    monitor: &[(CandidateQuery<'_>, usize)],
) -> Result<f64> {
    if monitor.is_empty() {
        return Ok(1.0);
    }
    let queries: Vec<CandidateQuery<'_>> = monitor.iter().map(|(q, _)| *q).collect();
    let probs = state.candidate_distributions(&queries)?;
    let hits = monitor
        .iter()
        .zip(&probs)
        .filter(|((q, a), p)| q.candidates[candidate_argmax(q.candidates, p)] == *a)
        .count();
    Ok(hits as f64 / monitor.len() as f64)
}

/// Batch mean of `(1 - eps) * NLL(answer) + eps * mean_v(-log p_v)`.
fn smoothed_nll<T: Real>(
    tape: &mut Tape<T>,
    config: &super::ModelConfig,
    logits: Var,
    answers: &[usize],
    eps: f64,
) -> Result<Var> {
    let lp = answer_log_probs(tape, config, logits, answers)?;
    let nll = tape.mean(lp)?;
    let nll = tape.scale(nll, -(1.0 - eps))?;
    if eps == 0.0 {
        return Ok(nll);
    }
    let lsm = tape.log_softmax(logits)?;
    let uniform = tape.mean(lsm)?;
    let uniform = tape.scale(uniform, -eps)?;
    Ok(tape.add(nll, uniform)?)
}

/// Minimizes the label-smoothed NLL over `examples` with Adam until the memorized
/// fraction of `monitor` reaches the target or the epoch cap is hit. After
/// the target is first met, training runs `consolidation_epochs` more
/// epochs; `reached_target` reflects the final epoch.
pub fn train_memorization<T: Real, R: Rng>(
    state: &mut ModelState<T>,
    examples: &[(&[usize], usize)],
    monitor: &[(CandidateQuery<'_>, usize)],
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(ModelError::Config(format!(
            "label_smoothing must be in [0, 1), got {}",
            cfg.label_smoothing
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(ModelError::BadLearningRate(cfg.lr));
    }
    let mut accuracy = memorized_fraction(state, monitor)?;
    let mut history = Vec::new();
    if accuracy >= cfg.target_accuracy || examples.is_empty() {
        return Ok(TrainReport {
            epochs: 0,
            accuracy,
            reached_target: accuracy >= cfg.target_accuracy,
            history,
        });
    }

    let sizes: Vec<usize> = state.params().iter().map(|(_, t)| t.numel()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut reached_at = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| examples[i].0).collect();
            let answers: Vec<usize> = batch.iter().map(|&i| examples[i].1).collect();
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, state, true);
            let fwd = forward(
                &mut tape,
                &state.config,
                &vars,
                &ForwardSpec {
                    seqs: &seqs,
                    ..Default::default()
                },
            )?;
            let loss = smoothed_nll(
                &mut tape,
                &state.config,
                fwd.logits,
                &answers,
                cfg.label_smoothing,
            )?;
            loss_sum += tape.value(loss).item().f64() * batch.len() as f64;
            tape.backward(loss)?;
            state.collect_grads(&tape, &vars)?;
            state.clip_grad_norm(cfg.clip_norm)?;

            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let grads = state.grads.take().expect("collected above");
            for (i, (_, p)) in state.params.iter_mut().enumerate() {
                for (j, w) in p.data_mut().iter_mut().enumerate() {
                    let g = grads[i][j].f64();
                    m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g;
                    v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g * g;
                    let upd = cfg.lr * (m[i][j] / bc1) / ((v[i][j] / bc2).sqrt() + cfg.adam_eps);
                    *w = *w - T::c(upd);
                }
            }
            state.step += 1;
        }
        accuracy = memorized_fraction(state, monitor)?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            accuracy,
        };
        on_epoch(&stats);
        history.push(stats);
        if accuracy >= cfg.target_accuracy {
            let first = *reached_at.get_or_insert(epoch);
            if epoch >= first + cfg.consolidation_epochs {
                break;
            }
        }
    }
    Ok(TrainReport {
        epochs: history.len(),
        accuracy,
        reached_target: accuracy >= cfg.target_accuracy,
        history,
    })
}
