use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Method, Result, UnlearnConfig, UnlearnError};
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::microlm::{forward, ForwardSpec, ModelState};
use crate::worldgen::{QAItem, Vocab};

/// Frozen copy of the model taken before unlearning starts.
#[derive(Clone, Debug)]
pub struct ReferenceModel<T: Real> {
    state: ModelState<T>,
}

impl<T: Real> ReferenceModel<T> {
    pub fn new(model: &ModelState<T>) -> Self {
        let mut state = model.clone();
        state.clear_grads();
        Self { state }
    }

    pub fn model(&self) -> &ModelState<T> {
        &self.state
    }

    fn answer_log_probs(&self, seqs: &[&[usize]], answers: &[usize]) -> Result<Vec<f64>> {
        let v = self.state.config.vocab_size;
        let logits = self.state.logits_batch(seqs)?;
        Ok(answers
            .iter()
            .enumerate()
            .map(|(b, &a)| {
                let row = &logits[b * v..(b + 1) * v];
                let m = row
                    .iter()
                    .map(|x| x.f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln();
                row[a].f64() - lse
            })
            .collect())
    }

    fn residual(&self, seqs: &[&[usize]], layer: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let vars = crate::microlm::bind_params(&mut tape, &self.state, false);
        let fwd = forward(
            &mut tape,
            &self.state.config,
            &vars,
            &ForwardSpec {
                seqs,
                residual_layer: Some(layer),
                ..Default::default()
            },
        )?;
        Ok(tape
            .value(fwd.residual.expect("residual layer requested"))
            .clone())
    }
}

/// One training question with the alternative answer used by the
/// preference losses: REJECT for DPO_rej, a wrong candidate for DPO_mis,
/// and the answer itself otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossItem<'a> {
    pub question: &'a [usize],
    pub answer: usize,
    pub alt: usize,
}

pub fn make_loss_items<'a, R: Rng>(
    method: Method,
    items: &[&'a QAItem],
    rng: &mut R,
) -> Vec<LossItem<'a>> {
    items
        .iter()
        .map(|it| {
            let alt = match method {
                Method::DpoRej => Vocab::REJECT,
                Method::DpoMis => {
                    let wrong: Vec<usize> = it
                        .candidates
                        .iter()
                        .copied()
                        .filter(|&c| c != it.answer)
                        .collect();
                    *wrong.choose(rng).unwrap_or(&Vocab::REJECT)
                }
                _ => it.answer,
            };
            LossItem {
                question: &it.question,
                answer: it.answer,
                alt,
            }
        })
        .collect()
}

/// Fixed unit direction for RMU's forget target.
pub fn rmu_direction(d_model: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "rmu");
    let v: Vec<f64> = (0..d_model)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Scalar objective on the tape plus the values of its two halves before
/// weighting.
#[derive(Clone, Copy, Debug)]
pub struct MethodLoss {
    pub total: Var,
    pub forget: f64,
    pub retain: f64,
}

/// Builds `forget_weight * F + retain_weight * R` for `cfg.method`, where
/// `params` are `model`'s parameters bound on `tape`.
///
/// | method | F on forget | R on retain |
/// |---|---|---|
/// | ga | `-NLL` | none |
/// | ga_ret, klue | `-NLL` | `NLL` |
/// | dpo_rej, dpo_mis | DPO with `alt` preferred | DPO with the answer preferred |
/// | npo | `(2/β) softplus(β (log π - log π_ref))` | `NLL` |
/// | rmu | `mse(h_l, c·u)` | `mse(h_l, h_l^ref)` |
pub fn loss_for_method<T: Real>(
    tape: &mut Tape<T>,
    params: &[Var],
    model: &ModelState<T>,
    reference: Option<&ReferenceModel<T>>,
    forget: &[LossItem<'_>],
    retain: &[LossItem<'_>],
    cfg: &UnlearnConfig,
) -> Result<MethodLoss> {
    if forget.is_empty() {
        return Err(UnlearnError::EmptyBatch);
    }
    let method = cfg.method;
    let reference = match (method.needs_reference(), reference) {
        (true, None) => return Err(UnlearnError::MissingReference(method)),
        (_, r) => r,
    };
    let retain: &[LossItem<'_>] = if method.uses_retain() { retain } else { &[] };
    let nf = forget.len();
    let seqs: Vec<&[usize]> = forget.iter().chain(retain).map(|it| it.question).collect();
    let fwd = forward(
        tape,
        &model.config,
        params,
        &ForwardSpec {
            seqs: &seqs,
            residual_layer: (method == Method::Rmu).then_some(cfg.rmu_layer),
            ..Default::default()
        },
    )?;
    let answers: Vec<usize> = forget.iter().chain(retain).map(|it| it.answer).collect();
    let alts: Vec<usize> = forget.iter().chain(retain).map(|it| it.alt).collect();
    let vocab = model.config.vocab_size;
    if let Some(&token) = answers.iter().chain(&alts).find(|&&t| t >= vocab) {
        return Err(crate::microlm::ModelError::UnknownToken { token, vocab }.into());
    }

    let (f, r) = match method {
        Method::Ga | Method::GaRet | Method::Klue => {
            let lsm = tape.log_softmax(fwd.logits)?;
            let f = mean_picked(tape, lsm, 0, &answers[..nf], 1.0)?;
            let r = part(
                retain,
                |tape| mean_picked(tape, lsm, nf, &answers[nf..], -1.0),
                tape,
            )?;
            (f, r)
        }
        Method::DpoRej | Method::DpoMis => {
            let reference = reference.expect("checked above");
            let lsm = tape.log_softmax(fwd.logits)?;
            let f = dpo(
                tape,
                reference,
                lsm,
                0,
                &seqs[..nf],
                &alts[..nf],
                &answers[..nf],
                cfg.beta_pref,
            )?;
            let r = part(
                retain,
                |tape| {
                    dpo(
                        tape,
                        reference,
                        lsm,
                        nf,
                        &seqs[nf..],
                        &answers[nf..],
                        &alts[nf..],
                        cfg.beta_pref,
                    )
                },
                tape,
            )?;
            (f, r)
        }
        Method::Npo => {
            let reference = reference.expect("checked above");
            let lsm = tape.log_softmax(fwd.logits)?;
            let picks: Vec<(usize, usize)> = answers[..nf].iter().copied().enumerate().collect();
            let lp = tape.pick(lsm, &picks)?;
            let lref = reference.answer_log_probs(&seqs[..nf], &answers[..nf])?;
            let lref = tape.constant(Tensor::from_f64(&[nf], &lref)?);
            let d = tape.sub(lp, lref)?;
            let d = tape.scale(d, cfg.beta_pref)?;
            let sp = tape.softplus(d)?;
            let m = tape.mean(sp)?;
            let f = tape.scale(m, 2.0 / cfg.beta_pref)?;
            let r = part(
                retain,
                |tape| mean_picked(tape, lsm, nf, &answers[nf..], -1.0),
                tape,
            )?;
            (f, r)
        }
        Method::Rmu => {
            let reference = reference.expect("checked above");
            let h = fwd.residual.expect("residual layer requested");
            let f_rows: usize = seqs[..nf].iter().map(|s| s.len()).sum();
            let total_rows: usize = seqs.iter().map(|s| s.len()).sum();
            let hf = tape.slice(h, 0, f_rows)?;
            let u: Vec<f64> = rmu_direction(model.config.d_model, cfg.seed)
                .iter()
                .map(|x| x * cfg.rmu_c)
                .collect();
            let target = tape.constant(Tensor::from_f64(&[model.config.d_model], &u)?);
            let f = mse(tape, hf, target)?;
            let r = part(
                retain,
                |tape| {
                    let hr = tape.slice(h, f_rows, total_rows)?;
                    let anchor = reference.residual(&seqs[nf..], cfg.rmu_layer)?;
                    let anchor = tape.constant(anchor);
                    mse(tape, hr, anchor)
                },
                tape,
            )?;
            (f, r)
        }
    };

    let f_val = tape.value(f).item().f64();
    let mut total = tape.scale(f, cfg.forget_weight)?;
    let mut r_val = 0.0;
    if let Some(r) = r {
        r_val = tape.value(r).item().f64();
        let rw = tape.scale(r, cfg.retain_weight)?;
        total = tape.add(total, rw)?;
    }
    Ok(MethodLoss {
        total,
        forget: f_val,
        retain: r_val,
    })
}

fn part<T: Real>(
    retain: &[LossItem<'_>],
    build: impl FnOnce(&mut Tape<T>) -> Result<Var>,
    tape: &mut Tape<T>,
) -> Result<Option<Var>> {
    if retain.is_empty() {
        Ok(None)
    } else {
        build(tape).map(Some)
    }
}

/// `sign * mean_b lsm[offset + b, tokens[b]]`; `sign = -1` gives the NLL.
fn mean_picked<T: Real>(
    tape: &mut Tape<T>,
    lsm: Var,
    offset: usize,
    tokens: &[usize],
    sign: f64,
) -> Result<Var> {
    let picks: Vec<(usize, usize)> = tokens
        .iter()
        .enumerate()
        .map(|(b, &t)| (offset + b, t))
        .collect();
    let lp = tape.pick(lsm, &picks)?;
    let m = tape.mean(lp)?;
    Ok(tape.scale(m, sign)?)
}

/// Mean DPO loss preferring `preferred` over `rejected` for rows
/// `offset..offset + seqs.len()`.
#[allow(clippy::too_many_arguments)]
fn dpo<T: Real>(
    tape: &mut Tape<T>,
    reference: &ReferenceModel<T>,
    lsm: Var,
    offset: usize,
    seqs: &[&[usize]],
    preferred: &[usize],
    rejected: &[usize],
    beta: f64,
) -> Result<Var> {
    let n = seqs.len();
    let pw: Vec<(usize, usize)> = preferred
        .iter()
        .enumerate()
        .map(|(b, &t)| (offset + b, t))
        .collect();
    let pl: Vec<(usize, usize)> = rejected
        .iter()
        .enumerate()
        .map(|(b, &t)| (offset + b, t))
        .collect();
    let lw = tape.pick(lsm, &pw)?;
    let ll = tape.pick(lsm, &pl)?;
    let diff = tape.sub(lw, ll)?;
    let rw = reference.answer_log_probs(seqs, preferred)?;
    let rl = reference.answer_log_probs(seqs, rejected)?;
    let rdiff: Vec<f64> = rw.iter().zip(&rl).map(|(a, b)| a - b).collect();
    let rdiff = tape.constant(Tensor::from_f64(&[n], &rdiff)?);
    let margin = tape.sub(diff, rdiff)?;
    let z = tape.scale(margin, -beta)?;
    let sp = tape.softplus(z)?;
    Ok(tape.mean(sp)?)
}

fn mse<T: Real>(tape: &mut Tape<T>, x: Var, target: Var) -> Result<Var> {
    let d = tape.sub(x, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}
