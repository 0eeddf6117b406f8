use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{param_index, ModelConfig, ModelError, ModelState, ParamKey, ParamRole, Result};
use crate::autograd::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const EVAL_CHUNK: usize = 128;

/// Edit applied to a captured FFN hidden activation before it feeds the
/// output projection. The captured value itself is left as computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Intervention {
    /// Zero the neuron at every position of every sequence.
    Zero { layer: usize, neuron: usize },
    /// Add `delta` at one row of the concatenated batch.
    Add {
        layer: usize,
        row: usize,
        neuron: usize,
        delta: f64,
    },
}

#[derive(Clone, Debug, Default)]
pub struct ForwardSpec<'a> {
    pub seqs: &'a [&'a [usize]],
    pub interventions: &'a [Intervention],
    /// Capture the residual stream after this block.
    pub residual_layer: Option<usize>,
    /// Re-root the graph at the input embeddings so activation gradients
    /// exist even when parameters are bound as constants.
    pub track_input: bool,
}

/// Handles into the tape produced by [`forward`]. Sequences are stacked
/// row-wise; `segments[b]` is `(first_row, len)` of sequence `b`.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub hidden: Vec<Var>,
    pub residual: Option<Var>,
    pub input: Var,
    pub segments: Vec<(usize, usize)>,
}

/// Per-layer FFN hidden activations `(seq_len, d_ffn)` of one question,
/// with `∂P(a|q)/∂h` when computed by [`ModelState::activation_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord<T> {
    pub hidden: Vec<Tensor<T>>,
    pub grads: Option<Vec<Tensor<T>>>,
}

#[derive(Clone, Copy, Debug)]
pub struct CandidateQuery<'a> {
    pub question: &'a [usize],
    pub candidates: &'a [usize],
}

/// Puts every parameter on `tape` in layout order; trainable parameters
/// receive gradients, frozen ones are constants.
pub fn bind_params<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    trainable: bool,
) -> Vec<Var> {
    state
        .params()
        .iter()
        .map(|(_, t)| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn check_sequence(config: &ModelConfig, seq: &[usize]) -> Result<()> {
    if seq.is_empty() {
        return Err(ModelError::EmptyQuestion);
    }
    if seq.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq.len(),
            max: config.max_seq_len,
        });
    }
    check_tokens(config, seq)
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= config.vocab_size) {
        Some(&token) => Err(ModelError::UnknownToken {
            token,
            vocab: config.vocab_size,
        }),
        None => Ok(()),
    }
}

/// Runs the transformer over `spec.seqs` and returns next-token logits
/// `(batch, vocab)` at the last position of each sequence.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &[Var],
    spec: &ForwardSpec<'_>,
) -> Result<Forward> {
    if spec.seqs.is_empty() {
        return Err(ModelError::EmptyQuestion);
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(spec.seqs.len());
    for seq in spec.seqs {
        check_sequence(config, seq)?;
        segments.push((ids.len(), seq.len()));
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
    }
    let rows = ids.len();
    for iv in spec.interventions {
        let (layer, neuron, row) = match *iv {
            Intervention::Zero { layer, neuron } => (layer, neuron, 0),
            Intervention::Add {
                layer, row, neuron, ..
            } => (layer, neuron, row),
        };
        if layer >= config.n_layers || neuron >= config.d_ffn || row >= rows {
            return Err(ModelError::NeuronOutOfRange { layer, neuron });
        }
    }

    let p = |layer: Option<usize>, role: ParamRole| {
        params[param_index(config, ParamKey { layer, role })]
    };
    let tok = tape.embedding(p(None, ParamRole::TokenEmbedding), &ids)?;
    let pos = tape.embedding(p(None, ParamRole::PositionEmbedding), &positions)?;
    let mut x = tape.add(tok, pos)?;
    if spec.track_input {
        let value = tape.value(x).clone();
        x = tape.param(value);
    }
    let input = x;

    let mut hidden = Vec::with_capacity(config.n_layers);
    let mut residual = None;
    for l in 0..config.n_layers {
        let lp = |role| p(Some(l), role);
        let a = tape.layer_norm(
            x,
            lp(ParamRole::AttnNormGain),
            lp(ParamRole::AttnNormBias),
            LN_EPS,
        )?;
        let q = tape.matmul_nt(a, lp(ParamRole::Query))?;
        let k = tape.matmul_nt(a, lp(ParamRole::Key))?;
        let v = tape.matmul_nt(a, lp(ParamRole::Value))?;
        let att = tape.causal_attention(q, k, v, &segments, config.n_heads)?;
        let o = tape.matmul_nt(att, lp(ParamRole::AttnOut))?;
        let o = tape.add(o, lp(ParamRole::AttnOutBias))?;
        x = tape.add(x, o)?;

        let b = tape.layer_norm(
            x,
            lp(ParamRole::FfnNormGain),
            lp(ParamRole::FfnNormBias),
            LN_EPS,
        )?;
        let pre = tape.matmul_nt(b, lp(ParamRole::FfnIn))?;
        let pre = tape.add(pre, lp(ParamRole::FfnInBias))?;
        let h = tape.gelu(pre)?;
        hidden.push(h);
        let h = apply_interventions(tape, h, l, rows, config.d_ffn, spec.interventions)?;
        let f = tape.matmul_nt(h, lp(ParamRole::FfnOut))?;
        let f = tape.add(f, lp(ParamRole::FfnOutBias))?;
        x = tape.add(x, f)?;
        if spec.residual_layer == Some(l) {
            residual = Some(x);
        }
    }

    let last: Vec<usize> = segments.iter().map(|&(s, len)| s + len - 1).collect();
    let last = tape.gather_rows(x, &last)?;
    let last = tape.layer_norm(
        last,
        p(None, ParamRole::FinalNormGain),
        p(None, ParamRole::FinalNormBias),
        LN_EPS,
    )?;
    let logits = tape.matmul_nt(last, p(None, ParamRole::Head))?;
    Ok(Forward {
        logits,
        hidden,
        residual,
        input,
        segments,
    })
}

fn apply_interventions<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    layer: usize,
    rows: usize,
    d_ffn: usize,
    interventions: &[Intervention],
) -> Result<Var> {
    let mut zero = None::<Vec<T>>;
    let mut delta = None::<Vec<T>>;
    for iv in interventions {
        match *iv {
            Intervention::Zero { layer: l, neuron } if l == layer => {
                let m = zero.get_or_insert_with(|| vec![T::one(); rows * d_ffn]);
                (0..rows).for_each(|r| m[r * d_ffn + neuron] = T::zero());
            }
            Intervention::Add {
                layer: l,
                row,
                neuron,
                delta: dv,
            } if l == layer => {
                let d = delta.get_or_insert_with(|| vec![T::zero(); rows * d_ffn]);
                d[row * d_ffn + neuron] = d[row * d_ffn + neuron] + T::c(dv);
            }
            _ => {}
        }
    }
    let mut h = h;
    if let Some(m) = zero {
        let m = tape.constant(Tensor::new(vec![rows, d_ffn], m)?);
        h = tape.mul(h, m)?;
    }
    if let Some(d) = delta {
        let d = tape.constant(Tensor::new(vec![rows, d_ffn], d)?);
        h = tape.add(h, d)?;
    }
    Ok(h)
}

/// `log P(answers[b] | seqs[b])` over the full vocabulary, shape `(batch,)`.
pub fn answer_log_probs<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    logits: Var,
    answers: &[usize],
) -> Result<Var> {
    check_tokens(config, answers)?;
    let lp = tape.log_softmax(logits)?;
    let picks: Vec<(usize, usize)> = answers.iter().copied().enumerate().collect();
    Ok(tape.pick(lp, &picks)?)
}

fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let m = logits
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v.f64() - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl<T: Real> ModelState<T> {
    /// Candidate-restricted answer distribution for one question.
    ///
    /// The full-vocabulary softmax renormalized over the candidates equals a
    /// softmax over the candidate logits, which is what is computed.
    pub fn answer_distribution(
        &self,
        question: &[usize],
        candidates: &[usize],
        capture: bool,
    ) -> Result<(BTreeMap<usize, f64>, Option<ActivationRecord<T>>)> {
        if candidates.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        check_tokens(&self.config, candidates)?;
        let mut tape = Tape::no_grad();
        let vars = bind_params(&mut tape, self, false);
        let seqs = [question];
        let fwd = forward(
            &mut tape,
            &self.config,
            &vars,
            &ForwardSpec {
                seqs: &seqs,
                ..Default::default()
            },
        )?;
        let logits = tape.value(fwd.logits).data();
        let mut distinct: Vec<usize> = candidates.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let sub: Vec<T> = distinct.iter().map(|&c| logits[c]).collect();
        let probs = distinct.into_iter().zip(softmax_f64(&sub)).collect();
        let record = capture.then(|| ActivationRecord {
            hidden: fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            grads: None,
        });
        Ok((probs, record))
    }

    /// Candidate-restricted probabilities for many queries, in each query's
    /// candidate order. Evaluated in fixed-size chunks without gradients.
    pub fn candidate_distributions(&self, queries: &[CandidateQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(EVAL_CHUNK) {
            for q in chunk {
                if q.candidates.is_empty() {
                    return Err(ModelError::EmptyCandidates);
                }
                check_tokens(&self.config, q.candidates)?;
            }
            let logits =
                self.logits_batch(&chunk.iter().map(|q| q.question).collect::<Vec<_>>())?;
            let v = self.config.vocab_size;
            for (b, q) in chunk.iter().enumerate() {
                let row = &logits[b * v..(b + 1) * v];
                let sub: Vec<T> = q.candidates.iter().map(|&c| row[c]).collect();
                out.push(softmax_f64(&sub));
            }
        }
        Ok(out)
    }

    /// Next-token logits `(batch, vocab)` flattened row-major.
    pub fn logits_batch(&self, seqs: &[&[usize]]) -> Result<Vec<T>> {
        let mut tape = Tape::no_grad();
        let vars = bind_params(&mut tape, self, false);
        let fwd = forward(
            &mut tape,
            &self.config,
            &vars,
            &ForwardSpec {
                seqs,
                ..Default::default()
            },
        )?;
        Ok(tape.value(fwd.logits).data().to_vec())
    }

    /// Full-vocabulary next-token distribution after `question`.
    pub fn vocab_distribution(&self, question: &[usize]) -> Result<Vec<f64>> {
        Ok(softmax_f64(&self.logits_batch(&[question])?))
    }

    /// `-log P(answer | question)` over the full vocabulary, on `tape`.
    pub fn lm_loss(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        question: &[usize],
        answer: usize,
    ) -> Result<Var> {
        let seqs = [question];
        let fwd = forward(
            tape,
            &self.config,
            params,
            &ForwardSpec {
                seqs: &seqs,
                ..Default::default()
            },
        )?;
        let lp = answer_log_probs(tape, &self.config, fwd.logits, &[answer])?;
        let s = tape.sum(lp)?;
        Ok(tape.scale(s, -1.0)?)
    }

    /// Value of [`Self::lm_loss`] without recording.
    pub fn lm_loss_value(&self, question: &[usize], answer: usize) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = bind_params(&mut tape, self, false);
        let loss = self.lm_loss(&mut tape, &vars, question, answer)?;
        Ok(tape.value(loss).item().f64())
    }

    /// FFN hidden activations of `question` with `∂P(answer|question)/∂h`,
    /// where `P` is the full-vocabulary probability. Parameter gradients
    /// are not touched.
    pub fn activation_gradients(
        &self,
        question: &[usize],
        answer: usize,
    ) -> Result<ActivationRecord<T>> {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, self, false);
        let seqs = [question];
        let fwd = forward(
            &mut tape,
            &self.config,
            &vars,
            &ForwardSpec {
                seqs: &seqs,
                track_input: true,
                ..Default::default()
            },
        )?;
        check_tokens(&self.config, &[answer])?;
        let probs = tape.softmax(fwd.logits)?;
        let p = tape.pick(probs, &[(0, answer)])?;
        let root = tape.sum(p)?;
        tape.backward(root)?;
        let hidden = fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        let grads = fwd
            .hidden
            .iter()
            .map(|&h| {
                let shape = tape.value(h).shape().to_vec();
                let g = tape
                    .grad(h)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                Tensor::new(shape, g).expect("gradient matches activation shape")
            })
            .collect();
        Ok(ActivationRecord {
            hidden,
            grads: Some(grads),
        })
    }
}
