use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, UnlearnError};
use crate::autograd::{Real, Tape};
use crate::microlm::{bind_params, forward, ForwardSpec, ModelError, ModelState};

/// Sequences per attribution pass.
const CHUNK: usize = 64;

/// One score per FFN hidden unit, row-major over `(layer, neuron)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub n_layers: usize,
    pub d_ffn: usize,
    pub scores: Vec<f64>,
    pub batch_ids: Vec<String>,
    pub regularized: bool,
}

impl AttributionMap {
    pub fn new(n_layers: usize, d_ffn: usize, scores: Vec<f64>) -> Self {
        assert_eq!(
            scores.len(),
            n_layers * d_ffn,
            "score count must be n_layers * d_ffn"
        );
        Self {
            n_layers,
            d_ffn,
            scores,
            batch_ids: Vec::new(),
            regularized: false,
        }
    }

    pub fn get(&self, layer: usize, neuron: usize) -> f64 {
        self.scores[layer * self.d_ffn + neuron]
    }

    pub fn total(&self) -> usize {
        self.scores.len()
    }

    /// SHA-256 over the scores' little-endian bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.scores {
            h.update(s.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-item scores `max_t h[t] * dP(a|q)/dh[t]` over the question's
/// positions, flattened like [`AttributionMap::scores`]. Parameters are
/// bound as constants, so their gradients are never produced.
pub fn attribute_items<T: Real>(
    model: &ModelState<T>,
    pairs: &[(&[usize], usize)],
) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Err(UnlearnError::EmptyBatch);
    }
    let cfg = &model.config;
    if let Some(&(_, token)) = pairs.iter().find(|(_, a)| *a >= cfg.vocab_size) {
        return Err(ModelError::UnknownToken {
            token,
            vocab: cfg.vocab_size,
        }
        .into());
    }
    let (n_layers, d_ffn) = (cfg.n_layers, cfg.d_ffn);
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|(q, _)| *q).collect();
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, model, false);
        let fwd = forward(
            &mut tape,
            cfg,
            &vars,
            &ForwardSpec {
                seqs: &seqs,
                track_input: true,
                ..Default::default()
            },
        )?;
        let probs = tape.softmax(fwd.logits)?;
        let picks: Vec<(usize, usize)> = chunk.iter().map(|(_, a)| *a).enumerate().collect();
        let p = tape.pick(probs, &picks)?;
        // segments are independent, so d(sum_b P_b)/dh restricted to b's rows is dP_b/dh
        let root = tape.sum(p)?;
        tape.backward(root)?;

        let mut scores = vec![vec![f64::NEG_INFINITY; n_layers * d_ffn]; chunk.len()];
        for (l, &h) in fwd.hidden.iter().enumerate() {
            let hv = tape.value(h).data();
            let zeros;
            let gv = match tape.grad(h) {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); hv.len()];
                    &zeros
                }
            };
            for (b, &(start, len)) in fwd.segments.iter().enumerate() {
                let row = &mut scores[b][l * d_ffn..(l + 1) * d_ffn];
                for r in start..start + len {
                    let (hr, gr) = (
                        &hv[r * d_ffn..(r + 1) * d_ffn],
                        &gv[r * d_ffn..(r + 1) * d_ffn],
                    );
                    for i in 0..d_ffn {
                        row[i] = row[i].max(hr[i].f64() * gr[i].f64());
                    }
                }
            }
        }
        out.extend(scores);
    }
    Ok(out)
}

/// Batch attribution: per-item token max, then the mean over items.
pub fn attribute<T: Real>(
    model: &ModelState<T>,
    batch: &[(&[usize], usize)],
) -> Result<AttributionMap> {
    let items = attribute_items(model, batch)?;
    Ok(mean_map(model.config.n_layers, model.config.d_ffn, &items))
}

pub(super) fn mean_map(n_layers: usize, d_ffn: usize, items: &[Vec<f64>]) -> AttributionMap {
    let mut scores = vec![0.0; n_layers * d_ffn];
    for item in items {
        for (s, v) in scores.iter_mut().zip(item) {
            *s += v;
        }
    }
    let n = items.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    AttributionMap::new(n_layers, d_ffn, scores)
}

/// `I = A - alpha * mean(max(A', 0))` over the mismatched pairs, which
/// should ask other questions for the batch's answer.
pub fn regularize<T: Real>(
    base: &AttributionMap,
    model: &ModelState<T>,
    mismatched: &[(&[usize], usize)],
    alpha: f64,
) -> Result<AttributionMap> {
    check_alpha(alpha)?;
    let maps = if mismatched.is_empty() {
        Vec::new()
    } else {
        attribute_items(model, mismatched)?
    };
    regularize_with(base, &maps, alpha)
}

/// [`regularize`] given the mismatched attributions directly. No pairs
/// leaves the scores as they are.
pub fn regularize_with(
    base: &AttributionMap,
    mismatched: &[Vec<f64>],
    alpha: f64,
) -> Result<AttributionMap> {
    check_alpha(alpha)?;
    let mut out = base.clone();
    out.regularized = true;
    if mismatched.is_empty() {
        return Ok(out);
    }
    let n = mismatched.len() as f64;
    for (j, s) in out.scores.iter_mut().enumerate() {
        let penalty: f64 = mismatched.iter().map(|m| m[j].max(0.0)).sum::<f64>() / n;
        *s -= alpha * penalty;
    }
    Ok(out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(UnlearnError::Config(format!(
            "alpha must be nonnegative, got {alpha}"
        )))
    }
}
