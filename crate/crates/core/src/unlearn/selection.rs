use rand::Rng;

use super::{AttributionMap, NeuronMask, Result, UnlearnError};
use crate::autograd::Real;
use crate::evalkit::memorization_many;
use crate::microlm::ModelState;
use crate::worldgen::QAItem;

/// `ceil(p * total)`, robust to `p * total` landing a hair above an integer.
pub fn neuron_count(p: f64, total: usize) -> usize {
    let exact = p * total as f64;
    let n = (exact - 1e-9 * exact.max(1.0)).ceil();
    (n.max(0.0) as usize).min(total)
}

fn check_ratio(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(UnlearnError::Config(format!(
            "neuron ratio must be in (0, 1], got {p}"
        )))
    }
}

/// Global top `ceil(p * total)` neurons by score, ties to the lower
/// `(layer, neuron)`.
pub fn select_neurons(attr: &AttributionMap, p: f64) -> Result<NeuronMask> {
    check_ratio(p)?;
    if attr.scores.iter().any(|s| s.is_nan()) {
        return Err(UnlearnError::NanScore);
    }
    let mut order: Vec<usize> = (0..attr.total()).collect();
    order.sort_by(|&a, &b| attr.scores[b].total_cmp(&attr.scores[a]).then(a.cmp(&b)));
    let n = neuron_count(p, attr.total());
    Ok(NeuronMask::new(
        order[..n].iter().map(|&j| (j / attr.d_ffn, j % attr.d_ffn)),
        attr.hash(),
    ))
}

/// `ceil(p * total)` neurons drawn uniformly without replacement.
pub fn random_mask<R: Rng>(
    n_layers: usize,
    d_ffn: usize,
    p: f64,
    rng: &mut R,
) -> Result<NeuronMask> {
    check_ratio(p)?;
    let total = n_layers * d_ffn;
    let picked = rand::seq::index::sample(rng, total, neuron_count(p, total));
    Ok(NeuronMask::new(
        picked.into_iter().map(|j| (j / d_ffn, j % d_ffn)),
        "random",
    ))
}

/// The forget items the model still memorizes, in input order.
pub fn select_unforgotten<'a, T: Real>(
    model: &ModelState<T>,
    items: &[&'a QAItem],
) -> Result<Vec<&'a QAItem>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let flags = memorization_many(model, items)?;
    Ok(items
        .iter()
        .zip(flags)
        .filter(|(_, f)| *f == 1)
        .map(|(it, _)| *it)
        .collect())
}
