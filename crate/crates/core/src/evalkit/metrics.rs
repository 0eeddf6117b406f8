use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::autograd::Real;
use crate::microlm::{candidate_argmax, CandidateQuery, ModelState};
use crate::worldgen::{Cluster, Dataset, ItemKind, QAItem};

/// 1 iff the candidate argmax of `item` is its gold answer.
pub fn memorization<T: Real>(model: &ModelState<T>, item: &QAItem) -> Result<u8> {
    Ok(memorization_many(model, &[item])?[0])
}

/// [`memorization`] for many items, evaluated in batches.
pub fn memorization_many<T: Real>(model: &ModelState<T>, items: &[&QAItem]) -> Result<Vec<u8>> {
    let queries: Vec<CandidateQuery<'_>> = items
        .iter()
        .map(|it| CandidateQuery {
            question: &it.question,
            candidates: &it.candidates,
        })
        .collect();
    let probs = model.candidate_distributions(&queries)?;
    Ok(items
        .iter()
        .zip(&probs)
        .map(|(it, p)| u8::from(it.candidates[candidate_argmax(&it.candidates, p)] == it.answer))
        .collect())
}

/// Anything that can say which items are memorized.
pub trait Memorizer {
    fn memorized(&self, items: &[&QAItem]) -> Result<Vec<u8>>;
}

impl<T: Real> Memorizer for ModelState<T> {
    fn memorized(&self, items: &[&QAItem]) -> Result<Vec<u8>> {
        memorization_many(self, items)
    }
}

/// Fixed per-item verdicts keyed by item id; unknown ids count as not
/// memorized.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoTable(pub std::collections::BTreeMap<String, u8>);

impl MemoTable {
    pub fn set(&mut self, id: &str, value: u8) -> &mut Self {
        self.0.insert(id.to_string(), value);
        self
    }
}

impl Memorizer for MemoTable {
    fn memorized(&self, items: &[&QAItem]) -> Result<Vec<u8>> {
        Ok(items
            .iter()
            .map(|it| self.0.get(&it.id).copied().unwrap_or(0))
            .collect())
    }
}

/// Percentage of ones in `flags`; `None` for an empty set.
pub fn accuracy(flags: &[u8]) -> Option<f64> {
    if flags.is_empty() {
        return None;
    }
    Some(100.0 * flags.iter().map(|&f| f as f64).sum::<f64>() / flags.len() as f64)
}

/// Multi-hop faithfulness: high when forget-side chains are gone and
/// test-side chains remain.
pub fn ma_from(ma_f: f64, ma_t: f64) -> f64 {
    ((100.0 - ma_f) + ma_t) / 2.0
}

pub fn score_from(ua_ext: f64, ta: f64, sa: f64, ma: f64) -> f64 {
    ((100.0 - ua_ext) + ta + sa + ma) / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Forget,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub kind: ItemKind,
    pub split: SplitName,
    pub before: u8,
    pub after: u8,
}

/// Same-answer accuracy split by the cluster's split, so either weighting
/// can be recomputed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SameAnswerSubtotals {
    pub forget_hits: usize,
    pub forget_total: usize,
    pub test_hits: usize,
    pub test_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ua: Option<f64>,
    pub ua_ext: Option<f64>,
    pub ta: Option<f64>,
    pub sa: Option<f64>,
    pub ma_f: Option<f64>,
    pub ma_t: Option<f64>,
    pub ma: Option<f64>,
    pub score: Option<f64>,
    pub sa_subtotals: SameAnswerSubtotals,
    pub items: Vec<ItemOutcome>,
}

impl EvalReport {
    /// Builds MA and Score from the raw metrics.
    pub fn from_metrics(
        ua: Option<f64>,
        ua_ext: Option<f64>,
        ta: Option<f64>,
        sa: Option<f64>,
        ma_f: Option<f64>,
        ma_t: Option<f64>,
    ) -> Self {
        let ma = ma_f.zip(ma_t).map(|(f, t)| ma_from(f, t));
        let score = match (ua_ext, ta, sa, ma) {
            (Some(u), Some(t), Some(s), Some(m)) => Some(score_from(u, t, s, m)),
            _ => None,
        };
        Self {
            ua,
            ua_ext,
            ta,
            sa,
            ma_f,
            ma_t,
            ma,
            score,
            sa_subtotals: SameAnswerSubtotals::default(),
            items: Vec::new(),
        }
    }

    /// Names of score inputs that are absent.
    pub fn missing(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (name, v) in [
            ("UA‡", self.ua_ext),
            ("TA", self.ta),
            ("SA", self.sa),
            ("MA_f", self.ma_f),
            ("MA_t", self.ma_t),
        ] {
            if v.is_none() {
                out.push(name);
            }
        }
        out
    }
}

fn split_clusters<'a>(dataset: &'a Dataset, ids: &'a [String]) -> Result<Vec<&'a Cluster>> {
    ids.iter()
        .map(|id| {
            dataset
                .cluster(id)
                .ok_or_else(|| EvalError::UnknownCluster(id.clone()))
        })
        .collect()
}

/// Full metric suite of `after`, with `before` recorded per item.
///
/// UA: forget base items. UA‡: forget paraphrases. TA: test base items.
/// SA: same-answer items of forget and test clusters, per item. MA_f and
/// MA_t: multi-hop items of forget and test clusters. Retain clusters and
/// test paraphrases are not scored.
pub fn metric_suite<M: Memorizer>(before: &M, after: &M, dataset: &Dataset) -> Result<EvalReport> {
    let forget = split_clusters(dataset, &dataset.splits.forget)?;
    let test = split_clusters(dataset, &dataset.splits.test)?;

    let mut items: Vec<(&QAItem, SplitName)> = Vec::new();
    for (clusters, split) in [(&forget, SplitName::Forget), (&test, SplitName::Test)] {
        for c in clusters.iter() {
            items.push((&c.base, split));
            if split == SplitName::Forget {
                items.extend(c.paraphrases.iter().map(|p| (p, split)));
            }
            items.extend(c.multihops.iter().map(|p| (p, split)));
            items.extend(c.same_answers.iter().map(|p| (p, split)));
        }
    }
    let refs: Vec<&QAItem> = items.iter().map(|(it, _)| *it).collect();
    let after_flags = after.memorized(&refs)?;
    let before_flags = if std::ptr::eq(before, after) {
        after_flags.clone()
    } else {
        before.memorized(&refs)?
    };

    let pick = |kind: ItemKind, split: SplitName| -> Vec<u8> {
        items
            .iter()
            .zip(&after_flags)
            .filter(|((it, s), _)| it.kind == kind && *s == split)
            .map(|(_, &f)| f)
            .collect()
    };
    let sa_f = pick(ItemKind::SameAnswer, SplitName::Forget);
    let sa_t = pick(ItemKind::SameAnswer, SplitName::Test);
    let sa_all: Vec<u8> = sa_f.iter().chain(&sa_t).copied().collect();

    let mut report = EvalReport::from_metrics(
        accuracy(&pick(ItemKind::Base, SplitName::Forget)),
        accuracy(&pick(ItemKind::Paraphrased, SplitName::Forget)),
        accuracy(&pick(ItemKind::Base, SplitName::Test)),
        accuracy(&sa_all),
        accuracy(&pick(ItemKind::Multihop, SplitName::Forget)),
        accuracy(&pick(ItemKind::Multihop, SplitName::Test)),
    );
    report.sa_subtotals = SameAnswerSubtotals {
        forget_hits: sa_f.iter().filter(|&&f| f == 1).count(),
        forget_total: sa_f.len(),
        test_hits: sa_t.iter().filter(|&&f| f == 1).count(),
        test_total: sa_t.len(),
    };
    report.items = items
        .iter()
        .zip(before_flags.iter().zip(&after_flags))
        .map(|((it, split), (&b, &a))| ItemOutcome {
            id: it.id.clone(),
            kind: it.kind,
            split: *split,
            before: b,
            after: a,
        })
        .collect();
    if report.score.is_none() {
        return Err(EvalError::UndefinedScore(report.missing().join(", ")));
    }
    Ok(report)
}
