use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EvalError, Memorizer, Result};
use crate::worldgen::{Cluster, QAItem, Triple};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperficialVerdict {
    pub cluster_id: String,
    /// Items sharing forgotten knowledge that are still memorized.
    pub condition1_hits: Vec<String>,
    /// Items with disjoint knowledge that were erased.
    pub condition2_hits: Vec<String>,
    pub is_superficial: bool,
}

/// Union of the knowledge sets of the forget clusters' base items.
pub fn forget_knowledge(clusters: &[Cluster], forget_ids: &[String]) -> Result<BTreeSet<Triple>> {
    let mut out = BTreeSet::new();
    for id in forget_ids {
        let c = clusters
            .iter()
            .find(|c| &c.id == id)
            .ok_or_else(|| EvalError::UnknownCluster(id.clone()))?;
        out.extend(c.base.knowledge.iter().copied());
    }
    Ok(out)
}

/// One verdict per forget cluster over its multi-hop and same-answer
/// items. Only items memorized by `before` are judged; each is routed by
/// whether its knowledge set meets the forgotten knowledge.
pub fn classify_superficial<M: Memorizer>(
    before: &M,
    after: &M,
    clusters: &[Cluster],
    forget_ids: &[String],
) -> Result<Vec<SuperficialVerdict>> {
    let kappa_f = forget_knowledge(clusters, forget_ids)?;
    let mut verdicts = Vec::with_capacity(forget_ids.len());
    for id in forget_ids {
        let c = clusters
            .iter()
            .find(|c| &c.id == id)
            .expect("checked in forget_knowledge");
        let items: Vec<&QAItem> = c.multihops.iter().chain(&c.same_answers).collect();
        let was = before.memorized(&items)?;
        let now = after.memorized(&items)?;
        let mut cond1 = Vec::new();
        let mut cond2 = Vec::new();
        for ((item, &b), &a) in items.iter().zip(&was).zip(&now) {
            if b == 0 {
                continue;
            }
            let overlaps = item.knowledge.iter().any(|t| kappa_f.contains(t));
            if overlaps && a == 1 {
                cond1.push(item.id.clone());
            } else if !overlaps && a == 0 {
                cond2.push(item.id.clone());
            }
        }
        verdicts.push(SuperficialVerdict {
            cluster_id: id.clone(),
            is_superficial: !cond1.is_empty() || !cond2.is_empty(),
            condition1_hits: cond1,
            condition2_hits: cond2,
        });
    }
    Ok(verdicts)
}
