use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Cluster, ItemKind, KnowledgeGraph, QAItem, Result, Triple, Vocab, WorldError};

const PARAPHRASES: usize = 3;

pub struct ClusterBuild {
    pub vocab: Vocab,
    pub clusters: Vec<Cluster>,
    pub warnings: Vec<String>,
}

/// Gold answer plus two distractors from `pool`, in seeded order; `None`
/// when the pool has fewer than two other objects.
fn candidate_set(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    pool: &BTreeSet<usize>,
    gold: usize,
) -> Option<Vec<usize>> {
    let others: Vec<usize> = pool.iter().copied().filter(|&o| o != gold).collect();
    if others.len() < 2 {
        return None;
    }
    let mut c: Vec<usize> = others.choose_multiple(rng, 2).copied().collect();
    c.push(gold);
    c.shuffle(rng);
    Some(c.into_iter().map(|e| vocab.entity_token(e)).collect())
}

/// One cluster per famous triple that has a two-hop continuation or a
/// same-answer triple with a background subject. Triples whose relation
/// has fewer than three realized objects are skipped with a warning.
pub fn build_clusters(
    graph: &KnowledgeGraph,
    templates_per_relation: usize,
    same_answer_cap: usize,
    seed: u64,
) -> Result<ClusterBuild> {
    if templates_per_relation < PARAPHRASES + 1 {
        return Err(WorldError::Config(format!(
            "need at least {} templates per relation, got {templates_per_relation}",
            PARAPHRASES + 1
        )));
    }
    let vocab = Vocab {
        n_relations: graph.n_relations,
        n_templates: templates_per_relation,
        n_famous: graph.n_famous,
        n_background: graph.n_background,
    };
    let realized: Vec<BTreeSet<usize>> = (0..graph.n_relations)
        .map(|r| graph.realized_objects(r))
        .collect();
    let mut warnings = Vec::new();
    let mut clusters = Vec::new();

    for (index, &base_t) in graph.famous_triples().enumerate() {
        let cid = format!("c{index:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);

        let Some(cands) = candidate_set(&mut rng, &vocab, &realized[base_t.r], base_t.o) else {
            warnings.push(format!(
                "{cid}: relation {} has fewer than 3 objects, cluster skipped",
                base_t.r
            ));
            continue;
        };
        let item = |kind,
                    suffix: String,
                    question: Vec<usize>,
                    answer: usize,
                    candidates: Vec<usize>,
                    knowledge: Vec<Triple>| QAItem {
            id: format!("{cid}-{suffix}"),
            kind,
            question,
            answer: vocab.entity_token(answer),
            candidates,
            knowledge,
            cluster_id: cid.clone(),
        };
        let subject = vocab.entity_token(base_t.s);
        let base = item(
            ItemKind::Base,
            "base".into(),
            vec![vocab.relation_token(base_t.r, 0), subject, Vocab::QMARK],
            base_t.o,
            cands.clone(),
            vec![base_t],
        );
        let paraphrases = (1..=PARAPHRASES)
            .map(|v| {
                item(
                    ItemKind::Paraphrased,
                    format!("para{v}"),
                    vec![vocab.relation_token(base_t.r, v), subject, Vocab::QMARK],
                    base_t.o,
                    cands.clone(),
                    vec![base_t],
                )
            })
            .collect();

        let mut multihops = Vec::new();
        for &hop in graph.outgoing(base_t.o) {
            match candidate_set(&mut rng, &vocab, &realized[hop.r], hop.o) {
                Some(c) => {
                    let mut kappa = vec![base_t, hop];
                    kappa.sort_unstable();
                    multihops.push(item(
                        ItemKind::Multihop,
                        format!("hop{}", multihops.len()),
                        vec![
                            vocab.relation_token(hop.r, 0),
                            vocab.relation_token(base_t.r, 0),
                            subject,
                            Vocab::QMARK,
                        ],
                        hop.o,
                        c,
                        kappa,
                    ));
                }
                None => warnings.push(format!(
                    "{cid}: two-hop item via relation {} skipped",
                    hop.r
                )),
            }
        }

        let mut shared: Vec<Triple> = graph
            .with_object(base_t.o)
            .filter(|t| !graph.is_famous(t.s) && **t != base_t)
            .copied()
            .collect();
        if shared.len() > same_answer_cap {
            shared = shared
                .choose_multiple(&mut rng, same_answer_cap)
                .copied()
                .collect();
            shared.sort_unstable();
        }
        let mut same_answers = Vec::new();
        for t in shared {
            match candidate_set(&mut rng, &vocab, &realized[t.r], t.o) {
                Some(c) => same_answers.push(item(
                    ItemKind::SameAnswer,
                    format!("same{}", same_answers.len()),
                    vec![
                        vocab.relation_token(t.r, 0),
                        vocab.entity_token(t.s),
                        Vocab::QMARK,
                    ],
                    t.o,
                    c,
                    vec![t],
                )),
                None => warnings.push(format!(
                    "{cid}: same-answer item via relation {} skipped",
                    t.r
                )),
            }
        }

        if multihops.is_empty() && same_answers.is_empty() {
            continue;
        }
        clusters.push(Cluster {
            id: cid,
            base,
            paraphrases,
            multihops,
            same_answers,
        });
    }
    Ok(ClusterBuild {
        vocab,
        clusters,
        warnings,
    })
}
