//! Synthetic world knowledge graphs and the QA clusters built from them.
//!
//! Entities and relation surface forms are atomic tokens. A question is
//! `[relation-variant marker, subject, QMARK]`; a two-hop question is
//! `[outer marker, inner marker, subject, QMARK]`, so the bridge entity
//! never appears in it.

mod clusters;
mod graph;
mod io;
mod splits;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clusters::{build_clusters, ClusterBuild};
pub use graph::{generate_graph, GraphConfig, KnowledgeGraph};
pub use io::{read_dataset, write_dataset, DATASET_FILE, FORMAT_VERSION, VOCAB_FILE};
pub use splits::{make_splits, Splits};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("{path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

/// `(subject, relation, object)` over entity and relation ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl Triple {
    pub fn new(s: usize, r: usize, o: usize) -> Self {
        Self { s, r, o }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Base,
    Paraphrased,
    Multihop,
    SameAnswer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub kind: ItemKind,
    pub question: Vec<usize>,
    pub answer: usize,
    pub candidates: Vec<usize>,
    /// Sorted, duplicate-free set of triples the question expresses.
    pub knowledge: Vec<Triple>,
    pub cluster_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub base: QAItem,
    pub paraphrases: Vec<QAItem>,
    pub multihops: Vec<QAItem>,
    pub same_answers: Vec<QAItem>,
}

impl Cluster {
    pub fn items(&self) -> impl Iterator<Item = &QAItem> {
        std::iter::once(&self.base)
            .chain(&self.paraphrases)
            .chain(&self.multihops)
            .chain(&self.same_answers)
    }
}

/// Token id table: specials, relation-variant markers, then entities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_relations: usize,
    pub n_templates: usize,
    pub n_famous: usize,
    pub n_background: usize,
}

impl Vocab {
    pub const QMARK: usize = 0;
    pub const REJECT: usize = 1;
    const SPECIALS: usize = 2;

    pub fn size(&self) -> usize {
        self.entity_offset() + self.n_famous + self.n_background
    }

    fn entity_offset(&self) -> usize {
        Self::SPECIALS + self.n_relations * self.n_templates
    }

    pub fn relation_token(&self, relation: usize, variant: usize) -> usize {
        debug_assert!(relation < self.n_relations && variant < self.n_templates);
        Self::SPECIALS + relation * self.n_templates + variant
    }

    pub fn entity_token(&self, entity: usize) -> usize {
        self.entity_offset() + entity
    }

    /// Entity id of a token, if it names an entity.
    pub fn token_entity(&self, token: usize) -> Option<usize> {
        (token >= self.entity_offset() && token < self.size()).then(|| token - self.entity_offset())
    }

    pub fn is_famous(&self, entity: usize) -> bool {
        entity < self.n_famous
    }

    pub fn token_name(&self, token: usize) -> String {
        match token {
            Self::QMARK => "QMARK".into(),
            Self::REJECT => "REJECT".into(),
            t if t < self.entity_offset() => {
                let k = t - Self::SPECIALS;
                format!("QREL_{}_v{}", k / self.n_templates, k % self.n_templates)
            }
            t => {
                let e = t - self.entity_offset();
                if self.is_famous(e) {
                    format!("F{e}")
                } else {
                    format!("B{e}")
                }
            }
        }
    }

    /// Every token name, indexed by id.
    pub fn names(&self) -> Vec<String> {
        (0..self.size()).map(|t| self.token_name(t)).collect()
    }
}

/// Everything needed to regenerate a world from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub graph: GraphConfig,
    pub templates_per_relation: usize,
    pub same_answer_cap: usize,
    pub fractions: [f64; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            templates_per_relation: 4,
            same_answer_cap: 8,
            fractions: [0.05, 0.10, 0.70],
        }
    }
}

/// Clusters, splits and vocabulary as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub clusters: Vec<Cluster>,
    pub splits: Splits,
}

/// A generated world plus the warnings raised while building it.
#[derive(Clone, Debug)]
pub struct World {
    pub graph: KnowledgeGraph,
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Graph, clusters and splits from one seed, each on its own sub-stream.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    let graph = generate_graph(&config.graph, crate::rng::derive_seed(seed, "graph"))?;
    let built = build_clusters(
        &graph,
        config.templates_per_relation,
        config.same_answer_cap,
        crate::rng::derive_seed(seed, "clusters"),
    )?;
    let ids: Vec<String> = built.clusters.iter().map(|c| c.id.clone()).collect();
    let splits = make_splits(
        &ids,
        config.fractions,
        crate::rng::derive_seed(seed, "splits"),
    )?;
    Ok(World {
        dataset: Dataset {
            seed,
            config: config.clone(),
            vocab: built.vocab,
            clusters: built.clusters,
            splits,
        },
        graph,
        warnings: built.warnings,
    })
}

/// Item counts per kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub clusters: usize,
    pub base: usize,
    pub paraphrased: usize,
    pub multihop: usize,
    pub same_answer: usize,
}

impl Dataset {
    pub fn cluster(&self, id: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn clusters_in<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a Cluster> + 'a {
        ids.iter().filter_map(|id| self.cluster(id))
    }

    pub fn counts(&self) -> KindCounts {
        let mut k = KindCounts {
            clusters: self.clusters.len(),
            ..Default::default()
        };
        for c in &self.clusters {
            k.base += 1;
            k.paraphrased += c.paraphrases.len();
            k.multihop += c.multihops.len();
            k.same_answer += c.same_answers.len();
        }
        k
    }

    /// Distinct `(question, answer)` pairs over every item, in first-seen order.
    pub fn training_pairs(&self) -> Vec<(&[usize], usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for item in self.clusters.iter().flat_map(Cluster::items) {
            if seen.insert(item.question.as_slice()) {
                out.push((item.question.as_slice(), item.answer));
            }
        }
        out
    }
}
