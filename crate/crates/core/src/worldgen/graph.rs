use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Triple, WorldError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub n_famous: usize,
    pub n_background: usize,
    pub n_relations: usize,
    /// Fraction of famous-triple objects that get an outgoing triple.
    pub chain_density: f64,
    /// Each famous entity gets between 1 and this many triples.
    pub max_famous_triples: usize,
    /// Share of background entities reserved as relation objects.
    pub object_fraction: f64,
    /// Each background subject gets between 1 and this many triples.
    pub max_background_triples: usize,
    /// Probability a background triple reuses an object of a famous triple.
    pub shared_object_bias: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_famous: 200,
            n_background: 400,
            n_relations: 19,
            chain_density: 0.3,
            max_famous_triples: 4,
            object_fraction: 0.5,
            max_background_triples: 2,
            shared_object_bias: 0.8,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Config(m));
        for (name, v) in [
            ("n_famous", self.n_famous),
            ("n_background", self.n_background),
            ("n_relations", self.n_relations),
            ("max_famous_triples", self.max_famous_triples),
            ("max_background_triples", self.max_background_triples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("chain_density", self.chain_density),
            ("shared_object_bias", self.shared_object_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.object_fraction > 0.0 && self.object_fraction <= 1.0) {
            return bad(format!(
                "object_fraction must lie in (0, 1], got {}",
                self.object_fraction
            ));
        }
        if self.n_objects() < self.n_relations {
            return bad(format!(
                "{} object entities cannot cover {} relations",
                self.n_objects(),
                self.n_relations
            ));
        }
        Ok(())
    }

    fn n_objects(&self) -> usize {
        ((self.object_fraction * self.n_background as f64).round() as usize).min(self.n_background)
    }
}

/// Entities `0..n_famous` are famous; the rest are background. Background
/// entities are either members of one relation's object pool or background
/// subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub n_famous: usize,
    pub n_background: usize,
    pub n_relations: usize,
    /// Sorted and duplicate-free.
    pub triples: Vec<Triple>,
    pub object_pools: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn is_famous(&self, entity: usize) -> bool {
        entity < self.n_famous
    }

    pub fn famous_triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| self.is_famous(t.s))
    }

    pub fn outgoing(&self, entity: usize) -> impl Iterator<Item = &Triple> {
        let start = self.triples.partition_point(|t| t.s < entity);
        self.triples[start..]
            .iter()
            .take_while(move |t| t.s == entity)
    }

    pub fn with_object(&self, object: usize) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(move |t| t.o == object)
    }

    /// Distinct objects that occur with relation `r`.
    pub fn realized_objects(&self, r: usize) -> BTreeSet<usize> {
        self.triples
            .iter()
            .filter(|t| t.r == r)
            .map(|t| t.o)
            .collect()
    }
}

pub fn generate_graph(cfg: &GraphConfig, seed: u64) -> Result<KnowledgeGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_count = cfg.n_relations;

    let mut background: Vec<usize> = (cfg.n_famous..cfg.n_famous + cfg.n_background).collect();
    background.shuffle(&mut rng);
    let n_objects = cfg.n_objects();
    let mut pools = vec![Vec::new(); r_count];
    for (i, &e) in background[..n_objects].iter().enumerate() {
        pools[i % r_count].push(e);
    }
    pools.iter_mut().for_each(|p| p.sort_unstable());
    let mut bg_subjects = background[n_objects..].to_vec();
    bg_subjects.sort_unstable();
    let relation_of: BTreeMap<usize, usize> = pools
        .iter()
        .enumerate()
        .flat_map(|(r, p)| p.iter().map(move |&e| (e, r)))
        .collect();

    let relations: Vec<usize> = (0..r_count).collect();
    let mut triples = Vec::new();
    for s in 0..cfg.n_famous {
        let k = rng.random_range(1..=cfg.max_famous_triples.min(r_count));
        let mut rels: Vec<usize> = relations.choose_multiple(&mut rng, k).copied().collect();
        rels.sort_unstable();
        for r in rels {
            let o = *pools[r].choose(&mut rng).expect("pools are nonempty");
            triples.push(Triple::new(s, r, o));
        }
    }

    let famous_objects: BTreeSet<usize> = triples.iter().map(|t| t.o).collect();
    let mut chain_roots: Vec<usize> = famous_objects.iter().copied().collect();
    chain_roots.shuffle(&mut rng);
    let n_chain = (cfg.chain_density * chain_roots.len() as f64).round() as usize;
    chain_roots.truncate(n_chain);
    chain_roots.sort_unstable();
    for o1 in chain_roots {
        let r1 = relation_of[&o1];
        let r2 = if r_count > 1 {
            let pick = rng.random_range(0..r_count - 1);
            if pick >= r1 {
                pick + 1
            } else {
                pick
            }
        } else {
            r1
        };
        let options: Vec<usize> = pools[r2].iter().copied().filter(|&o| o != o1).collect();
        if let Some(&o2) = options.choose(&mut rng) {
            triples.push(Triple::new(o1, r2, o2));
        }
    }

    let mut famous_by_relation: Vec<Vec<usize>> = vec![Vec::new(); r_count];
    for t in triples.iter().filter(|t| t.s < cfg.n_famous) {
        famous_by_relation[t.r].push(t.o);
    }
    for v in &mut famous_by_relation {
        v.sort_unstable();
        v.dedup();
    }
    for &s in &bg_subjects {
        let k = rng.random_range(1..=cfg.max_background_triples.min(r_count));
        let mut rels: Vec<usize> = relations.choose_multiple(&mut rng, k).copied().collect();
        rels.sort_unstable();
        for r in rels {
            let shared =
                !famous_by_relation[r].is_empty() && rng.random_bool(cfg.shared_object_bias);
            let pool = if shared {
                &famous_by_relation[r]
            } else {
                &pools[r]
            };
            let o = *pool.choose(&mut rng).expect("nonempty pool");
            triples.push(Triple::new(s, r, o));
        }
    }

    triples.sort_unstable();
    triples.dedup();
    Ok(KnowledgeGraph {
        n_famous: cfg.n_famous,
        n_background: cfg.n_background,
        n_relations: r_count,
        triples,
        object_pools: pools,
    })
}
