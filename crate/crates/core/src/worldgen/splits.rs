use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, WorldError};

/// Disjoint forget / retain / test cluster ids. Clusters in none of the
/// three are unused by unlearning and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub forget: Vec<String>,
    pub retain: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// Seeded shuffle of `ids`, then consecutive blocks of `round(f * n)`
/// clusters for forget, retain and test in that order.
pub fn make_splits(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || fractions.iter().sum::<f64>() > 1.0 + 1e-9
    {
        return Err(WorldError::Config(format!(
            "split fractions {fractions:?} must each lie in [0, 1] and sum to at most 1"
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let mut sizes = fractions.map(|f| (f * n as f64).round() as usize);
    while sizes.iter().sum::<usize>() > n {
        // rounding overshoot comes out of the largest block
        let i = (0..3).max_by_key(|&i| sizes[i]).expect("three blocks");
        sizes[i] -= 1;
    }
    let mut rest = order.into_iter();
    let mut take = |k: usize| -> Vec<String> { rest.by_ref().take(k).collect() };
    Ok(Splits {
        forget: take(sizes[0]),
        retain: take(sizes[1]),
        test: take(sizes[2]),
        fractions,
        seed,
    })
}
