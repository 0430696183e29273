use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// `k` disjoint lists of record ids covering the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplits {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplits {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Ids outside fold `i`, in fold order.
    pub fn complement(&self, i: usize) -> Vec<String> {
        self.folds.iter().enumerate().filter(|(f, _)| *f != i).flat_map(|(_, ids)| ids.iter().cloned()).collect()
    }
}

/// Seeded shuffle, then round-robin assignment: fold sizes differ by at
/// most one and the first `n mod k` folds hold the extra record.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldSplits> {
    if k < 2 {
        return Err(Error::Value(format!("k must be at least 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::Value(format!("k = {k} exceeds dataset size {}", dataset.len())));
    }
    let mut ids = dataset.ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplits { folds })
}
