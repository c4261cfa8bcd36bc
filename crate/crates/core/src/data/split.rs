use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Ids per split; also the on-disk `manifest.json` layout.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let split: Self = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut seen = HashSet::new();
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if !seen.insert(id) {
                return Err(DataError::Manifest {
                    path,
                    reason: format!("id `{id}` listed twice"),
                });
            }
        }
        Ok(split)
    }
}

/// `(train, val, test)` sizes: test and val are 20% and 10% of `n` rounded
/// half up, train takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (2 * n + 5) / 10;
    let val = (n + 5) / 10;
    (n - test - val, val, test)
}

/// Seeded shuffle, then consecutive train/val/test blocks.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit, DataError> {
    if ids.len() < 3 {
        return Err(DataError::TooFewIds(ids.len()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(*id)) {
        return Err(DataError::Dataset(format!("duplicate id `{dup}`")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_sizes(ids.len());
    let test = shuffled.split_off(train + val);
    let val = shuffled.split_off(train);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}
