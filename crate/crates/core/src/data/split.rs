use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PatchDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_per_class")]
    pub per_class_train: usize,
    /// Overrides the run's derived split seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_per_class() -> usize {
    300
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { per_class_train: default_per_class(), seed: None }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: PatchDataset,
    pub test: PatchDataset,
    /// Classes that could not supply `per_class_train` samples.
    pub notes: Vec<String>,
}

/// Seeded per-class sampling without replacement. Both halves keep the
/// original sample order.
pub fn stratified_split(dataset: &PatchDataset, cfg: &SplitConfig, seed: u64) -> Result<Split> {
    if cfg.per_class_train == 0 {
        return Err(Error::InvalidArgument("per_class_train must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize - 1].push(i);
    }
    let mut in_train = vec![false; dataset.len()];
    let mut notes = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass { class: c + 1 });
        }
        let take = if members.len() >= cfg.per_class_train {
            cfg.per_class_train
        } else {
            let fallback = members.len() / 2;
            notes.push(format!(
                "class {} has {} samples (< {}); using {} for training",
                c + 1,
                members.len(),
                cfg.per_class_train,
                fallback
            ));
            fallback
        };
        let mut r = rng::rng_for(seed, &[c as u64]);
        members.shuffle(&mut r);
        members[..take].iter().for_each(|&i| in_train[i] = true);
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| in_train[i]);
    Ok(Split { train: dataset.subset(&train), test: dataset.subset(&test), notes })
}
