use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModalityDataset;
use crate::error::{Error, Result};

/// Split sizes either as fractions (train and val floored, remainder to test)
/// or as absolute counts that must cover the dataset exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSizes {
    Fractions { train: f64, val: f64, test: f64 },
    Counts { train: usize, val: usize, test: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fractions(train: f64, val: f64, test: f64, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Fractions { train, val, test },
            seed,
        }
    }

    pub fn counts(train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Counts { train, val, test },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.sizes {
            SplitSizes::Fractions { train, val, test } => {
                for (name, f) in [("train", train), ("val", val), ("test", test)] {
                    if !(f > 0.0 && f < 1.0) {
                        return Err(Error::InvalidConfig(format!("{name} fraction {f} not in (0, 1)")));
                    }
                }
                let sum = train + val + test;
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!("split fractions sum to {sum}, not 1")));
                }
            }
            SplitSizes::Counts { train, val, test } => {
                if train == 0 || val == 0 || test == 0 {
                    return Err(Error::InvalidConfig("split counts must all be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a dataset of `n` items.
    pub fn sizes_for(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (tr, va, te) = match self.sizes {
            SplitSizes::Fractions { train, val, .. } => {
                let tr = (train * n as f64).floor() as usize;
                let va = (val * n as f64).floor() as usize;
                (tr, va, n.saturating_sub(tr + va))
            }
            SplitSizes::Counts { train, val, test } => {
                if train + val + test != n {
                    return Err(Error::InvalidConfig(format!(
                        "split counts {train}+{val}+{test} do not cover {n} images"
                    )));
                }
                (train, val, test)
            }
        };
        for (name, size) in [("train", tr), ("val", va), ("test", te)] {
            if size == 0 {
                return Err(Error::EmptySplit(name));
            }
        }
        Ok((tr, va, te))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: ModalityDataset,
    pub val: ModalityDataset,
    pub test: ModalityDataset,
}

/// Seeded random partition into train/val/test. Each part keeps the
/// original (source_id) ordering.
pub fn split_dataset(ds: &ModalityDataset, spec: &SplitSpec) -> Result<DatasetSplits> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n_train, n_val, _) = spec.sizes_for(ds.len())?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    let [train, val, test] = parts.each_mut().map(|idx| {
        idx.sort_unstable();
        let images = idx.iter().map(|&i| ds.images()[i].clone()).collect();
        ModalityDataset::new(ds.modality().clone(), ds.resolution(), ds.channels(), images)
    });
    Ok(DatasetSplits {
        train: train?,
        val: val?,
        test: test?,
    })
}
