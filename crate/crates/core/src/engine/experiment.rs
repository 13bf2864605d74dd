use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EpochLog;
use crate::data::{split_dataset, DatasetSplits, ModalityDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::TranslationMetrics;
use crate::seed::derive_seed;

/// Mean and sample standard deviation over the runs that finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when only one value was available and `std` is reported as 0.
    pub single_run: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        std,
        n,
        single_run: n == 1,
    })
}

/// Inputs handed to a per-seed trainer.
pub struct RunContext<'a> {
    pub run_index: usize,
    pub seed: u64,
    pub source: &'a ModalityDataset,
    pub splits: &'a DatasetSplits,
}

/// What a per-seed trainer reports back.
#[derive(Clone, Debug, Default)]
pub struct SeedOutcome {
    pub test_mse: f64,
    pub val_mse: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub translation: Option<TranslationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub run_index: usize,
    pub seed: u64,
    pub split_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub test_mse: Option<f64>,
    pub val_mse: Option<f64>,
    /// Diagnostic of a run that stopped on a non-finite loss.
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
    pub epochs: Vec<EpochLog>,
    pub translation: Option<TranslationMetrics>,
}

/// Short digest of the member ids of each split.
pub fn split_hash(splits: &DatasetSplits) -> String {
    let mut h = Sha256::new();
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        h.update(name.as_bytes());
        for img in part.images() {
            h.update([0u8]);
            h.update(img.source_id.as_bytes());
        }
        h.update([0xffu8]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Seed of run `index` under `root_seed`.
pub fn run_seed(root_seed: u64, index: usize) -> u64 {
    derive_seed(root_seed, "run", index as u64)
}

/// Splits `target` for run `index` and calls `trainer` on it. Runs that
/// abort on a non-finite loss are recorded, other errors propagate.
pub fn run_single<F>(
    index: usize,
    root_seed: u64,
    split: &SplitSpec,
    source: &ModalityDataset,
    target: &ModalityDataset,
    trainer: &mut F,
) -> Result<SeedResult>
where
    F: FnMut(&RunContext<'_>) -> Result<SeedOutcome>,
{
    let seed = run_seed(root_seed, index);
    let spec = SplitSpec {
        seed: derive_seed(seed, "split", 0),
        ..split.clone()
    };
    let splits = split_dataset(target, &spec)?;
    let started = Instant::now();
    let ctx = RunContext {
        run_index: index,
        seed,
        source,
        splits: &splits,
    };
    let mut result = SeedResult {
        run_index: index,
        seed,
        split_hash: split_hash(&splits),
        n_train: splits.train.len(),
        n_test: splits.test.len(),
        test_mse: None,
        val_mse: None,
        aborted: None,
        wall_clock_secs: 0.0,
        epochs: Vec::new(),
        translation: None,
    };
    match trainer(&ctx) {
        Ok(out) => {
            result.test_mse = Some(out.test_mse);
            result.val_mse = out.val_mse;
            result.epochs = out.epochs;
            result.translation = out.translation;
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            log::warn!("run {index} (seed {seed}) aborted: {e}");
            result.aborted = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    result.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Runs `n_runs` seeds in sequence.
pub fn run_experiment<F>(
    n_runs: usize,
    root_seed: u64,
    split: &SplitSpec,
    source: &ModalityDataset,
    target: &ModalityDataset,
    mut trainer: F,
) -> Result<Vec<SeedResult>>
where
    F: FnMut(&RunContext<'_>) -> Result<SeedOutcome>,
{
    if n_runs == 0 {
        return Err(Error::InvalidConfig("n_runs must be positive".into()));
    }
    (0..n_runs)
        .map(|i| run_single(i, root_seed, split, source, target, &mut trainer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::toy_dataset;
    use crate::data::SplitSizes;

    fn spec() -> SplitSpec {
        SplitSpec {
            sizes: SplitSizes::Fractions {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            seed: 0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[70.0, 80.0, 90.0]).unwrap();
        assert_eq!((a.mean, a.std, a.n, a.single_run), (80.0, 10.0, 3, false));
        let one = aggregate(&[5.0]).unwrap();
        assert_eq!((one.std, one.single_run), (0.0, true));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn injected_trainer_values_are_recorded_in_order() {
        let ds = toy_dataset(20);
        let values = [70.0, 80.0, 90.0];
        let runs = run_experiment(3, 1, &spec(), &ds, &ds, |ctx| {
            Ok(SeedOutcome {
                test_mse: values[ctx.run_index],
                ..SeedOutcome::default()
            })
        })
        .unwrap();
        let got: Vec<f64> = runs.iter().map(|r| r.test_mse.unwrap()).collect();
        assert_eq!(got, values);
        assert_ne!(runs[0].split_hash, runs[1].split_hash);
        assert_eq!(runs[0].n_train, 12);
    }

    #[test]
    fn aborted_runs_are_recorded_not_fatal() {
        let ds = toy_dataset(20);
        let runs = run_experiment(2, 1, &spec(), &ds, &ds, |ctx| {
            if ctx.run_index == 0 {
                Err(Error::NonFiniteLoss {
                    epoch: 0,
                    step: 3,
                    term: "cycle".into(),
                })
            } else {
                Ok(SeedOutcome::default())
            }
        })
        .unwrap();
        assert!(runs[0].aborted.as_deref().unwrap().contains("cycle"));
        assert!(runs[1].aborted.is_none());
    }

    #[test]
    fn replay_is_deterministic() {
        let ds = toy_dataset(20);
        let run = || {
            run_experiment(2, 9, &spec(), &ds, &ds, |ctx| {
                Ok(SeedOutcome {
                    test_mse: ctx.splits.test.labels().iter().sum(),
                    ..SeedOutcome::default()
                })
            })
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.wall_clock_secs = 0.0;
                r
            })
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
