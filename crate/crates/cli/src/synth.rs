use std::path::PathBuf;

use anyhow::anyhow;
use duiit_core::data::{generate_synthetic_task, save_dataset, ModalityDataset, SyntheticTaskSpec};

use crate::error::{CliError, CliResult};

pub struct SynthArgs {
    pub out: PathBuf,
    pub n_source: usize,
    pub n_target: usize,
    pub resolution: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub distractors: usize,
    pub no_clobber: bool,
}

fn summary(ds: &ModalityDataset) -> String {
    let labels = ds.labels();
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (h, w) = ds.resolution();
    format!("{}: {} images {h}x{w}, labels in [{lo:.2}, {hi:.2}]", ds.modality(), ds.len())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = SyntheticTaskSpec::new(args.n_source, args.n_target, (args.resolution, args.resolution), args.seed);
    spec.noise_std = args.noise_std;
    spec.distractors = args.distractors;
    spec.validate()?;
    if args.no_clobber {
        for m in ["source", "target"] {
            let dir = args.out.join(m);
            if dir.exists() {
                return Err(CliError::config(anyhow!("{} exists (--no-clobber)", dir.display())));
            }
        }
    }
    let task = generate_synthetic_task(&spec)?;
    for ds in [&task.source, &task.target] {
        save_dataset(&args.out, ds)?;
        println!("{}", summary(ds));
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
