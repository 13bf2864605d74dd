use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Duration;

use anyhow::{anyhow, Context};
use duiit_core::baselines::method_trainer;
use duiit_core::checkpoint::Checkpoint;
use duiit_core::engine::{run_seed, run_single, EpochLog, SeedResult, StepLog};
use duiit_core::report::RunReport;

use crate::config::{ExperimentConfig, LoadedData, Overrides};
use crate::error::{CliError, CliResult, EXIT_FAILURE};

pub const CONFIG_JSON: &str = "config.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const RESULT_FILE: &str = "result.json";

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub runs_dir: Option<PathBuf>,
    pub jobs: usize,
    pub no_clobber: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    anyhow!("{}: {e}", path.display()).into()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<PathBuf> {
    if args.jobs == 0 {
        return Err(CliError::config(anyhow!("--jobs must be at least 1")));
    }
    let cfg = ExperimentConfig::resolve(args.config.as_deref(), &args.overrides)?;
    let hash = cfg.hash();
    let exp_dir = cfg.runs_root(args.runs_dir.as_deref()).join(&hash);
    let report_path = exp_dir.join(REPORT_FILE);
    if args.no_clobber && report_path.exists() {
        return Err(CliError::config(anyhow!("{} exists (--no-clobber)", report_path.display())));
    }
    let data = cfg.load_data()?;
    cfg.split_spec().sizes_for(data.target.len())?;
    cfg.model.resolve(data.target.channels(), data.target.resolution(), &data.target.labels())?;

    std::fs::create_dir_all(&exp_dir).map_err(|e| io_err(&exp_dir, e))?;
    write(&exp_dir.join(CONFIG_JSON), serde_json::to_string_pretty(&cfg).context("serializing config")?)?;
    write(&exp_dir.join(CONFIG_TOML), toml::to_string(&cfg).context("serializing config")?)?;
    log::info!(
        "{} x{} runs, {} source / {} target images -> {}",
        cfg.method,
        cfg.train.n_runs,
        data.source.len(),
        data.target.len(),
        exp_dir.display()
    );

    let n = cfg.train.n_runs;
    let results = if args.jobs == 1 {
        (0..n).map(|i| run_index(&cfg, &data, &exp_dir, i)).collect::<CliResult<Vec<_>>>()?
    } else {
        run_workers(&cfg, &exp_dir, args.jobs)?
    };

    let aborted: Vec<String> = results
        .iter()
        .filter_map(|r| r.aborted.as_ref().map(|a| format!("run {} (seed {}): {a}", r.run_index, r.seed)))
        .collect();
    if aborted.len() == results.len() {
        return Err(CliError::aborted(anyhow!("all runs aborted:\n  {}", aborted.join("\n  "))));
    }
    let mut report = RunReport::from_results(cfg.method.as_str(), &hash, &results)?;
    report.data_hash = Some(data.hash.clone());
    report.save(&report_path)?;
    println!(
        "{}: test MSE {:.4} +- {:.4} over {} runs ({})",
        cfg.method,
        report.mse.mean,
        report.mse.std,
        report.mse.n_runs,
        report_path.display()
    );
    if !aborted.is_empty() {
        return Err(CliError::aborted(anyhow!("{} of {n} runs aborted:\n  {}", aborted.len(), aborted.join("\n  "))));
    }
    Ok(exp_dir)
}

pub fn seed_dir(exp_dir: &Path, cfg: &ExperimentConfig, index: usize) -> PathBuf {
    exp_dir.join(run_seed(cfg.train.seed, index).to_string())
}

/// Trains and evaluates run `index`, writing its checkpoint, losses and result.
pub fn run_index(cfg: &ExperimentConfig, data: &LoadedData, exp_dir: &Path, index: usize) -> CliResult<SeedResult> {
    let dir = seed_dir(exp_dir, cfg, index);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let setup = cfg.setup();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut trainer = method_trainer(&setup, |_, models| {
        Checkpoint {
            method: cfg.method.as_str().to_string(),
            step: models.step,
            epoch: models.epochs.len(),
            predictor: models.predictor.clone(),
            translator: models.translator.clone(),
        }
        .save(&ckpt_path)
    });
    let result = run_single(index, cfg.train.seed, &cfg.split_spec(), &data.source, &data.target, &mut trainer)?;
    write(&dir.join(LOSSES_FILE), losses_csv(&result.epochs))?;
    write(&dir.join(RESULT_FILE), serde_json::to_string_pretty(&result).context("serializing result")?)?;
    match (&result.test_mse, &result.aborted) {
        (Some(m), _) => log::info!("run {index} (seed {}): test MSE {m:.4}", result.seed),
        _ => {}
    }
    Ok(result)
}

pub fn losses_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr_translator,lr_predictor");
    for c in StepLog::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for e in epochs {
        let _ = write!(out, "{},{},{}", e.epoch, e.lr_translator, e.lr_predictor);
        for v in e.losses.values() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Entry point of a worker process: one run of an experiment directory.
pub fn cmd_worker(exp_dir: &Path, index: usize) -> CliResult<()> {
    let path = exp_dir.join(CONFIG_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::config(anyhow!("{}: {e}", path.display())))?;
    let data = cfg.load_data()?;
    run_index(&cfg, &data, exp_dir, index)?;
    Ok(())
}

fn spawn_worker(exp_dir: &Path, index: usize) -> CliResult<Child> {
    let exe = std::env::current_exe().context("locating own executable")?;
    Command::new(exe)
        .arg("worker")
        .arg("--experiment-dir")
        .arg(exp_dir)
        .arg("--index")
        .arg(index.to_string())
        .spawn()
        .map_err(|e| anyhow!("spawning worker {index}: {e}").into())
}

fn run_workers(cfg: &ExperimentConfig, exp_dir: &Path, jobs: usize) -> CliResult<Vec<SeedResult>> {
    let mut pending: VecDeque<usize> = (0..cfg.train.n_runs).collect();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut failure: Option<CliError> = None;
    while failure.is_none() && !(pending.is_empty() && running.is_empty()) {
        while running.len() < jobs {
            let Some(i) = pending.pop_front() else { break };
            running.push((i, spawn_worker(exp_dir, i)?));
        }
        let mut k = 0;
        while k < running.len() {
            match running[k].1.try_wait()? {
                Some(status) => {
                    let (i, _) = running.remove(k);
                    if !status.success() {
                        let code = status.code().unwrap_or(EXIT_FAILURE);
                        failure = Some(CliError { code, error: anyhow!("worker for run {i} exited with {status}") });
                    }
                }
                None => k += 1,
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    if let Some(f) = failure {
        for (_, mut child) in running {
            let _ = child.kill();
            let _ = child.wait();
        }
        return Err(f);
    }
    (0..cfg.train.n_runs)
        .map(|i| {
            let path = seed_dir(exp_dir, cfg, i).join(RESULT_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?)
        })
        .collect()
}
