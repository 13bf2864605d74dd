use std::path::{Path, PathBuf};

use anyhow::anyhow;
use duiit_core::baselines::{BaselineConfig, MethodSetup, MetricsConfig, ModelConfig, ModelPreset};
use duiit_core::data::{
    generate_synthetic_task, load_dataset, resize_to, Modality, ModalityDataset, SplitSizes, SplitSpec,
    SyntheticTaskSpec,
};
use duiit_core::engine::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const RUNS_DIR_ENV: &str = "DUIIT_RUNS_DIR";
const DEFAULT_RUNS_DIR: &str = "runs";

/// Where the two modalities come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding one directory per modality.
    pub root: Option<PathBuf>,
    /// Generate the synthetic task in memory instead of reading `root`.
    pub synthetic: Option<SyntheticTaskSpec>,
    pub source: String,
    pub target: String,
    /// Common resolution both modalities are resized to.
    pub resolution: Option<(usize, usize)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: None,
            source: "source".into(),
            target: "target".into(),
            resolution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub runs_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            runs_dir: None,
            data: DataConfig::default(),
            split: SplitSizes::Fractions { train: 0.774, val: 0.111, test: 0.115 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub data: Option<PathBuf>,
    pub preset: Option<ModelPreset>,
    pub epochs: Option<usize>,
    pub decay_start: Option<usize>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub lr_translator: Option<f64>,
    pub lr_predictor: Option<f64>,
    pub n_runs: Option<usize>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(anyhow!("invalid config: {e}")))
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(anyhow!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| e.context(format!("in {}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(d) = &o.data {
            self.data.root = Some(d.clone());
            self.data.synthetic = None;
        }
        if let Some(p) = o.preset {
            self.model.preset = p;
        }
        let t = &mut self.train;
        if let Some(e) = o.epochs {
            t.total_epochs = e;
            if o.decay_start.is_none() && t.decay_start_epoch > e {
                t.decay_start_epoch = (e / 2).max(1);
            }
        }
        if let Some(d) = o.decay_start {
            t.decay_start_epoch = d;
        }
        if let Some(b) = o.batch_size {
            t.batch_size = b;
        }
        if let Some(l) = o.lambda {
            t.lambda = l;
        }
        if let Some(l) = o.lr_translator {
            t.lr_translator = l;
        }
        if let Some(l) = o.lr_predictor {
            t.lr_predictor = l;
        }
        if let Some(n) = o.n_runs {
            t.n_runs = n;
        }
        if let Some(s) = o.seed {
            t.seed = s;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.setup().validate()?;
        SplitSpec { sizes: self.split, seed: 0 }.validate()?;
        match (&self.data.root, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::config(anyhow!("data.root and data.synthetic are exclusive"))),
            (None, None) => return Err(CliError::config(anyhow!("no data: set data.root, data.synthetic or --data"))),
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => {}
        }
        if self.data.source == self.data.target {
            return Err(CliError::config(anyhow!("source and target modality are both `{}`", self.data.source)));
        }
        Ok(())
    }

    pub fn setup(&self) -> MethodSetup {
        MethodSetup {
            method: self.method,
            model: self.model.clone(),
            train: self.train.clone(),
            baselines: self.baselines.clone(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { sizes: self.split, seed: self.train.seed }
    }

    /// Digest of everything that affects results; the run root is excluded.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.runs_dir = None;
        let json = serde_json::to_string(&hashed).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// `flag`, then `DUIIT_RUNS_DIR`, then the file, then `runs`.
    pub fn runs_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(env) = std::env::var_os(RUNS_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        self.runs_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
    }

    pub fn load_data(&self) -> CliResult<LoadedData> {
        let (source, target) = match (&self.data.root, &self.data.synthetic) {
            (Some(root), _) => (
                load_dataset(root, &Modality::new(&self.data.source))?,
                load_dataset(root, &Modality::new(&self.data.target))?,
            ),
            (None, Some(spec)) => {
                let task = generate_synthetic_task(spec)?;
                (task.source, task.target)
            }
            (None, None) => return Err(CliError::config(anyhow!("no data configured"))),
        };
        let (source, target) = match self.data.resolution {
            Some(r) => (resize_to(&source, r)?, resize_to(&target, r)?),
            None if source.resolution() != target.resolution() => {
                let r = target.resolution();
                (resize_to(&source, r)?, target)
            }
            None => (source, target),
        };
        let hash = data_hash(&[&source, &target]);
        Ok(LoadedData { source, target, hash })
    }
}

pub struct LoadedData {
    pub source: ModalityDataset,
    pub target: ModalityDataset,
    pub hash: String,
}

/// Digest of ids, labels and pixels.
pub fn data_hash(sets: &[&ModalityDataset]) -> String {
    let mut h = Sha256::new();
    for ds in sets {
        h.update(ds.modality().as_str().as_bytes());
        for img in ds.images() {
            h.update(img.source_id.as_bytes());
            h.update(img.label.to_le_bytes());
            for p in &img.pixels {
                h.update(p.to_le_bytes());
            }
        }
    }
    hex::encode(&h.finalize()[..8])
}
