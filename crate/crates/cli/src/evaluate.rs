use std::path::PathBuf;

use anyhow::{anyhow, Context};
use duiit_core::baselines::MetricsConfig;
use duiit_core::checkpoint::Checkpoint;
use duiit_core::data::{load_dataset, LabeledImage, Modality};
use duiit_core::metrics::{mse, translation_metrics, RandomConvExtractor, TranslationMetrics};
use duiit_core::predictor::predict_images;
use duiit_core::translator::translate_images;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub modality: String,
    pub source_modality: Option<String>,
    pub max_samples: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Evaluation {
    method: String,
    modality: String,
    mse: f64,
    n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    translation: Option<TranslationMetrics>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let target = load_dataset(&args.data, &Modality::new(&args.modality))?;
    let cfg = ckpt.predictor.config();
    if (target.channels(), target.resolution()) != (cfg.channels, cfg.resolution) {
        return Err(CliError::config(anyhow!(
            "resolution mismatch: checkpoint expects {:?}x{}, `{}` holds {:?}x{}",
            cfg.resolution,
            cfg.channels,
            args.modality,
            target.resolution(),
            target.channels()
        )));
    }
    let refs: Vec<&LabeledImage> = target.images().iter().collect();
    let preds = predict_images(&ckpt.predictor, &refs, 64)?;
    let error = mse(&preds, &target.labels())?;

    let translation = match &args.source_modality {
        None => None,
        Some(name) => {
            let t = ckpt
                .translator
                .as_ref()
                .ok_or_else(|| CliError::config(anyhow!("checkpoint has no translator for IS/FID")))?;
            let source = load_dataset(&args.data, &Modality::new(name))?;
            let m = MetricsConfig::default();
            let fx = RandomConvExtractor::new(target.channels(), target.resolution(), m.num_classes, m.feature_dim, m.extractor_seed)?;
            let src: Vec<&LabeledImage> = source.images().iter().take(args.max_samples).collect();
            let translated = translate_images(&t.g, &src, target.modality(), 64)?;
            let translated: Vec<&LabeledImage> = translated.iter().collect();
            let reference: Vec<&LabeledImage> = refs.iter().copied().take(args.max_samples).collect();
            Some(translation_metrics(&fx, &translated, &reference, m.n_splits)?)
        }
    };
    let eval = Evaluation {
        method: ckpt.method.clone(),
        modality: args.modality.clone(),
        mse: error,
        n_samples: target.len(),
        translation,
    };
    let json = serde_json::to_string_pretty(&eval).context("serializing evaluation")?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| anyhow!("{}: {e}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}
