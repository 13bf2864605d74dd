use std::path::{Path, PathBuf};

use anyhow::anyhow;
use duiit_core::checkpoint::Checkpoint;
use duiit_core::data::{load_dataset, save_dataset, LabeledImage, Modality, ModalityDataset};
use duiit_core::translator::translate_images;
use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

const GAP: u32 = 2;

pub struct TranslateArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub modality: String,
    pub out: PathBuf,
    pub target_modality: String,
    pub grid: Option<PathBuf>,
    pub grid_rows: usize,
    pub batch_size: usize,
    pub no_clobber: bool,
}

pub fn cmd_translate(args: &TranslateArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let translator = ckpt
        .translator
        .as_ref()
        .ok_or_else(|| CliError::config(anyhow!("checkpoint of method `{}` has no translator", ckpt.method)))?;
    let g = &translator.g;
    let input = load_dataset(&args.input, &Modality::new(&args.modality))?;
    let expected = (g.config().channels, g.config().resolution);
    if (input.channels(), input.resolution()) != expected || input.is_empty() {
        return Err(CliError::config(anyhow!(
            "resolution mismatch: checkpoint expects {}x{}x{}, `{}` holds {}x{}x{}",
            expected.1 .0,
            expected.1 .1,
            expected.0,
            args.modality,
            input.resolution().0,
            input.resolution().1,
            input.channels()
        )));
    }
    let out_dir = args.out.join(&args.target_modality);
    if args.no_clobber && out_dir.exists() {
        return Err(CliError::config(anyhow!("{} exists (--no-clobber)", out_dir.display())));
    }
    let modality = Modality::new(&args.target_modality);
    let refs: Vec<&LabeledImage> = input.images().iter().collect();
    let translated = translate_images(g, &refs, &modality, args.batch_size)?;
    let ds = ModalityDataset::new(modality, input.resolution(), input.channels(), translated)?;
    save_dataset(&args.out, &ds)?;
    println!("translated {} images into {}", ds.len(), out_dir.display());
    if let Some(path) = &args.grid {
        write_grid(path, input.images(), ds.images(), args.grid_rows)?;
        println!("grid {}", path.display());
    }
    Ok(())
}

fn to_u8(p: f32) -> u8 {
    ((f64::from(p) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn rgb(img: &LabeledImage, row: usize, col: usize) -> Rgb<u8> {
    if img.channels >= 3 {
        Rgb([0, 1, 2].map(|c| to_u8(img.pixel(row, col, c))))
    } else {
        let v = to_u8(img.pixel(row, col, 0));
        Rgb([v, v, v])
    }
}

/// One row per pair: the input tile, a gap, then the translated tile.
pub fn write_grid(path: &Path, inputs: &[LabeledImage], outputs: &[LabeledImage], max_rows: usize) -> CliResult<()> {
    let rows = inputs.len().min(outputs.len()).min(max_rows.max(1));
    let Some(first) = inputs.first() else {
        return Err(CliError::config(anyhow!("no images for the grid")));
    };
    let (h, w) = (first.height as u32, first.width as u32);
    let mut canvas = RgbImage::from_pixel(2 * w + GAP, rows as u32 * (h + GAP) - GAP, Rgb([255, 255, 255]));
    for (r, (a, b)) in inputs.iter().zip(outputs).take(rows).enumerate() {
        let top = r as u32 * (h + GAP);
        for y in 0..h {
            for x in 0..w {
                canvas.put_pixel(x, top + y, rgb(a, y as usize, x as usize));
                canvas.put_pixel(w + GAP + x, top + y, rgb(b, y as usize, x as usize));
            }
        }
    }
    canvas.save(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(())
}
