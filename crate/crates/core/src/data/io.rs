//! On-disk layout:
//!
//! ```text
//! <root>/<modality>/images/<source_id>.png   8/16-bit grayscale or RGB
//! <root>/<modality>/labels.csv               header `source_id,label`, LF endings
//! ```
//!
//! 8-bit pixels map to `v / 127.5 - 1`, 16-bit to `v / 32767.5 - 1`. Datasets
//! are written as 16-bit PNGs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{LabeledImage, Modality, ModalityDataset};
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";
const IMAGES_DIR: &str = "images";

fn modality_dir(root: &Path, modality: &Modality) -> PathBuf {
    root.join(modality.as_str())
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.png"))
}

fn read_manifest(path: &Path) -> Result<Vec<(String, f64)>> {
    if !path.is_file() {
        return Err(Error::MissingManifest(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["source_id", "label"] {
        return Err(Error::Manifest(format!(
            "expected header `source_id,label`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Manifest(format!("row {} has {} fields", line + 2, record.len())));
        }
        let id = record[0].trim().to_string();
        let label: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Manifest(format!("row {}: bad label `{}`", line + 2, &record[1])))?;
        if !label.is_finite() {
            return Err(Error::NonFiniteLabel(id));
        }
        rows.push((id, label));
    }
    Ok(rows)
}

fn decode_image(path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    let unreadable = |reason: String| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let from8 = |v: u8| f32::from(v) / 127.5 - 1.0;
    let from16 = |v: u16| (f64::from(v) / 32767.5 - 1.0) as f32;
    let (pixels, channels) = match img {
        DynamicImage::ImageLuma8(b) => (b.into_raw().into_iter().map(from8).collect(), 1),
        DynamicImage::ImageLumaA8(_) => (img.to_luma8().into_raw().into_iter().map(from8).collect(), 1),
        DynamicImage::ImageRgb8(b) => (b.into_raw().into_iter().map(from8).collect(), 3),
        DynamicImage::ImageRgba8(_) => (img.to_rgb8().into_raw().into_iter().map(from8).collect(), 3),
        DynamicImage::ImageLuma16(b) => (b.into_raw().into_iter().map(from16).collect(), 1),
        DynamicImage::ImageLumaA16(_) => (img.to_luma16().into_raw().into_iter().map(from16).collect(), 1),
        DynamicImage::ImageRgb16(b) => (b.into_raw().into_iter().map(from16).collect(), 3),
        DynamicImage::ImageRgba16(_) => (img.to_rgb16().into_raw().into_iter().map(from16).collect(), 3),
        other => return Err(unreadable(format!("unsupported pixel format {:?}", other.color()))),
    };
    Ok((pixels, h, w, channels))
}

/// Reads one modality from the documented layout, ordered by `source_id`.
pub fn load_dataset(root: &Path, modality: &Modality) -> Result<ModalityDataset> {
    let dir = modality_dir(root, modality);
    let mut rows = read_manifest(&dir.join(LABELS_FILE))?;
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut images = Vec::with_capacity(rows.len());
    for (id, label) in &rows {
        let path = image_path(&dir, id);
        if !path.is_file() {
            return Err(Error::MissingImage {
                id: id.clone(),
                path,
            });
        }
        let (pixels, height, width, channels) = decode_image(&path)?;
        images.push(LabeledImage {
            pixels,
            height,
            width,
            channels,
            label: *label,
            modality: modality.clone(),
            source_id: id.clone(),
        });
    }

    let images_dir = dir.join(IMAGES_DIR);
    let on_disk = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .count();
    if on_disk != rows.len() {
        return Err(Error::CountMismatch {
            images: on_disk,
            labels: rows.len(),
        });
    }

    let (resolution, channels) = images
        .first()
        .map(|i| ((i.height, i.width), i.channels))
        .unwrap_or(((0, 0), 1));
    ModalityDataset::new(modality.clone(), resolution, channels, images)
}

fn check_id(id: &str) -> Result<()> {
    let bad = id.is_empty() || id.contains(['/', '\\', ',', '\n', '\r', '"']) || id.starts_with('.');
    if bad {
        return Err(Error::InvalidDataset(format!("source_id `{id}` is not a valid file stem")));
    }
    Ok(())
}

/// Writes `ds` under `<root>/<modality>/` as 16-bit PNGs plus the label manifest.
pub fn save_dataset(root: &Path, ds: &ModalityDataset) -> Result<()> {
    let dir = modality_dir(root, ds.modality());
    let images_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut seen = HashSet::new();
    let mut sorted: Vec<&LabeledImage> = ds.images().iter().collect();
    sorted.sort_by(|a, b| a.source_id.cmp(&b.source_id));

    let mut manifest = String::from("source_id,label\n");
    for img in sorted {
        check_id(&img.source_id)?;
        seen.insert(img.source_id.as_str());
        let quantised: Vec<u16> = img
            .pixels
            .iter()
            .map(|&p| ((f64::from(p) + 1.0) * 32767.5).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let (w, h) = (img.width as u32, img.height as u32);
        let path = image_path(&dir, &img.source_id);
        let encoded = match img.channels {
            1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, quantised).map(DynamicImage::ImageLuma16),
            3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, quantised).map(DynamicImage::ImageRgb16),
            c => return Err(Error::InvalidDataset(format!("cannot encode {c}-channel image"))),
        }
        .ok_or_else(|| Error::shape(format!("{h}x{w}"), img.pixels.len()))?;
        encoded.save(&path).map_err(|e| Error::UnreadableImage {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        manifest.push_str(&format!("{},{}\n", img.source_id, img.label));
    }
    let manifest_path = dir.join(LABELS_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
