//! Labelled image datasets: the in-memory model, deterministic splitting,
//! resampling, the on-disk layout and the synthetic two-modality task.

mod io;
mod resize;
mod split;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, LABELS_FILE};
pub use resize::{resize_image, resize_to};
pub use split::{split_dataset, DatasetSplits, SplitSizes, SplitSpec};
pub use synthetic::{generate_synthetic_task, LabelRule, ModalityTransform, SyntheticTask, SyntheticTaskSpec};

/// Smallest supported image side.
pub const MIN_RESOLUTION: usize = 8;

/// Name of an imaging modality (e.g. `ct`, `mri`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Modality(String);

impl Modality {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One image with its regression label. Pixels are row-major `H x W x C`
/// in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: f64,
    pub modality: Modality,
    pub source_id: String,
}

impl LabeledImage {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(Error::shape(
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{} values", self.pixels.len()),
            ));
        }
        if let Some(p) = self.pixels.iter().find(|p| !p.is_finite() || p.abs() > 1.0) {
            return Err(Error::InvalidDataset(format!(
                "`{}` has pixel {p} outside [-1, 1]",
                self.source_id
            )));
        }
        if !self.label.is_finite() {
            return Err(Error::NonFiniteLabel(self.source_id.clone()));
        }
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    /// Same image with different pixels (label and identity carried over).
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        Self {
            pixels,
            ..self.clone()
        }
    }
}

/// An ordered collection of images from one modality at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityDataset {
    modality: Modality,
    resolution: (usize, usize),
    channels: usize,
    images: Vec<LabeledImage>,
}

impl ModalityDataset {
    pub fn new(
        modality: Modality,
        resolution: (usize, usize),
        channels: usize,
        images: Vec<LabeledImage>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(images.len());
        for img in &images {
            img.validate()?;
            if img.modality != modality {
                return Err(Error::InvalidDataset(format!(
                    "`{}` has modality {} in a {modality} dataset",
                    img.source_id, img.modality
                )));
            }
            if (img.height, img.width) != resolution || img.channels != channels {
                return Err(Error::InvalidDataset(format!(
                    "`{}` is {}x{}x{}, dataset is {}x{}x{channels}",
                    img.source_id, img.height, img.width, img.channels, resolution.0, resolution.1
                )));
            }
            if !ids.insert(img.source_id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate source_id `{}`", img.source_id)));
            }
        }
        Ok(Self {
            modality,
            resolution,
            channels,
            images,
        })
    }

    pub fn modality(&self) -> &Modality {
        &self.modality
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn into_images(self) -> Vec<LabeledImage> {
        self.images
    }
}

/// Stacks images into an `(N, C, H, W)` tensor.
pub fn images_to_tensor(images: &[&LabeledImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyBatch)?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape(
                format!("{h}x{w}x{c}"),
                format!("{}x{}x{}", img.height, img.width, img.channels),
            ));
        }
        data.extend_from_slice(&img.pixels);
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?;
    Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`]: one `H x W x C` pixel vector per batch item.
pub fn tensor_to_pixels(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let per = c * h * w;
    Ok((0..n).map(|i| flat[i * per..(i + 1) * per].to_vec()).collect())
}

pub fn labels_to_tensor(images: &[&LabeledImage], dtype: DType) -> Result<Tensor> {
    let labels: Vec<f64> = images.iter().map(|i| i.label).collect();
    Ok(Tensor::from_vec(labels, images.len(), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn image(id: &str, modality: &str, h: usize, w: usize, label: f64, fill: impl Fn(usize, usize) -> f32) -> LabeledImage {
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                pixels.push(fill(r, c));
            }
        }
        LabeledImage {
            pixels,
            height: h,
            width: w,
            channels: 1,
            label,
            modality: Modality::new(modality),
            source_id: id.to_string(),
        }
    }

    pub fn toy_dataset(n: usize) -> ModalityDataset {
        let images = (0..n)
            .map(|i| image(&format!("img{i:04}"), "ct", 8, 8, i as f64, |r, c| ((r + c + i) % 3) as f32 * 0.5 - 0.5))
            .collect();
        ModalityDataset::new(Modality::new("ct"), (8, 8), 1, images).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let a = image("a", "ct", 3, 4, 1.0, |r, c| (r * 4 + c) as f32 / 12.0);
        let t = images_to_tensor(&[&a], DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 1, 3, 4]);
        assert_eq!(tensor_to_pixels(&t).unwrap()[0], a.pixels);
    }

    #[test]
    fn rejects_duplicate_ids_and_out_of_range_pixels() {
        let a = image("a", "ct", 8, 8, 1.0, |_, _| 0.0);
        let err = ModalityDataset::new(Modality::new("ct"), (8, 8), 1, vec![a.clone(), a.clone()]);
        assert!(matches!(err, Err(Error::InvalidDataset(_))));
        let bad = image("b", "ct", 8, 8, 1.0, |_, _| 1.5);
        assert!(ModalityDataset::new(Modality::new("ct"), (8, 8), 1, vec![bad]).is_err());
        let nan = image("c", "ct", 8, 8, f64::NAN, |_, _| 0.0);
        assert!(matches!(
            ModalityDataset::new(Modality::new("ct"), (8, 8), 1, vec![nan]),
            Err(Error::NonFiniteLabel(_))
        ));
    }
}
