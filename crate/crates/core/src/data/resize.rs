use super::{LabeledImage, ModalityDataset, MIN_RESOLUTION};
use crate::error::{Error, Result};

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_image(img: &LabeledImage, (out_h, out_w): (usize, usize)) -> LabeledImage {
    if (img.height, img.width) == (out_h, out_w) {
        return img.clone();
    }
    let c = img.channels;
    let scale_y = img.height as f64 / out_h as f64;
    let scale_x = img.width as f64 / out_w as f64;
    let sample_axis = |i: usize, scale: f64, len: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };

    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for r in 0..out_h {
        let (y0, y1, fy) = sample_axis(r, scale_y, img.height);
        for col in 0..out_w {
            let (x0, x1, fx) = sample_axis(col, scale_x, img.width);
            for ch in 0..c {
                let p = |y, x| f64::from(img.pixel(y, x, ch));
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    LabeledImage {
        pixels,
        height: out_h,
        width: out_w,
        ..img.clone()
    }
}

pub fn resize_to(ds: &ModalityDataset, resolution: (usize, usize)) -> Result<ModalityDataset> {
    if resolution.0 < MIN_RESOLUTION || resolution.1 < MIN_RESOLUTION {
        return Err(Error::InvalidConfig(format!(
            "target resolution {resolution:?} below {MIN_RESOLUTION}x{MIN_RESOLUTION}"
        )));
    }
    let images = ds.images().iter().map(|i| resize_image(i, resolution)).collect();
    ModalityDataset::new(ds.modality().clone(), resolution, ds.channels(), images)
}
