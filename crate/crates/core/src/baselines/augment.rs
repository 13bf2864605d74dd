use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErasingPolicy {
    pub p: f64,
    /// Erased fraction of the image area.
    pub area: (f64, f64),
    /// Height over width of the rectangle.
    pub aspect: (f64, f64),
}

impl Default for ErasingPolicy {
    fn default() -> Self {
        Self {
            p: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.33),
        }
    }
}

impl ErasingPolicy {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area;
        let (r0, r1) = self.aspect;
        let ok = (0.0..=1.0).contains(&self.p) && 0.0 < a0 && a0 <= a1 && a1 < 1.0 && 0.0 < r0 && r0 <= r1;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid erasing policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Pad by this many pixels, then crop back at a random offset.
    pub crop_pad: Option<usize>,
    /// Horizontal flip with probability ½.
    pub flip: bool,
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: Option<f64>,
    /// Shift drawn from `±translation` of each side.
    pub translation: Option<f64>,
    /// Brightness offset and contrast factor drawn from `±jitter`.
    pub jitter: Option<f64>,
    /// Value for pixels uncovered by geometric ops.
    pub fill: f64,
    pub erasing: ErasingPolicy,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_pad: Some(4),
            flip: true,
            rotation_deg: Some(10.0),
            translation: Some(0.1),
            jitter: Some(0.1),
            fill: -1.0,
            erasing: ErasingPolicy::default(),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            crop_pad: None,
            flip: false,
            rotation_deg: None,
            translation: None,
            jitter: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: Option<f64>| v.map_or(true, |v| v >= 0.0 && v.is_finite());
        if !(nonneg(self.rotation_deg) && nonneg(self.translation) && nonneg(self.jitter)) {
            return Err(Error::InvalidConfig("augment ranges must be finite and >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.fill) {
            return Err(Error::InvalidConfig("augment fill must lie in [-1, 1]".into()));
        }
        self.erasing.validate()
    }
}

pub fn hflip(img: &LabeledImage) -> LabeledImage {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(img.pixels.len());
    for r in 0..h {
        for col in (0..w).rev() {
            let at = (r * w + col) * c;
            out.extend_from_slice(&img.pixels[at..at + c]);
        }
    }
    img.with_pixels(out)
}

/// Rotation by `deg` about the centre followed by a shift of `(dy, dx)`
/// pixels, bilinear sampling, `fill` outside the source.
pub fn rotate_translate(img: &LabeledImage, deg: f64, (dy, dx): (f64, f64), fill: f64) -> LabeledImage {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = deg.to_radians().sin_cos();
    let fetch = |r: isize, col: isize, ch: usize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            fill
        } else {
            f64::from(img.pixel(r as usize, col as usize, ch))
        }
    };
    let mut out = Vec::with_capacity(img.pixels.len());
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64 - dy - cy, col as f64 - dx - cx);
            let sy = cos * y + sin * x + cy;
            let sx = -sin * y + cos * x + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let mut v = fetch(y0, x0, ch) * (1.0 - fy) * (1.0 - fx);
                if fx > 0.0 {
                    v += fetch(y0, x0 + 1, ch) * (1.0 - fy) * fx;
                }
                if fy > 0.0 {
                    v += fetch(y0 + 1, x0, ch) * fy * (1.0 - fx);
                    if fx > 0.0 {
                        v += fetch(y0 + 1, x0 + 1, ch) * fy * fx;
                    }
                }
                out.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    img.with_pixels(out)
}

/// Crop of an image padded by `pad` on every side, taken at offset
/// `(oy, ox)` in `[0, 2 * pad]`.
pub fn pad_crop(img: &LabeledImage, pad: usize, (oy, ox): (usize, usize), fill: f64) -> Result<LabeledImage> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if h == 0 || w == 0 || oy > 2 * pad || ox > 2 * pad {
        return Err(Error::DegenerateCrop(format!("offset ({oy}, {ox}) with pad {pad} on {h}x{w}")));
    }
    let mut out = Vec::with_capacity(img.pixels.len());
    for r in 0..h {
        for col in 0..w {
            let (sr, sc) = ((r + oy) as isize - pad as isize, (col + ox) as isize - pad as isize);
            for ch in 0..c {
                let inside = sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w;
                out.push(if inside { img.pixel(sr as usize, sc as usize, ch) } else { fill as f32 });
            }
        }
    }
    Ok(img.with_pixels(out))
}

/// Crop, flip, rotation, translation and colour jitter, each as enabled.
pub fn augment_simple<R: Rng + ?Sized>(img: &LabeledImage, policy: &AugmentPolicy, rng: &mut R) -> Result<LabeledImage> {
    policy.validate()?;
    let mut out = img.clone();
    if let Some(pad) = policy.crop_pad {
        let offset = (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad));
        out = pad_crop(&out, pad, offset, policy.fill)?;
    }
    if policy.flip && rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    let deg = policy.rotation_deg.map_or(0.0, |r| rng.gen_range(-r..=r));
    let (dy, dx) = match policy.translation {
        Some(t) => (
            rng.gen_range(-t..=t) * out.height as f64,
            rng.gen_range(-t..=t) * out.width as f64,
        ),
        None => (0.0, 0.0),
    };
    if deg != 0.0 || dy != 0.0 || dx != 0.0 {
        out = rotate_translate(&out, deg, (dy, dx), policy.fill);
    }
    if let Some(j) = policy.jitter {
        let brightness = rng.gen_range(-j..=j);
        let contrast = 1.0 + rng.gen_range(-j..=j);
        let mean = out.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / out.pixels.len().max(1) as f64;
        let pixels = out
            .pixels
            .iter()
            .map(|&p| ((f64::from(p) - mean) * contrast + mean + brightness).clamp(-1.0, 1.0) as f32)
            .collect();
        out = out.with_pixels(pixels);
    }
    Ok(out)
}

/// Axis-aligned rectangle `[row, row + height) x [col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws an erasing rectangle whose integer area fraction lies in the policy
/// range, or `None` if 100 draws fail.
pub fn sample_erasing_rect<R: Rng + ?Sized>(h: usize, w: usize, policy: &ErasingPolicy, rng: &mut R) -> Option<Rect> {
    let total = (h * w) as f64;
    for _ in 0..100 {
        let area = rng.gen_range(policy.area.0..=policy.area.1) * total;
        let aspect = rng.gen_range(policy.aspect.0..=policy.aspect.1);
        let rh = (area * aspect).sqrt().round() as usize;
        let rw = (area / aspect).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        let frac = (rh * rw) as f64 / total;
        if frac < policy.area.0 || frac > policy.area.1 {
            continue;
        }
        return Some(Rect {
            row: rng.gen_range(0..=h - rh),
            col: rng.gen_range(0..=w - rw),
            height: rh,
            width: rw,
        });
    }
    None
}

/// With probability `p`, fills one random rectangle with uniform values in `[-1, 1]`.
pub fn augment_random_erasing<R: Rng + ?Sized>(img: &LabeledImage, policy: &ErasingPolicy, rng: &mut R) -> Result<LabeledImage> {
    policy.validate()?;
    if policy.p == 0.0 || !rng.gen_bool(policy.p) {
        return Ok(img.clone());
    }
    let Some(rect) = sample_erasing_rect(img.height, img.width, policy, rng) else {
        return Ok(img.clone());
    };
    let mut pixels = img.pixels.clone();
    let c = img.channels;
    for r in rect.row..rect.row + rect.height {
        for col in rect.col..rect.col + rect.width {
            for ch in 0..c {
                pixels[(r * img.width + col) * c + ch] = rng.gen_range(-1.0f32..=1.0);
            }
        }
    }
    Ok(img.with_pixels(pixels))
}
