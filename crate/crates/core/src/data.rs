//! Image records, the synthetic vessel generator and random patch
//! extraction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{tags, RngStream};
use crate::tensor::Tensor;

/// A grayscale image with its binary vessel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]` in `{0, 1}`.
    pub mask: Tensor<f32>,
    /// Optional field-of-view mask, `[H, W]` in `{0, 1}`.
    pub fov: Option<Tensor<f32>>,
}

fn is_binary(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>, fov: Option<Tensor<f32>>) -> Result<Self> {
        let id = id.into();
        let [1, h, w] = image.shape()[..] else {
            return Err(Error::shape("ImageRecord", format!("{id}: image must be [1,H,W], got {:?}", image.shape())));
        };
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image", format!("{id}: values outside [0, 1]")));
        }
        for (name, m) in core::iter::once(("mask", &mask)).chain(fov.as_ref().map(|f| ("fov", f))) {
            if m.shape() != [h, w] {
                return Err(Error::shape("ImageRecord", format!("{id}: {name} is {:?}, image is {h}x{w}", m.shape())));
            }
            if !is_binary(m) {
                return Err(Error::invalid("mask", format!("{id}: {name} is not binary")));
            }
        }
        Ok(ImageRecord { id, image, mask, fov })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of main curves per image.
    pub curves: (usize, usize),
    /// Vessel diameter range in pixels; curves taper from the upper to the
    /// lower bound.
    pub vessel_width: (f32, f32),
    /// Fractional darkening of vessel pixels relative to the background.
    pub contrast: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 20,
            height: 96,
            width: 96,
            curves: (3, 6),
            vessel_width: (1.0, 4.0),
            contrast: 0.5,
            noise_std: 0.04,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic size", "must be positive"));
        }
        if self.curves.0 > self.curves.1 {
            return Err(Error::invalid("curves", format!("{:?} is not a range", self.curves)));
        }
        let (lo, hi) = self.vessel_width;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("vessel_width", format!("{:?} is not a positive range", self.vessel_width)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::invalid("contrast", format!("{} not in (0, 1]", self.contrast)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Smooth illumination with a bright centre, in `[0.55, 0.8]`.
pub fn background_level(config: &SyntheticConfig, y: usize, x: usize) -> f32 {
    let cy = (config.height as f32 - 1.0) / 2.0;
    let cx = (config.width as f32 - 1.0) / 2.0;
    let dy = (y as f32 - cy) / (cy.max(1.0));
    let dx = (x as f32 - cx) / (cx.max(1.0));
    let r2 = ((dy * dy + dx * dx) / 2.0).min(1.0);
    0.8 - 0.25 * r2
}

struct Canvas {
    h: usize,
    w: usize,
    /// Darkening depth per pixel; > 0 exactly on the vessel support.
    depth: Vec<f32>,
}

impl Canvas {
    fn stamp(&mut self, cy: f32, cx: f32, radius: f32, depth: f32) {
        let r = radius.max(0.5);
        let y0 = libm::floorf(cy - r).max(0.0) as usize;
        let x0 = libm::floorf(cx - r).max(0.0) as usize;
        let y1 = (libm::ceilf(cy + r).max(0.0) as usize).min(self.h.saturating_sub(1));
        let x1 = (libm::ceilf(cx + r).max(0.0) as usize).min(self.w.saturating_sub(1));
        if cy + r < 0.0 || cx + r < 0.0 {
            return;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                if dy * dy + dx * dx <= r * r {
                    let d = &mut self.depth[y * self.w + x];
                    *d = d.max(depth);
                }
            }
        }
    }

    /// A smooth random walk of `length` pixels tapering from `w_start` to
    /// `w_end`; spawns at most one narrower branch.
    #[allow(clippy::too_many_arguments)]
    fn curve(
        &mut self,
        rng: &mut RngStream,
        mut y: f32,
        mut x: f32,
        mut angle: f32,
        length: f32,
        w_start: f32,
        w_end: f32,
        w_max: f32,
        branch: bool,
    ) {
        let step = 0.5f32;
        let steps = (length / step) as usize;
        let mut curvature = 0.0f32;
        let branch_at = if branch { steps / 3 + rng.below((steps / 3).max(1) as u64) as usize } else { usize::MAX };
        for i in 0..steps {
            let frac = i as f32 / steps.max(1) as f32;
            let width = w_start + (w_end - w_start) * frac;
            let depth = 0.35 + 0.45 * libm::sqrtf(width / w_max);
            self.stamp(y, x, width / 2.0, depth);
            if i == branch_at {
                let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let ba = angle + side * (0.5 + 0.6 * rng.uniform() as f32);
                let bl = length * (0.3 + 0.3 * rng.uniform() as f32);
                self.curve(rng, y, x, ba, bl, width * 0.7, w_end, w_max, false);
            }
            curvature = 0.9 * curvature + 0.04 * rng.normal() as f32;
            angle += curvature;
            y += step * libm::sinf(angle);
            x += step * libm::cosf(angle);
            if y < -4.0 || x < -4.0 || y > self.h as f32 + 4.0 || x > self.w as f32 + 4.0 {
                break;
            }
        }
    }
}

/// Dark tapering curves with branches on a smooth background plus
/// Gaussian noise. The mask is the exact support of the drawn curves.
/// Image `i` uses stream `(seed, SYNTH, i)`.
pub fn synth_vessels(config: &SyntheticConfig) -> Result<Vec<ImageRecord>> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let (w_min, w_max) = config.vessel_width;
    (0..config.count)
        .map(|i| {
            let mut rng = RngStream::derive(config.seed, tags::SYNTH, i as u64);
            let mut canvas = Canvas { h, w, depth: vec![0.0; h * w] };
            let span = (config.curves.1 - config.curves.0) as u64 + 1;
            let n_curves = config.curves.0 + rng.below(span) as usize;
            let extent = h.max(w) as f32;
            for _ in 0..n_curves {
                let y = rng.range(0.0, h as f64) as f32;
                let x = rng.range(0.0, w as f64) as f32;
                let angle = rng.range(0.0, core::f64::consts::TAU) as f32;
                let length = extent * rng.range(0.6, 1.4) as f32;
                let start = w_min + (w_max - w_min) * rng.range(0.6, 1.0) as f32;
                canvas.curve(&mut rng, y, x, angle, length, start, w_min, w_max, true);
            }
            let mut image = vec![0.0f32; h * w];
            let mut mask = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    let bg = background_level(config, y, x);
                    let d = canvas.depth[idx];
                    let clean = if d > 0.0 {
                        mask[idx] = 1.0;
                        bg * (1.0 - config.contrast * d)
                    } else {
                        bg
                    };
                    let noise = if config.noise_std > 0.0 { config.noise_std * rng.normal() as f32 } else { 0.0 };
                    image[idx] = (clean + noise).clamp(0.0, 1.0);
                }
            }
            ImageRecord::new(
                format!("synth_{i:04}"),
                Tensor::new(vec![1, h, w], image)?,
                Tensor::new(vec![h, w], mask)?,
                None,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Index into the source record list.
    pub record: usize,
    pub y: usize,
    pub x: usize,
    /// `[1, s, s]`.
    pub image: Tensor<f32>,
    /// `[s, s]`.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn examples(&self) -> Vec<crate::unet::Example<'_, f32>> {
        self.patches.iter().map(|p| crate::unet::Example { image: &p.image, labels: &p.mask }).collect()
    }
}

pub fn crop(record: &ImageRecord, y: usize, x: usize, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (record.height(), record.width());
    if y + size > h || x + size > w || size == 0 {
        return Err(Error::invalid("crop", format!("{size}x{size} at ({y},{x}) exceeds {h}x{w}")));
    }
    let mut img = Vec::with_capacity(size * size);
    let mut msk = Vec::with_capacity(size * size);
    for row in y..y + size {
        img.extend_from_slice(&record.image.data()[row * w + x..row * w + x + size]);
        msk.extend_from_slice(&record.mask.data()[row * w + x..row * w + x + size]);
    }
    Ok((Tensor::new(vec![1, size, size], img)?, Tensor::new(vec![size, size], msk)?))
}

/// `n` patches, each from a uniformly chosen record at a uniformly chosen
/// valid offset (with replacement). Patch `i` uses stream `(seed, PATCH, i)`.
pub fn extract_patches(records: &[ImageRecord], n: usize, size: usize, seed: u64) -> Result<PatchSet> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::invalid("patch size", format!("{size} must be a positive multiple of 4")));
    }
    if n == 0 {
        return Ok(PatchSet { size, patches: Vec::new() });
    }
    if records.is_empty() {
        return Err(Error::Empty { what: "record list" });
    }
    if let Some(r) = records.iter().find(|r| r.height() < size || r.width() < size) {
        return Err(Error::invalid(
            "patch size",
            format!("{size} exceeds {}x{} image {}", r.height(), r.width(), r.id),
        ));
    }
    let patches = (0..n)
        .map(|i| {
            let mut rng = RngStream::derive(seed, tags::PATCH, i as u64);
            let record = rng.below(records.len() as u64) as usize;
            let r = &records[record];
            let y = rng.below((r.height() - size + 1) as u64) as usize;
            let x = rng.below((r.width() - size + 1) as u64) as usize;
            let (image, mask) = crop(r, y, x, size)?;
            Ok(Patch { record, y, x, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet { size, patches })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_vessels_darker_than_background() {
        let cfg = SyntheticConfig { noise_std: 0.0, contrast: 1.0, count: 5, ..SyntheticConfig::default() };
        for rec in synth_vessels(&cfg).unwrap() {
            let mut any = false;
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let v = rec.image.data()[y * cfg.width + x];
                    let bg = background_level(&cfg, y, x);
                    if rec.mask.data()[y * cfg.width + x] == 1.0 {
                        any = true;
                        assert!(v < bg, "{} ({y},{x}) {v} vs {bg}", rec.id);
                    } else {
                        assert_eq!(v, bg);
                    }
                }
            }
            assert!(any);
        }
    }

    #[test]
    fn zero_curves_is_blank() {
        let cfg = SyntheticConfig { curves: (0, 0), count: 2, ..SyntheticConfig::default() };
        for rec in synth_vessels(&cfg).unwrap() {
            assert!(rec.mask.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticConfig { count: 3, ..SyntheticConfig::default() };
        assert_eq!(synth_vessels(&cfg).unwrap(), synth_vessels(&cfg).unwrap());
    }

    #[test]
    fn foreground_fraction_envelope() {
        for rec in synth_vessels(&SyntheticConfig::default()).unwrap() {
            let frac = rec.mask.sum_f64() / rec.mask.len() as f64;
            assert!((0.02..=0.20).contains(&frac), "{} fg fraction {frac}", rec.id);
        }
    }

    #[test]
    fn patch_errors_and_empty() {
        let recs = synth_vessels(&SyntheticConfig { count: 1, ..SyntheticConfig::default() }).unwrap();
        assert!(extract_patches(&recs, 0, 48, 1).unwrap().is_empty());
        assert!(extract_patches(&recs, 3, 100, 1).is_err());
        assert!(extract_patches(&recs, 3, 30, 1).is_err());
        let a = extract_patches(&recs, 5, 48, 9).unwrap();
        assert_eq!(a, extract_patches(&recs, 5, 48, 9).unwrap());
        for p in &a.patches {
            let (img, msk) = crop(&recs[0], p.y, p.x, 48).unwrap();
            assert_eq!((img, msk), (p.image.clone(), p.mask.clone()));
        }
    }

    #[test]
    fn record_validation() {
        let img = Tensor::full(&[1, 4, 4], 0.5);
        assert!(ImageRecord::new("a", img.clone(), Tensor::full(&[4, 3], 0.0), None).is_err());
        assert!(ImageRecord::new("a", img.clone(), Tensor::full(&[4, 4], 0.5), None).is_err());
        assert!(ImageRecord::new("a", img, Tensor::full(&[4, 4], 1.0), None).is_ok());
    }
}
