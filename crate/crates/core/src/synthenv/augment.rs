//! Semantics-preserving photometric, geometric and action-noise
//! augmentation. Never mirrors: left/right carry meaning in captions.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::Sample;
use super::world::{Image, DELTA_MAX};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub p_saturation: f64,
    pub p_crop: f64,
    pub p_translate_v: f64,
    pub p_translate_h: f64,
    pub p_scale: f64,
    pub p_action_noise: f64,
    /// Photometric factors are drawn from `[1 - j, 1 + j]`.
    pub photometric_jitter: f32,
    /// Smallest kept area fraction for crop-and-resize.
    pub crop_min_area: f32,
    /// Largest translation as a fraction of the image side.
    pub max_translate: f32,
    pub scale_range: (f32, f32),
    pub action_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_brightness: 0.5,
            p_contrast: 0.5,
            p_saturation: 0.5,
            p_crop: 0.6,
            p_translate_v: 0.4,
            p_translate_h: 0.4,
            p_scale: 0.3,
            p_action_noise: 0.7,
            photometric_jitter: 0.2,
            crop_min_area: 0.85,
            max_translate: 0.06,
            scale_range: (0.9, 1.1),
            action_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self {
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_saturation: 0.0,
            p_crop: 0.0,
            p_translate_v: 0.0,
            p_translate_h: 0.0,
            p_scale: 0.0,
            p_action_noise: 0.0,
            ..Self::default()
        }
    }
}

/// Which augmentations fired on one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub brightness: bool,
    pub contrast: bool,
    pub saturation: bool,
    pub crop: bool,
    pub translate_v: bool,
    pub translate_h: bool,
    pub scale: bool,
    pub action_noise: bool,
}

impl AugmentTrace {
    pub fn any(&self) -> bool {
        self.brightness
            || self.contrast
            || self.saturation
            || self.crop
            || self.translate_v
            || self.translate_h
            || self.scale
            || self.action_noise
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    augment_with(sample, &AugmentConfig::default(), rng).0
}

pub fn augment_with<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Sample, AugmentTrace) {
    // all rolls are drawn up front so the stream layout does not depend on outcomes
    let mut roll = |p: f64| rng.random::<f64>() < p;
    let trace = AugmentTrace {
        brightness: roll(cfg.p_brightness),
        contrast: roll(cfg.p_contrast),
        saturation: roll(cfg.p_saturation),
        crop: roll(cfg.p_crop),
        translate_v: roll(cfg.p_translate_v),
        translate_h: roll(cfg.p_translate_h),
        scale: roll(cfg.p_scale),
        action_noise: roll(cfg.p_action_noise),
    };
    let mut out = sample.clone();
    if !trace.any() {
        return (out, trace);
    }
    let j = cfg.photometric_jitter;
    let img = &mut out.observation.image;
    if trace.brightness {
        let f = rng.random_range(1.0 - j..=1.0 + j);
        img.data.iter_mut().for_each(|v| *v *= f);
    }
    if trace.contrast {
        let f = rng.random_range(1.0 - j..=1.0 + j);
        let mean = img.data.iter().map(|v| *v as f64).sum::<f64>() as f32 / img.data.len() as f32;
        img.data
            .iter_mut()
            .for_each(|v| *v = (*v - mean) * f + mean);
    }
    if trace.saturation {
        let f = rng.random_range(1.0 - j..=1.0 + j);
        for px in img.data.chunks_exact_mut(3) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.iter_mut().for_each(|v| *v = gray + (*v - gray) * f);
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    // geometric ops compose into one source-coordinate map (normalized [0,1])
    let mut sx = 1.0f32; // source span per unit output
    let mut ox = 0.0f32; // source origin
    let mut sy = 1.0f32;
    let mut oy = 0.0f32;
    if trace.crop {
        let area = rng.random_range(cfg.crop_min_area..=1.0);
        let side = area.sqrt();
        let x0 = rng.random_range(0.0..=1.0 - side);
        let y0 = rng.random_range(0.0..=1.0 - side);
        ox += x0 * sx;
        oy += y0 * sy;
        sx *= side;
        sy *= side;
    }
    if trace.translate_v {
        oy -= rng.random_range(-cfg.max_translate..=cfg.max_translate) * sy;
    }
    if trace.translate_h {
        ox -= rng.random_range(-cfg.max_translate..=cfg.max_translate) * sx;
    }
    if trace.scale {
        let f = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        // zoom about the current view centre
        let (cx, cy) = (ox + 0.5 * sx, oy + 0.5 * sy);
        sx /= f;
        sy /= f;
        ox = cx - 0.5 * sx;
        oy = cy - 0.5 * sy;
    }
    if trace.crop || trace.translate_v || trace.translate_h || trace.scale {
        *img = resample(img, ox, oy, sx, sy);
    }

    if trace.action_noise {
        let normal = Normal::new(0.0f32, cfg.action_sigma).expect("finite sigma");
        for d in &mut out.chunk.deltas {
            for v in d.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(-DELTA_MAX, DELTA_MAX);
            }
        }
    }
    (out, trace)
}

/// Bilinear resample: output pixel `(u, v)` in `[0,1]²` reads source
/// `(ox + u*sx, oy + v*sy)`, clamping to the edge.
fn resample(img: &Image, ox: f32, oy: f32, sx: f32, sy: f32) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::filled(h, w, [0.0; 3]);
    let at = |r: usize, c: usize, ch: usize| img.data[(r * w + c) * 3 + ch];
    for r in 0..h {
        for c in 0..w {
            let u = (c as f32 + 0.5) / w as f32;
            let v = (r as f32 + 0.5) / h as f32;
            let px = ((ox + u * sx) * w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let py = ((oy + v * sy) * h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
            let (c0, r0) = (px.floor() as usize, py.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
            let (fx, fy) = (px - c0 as f32, py - r0 as f32);
            for ch in 0..3 {
                let top = at(r0, c0, ch) * (1.0 - fx) + at(r0, c1, ch) * fx;
                let bot = at(r1, c0, ch) * (1.0 - fx) + at(r1, c1, ch) * fx;
                out.data[(r * w + c) * 3 + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}
