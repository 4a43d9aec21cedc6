use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{AttributeSet, GlyphLayer, Rasterizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    /// Minimum per-channel separation between text and background, in `[0.3, 1]`.
    pub contrast: f64,
    /// Amplitude of the band-limited noise (noise backgrounds only).
    #[serde(default = "default_noise_amplitude")]
    pub noise_amplitude: f64,
}

fn default_noise_amplitude() -> f64 {
    0.15
}

impl BackgroundSpec {
    pub fn solid(contrast: f64) -> Self {
        BackgroundSpec {
            kind: BackgroundKind::Solid,
            contrast,
            noise_amplitude: default_noise_amplitude(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    /// All words on one line, left to right.
    Row,
    /// One word per line, left aligned, top to bottom.
    #[default]
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutPolicy {
    /// Inclusive range of cap heights to sample from.
    pub px_height: (u32, u32),
    pub arrangement: Arrangement,
    /// Blank pixels between consecutive word layers.
    pub word_gap: usize,
    /// Minimum distance between any layer and the image border.
    pub margin: usize,
    /// Fixed top-left origin; `None` samples it uniformly within bounds.
    pub anchor: Option<(usize, usize)>,
}

impl Default for LayoutPolicy {
    fn default() -> Self {
        LayoutPolicy {
            px_height: (8, 10),
            arrangement: Arrangement::Column,
            word_gap: 2,
            margin: 1,
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// A composited scene-text image with exact per-word masks.
#[derive(Debug, Clone)]
pub struct StyledSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub words: Vec<(String, AttributeSet)>,
    pub pixel_masks: Vec<Array2<bool>>,
    /// Each word's coverage placed in image coordinates.
    pub word_alpha: Vec<Array2<f32>>,
    pub layout: Vec<BBox>,
    pub px_height: u32,
    pub seed: u64,
}

impl StyledSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

type Rgb = [f64; 3];

/// Picks a text colour and a feasibility test for background colours such
/// that every channel is separated by at least `contrast`.
fn pick_palette(rng: &mut ChaCha8Rng, contrast: f64) -> (Rgb, bool) {
    let dark_text = rng.random_bool(0.5);
    let mut text = [0.0; 3];
    for c in &mut text {
        let v = rng.random_range(0.0..=(1.0 - contrast).max(0.0));
        *c = if dark_text { v } else { 1.0 - v };
    }
    (text, dark_text)
}

fn feasible_range(text: f64, dark_text: bool, contrast: f64) -> (f64, f64) {
    if dark_text {
        ((text + contrast).min(1.0), 1.0)
    } else {
        (0.0, (text - contrast).max(0.0))
    }
}

fn random_bg_color(rng: &mut ChaCha8Rng, text: &Rgb, dark: bool, contrast: f64) -> Rgb {
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let (lo, hi) = feasible_range(text[ch], dark, contrast);
        out[ch] = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
    }
    out
}

fn render_background(
    rng: &mut ChaCha8Rng,
    spec: &BackgroundSpec,
    size: (usize, usize),
    text: &Rgb,
    dark: bool,
) -> Array3<f64> {
    let (h, w) = size;
    let mut bg = Array3::<f64>::zeros((h, w, 3));
    match spec.kind {
        BackgroundKind::Solid => {
            let c = random_bg_color(rng, text, dark, spec.contrast);
            for ((_, _, ch), v) in bg.indexed_iter_mut() {
                *v = c[ch];
            }
        }
        BackgroundKind::Gradient => {
            let c0 = random_bg_color(rng, text, dark, spec.contrast);
            let c1 = random_bg_color(rng, text, dark, spec.contrast);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (w as f64 * dx.abs() + h as f64 * dy.abs()).max(1.0);
            let x0 = if dx < 0.0 { (w as f64) * -dx } else { 0.0 };
            let y0 = if dy < 0.0 { (h as f64) * -dy } else { 0.0 };
            for ((y, x, ch), v) in bg.indexed_iter_mut() {
                let t = ((x as f64 * dx + x0 + y as f64 * dy + y0) / span).clamp(0.0, 1.0);
                *v = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
        BackgroundKind::Noise => {
            let base = random_bg_color(rng, text, dark, spec.contrast);
            // Band-limited noise: a coarse random lattice, bilinearly upsampled.
            let cells = 4usize;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1) * 3)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            for ((y, x, ch), v) in bg.indexed_iter_mut() {
                let fy = y as f64 / h as f64 * cells as f64;
                let fx = x as f64 / w as f64 * cells as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                let at = |yy: usize, xx: usize| lattice[(yy * (cells + 1) + xx) * 3 + ch];
                let n = at(iy, ix) * (1.0 - ty) * (1.0 - tx)
                    + at(iy, ix + 1) * (1.0 - ty) * tx
                    + at(iy + 1, ix) * ty * (1.0 - tx)
                    + at(iy + 1, ix + 1) * ty * tx;
                let (lo, hi) = feasible_range(text[ch], dark, spec.contrast);
                *v = (base[ch] + spec.noise_amplitude * n).clamp(lo, hi);
            }
        }
    }
    bg
}

/// Lays out `words` on one line, composites them over a procedural
/// background and records each word's exact `alpha > 0` footprint.
pub fn compose_sample(
    words: &[(String, AttributeSet)],
    image_size: usize,
    background: &BackgroundSpec,
    layout: &LayoutPolicy,
    seed: u64,
    raster: &Rasterizer,
) -> Result<StyledSample> {
    if words.is_empty() {
        return Err(Error::config("compose_sample needs at least one word"));
    }
    if !(0.3..=1.0).contains(&background.contrast) {
        return Err(Error::config(format!(
            "contrast {} outside [0.3, 1]",
            background.contrast
        )));
    }
    let (lo_px, hi_px) = layout.px_height;
    if lo_px > hi_px {
        return Err(Error::config("layout px_height range is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let line_size = |px: u32| -> Result<(usize, usize)> {
        let mut width = 0;
        let mut height = 0;
        for (i, (text, attrs)) in words.iter().enumerate() {
            let (w, h) = raster.layer_size(text, attrs.font_class, px)?;
            let gap = if i > 0 { layout.word_gap } else { 0 };
            match layout.arrangement {
                Arrangement::Row => {
                    width += w + gap;
                    height = height.max(h);
                }
                Arrangement::Column => {
                    width = width.max(w);
                    height += h + gap;
                }
            }
        }
        Ok((width, height))
    };
    let available = image_size.saturating_sub(2 * layout.margin);
    // Largest sampled size that still fits; anything smaller than the range
    // minimum is an overflow.
    let mut max_fit = None;
    for px in (lo_px..=hi_px).rev() {
        let (w, h) = line_size(px)?;
        if w <= available && h <= available {
            max_fit = Some(px);
            break;
        }
    }
    let Some(max_fit) = max_fit else {
        let (w, h) = line_size(lo_px)?;
        return Err(Error::LayoutOverflow {
            required: w.max(h) + 2 * layout.margin,
            available: image_size,
        });
    };
    let px = rng.random_range(lo_px..=max_fit);
    let (line_w, line_h) = line_size(px)?;
    let (ox, oy) = match layout.anchor {
        Some((x, y)) => {
            if x + line_w > image_size || y + line_h > image_size {
                return Err(Error::LayoutOverflow {
                    required: (x + line_w).max(y + line_h),
                    available: image_size,
                });
            }
            (x, y)
        }
        None => {
            let max_x = image_size - layout.margin - line_w;
            let max_y = image_size - layout.margin - line_h;
            (
                rng.random_range(layout.margin..=max_x),
                rng.random_range(layout.margin..=max_y),
            )
        }
    };

    let (text_rgb, dark) = pick_palette(&mut rng, background.contrast);
    let bg = render_background(
        &mut rng,
        background,
        (image_size, image_size),
        &text_rgb,
        dark,
    );

    let (mut x, mut y) = (ox, oy);
    let mut layers: Vec<(GlyphLayer, usize, usize)> = Vec::with_capacity(words.len());
    let mut layout_boxes = Vec::with_capacity(words.len());
    for (text, attrs) in words {
        let layer = raster.rasterize_word(text, attrs, px)?;
        let (w, h) = (layer.width(), layer.height());
        layout_boxes.push(BBox { x, y, w, h });
        layers.push((layer, x, y));
        match layout.arrangement {
            Arrangement::Row => x += w + layout.word_gap,
            Arrangement::Column => y += h + layout.word_gap,
        }
    }

    let mut image = bg;
    let mut pixel_masks = Vec::with_capacity(words.len());
    let mut word_alpha = Vec::with_capacity(words.len());
    for (layer, lx, ly) in &layers {
        let mut alpha = Array2::<f32>::zeros((image_size, image_size));
        for ((r, c), &a) in layer.alpha.indexed_iter() {
            alpha[[ly + r, lx + c]] = a;
        }
        for ((r, c), &a) in alpha.indexed_iter() {
            if a > 0.0 {
                for ch in 0..3 {
                    let v = &mut image[[r, c, ch]];
                    *v = *v * (1.0 - a as f64) + text_rgb[ch] * a as f64;
                }
            }
        }
        pixel_masks.push(alpha.mapv(|a| a > 0.0));
        word_alpha.push(alpha);
    }

    Ok(StyledSample {
        image: image.mapv(|v| v as f32),
        words: words.to_vec(),
        pixel_masks,
        word_alpha,
        layout: layout_boxes,
        px_height: px,
        seed,
    })
}
