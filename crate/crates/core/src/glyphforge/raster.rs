use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::font::{self, CAP_UNITS};
use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum FontClass {
    Serif,
    #[default]
    Sans,
    Script,
    Mono,
    Slab,
}

impl FontClass {
    pub const ALL: [FontClass; 5] = [
        FontClass::Serif,
        FontClass::Sans,
        FontClass::Script,
        FontClass::Mono,
        FontClass::Slab,
    ];

    pub fn index(self) -> usize {
        FontClass::ALL.iter().position(|&f| f == self).unwrap()
    }

    fn style(self) -> FontStyle {
        match self {
            FontClass::Sans => FontStyle {
                stroke_ratio: 0.11,
                serif: 0.0,
                slant_deg: 0.0,
                mono_cell: None,
            },
            FontClass::Serif => FontStyle {
                stroke_ratio: 0.085,
                serif: 0.7,
                slant_deg: 0.0,
                mono_cell: None,
            },
            FontClass::Slab => FontStyle {
                stroke_ratio: 0.12,
                serif: 1.0,
                slant_deg: 0.0,
                mono_cell: None,
            },
            FontClass::Mono => FontStyle {
                stroke_ratio: 0.10,
                serif: 0.0,
                slant_deg: 0.0,
                mono_cell: Some(5.0),
            },
            FontClass::Script => FontStyle {
                stroke_ratio: 0.08,
                serif: 0.0,
                slant_deg: 8.0,
                mono_cell: None,
            },
        }
    }
}

struct FontStyle {
    stroke_ratio: f64,
    /// Serif length in design units; 0 disables serifs.
    serif: f64,
    slant_deg: f64,
    /// Fixed advance in design units for monospaced faces.
    mono_cell: Option<f64>,
}

/// Typographic attributes of one word.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct AttributeSet {
    #[serde(default)]
    pub bold: bool,
    #[serde(default)]
    pub italic: bool,
    #[serde(default)]
    pub underline: bool,
    #[serde(default)]
    pub font_class: FontClass,
}

impl AttributeSet {
    pub fn plain(font_class: FontClass) -> Self {
        AttributeSet {
            font_class,
            ..Default::default()
        }
    }

    pub fn with_kind(font_class: FontClass, kind: AttributeKind) -> Self {
        let mut a = AttributeSet::plain(font_class);
        a.set(kind, true);
        a
    }

    pub fn is_plain(&self) -> bool {
        !(self.bold || self.italic || self.underline)
    }

    pub fn has(&self, kind: AttributeKind) -> bool {
        match kind {
            AttributeKind::Bold => self.bold,
            AttributeKind::Italic => self.italic,
            AttributeKind::Underline => self.underline,
        }
    }

    pub fn set(&mut self, kind: AttributeKind, on: bool) {
        match kind {
            AttributeKind::Bold => self.bold = on,
            AttributeKind::Italic => self.italic = on,
            AttributeKind::Underline => self.underline = on,
        }
    }

    pub fn kinds(&self) -> Vec<AttributeKind> {
        AttributeKind::ALL
            .into_iter()
            .filter(|&k| self.has(k))
            .collect()
    }

    /// Same style flags, ignoring the font class.
    pub fn same_style(&self, other: &AttributeSet) -> bool {
        self.bold == other.bold && self.italic == other.italic && self.underline == other.underline
    }
}

/// A single typographic attribute type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Bold,
    Italic,
    Underline,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [
        AttributeKind::Bold,
        AttributeKind::Italic,
        AttributeKind::Underline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Bold => "bold",
            AttributeKind::Italic => "italic",
            AttributeKind::Underline => "underline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RasterConfig {
    /// Stroke-thickness multiplier for bold.
    pub bold_factor: f64,
    /// Horizontal shear angle for italic, in degrees.
    pub italic_angle_deg: f64,
    /// Sub-samples per pixel edge for coverage.
    pub supersample: usize,
    /// Inter-letter spacing as a fraction of the pixel height.
    pub letter_spacing: f64,
    pub min_px_height: u32,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            bold_factor: 1.8,
            italic_angle_deg: 14.0,
            supersample: 4,
            letter_spacing: 0.14,
            min_px_height: 8,
        }
    }
}

/// A rendered word on a transparent background.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphLayer {
    /// Coverage in `[0, 1]`, `rows x cols`.
    pub alpha: Array2<f32>,
    /// Last row of glyph ink; the underline sits below it.
    pub baseline_row: usize,
    /// Horizontal extent of the word (excluding shear padding).
    pub advance: usize,
}

impl GlyphLayer {
    pub fn ink_count(&self) -> usize {
        self.alpha.iter().filter(|&&a| a > 0.0).count()
    }

    pub fn height(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn width(&self) -> usize {
        self.alpha.ncols()
    }
}

/// Geometry shared by every attribute variant of a word at one size.
struct WordGeometry {
    thin: f64,
    thick: f64,
    advance: usize,
    shear_pad: usize,
    height: usize,
    bar_rows: usize,
    /// Each glyph's skeleton segments in layer pixel coordinates.
    segments: Vec<[(f64, f64); 2]>,
}

#[derive(Debug, Clone, Default)]
pub struct Rasterizer {
    pub config: RasterConfig,
}

impl Rasterizer {
    pub fn new(config: RasterConfig) -> Self {
        Rasterizer { config }
    }

    fn italic_tan(&self) -> f64 {
        self.config.italic_angle_deg.to_radians().tan()
    }

    /// Underline thickness in rows for a given pixel height.
    pub fn bar_rows(px_height: u32) -> usize {
        ((px_height as f64 / 12.0).round() as usize).max(1)
    }

    fn geometry(&self, text: &str, font: FontClass, px_height: u32) -> Result<WordGeometry> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        if px_height < self.config.min_px_height {
            return Err(Error::PixelHeightTooSmall {
                px: px_height,
                min: self.config.min_px_height,
            });
        }
        let mut glyphs = Vec::with_capacity(text.len());
        for ch in text.chars() {
            glyphs.push(font::glyph(ch).ok_or_else(|| Error::UnsupportedCharacter {
                ch,
                text: text.to_string(),
            })?);
        }
        let style = font.style();
        let h = px_height as f64;
        let thin = (style.stroke_ratio * h).max(1.0);
        let thick = thin * self.config.bold_factor;
        let scale = (h - thick) / CAP_UNITS;
        let margin = thick / 2.0;
        let spacing = (self.config.letter_spacing * h).max(1.0);
        let mut segments = Vec::new();
        let mut x = 0.0;
        for (i, g) in glyphs.iter().enumerate() {
            let cell = style.mono_cell.map_or(g.width, |c| c.max(g.width));
            let inset = (cell - g.width) / 2.0;
            let to_px =
                |(gx, gy): (f64, f64)| (x + margin + (inset + gx) * scale, margin + gy * scale);
            for stroke in g.strokes {
                for w in stroke.windows(2) {
                    segments.push([to_px(w[0]), to_px(w[1])]);
                }
                if style.serif > 0.0 {
                    for &end in [stroke[0], stroke[stroke.len() - 1]].iter() {
                        let on_edge = end.1 == 0.0 || end.1 == CAP_UNITS;
                        if on_edge {
                            let lo = (end.0 - style.serif / 2.0).max(0.0);
                            let hi = (end.0 + style.serif / 2.0).min(g.width);
                            segments.push([to_px((lo, end.1)), to_px((hi, end.1))]);
                        }
                    }
                }
            }
            x += cell * scale + thick;
            if i + 1 < glyphs.len() {
                x += spacing;
            }
        }
        let advance = x.ceil() as usize;
        let max_tan = style.slant_deg.to_radians().tan() + self.italic_tan();
        let shear_pad = (h * max_tan).ceil() as usize;
        let bar_rows = Self::bar_rows(px_height);
        Ok(WordGeometry {
            thin,
            thick,
            advance,
            shear_pad,
            height: px_height as usize + 1 + bar_rows,
            bar_rows,
            segments,
        })
    }

    /// Renders `text` with the given attributes at `px_height` pixels of cap height.
    pub fn rasterize_word(
        &self,
        text: &str,
        attrs: &AttributeSet,
        px_height: u32,
    ) -> Result<GlyphLayer> {
        let geo = self.geometry(text, attrs.font_class, px_height)?;
        let style = attrs.font_class.style();
        let h = px_height as f64;
        let radius = if attrs.bold { geo.thick } else { geo.thin } / 2.0;
        let tan =
            style.slant_deg.to_radians().tan() + if attrs.italic { self.italic_tan() } else { 0.0 };
        let rows = geo.height;
        let cols = geo.advance + geo.shear_pad;
        let ss = self.config.supersample.max(1);
        let sub = 1.0 / ss as f64;
        let mut hits = vec![0u16; rows * cols];

        // Glyph ink occupies rows [0, px_height); only those rows are sampled.
        for r in 0..px_height as usize {
            for sy in 0..ss {
                let y = r as f64 + (sy as f64 + 0.5) * sub;
                let shift = (h - y) * tan;
                for seg in &geo.segments {
                    let (ymin, ymax) = (
                        seg[0].1.min(seg[1].1) - radius,
                        seg[0].1.max(seg[1].1) + radius,
                    );
                    if y < ymin || y > ymax {
                        continue;
                    }
                    let (xmin, xmax) = (
                        seg[0].0.min(seg[1].0) - radius + shift,
                        seg[0].0.max(seg[1].0) + radius + shift,
                    );
                    let c0 = (xmin.floor().max(0.0)) as usize;
                    let c1 = (xmax.ceil() as usize).min(cols);
                    for c in c0..c1 {
                        for sx in 0..ss {
                            let x = c as f64 + (sx as f64 + 0.5) * sub - shift;
                            if dist_to_segment((x, y), seg[0], seg[1]) <= radius {
                                let bit = (sy * ss + sx) as u16;
                                // Each sub-sample counts once; a u16 bitmask covers ss <= 4.
                                if ss <= 4 {
                                    hits[r * cols + c] |= 1 << bit;
                                } else {
                                    hits[r * cols + c] = hits[r * cols + c].saturating_add(1);
                                }
                            }
                        }
                    }
                }
            }
        }
        let total = (ss * ss) as f32;
        let mut alpha = Array2::<f32>::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let v = hits[r * cols + c];
                let count = if ss <= 4 {
                    v.count_ones() as f32
                } else {
                    (v as f32).min(total)
                };
                alpha[[r, c]] = count / total;
            }
        }
        let baseline_row = px_height as usize - 1;
        if attrs.underline {
            let start = baseline_row + 2;
            for r in start..(start + geo.bar_rows).min(rows) {
                for c in 0..geo.advance {
                    alpha[[r, c]] = 1.0;
                }
            }
        }
        Ok(GlyphLayer {
            alpha,
            baseline_row,
            advance: geo.advance,
        })
    }

    /// Width and height of the layer `rasterize_word` would produce.
    pub fn layer_size(
        &self,
        text: &str,
        font: FontClass,
        px_height: u32,
    ) -> Result<(usize, usize)> {
        let geo = self.geometry(text, font, px_height)?;
        Ok((geo.advance + geo.shear_pad, geo.height))
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Per-row ink centroid regression slope (columns per row) over rows `[0, rows)`.
pub fn centroid_slope(alpha: &Array2<f32>, rows: usize) -> f64 {
    let mut pts = Vec::new();
    for r in 0..rows.min(alpha.nrows()) {
        let (mut m, mut mx) = (0.0f64, 0.0f64);
        for c in 0..alpha.ncols() {
            let a = alpha[[r, c]] as f64;
            m += a;
            mx += a * (c as f64 + 0.5);
        }
        if m > 0.0 {
            pts.push((r as f64, mx / m));
        }
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(a, b), p| {
        (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2))
    });
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sans() -> AttributeSet {
        AttributeSet::plain(FontClass::Sans)
    }

    #[test]
    fn deterministic_render() {
        let r = Rasterizer::default();
        let a = r.rasterize_word("A", &sans(), 16).unwrap();
        let b = r.rasterize_word("A", &sans(), 16).unwrap();
        assert_eq!(a, b);
        assert!(a.ink_count() > 0);
    }

    #[test]
    fn underline_only_adds_rows_below_baseline() {
        let r = Rasterizer::default();
        let plain = r.rasterize_word("A", &sans(), 16).unwrap();
        let under = r
            .rasterize_word(
                "A",
                &AttributeSet {
                    underline: true,
                    ..sans()
                },
                16,
            )
            .unwrap();
        assert_eq!(plain.alpha.dim(), under.alpha.dim());
        let mut below = 0;
        for ((r_, c), &u) in under.alpha.indexed_iter() {
            let p = plain.alpha[[r_, c]];
            if r_ <= plain.baseline_row {
                assert_eq!(u, p, "row {r_} col {c} changed above the baseline");
            } else if u != p {
                below += 1;
                assert!(r_ > plain.baseline_row && r_ <= plain.baseline_row + 3);
            }
        }
        assert!(below >= plain.advance);
        // The bar is contiguous across the advance.
        let bar_row = plain.baseline_row + 2;
        assert!((0..plain.advance).all(|c| under.alpha[[bar_row, c]] == 1.0));
    }

    #[test]
    fn bold_adds_ink() {
        let r = Rasterizer::default();
        let plain = r.rasterize_word("A", &sans(), 16).unwrap();
        let bold = r
            .rasterize_word(
                "A",
                &AttributeSet {
                    bold: true,
                    ..sans()
                },
                16,
            )
            .unwrap();
        assert!(bold.ink_count() > plain.ink_count());
        // Bold strokes share the skeleton, so they cover the plain footprint.
        for (p, b) in plain.alpha.iter().zip(bold.alpha.iter()) {
            if *p > 0.0 {
                assert!(*b > 0.0);
            }
        }
    }

    #[test]
    fn italic_shear_matches_configured_angle() {
        let r = Rasterizer::default();
        let expected = -r.italic_tan();
        for word in ["HI", "MOVE", "A7"] {
            for px in [16, 24] {
                let plain = r.rasterize_word(word, &sans(), px).unwrap();
                let ital = r
                    .rasterize_word(
                        word,
                        &AttributeSet {
                            italic: true,
                            ..sans()
                        },
                        px,
                    )
                    .unwrap();
                let d = centroid_slope(&ital.alpha, px as usize)
                    - centroid_slope(&plain.alpha, px as usize);
                assert!(
                    ((d - expected) / expected).abs() < 0.10,
                    "{word}@{px}: {d} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let r = Rasterizer::default();
        assert!(matches!(
            r.rasterize_word("Ab", &sans(), 16),
            Err(Error::UnsupportedCharacter { ch: 'b', .. })
        ));
        assert!(matches!(
            r.rasterize_word("A", &sans(), 7),
            Err(Error::PixelHeightTooSmall { .. })
        ));
        assert!(matches!(
            r.rasterize_word("", &sans(), 16),
            Err(Error::EmptyText)
        ));
    }

    #[test]
    fn every_font_class_renders_all_glyphs() {
        let r = Rasterizer::default();
        let text: String = ('A'..='Z').chain('0'..='9').collect();
        for f in FontClass::ALL {
            let l = r
                .rasterize_word(&text, &AttributeSet::plain(f), 12)
                .unwrap();
            assert!(l.ink_count() > 100);
            assert_eq!(r.layer_size(&text, f, 12).unwrap(), (l.width(), l.height()));
        }
    }
}
