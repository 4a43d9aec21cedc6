//! Template-matching oracles: word localisation by normalised
//! cross-correlation, attribute classification by hypothesis re-rendering,
//! and lexicon-constrained recognition.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphforge::{AttributeKind, AttributeSet, BBox, DatasetConfig, FontClass, Rasterizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraderConfig {
    /// Minimum |NCC| for a word to count as present.
    pub ncc_threshold: f64,
    /// Placement search, in pixels, around the localised origin when fitting hypotheses.
    pub search_radius: usize,
    /// Detections whose boxes overlap by more than this share of the smaller box are merged.
    pub nms_overlap: f64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        GraderConfig {
            ncc_threshold: 0.6,
            search_radius: 2,
            nms_overlap: 0.3,
        }
    }
}

/// Where a word template matched best.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub score: f64,
    pub bbox: BBox,
    pub px_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordGrade {
    pub word: String,
    pub word_identified: bool,
    /// Only meaningful when the word was identified.
    pub attribute_correct: bool,
    pub matched_attribute: AttributeSet,
    pub localization: Localization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub word: String,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrScore {
    pub precision: f64,
    pub recall: f64,
    pub recognized: Vec<String>,
}

/// Every combination of the three style flags, plain first.
pub fn style_hypotheses(font: FontClass) -> Vec<AttributeSet> {
    (0..8u8)
        .map(|bits| AttributeSet {
            bold: bits & 1 != 0,
            italic: bits & 2 != 0,
            underline: bits & 4 != 0,
            font_class: font,
        })
        .collect()
}

/// Mean over channels.
pub fn to_gray(image: &Array3<f32>) -> Array2<f64> {
    let (h, w, c) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|k| image[[y, x, k]] as f64).sum::<f64>() / c as f64
    })
}

type TemplateKey = (String, AttributeSet, u32);

#[derive(Debug, Clone)]
pub struct Grader {
    pub config: GraderConfig,
    pub px_heights: Vec<u32>,
    pub vocabulary: Vec<String>,
    raster: Rasterizer,
    templates: BTreeMap<TemplateKey, Array2<f64>>,
}

fn ncc_at(
    gray: &Array2<f64>,
    t: &Array2<f64>,
    t_mean: f64,
    t_norm: f64,
    x: usize,
    y: usize,
) -> f64 {
    let (th, tw) = t.dim();
    let n = (th * tw) as f64;
    let (mut s, mut s2, mut st) = (0.0, 0.0, 0.0);
    for r in 0..th {
        for c in 0..tw {
            let p = gray[[y + r, x + c]];
            s += p;
            s2 += p * p;
            st += p * t[[r, c]];
        }
    }
    let p_var = s2 - s * s / n;
    if p_var <= 1e-12 || t_norm <= 1e-12 {
        return 0.0;
    }
    // Σ(P - p̄)(T - t̄) = ΣPT - t̄ΣP
    (st - t_mean * s) / (p_var.sqrt() * t_norm)
}

/// Best absolute NCC of `t` over every placement fully inside `gray`.
fn best_match(gray: &Array2<f64>, t: &Array2<f64>) -> Option<(f64, usize, usize)> {
    let (h, w) = gray.dim();
    let (th, tw) = t.dim();
    if th > h || tw > w {
        return None;
    }
    let t_mean = t.mean().unwrap_or(0.0);
    let t_norm = t.iter().map(|v| (v - t_mean).powi(2)).sum::<f64>().sqrt();
    let mut best: Option<(f64, usize, usize)> = None;
    for y in 0..=h - th {
        for x in 0..=w - tw {
            let s = ncc_at(gray, t, t_mean, t_norm, x, y).abs();
            if best.is_none_or(|b| s > b.0) {
                best = Some((s, x, y));
            }
        }
    }
    best
}

/// Residual of the least-squares fit `g ≈ a·alpha + b + c·u + d·v` over a window.
fn affine_residual(g: &[f64], alpha: &[f64], w: usize) -> f64 {
    let n = g.len();
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    let h = n / w;
    let (cu, cv) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let row = |i: usize| [alpha[i], 1.0, (i % w) as f64 - cu, (i / w) as f64 - cv];
    for i in 0..n {
        let x = row(i);
        for a in 0..4 {
            atb[a] += x[a] * g[i];
            for b in 0..4 {
                ata[a][b] += x[a] * x[b];
            }
        }
    }
    let beta = solve4(ata, atb);
    (0..n)
        .map(|i| {
            let x = row(i);
            let pred: f64 = (0..4).map(|k| x[k] * beta[k]).sum();
            (g[i] - pred).powi(2)
        })
        .sum()
}

/// Gaussian elimination with partial pivoting; singular directions get a zero coefficient.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    let scale = (0..4).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    let mut active = [true; 4];
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() <= 1e-10 * scale {
            active[col] = false;
            continue;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        if !active[col] {
            continue;
        }
        let s: f64 = (col + 1..4).map(|c| a[col][c] * x[c]).sum();
        x[col] = (b[col] - s) / a[col][col];
    }
    x
}

fn overlap_ratio(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = ((x1 - x0) * (y1 - y0)) as f64;
    inter / ((a.w * a.h).min(b.w * b.h)) as f64
}

impl Grader {
    /// Pre-renders every style of every vocabulary word for `fonts` at each height.
    pub fn new(
        config: GraderConfig,
        raster: Rasterizer,
        vocabulary: &[String],
        fonts: &[FontClass],
        px_heights: Vec<u32>,
    ) -> Result<Self> {
        if px_heights.is_empty() {
            return Err(Error::config("grader needs at least one pixel height"));
        }
        if !(0.0..=1.0).contains(&config.ncc_threshold) {
            return Err(Error::config("ncc_threshold must lie in [0, 1]"));
        }
        let mut templates = BTreeMap::new();
        for word in vocabulary {
            for &font in fonts {
                for attrs in style_hypotheses(font) {
                    for &px in &px_heights {
                        let layer = raster.rasterize_word(word, &attrs, px)?;
                        templates.insert((word.clone(), attrs, px), layer.alpha.mapv(f64::from));
                    }
                }
            }
        }
        Ok(Grader {
            config,
            px_heights,
            vocabulary: vocabulary.to_vec(),
            raster,
            templates,
        })
    }

    /// A grader matched to a dataset's renderer, vocabulary, fonts and size range.
    pub fn for_dataset(dataset: &DatasetConfig, config: GraderConfig) -> Result<Self> {
        let (lo, hi) = dataset.layout.px_height;
        Grader::new(
            config,
            dataset.rasterizer(),
            &dataset.vocabulary,
            &dataset.font_classes,
            (lo..=hi).collect(),
        )
    }

    fn template(
        &self,
        word: &str,
        attrs: &AttributeSet,
        px: u32,
    ) -> Result<std::borrow::Cow<'_, Array2<f64>>> {
        match self.templates.get(&(word.to_string(), *attrs, px)) {
            Some(t) => Ok(std::borrow::Cow::Borrowed(t)),
            None => Ok(std::borrow::Cow::Owned(
                self.raster
                    .rasterize_word(word, attrs, px)?
                    .alpha
                    .mapv(f64::from),
            )),
        }
    }

    /// Best placement of the `attrs`-styled template of `word` over all heights.
    pub fn locate(
        &self,
        gray: &Array2<f64>,
        word: &str,
        attrs: &AttributeSet,
    ) -> Result<Option<Localization>> {
        let mut best: Option<Localization> = None;
        for &px in &self.px_heights {
            let t = self.template(word, attrs, px)?;
            if let Some((score, x, y)) = best_match(gray, &t) {
                if best.is_none_or(|b| score > b.score) {
                    let (h, w) = t.dim();
                    best = Some(Localization {
                        score,
                        bbox: BBox { x, y, w, h },
                        px_height: px,
                    });
                }
            }
        }
        Ok(best)
    }

    /// Localises `word` by the best glyph-row correlation over the plain,
    /// bold, italic and bold-italic renders. Underlines sit below the glyph
    /// rows and so never pull the match.
    pub fn localize(
        &self,
        gray: &Array2<f64>,
        word: &str,
        font: FontClass,
    ) -> Result<Option<Localization>> {
        let bodies = style_hypotheses(font).into_iter().filter(|a| !a.underline);
        let mut best: Option<Localization> = None;
        for (attrs, &px) in bodies.flat_map(|a| self.px_heights.iter().map(move |p| (a, p))) {
            let t = self.template(word, &attrs, px)?;
            let (h, w) = t.dim();
            let body = t.slice(ndarray::s![..px as usize, ..]).to_owned();
            let (gh, _) = gray.dim();
            if gh < h {
                continue;
            }
            // Keep the full layer box inside the image.
            let rows = gray
                .slice(ndarray::s![..gh - (h - px as usize), ..])
                .to_owned();
            if let Some((score, x, y)) = best_match(&rows, &body) {
                if best.is_none_or(|b| score > b.score) {
                    best = Some(Localization {
                        score,
                        bbox: BBox { x, y, w, h },
                        px_height: px,
                    });
                }
            }
        }
        Ok(best)
    }

    /// The style hypothesis whose re-render best explains the pixels around `loc`,
    /// searching placements within the radius and neighbouring heights.
    pub fn classify(
        &self,
        gray: &Array2<f64>,
        word: &str,
        font: FontClass,
        loc: &Localization,
    ) -> Result<AttributeSet> {
        let (h, w) = gray.dim();
        let r = self.config.search_radius;
        let wx0 = loc.bbox.x.saturating_sub(r);
        let wy0 = loc.bbox.y.saturating_sub(r);
        let wx1 = (loc.bbox.x + loc.bbox.w + r).min(w);
        let wy1 = (loc.bbox.y + loc.bbox.h + r).min(h);
        let ww = wx1 - wx0;
        let window: Vec<f64> = (wy0..wy1)
            .flat_map(|y| (wx0..wx1).map(move |x| (y, x)))
            .map(|(y, x)| gray[[y, x]])
            .collect();

        let mut best: Option<(f64, AttributeSet)> = None;
        let mut canvas = vec![0.0; window.len()];
        let sizes: Vec<u32> = self
            .px_heights
            .iter()
            .copied()
            .filter(|&p| p.abs_diff(loc.px_height) <= 1)
            .collect();
        for attrs in style_hypotheses(font) {
            let mut hyp_best = f64::INFINITY;
            for &px in &sizes {
                let t = self.template(word, &attrs, px)?;
                let (th, tw) = t.dim();
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let ox = loc.bbox.x as isize + dx;
                        let oy = loc.bbox.y as isize + dy;
                        canvas.iter_mut().for_each(|v| *v = 0.0);
                        for ty in 0..th {
                            for tx in 0..tw {
                                let (gx, gy) = (ox + tx as isize, oy + ty as isize);
                                if gx < wx0 as isize
                                    || gy < wy0 as isize
                                    || gx >= wx1 as isize
                                    || gy >= wy1 as isize
                                {
                                    continue;
                                }
                                canvas[(gy as usize - wy0) * ww + (gx as usize - wx0)] =
                                    t[[ty, tx]];
                            }
                        }
                        hyp_best = hyp_best.min(affine_residual(&window, &canvas, ww));
                    }
                }
            }
            // Strict improvement only, so ties keep the earlier (plainer) hypothesis.
            let better = match best {
                None => true,
                Some((b, _)) => hyp_best < b * (1.0 - 1e-9) - 1e-12,
            };
            if better {
                best = Some((hyp_best, attrs));
            }
        }
        Ok(best
            .map(|b| b.1)
            .unwrap_or_else(|| AttributeSet::plain(font)))
    }

    /// Grades each intended `(word, attributes)` pair against `image`.
    pub fn grade_sample(
        &self,
        image: &Array3<f32>,
        words: &[(String, AttributeSet)],
    ) -> Result<Vec<WordGrade>> {
        let gray = to_gray(image);
        words
            .iter()
            .map(|(word, expected)| {
                let loc = self
                    .localize(&gray, word, expected.font_class)?
                    .ok_or_else(|| {
                        Error::shape(format!(
                            "template for {word:?} does not fit a {:?} image",
                            gray.dim()
                        ))
                    })?;
                let identified = loc.score >= self.config.ncc_threshold;
                let matched = if identified {
                    self.classify(&gray, word, expected.font_class, &loc)?
                } else {
                    AttributeSet::plain(expected.font_class)
                };
                Ok(WordGrade {
                    word: word.clone(),
                    word_identified: identified,
                    attribute_correct: identified && matched.same_style(expected),
                    matched_attribute: matched,
                    localization: loc,
                })
            })
            .collect()
    }

    /// Vocabulary words found in `image`, strongest first, after overlap suppression.
    pub fn recognize(&self, image: &Array3<f32>, font: FontClass) -> Result<Vec<Detection>> {
        let gray = to_gray(image);
        let styles: Vec<AttributeSet> = std::iter::once(AttributeSet::plain(font))
            .chain(
                AttributeKind::ALL
                    .iter()
                    .map(|&k| AttributeSet::with_kind(font, k)),
            )
            .collect();
        let mut candidates = Vec::new();
        for word in &self.vocabulary {
            let mut best: Option<Localization> = None;
            for attrs in &styles {
                if let Some(loc) = self.locate(&gray, word, attrs)? {
                    if best.is_none_or(|b| loc.score > b.score) {
                        best = Some(loc);
                    }
                }
            }
            if let Some(b) = best.filter(|b| b.score >= self.config.ncc_threshold) {
                candidates.push(Detection {
                    word: word.clone(),
                    score: b.score,
                    bbox: b.bbox,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.word.cmp(&b.word))
        });
        let mut kept: Vec<Detection> = Vec::new();
        for c in candidates {
            if kept
                .iter()
                .all(|k| overlap_ratio(&k.bbox, &c.bbox) <= self.config.nms_overlap)
            {
                kept.push(c);
            }
        }
        Ok(kept)
    }

    /// Precision and recall (percentages) of recognised words against `expected`.
    pub fn ocr_metrics(
        &self,
        image: &Array3<f32>,
        expected: &[String],
        font: FontClass,
    ) -> Result<OcrScore> {
        if expected.is_empty() {
            return Err(Error::Validation(
                "OCR needs at least one expected word".into(),
            ));
        }
        let recognized: Vec<String> = self
            .recognize(image, font)?
            .into_iter()
            .map(|d| d.word)
            .collect();
        Ok(ocr_score(recognized, expected))
    }
}

/// Set precision and recall of `recognized` against `expected`, in percent.
pub fn ocr_score(recognized: Vec<String>, expected: &[String]) -> OcrScore {
    let hits = recognized.iter().filter(|w| expected.contains(w)).count() as f64;
    let precision = if recognized.is_empty() {
        0.0
    } else {
        100.0 * hits / recognized.len() as f64
    };
    let recall = 100.0 * hits / expected.len() as f64;
    OcrScore {
        precision,
        recall,
        recognized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphforge::{compose_sample, BackgroundSpec, LayoutPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grader() -> Grader {
        Grader::for_dataset(&DatasetConfig::default(), GraderConfig::default()).unwrap()
    }

    fn words(list: &[(&str, AttributeSet)]) -> Vec<(String, AttributeSet)> {
        list.iter().map(|(w, a)| (w.to_string(), *a)).collect()
    }

    #[test]
    fn solve4_recovers_known_coefficients() {
        let alpha: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        let g: Vec<f64> = (0..30)
            .map(|i| 0.7 * alpha[i] + 0.2 - 0.01 * (i % 6) as f64 + 0.03 * (i / 6) as f64)
            .collect();
        assert!(affine_residual(&g, &alpha, 6) < 1e-20);
    }

    #[test]
    fn wrong_word_attribute_is_flagged_on_the_other_word() {
        let g = grader();
        let plain = AttributeSet::plain(FontClass::Sans);
        let bold = AttributeSet {
            bold: true,
            ..plain
        };
        let rendered = words(&[("GO", plain), ("UP", bold)]);
        let s = compose_sample(
            &rendered,
            32,
            &BackgroundSpec::solid(0.6),
            &LayoutPolicy::default(),
            4,
            &g.raster,
        )
        .unwrap();
        let intended = words(&[("GO", bold), ("UP", plain)]);
        let grades = g.grade_sample(&s.image, &intended).unwrap();
        assert!(grades.iter().all(|w| w.word_identified));
        assert!(!grades[0].attribute_correct && grades[0].matched_attribute.is_plain());
        assert!(!grades[1].attribute_correct && grades[1].matched_attribute.bold);
    }

    #[test]
    fn noise_image_identifies_nothing() {
        let g = grader();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let img = Array3::from_shape_fn((32, 32, 3), |_| rng.random::<f32>());
            let plain = AttributeSet::plain(FontClass::Sans);
            let grades = g
                .grade_sample(&img, &words(&[("GO", plain), ("HI", plain)]))
                .unwrap();
            assert!(grades.iter().all(|w| !w.word_identified), "{grades:?}");
        }
    }

    #[test]
    fn ocr_set_arithmetic() {
        let exp = vec!["GO".to_string(), "UP".to_string()];
        let s = ocr_score(vec!["GO".into()], &exp);
        assert_eq!((s.precision, s.recall), (100.0, 50.0));
        let s = ocr_score(vec!["GO".into(), "UP".into(), "HI".into()], &exp);
        assert!((s.precision - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 100.0);
    }

    #[test]
    fn ocr_on_rendered_words() {
        let g = grader();
        let plain = AttributeSet::plain(FontClass::Sans);
        let three = words(&[("GO", plain), ("UP", plain), ("HI", plain)]);
        let layout = LayoutPolicy {
            px_height: (8, 8),
            ..LayoutPolicy::default()
        };
        let s = compose_sample(
            &three,
            40,
            &BackgroundSpec::solid(0.8),
            &layout,
            2,
            &g.raster,
        )
        .unwrap();
        let expected = vec!["GO".to_string(), "UP".to_string()];
        let score = g.ocr_metrics(&s.image, &expected, FontClass::Sans).unwrap();
        assert_eq!(score.recall, 100.0);
        assert!((score.precision - 200.0 / 3.0).abs() < 1e-9, "{score:?}");

        let one = compose_sample(
            &three[..1],
            32,
            &BackgroundSpec::solid(0.8),
            &layout,
            2,
            &g.raster,
        )
        .unwrap();
        let score = g
            .ocr_metrics(&one.image, &expected, FontClass::Sans)
            .unwrap();
        assert_eq!((score.precision, score.recall), (100.0, 50.0));
    }
}
