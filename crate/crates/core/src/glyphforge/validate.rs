use serde::Serialize;

use super::compose::StyledSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// Per word: pixels where the mask disagrees with `alpha > 0`.
    pub footprint_mismatch: Vec<usize>,
    /// `(i, j, shared_pixels)` for every overlapping pair.
    pub overlaps: Vec<(usize, usize, usize)>,
    /// Words whose mask, alpha or layout box does not fit the image.
    pub out_of_bounds: Vec<usize>,
    /// Set when the number of masks differs from the number of words.
    pub count_mismatch: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        !self.count_mismatch
            && self.footprint_mismatch.iter().all(|&m| m == 0)
            && self.overlaps.is_empty()
            && self.out_of_bounds.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "footprint mismatches {:?}, overlaps {:?}, out of bounds {:?}, count mismatch {}",
            self.footprint_mismatch, self.overlaps, self.out_of_bounds, self.count_mismatch
        )
    }
}

pub fn validate_masks(sample: &StyledSample) -> ValidationReport {
    let (h, w) = (sample.height(), sample.width());
    let count_mismatch = sample.pixel_masks.len() != sample.words.len()
        || sample.word_alpha.len() != sample.words.len();

    let mut out_of_bounds = Vec::new();
    let mut footprint_mismatch = Vec::with_capacity(sample.pixel_masks.len());
    for (i, mask) in sample.pixel_masks.iter().enumerate() {
        let alpha = sample.word_alpha.get(i);
        let fits = mask.dim() == (h, w)
            && alpha.is_some_and(|a| a.dim() == (h, w))
            && sample
                .layout
                .get(i)
                .is_some_and(|b| b.x + b.w <= w && b.y + b.h <= h);
        if !fits {
            out_of_bounds.push(i);
            footprint_mismatch.push(mask.len());
            continue;
        }
        let alpha = alpha.unwrap();
        let mismatched = mask
            .iter()
            .zip(alpha.iter())
            .filter(|(&m, &a)| m != (a > 0.0))
            .count();
        footprint_mismatch.push(mismatched);
    }

    let mut overlaps = Vec::new();
    for i in 0..sample.pixel_masks.len() {
        for j in i + 1..sample.pixel_masks.len() {
            let (a, b) = (&sample.pixel_masks[i], &sample.pixel_masks[j]);
            if a.dim() != b.dim() {
                continue;
            }
            let shared = a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count();
            if shared > 0 {
                overlaps.push((i, j, shared));
            }
        }
    }

    ValidationReport {
        footprint_mismatch,
        overlaps,
        out_of_bounds,
        count_mismatch,
    }
}
