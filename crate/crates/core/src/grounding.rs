//! Word-level mask providers feeding the masked and attention losses.
//!
//! Imported masks follow the layout `<dir>/<sample_id>.word<i>.png`, one
//! 8-bit single-channel file per word. Pixels at or above 128 count as text.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::glyphforge::{
    mask_file_name, validate_masks, DatasetManifest, ManifestRecord, StyledSample,
};
use crate::imageio::load_gray;
use crate::wordcon::{downsample_mask, MaskSet};

pub const BINARIZE_THRESHOLD: u8 = 128;

/// Largest share of ink pixels (value > 0) that may be neither 0 nor 255.
pub const NONBINARY_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskQuery {
    pub sample_id: String,
    pub word_index: usize,
    pub word_text: String,
}

impl MaskQuery {
    pub fn for_record(record: &ManifestRecord) -> Vec<MaskQuery> {
        record
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| MaskQuery {
                sample_id: record.sample_id.clone(),
                word_index: i,
                word_text: w.clone(),
            })
            .collect()
    }
}

/// Supplies latent-grid masks for a dataset sample.
pub trait MaskProvider: Sync {
    fn masks(&self, record: &ManifestRecord, patch_size: usize) -> Result<MaskSet>;
}

/// Downsampled masks straight from a synthesised sample.
pub fn oracle_masks(sample: &StyledSample, patch_size: usize) -> Result<MaskSet> {
    let report = validate_masks(sample);
    if !report.passed() {
        return Err(Error::Validation(report.summary()));
    }
    let grids = sample
        .pixel_masks
        .iter()
        .map(|m| downsample_mask(m, patch_size))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(grids)
}

/// Reads one mask file and binarises it.
pub fn load_binary_mask(path: &Path) -> Result<Array2<bool>> {
    if !path.exists() {
        return Err(Error::MissingMask(path.to_path_buf()));
    }
    let gray = load_gray(path)?;
    let ink = gray.iter().filter(|&&v| v > 0).count();
    let nonbinary = gray.iter().filter(|&&v| v > 0 && v < 255).count();
    if ink > 0 && nonbinary as f64 > NONBINARY_TOLERANCE * ink as f64 {
        return Err(Error::NonBinaryMask {
            path: path.to_path_buf(),
            nonbinary,
        });
    }
    Ok(gray.mapv(|v| v >= BINARIZE_THRESHOLD))
}

fn masks_from_paths(paths: &[PathBuf], patch_size: usize) -> Result<MaskSet> {
    let grids = paths
        .iter()
        .map(|p| load_binary_mask(p).and_then(|m| downsample_mask(&m, patch_size)))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(grids)
}

/// Loads `words` mask files for `sample_id` from `mask_dir`.
pub fn import_masks(
    mask_dir: &Path,
    sample_id: &str,
    words: usize,
    patch_size: usize,
) -> Result<MaskSet> {
    let paths: Vec<PathBuf> = (0..words)
        .map(|i| mask_dir.join(mask_file_name(sample_id, i)))
        .collect();
    masks_from_paths(&paths, patch_size)
}

/// Masks exported by the dataset generator, located through the manifest.
#[derive(Debug, Clone)]
pub struct DatasetMasks {
    pub root: PathBuf,
}

impl DatasetMasks {
    pub fn new(manifest: &DatasetManifest) -> Self {
        DatasetMasks {
            root: manifest.root.clone(),
        }
    }
}

impl MaskProvider for DatasetMasks {
    fn masks(&self, record: &ManifestRecord, patch_size: usize) -> Result<MaskSet> {
        let paths: Vec<PathBuf> = record
            .mask_paths
            .iter()
            .map(|p| self.root.join(p))
            .collect();
        masks_from_paths(&paths, patch_size)
    }
}

/// Masks produced by an external grounding model, one file per word.
#[derive(Debug, Clone)]
pub struct ImportedMasks {
    pub dir: PathBuf,
}

impl MaskProvider for ImportedMasks {
    fn masks(&self, record: &ManifestRecord, patch_size: usize) -> Result<MaskSet> {
        import_masks(&self.dir, &record.sample_id, record.words.len(), patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecMode;
    use crate::glyphforge::{build_dataset, DatasetConfig};
    use image::{GrayImage, Luma};

    #[test]
    fn import_matches_dataset_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_samples: 6,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&cfg, dir.path(), ExecMode::Sequential).unwrap();
        let provider = DatasetMasks::new(&manifest);
        let imported = ImportedMasks {
            dir: dir.path().join("masks"),
        };
        for r in &manifest.records {
            let a = provider.masks(r, 4).unwrap();
            assert_eq!(a, imported.masks(r, 4).unwrap());
            assert_eq!(a.len(), 2);
        }
    }

    #[test]
    fn oracle_matches_import_after_export() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_samples: 3,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&cfg, dir.path(), ExecMode::Sequential).unwrap();
        let plans = cfg.plans().unwrap();
        let raster = cfg.rasterizer();
        for (plan, rec) in plans.iter().zip(&manifest.records) {
            let sample = cfg.synthesize(plan, &raster).unwrap();
            let oracle = oracle_masks(&sample, 4).unwrap();
            assert_eq!(
                oracle,
                import_masks(&dir.path().join("masks"), &rec.sample_id, 2, 4).unwrap()
            );
            let mut union = oracle.masks[0].clone();
            union.zip_mut_with(&oracle.masks[1], |u, &v| *u |= v);
            assert_eq!(union, oracle.union);
        }
    }

    #[test]
    fn missing_word_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_pixel(8, 8, Luma([0]))
            .save(dir.path().join("x.word0.png"))
            .unwrap();
        match import_masks(dir.path(), "x", 2, 4) {
            Err(Error::MissingMask(p)) => assert!(p.ends_with("x.word1.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn antialiased_fixture_is_binarised_then_pooled() {
        let dir = tempfile::tempdir().unwrap();
        // 8x8: a solid 4x4 block in the top-left patch with a soft right edge,
        // and a faint 2-pixel smear in the bottom-right patch.
        let mut img = GrayImage::from_pixel(8, 8, Luma([0]));
        for y in 0..4 {
            for x in 0..3 {
                img.put_pixel(x, y, Luma([255]));
            }
            img.put_pixel(3, y, Luma([if y % 2 == 0 { 200 } else { 100 }]));
        }
        img.put_pixel(6, 6, Luma([255]));
        img.put_pixel(7, 7, Luma([90]));
        img.save(dir.path().join("s.word0.png")).unwrap();
        let set = import_masks(dir.path(), "s", 1, 4).unwrap();
        // Top-left: 12 + 2 of 16 pixels >= 128 -> text; bottom-right: 1 of 16 -> background.
        assert_eq!(set.masks[0], ndarray::array![[true, false], [false, false]]);
    }

    #[test]
    fn soft_maps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(8, 8, |x, _| Luma([(x * 30) as u8]));
        img.save(dir.path().join("s.word0.png")).unwrap();
        assert!(matches!(
            import_masks(dir.path(), "s", 1, 4),
            Err(Error::NonBinaryMask { .. })
        ));
    }
}
