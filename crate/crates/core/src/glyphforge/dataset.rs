use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compose::{
    compose_sample, BBox, BackgroundKind, BackgroundSpec, LayoutPolicy, StyledSample,
};
use super::raster::{AttributeKind, AttributeSet, FontClass, RasterConfig, Rasterizer};
use super::validate::validate_masks;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::imageio;
use crate::params::json_hash;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// Largest allowed deviation of any attribute type's share from uniform.
pub const BALANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub vocabulary: Vec<String>,
    pub num_samples: usize,
    pub words_per_sample: usize,
    /// Attribute types, assigned to samples in equal shares.
    pub attribute_types: Vec<AttributeKind>,
    pub font_classes: Vec<FontClass>,
    pub image_size: usize,
    pub layout: LayoutPolicy,
    pub backgrounds: Vec<BackgroundKind>,
    pub contrast: f64,
    pub noise_amplitude: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub raster: RasterConfig,
}

pub fn default_vocabulary() -> Vec<String> {
    ["GO", "UP", "HI", "OK", "AM", "BE", "TV", "WE", "NO", "DJ"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            vocabulary: default_vocabulary(),
            num_samples: 200,
            words_per_sample: 2,
            attribute_types: AttributeKind::ALL.to_vec(),
            font_classes: vec![FontClass::Sans],
            image_size: 32,
            layout: LayoutPolicy::default(),
            backgrounds: vec![
                BackgroundKind::Solid,
                BackgroundKind::Gradient,
                BackgroundKind::Noise,
            ],
            contrast: 0.5,
            noise_amplitude: 0.1,
            test_fraction: 0.15,
            seed: 0,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub image_path: String,
    pub mask_paths: Vec<String>,
    pub words: Vec<String>,
    pub attrs: Vec<AttributeSet>,
    pub font_class: FontClass,
    pub split: Split,
    /// Index of the word carrying the sample's attribute type.
    pub controlled: usize,
    pub attribute_type: AttributeKind,
    pub layout: Vec<BBox>,
    pub px_height: u32,
    pub seed: u64,
    pub generator_config_hash: String,
}

impl ManifestRecord {
    pub fn words_with_attrs(&self) -> Vec<(String, AttributeSet)> {
        self.words
            .iter()
            .cloned()
            .zip(self.attrs.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub generator_config_hash: String,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, sample_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<ManifestRecord>(&line)?);
        }
        let generator_config_hash = records
            .first()
            .map(|r| r.generator_config_hash.clone())
            .unwrap_or_default();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest {
            records,
            generator_config_hash,
            root,
        })
    }

    /// The generator configuration snapshot stored next to the manifest.
    pub fn config(&self) -> Result<DatasetConfig> {
        let path = self.root.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Everything decided for a sample before rendering.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub index: usize,
    pub sample_id: String,
    pub words: Vec<(String, AttributeSet)>,
    pub controlled: usize,
    pub attribute_type: AttributeKind,
    pub background: BackgroundSpec,
    pub split: Split,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        for w in &self.vocabulary {
            if w.is_empty() || !w.chars().all(super::font::is_supported) {
                return Err(Error::config(format!(
                    "vocabulary word {w:?} uses unsupported characters"
                )));
            }
        }
        if self.words_per_sample == 0 || self.words_per_sample > self.vocabulary.len() {
            return Err(Error::config(
                "words_per_sample must be in 1..=vocabulary size",
            ));
        }
        if self.attribute_types.is_empty()
            || self.font_classes.is_empty()
            || self.backgrounds.is_empty()
        {
            return Err(Error::config(
                "attribute_types, font_classes and backgrounds must be nonempty",
            ));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must be in [0, 1)"));
        }
        let k = self.attribute_types.len();
        let worst = (0..k)
            .map(|j| {
                let count = (self.num_samples + k - 1 - j) / k;
                (count as f64 / self.num_samples as f64 - 1.0 / k as f64).abs()
            })
            .fold(0.0, f64::max);
        if worst > BALANCE_TOLERANCE {
            return Err(Error::config(format!(
                "cannot balance {k} attribute types over {} samples within {BALANCE_TOLERANCE} (best deviation {worst:.3})",
                self.num_samples
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn rasterizer(&self) -> Rasterizer {
        Rasterizer::new(self.raster.clone())
    }

    /// Deterministic per-sample plans; attribute types cycle so shares are equal.
    pub fn plans(&self) -> Result<Vec<SamplePlan>> {
        self.validate()?;
        let n = self.num_samples;
        let mut order: Vec<usize> = (0..n).collect();
        let mut master = ChaCha8Rng::seed_from_u64(self.seed);
        order.shuffle(&mut master);
        let n_test = (n as f64 * self.test_fraction).round() as usize;
        let mut split = vec![Split::Train; n];
        for &i in &order[..n_test] {
            split[i] = Split::Test;
        }
        let plans = (0..n)
            .map(|i| {
                let seed = splitmix(self.seed ^ splitmix(i as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let attribute_type = self.attribute_types[i % self.attribute_types.len()];
                let font = self.font_classes[rng.random_range(0..self.font_classes.len())];
                let chosen: Vec<&String> = self
                    .vocabulary
                    .choose_multiple(&mut rng, self.words_per_sample)
                    .collect();
                let controlled = rng.random_range(0..self.words_per_sample);
                let words = chosen
                    .iter()
                    .enumerate()
                    .map(|(j, w)| {
                        let attrs = if j == controlled {
                            AttributeSet::with_kind(font, attribute_type)
                        } else {
                            AttributeSet::plain(font)
                        };
                        (w.to_string(), attrs)
                    })
                    .collect();
                let kind = self.backgrounds[rng.random_range(0..self.backgrounds.len())];
                let background = BackgroundSpec {
                    kind,
                    contrast: self.contrast,
                    noise_amplitude: self.noise_amplitude,
                };
                SamplePlan {
                    index: i,
                    sample_id: format!("s{i:05}"),
                    words,
                    controlled,
                    attribute_type,
                    background,
                    split: split[i],
                    seed: rng.random(),
                }
            })
            .collect();
        Ok(plans)
    }

    pub fn synthesize(&self, plan: &SamplePlan, raster: &Rasterizer) -> Result<StyledSample> {
        compose_sample(
            &plan.words,
            self.image_size,
            &plan.background,
            &self.layout,
            plan.seed,
            raster,
        )
    }
}

pub fn mask_file_name(sample_id: &str, word_index: usize) -> String {
    format!("{sample_id}.word{word_index}.png")
}

/// Synthesises every sample, writes images, masks, the JSONL manifest and a
/// resolved config snapshot under `out_dir`.
pub fn build_dataset(
    config: &DatasetConfig,
    out_dir: &Path,
    exec: ExecMode,
) -> Result<DatasetManifest> {
    let plans = config.plans()?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(out_dir, e))?;
    let raster = config.rasterizer();
    let hash = config.hash();

    let records: Vec<Result<ManifestRecord>> = exec.map(&plans, |plan| {
        let sample = config.synthesize(plan, &raster)?;
        let report = validate_masks(&sample);
        if !report.passed() {
            return Err(Error::Validation(format!(
                "{}: {}",
                plan.sample_id,
                report.summary()
            )));
        }
        let image_path = format!("images/{}.png", plan.sample_id);
        imageio::save_rgb(&out_dir.join(&image_path), &sample.image)?;
        let mut mask_paths = Vec::with_capacity(sample.pixel_masks.len());
        for (i, m) in sample.pixel_masks.iter().enumerate() {
            let rel = format!("masks/{}", mask_file_name(&plan.sample_id, i));
            imageio::save_mask(&out_dir.join(&rel), m)?;
            mask_paths.push(rel);
        }
        Ok(ManifestRecord {
            sample_id: plan.sample_id.clone(),
            image_path,
            mask_paths,
            words: plan.words.iter().map(|(w, _)| w.clone()).collect(),
            attrs: plan.words.iter().map(|(_, a)| *a).collect(),
            font_class: plan.words[0].1.font_class,
            split: plan.split,
            controlled: plan.controlled,
            attribute_type: plan.attribute_type,
            layout: sample.layout.clone(),
            px_height: sample.px_height,
            seed: plan.seed,
            generator_config_hash: hash.clone(),
        })
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.sample_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate sample id {}",
                r.sample_id
            )));
        }
    }
    let manifest = DatasetManifest {
        records,
        generator_config_hash: hash,
        root: out_dir.to_path_buf(),
    };
    manifest.write_jsonl(&out_dir.join(MANIFEST_FILE))?;
    let snapshot = serde_json::to_string_pretty(config)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, snapshot).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

/// Share of samples per attribute type, in `attribute_types` order.
pub fn attribute_shares(manifest: &DatasetManifest, types: &[AttributeKind]) -> Vec<f64> {
    let n = manifest.records.len().max(1) as f64;
    types
        .iter()
        .map(|t| {
            manifest
                .records
                .iter()
                .filter(|r| r.attribute_type == *t)
                .count() as f64
                / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetConfig {
        DatasetConfig {
            num_samples: n,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn twelve_samples_split_four_per_type() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(12), dir.path(), ExecMode::Sequential).unwrap();
        for kind in AttributeKind::ALL {
            assert_eq!(
                m.records
                    .iter()
                    .filter(|r| r.attribute_type == kind)
                    .count(),
                4
            );
        }
    }

    #[test]
    fn manifest_round_trips_and_files_exist() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(20), dir.path(), ExecMode::Parallel).unwrap();
        let back = DatasetManifest::read_jsonl(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.config().unwrap(), small(20));
        let ids: HashSet<_> = back.records.iter().map(|r| &r.sample_id).collect();
        assert_eq!(ids.len(), 20);
        for r in &back.records {
            assert!(back.resolve(&r.image_path).exists());
            assert_eq!(r.mask_paths.len(), r.words.len());
            assert!(r.mask_paths.iter().all(|p| back.resolve(p).exists()));
        }
        assert!(back.split(Split::Test).count() > 0 && back.split(Split::Train).count() > 0);
    }

    #[test]
    fn infeasible_balance_is_rejected() {
        let cfg = DatasetConfig {
            num_samples: 2,
            ..DatasetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = DatasetConfig {
            num_samples: 100,
            ..DatasetConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = build_dataset(&small(3), &blocker.join("sub"), ExecMode::Sequential).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
