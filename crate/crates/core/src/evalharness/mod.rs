//! Deterministic grading of generated images: typography-control accuracy,
//! lexicon OCR precision/recall and attention-mask alignment.

mod grader;

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grader::{
    ocr_score, style_hypotheses, to_gray, Detection, Grader, GraderConfig, Localization, OcrScore,
    WordGrade,
};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::flowmodel::{
    extract_word_attention, forward, forward_process, gaussian, patchify, sample_pixels,
    AttentionMap, Condition, ModelConfig, Reduction,
};
use crate::glyphforge::{
    AttributeKind, DatasetConfig, DatasetManifest, ManifestRecord, SamplePlan, Split,
};
use crate::grounding::{DatasetMasks, MaskProvider};
use crate::imageio::{load_rgb, quantize_rgb, save_rgb};
use crate::params::{hash_tensors, json_hash, ParamStore};
use crate::wordcon::AdapterSet;

/// Sample-level verdicts derived from per-word grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVerdict {
    /// Every intended attribute type appears on some identified word.
    pub type_ok: bool,
    /// Every controlled word was found and carries some attribute.
    pub word_ok: bool,
    /// Every controlled word carries exactly its intended attributes.
    pub total_ok: bool,
}

/// Judges one sample; `controlled` lists the words whose attributes were requested.
pub fn judge(
    grades: &[WordGrade],
    expected: &[crate::glyphforge::AttributeSet],
    controlled: &[usize],
) -> Result<SampleVerdict> {
    if grades.len() != expected.len() {
        return Err(Error::shape(format!(
            "{} grades for {} words",
            grades.len(),
            expected.len()
        )));
    }
    if controlled.is_empty() || controlled.iter().any(|&c| c >= grades.len()) {
        return Err(Error::Validation(
            "controlled word indices out of range".into(),
        ));
    }
    let intended: Vec<AttributeKind> = controlled
        .iter()
        .flat_map(|&c| expected[c].kinds())
        .collect();
    let type_ok = !intended.is_empty()
        && intended.iter().all(|&k| {
            grades
                .iter()
                .any(|g| g.word_identified && g.matched_attribute.has(k))
        });
    let word_ok = controlled
        .iter()
        .all(|&c| grades[c].word_identified && !grades[c].matched_attribute.is_plain());
    let total_ok = controlled.iter().all(|&c| grades[c].attribute_correct);
    Ok(SampleVerdict {
        type_ok,
        word_ok,
        total_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub type_acc: f64,
    pub word_acc: f64,
    pub total_acc: f64,
}

/// Percentages of samples passing each verdict.
pub fn accuracy_metrics(verdicts: &[SampleVerdict]) -> Result<Accuracy> {
    if verdicts.is_empty() {
        return Err(Error::Validation("accuracy over an empty grade set".into()));
    }
    let pct = |f: fn(&SampleVerdict) -> bool| {
        100.0 * verdicts.iter().filter(|v| f(v)).count() as f64 / verdicts.len() as f64
    };
    Ok(Accuracy {
        type_acc: pct(|v| v.type_ok),
        word_acc: pct(|v| v.word_ok),
        total_acc: pct(|v| v.total_ok),
    })
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// IoU between the map binarised at `threshold` and `mask`; an empty union scores 1.
pub fn attention_alignment(map: &AttentionMap, mask: &Array2<bool>, threshold: f64) -> Result<f64> {
    if mask.dim() != (map.grid, map.grid) {
        return Err(Error::shape(format!(
            "map grid {} vs mask {:?}",
            map.grid,
            mask.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in map.values.data().iter().zip(mask.iter()) {
        let on = v >= threshold;
        inter += (on && m) as usize;
        union += (on || m) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub seed: u64,
    /// Time at which the attention probe is taken on the noised ground truth.
    pub probe_t: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            steps: 20,
            seed: 0,
            probe_t: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub sampler: SamplerSettings,
    pub grader: GraderConfig,
    pub iou_threshold: f64,
    /// Cap on graded test samples (0 grades all of them).
    pub max_samples: usize,
    pub exec: ExecMode,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sampler: SamplerSettings::default(),
            grader: GraderConfig::default(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            max_samples: 0,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub controlled: usize,
    pub attribute_type: AttributeKind,
    pub grades: Vec<WordGrade>,
    pub verdict: SampleVerdict,
    pub ocr: OcrScore,
    /// IoU of the controlled word's attention map; absent when not probed.
    pub attention_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub type_acc: f64,
    pub word_acc: f64,
    pub total_acc: f64,
    pub ocr_precision: f64,
    pub ocr_recall: f64,
    pub mean_attention_iou: f64,
    pub num_samples: usize,
    pub config_hash: String,
    pub run_id: String,
    pub samples: Vec<SampleReport>,
}

impl BenchmarkReport {
    fn assemble(samples: Vec<SampleReport>, config_hash: String) -> Result<Self> {
        let verdicts: Vec<SampleVerdict> = samples.iter().map(|s| s.verdict).collect();
        let acc = accuracy_metrics(&verdicts)?;
        let (mut hits, mut recognized, mut expected) = (0.0, 0usize, 0usize);
        for s in &samples {
            let exp = s.grades.len();
            hits += s.ocr.recall / 100.0 * exp as f64;
            recognized += s.ocr.recognized.len();
            expected += exp;
        }
        let ocr_precision = if recognized == 0 {
            0.0
        } else {
            100.0 * hits / recognized as f64
        };
        let ocr_recall = 100.0 * hits / expected as f64;
        let ious: Vec<f64> = samples.iter().filter_map(|s| s.attention_iou).collect();
        let mean_attention_iou = if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        };
        Ok(BenchmarkReport {
            type_acc: acc.type_acc,
            word_acc: acc.word_acc,
            total_acc: acc.total_acc,
            ocr_precision: round_pct(ocr_precision),
            ocr_recall: round_pct(ocr_recall),
            mean_attention_iou,
            num_samples: samples.len(),
            run_id: config_hash[..12].to_string(),
            config_hash,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Snaps to 1e-9 so integer ratios print cleanly.
fn round_pct(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn test_records(manifest: &DatasetManifest, max_samples: usize) -> Vec<&ManifestRecord> {
    let limit = if max_samples == 0 {
        usize::MAX
    } else {
        max_samples
    };
    manifest.split(Split::Test).take(limit).collect()
}

/// Grades `image` against a manifest record's condition.
pub fn grade_record(
    grader: &Grader,
    record: &ManifestRecord,
    image: &Array3<f32>,
    attention_iou: Option<f64>,
) -> Result<SampleReport> {
    let words = record.words_with_attrs();
    let grades = grader.grade_sample(image, &words)?;
    let verdict = judge(&grades, &record.attrs, &[record.controlled])?;
    let ocr = grader.ocr_metrics(image, &record.words, record.font_class)?;
    Ok(SampleReport {
        sample_id: record.sample_id.clone(),
        controlled: record.controlled,
        attribute_type: record.attribute_type,
        grades,
        verdict,
        ocr,
        attention_iou,
    })
}

/// Grades the dataset's own test images; a sound grader scores 100 everywhere.
pub fn grade_ground_truth(
    manifest: &DatasetManifest,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    let dataset = manifest.config()?;
    let grader = Grader::for_dataset(&dataset, config.grader)?;
    let records = test_records(manifest, config.max_samples);
    let samples = config
        .exec
        .map(&records, |r| {
            grade_record(
                &grader,
                r,
                &load_rgb(&manifest.resolve(&r.image_path))?,
                None,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let hash = json_hash(&(
        "ground-truth",
        &manifest.generator_config_hash,
        config,
        ids(&records),
    ));
    BenchmarkReport::assemble(samples, hash)
}

fn ids(records: &[&ManifestRecord]) -> Vec<String> {
    records.iter().map(|r| r.sample_id.clone()).collect()
}

/// The plan with its controlled word's attribute replaced by the next attribute type.
pub fn flip_attribute(plan: &SamplePlan) -> SamplePlan {
    let mut out = plan.clone();
    let pos = AttributeKind::ALL
        .iter()
        .position(|&k| k == plan.attribute_type)
        .unwrap_or(0);
    let flipped = AttributeKind::ALL[(pos + 1) % AttributeKind::ALL.len()];
    let font = plan.words[plan.controlled].1.font_class;
    out.words[plan.controlled].1 = crate::glyphforge::AttributeSet::with_kind(font, flipped);
    out
}

/// Grades attribute-flipped renders of the test split against the original
/// conditions; a sensitive grader marks every controlled word wrong.
pub fn grade_flipped(
    dataset: &DatasetConfig,
    manifest: &DatasetManifest,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    let grader = Grader::for_dataset(dataset, config.grader)?;
    let raster = dataset.rasterizer();
    let plans = dataset.plans()?;
    let records = test_records(manifest, config.max_samples);
    let samples = config
        .exec
        .map(&records, |r| {
            let plan = plans
                .iter()
                .find(|p| p.sample_id == r.sample_id)
                .ok_or_else(|| {
                    Error::Validation(format!("{} is not in the dataset plan", r.sample_id))
                })?;
            let sample = dataset.synthesize(&flip_attribute(plan), &raster)?;
            grade_record(&grader, r, &quantize_rgb(&sample.image), None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let hash = json_hash(&(
        "flipped",
        &manifest.generator_config_hash,
        config,
        ids(&records),
    ));
    BenchmarkReport::assemble(samples, hash)
}

/// Deterministic per-condition generation seed.
pub fn condition_seed(base: u64, record: &ManifestRecord) -> u64 {
    base ^ record.seed.rotate_left(17)
}

/// Controlled-word attention IoU on the noised ground truth at `probe_t`.
pub fn probe_attention(
    model: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    vocabulary: &[String],
    settings: &SamplerSettings,
    threshold: f64,
) -> Result<(Vec<AttentionMap>, Vec<f64>)> {
    let image = load_rgb(&manifest.resolve(&record.image_path))?;
    let x0 = patchify(&image, model.patch_size)?;
    let cond = Condition::from_words(&record.words_with_attrs(), vocabulary)?;
    let (r, c) = model.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(condition_seed(settings.seed, record) ^ 0xA77E);
    let eps = gaussian(&mut rng, r, c);
    let state = forward_process(&x0, &eps, settings.probe_t)?;
    let (_, rec) = forward(model, params, adapters, &state, &cond)?;
    let masks = DatasetMasks::new(manifest).masks(record, model.patch_size)?;
    let mut maps = Vec::with_capacity(cond.len());
    let mut ious = Vec::with_capacity(cond.len());
    for i in 0..cond.len() {
        let map = extract_word_attention(&rec, i, Reduction::MeanMaxRescale)?;
        ious.push(attention_alignment(&map, &masks.masks[i], threshold)?);
        maps.push(map);
    }
    Ok((maps, ious))
}

/// Samples one image per test condition, grades them and aggregates a report.
/// With `dump_dir`, each generated image is written as `<sample_id>.png`.
pub fn run_benchmark(
    model: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    manifest: &DatasetManifest,
    config: &BenchmarkConfig,
    dump_dir: Option<&Path>,
) -> Result<BenchmarkReport> {
    if let Some(ad) = adapters {
        ad.check_against(model)?;
    }
    let dataset = manifest.config()?;
    let grader = Grader::for_dataset(&dataset, config.grader)?;
    let records = test_records(manifest, config.max_samples);
    if records.is_empty() {
        return Err(Error::Validation("manifest has no test samples".into()));
    }
    let samples = config
        .exec
        .map(&records, |r| -> Result<SampleReport> {
            let cond = Condition::from_words(&r.words_with_attrs(), &dataset.vocabulary)?;
            let seed = condition_seed(config.sampler.seed, r);
            let image = quantize_rgb(&sample_pixels(
                model,
                params,
                adapters,
                &cond,
                config.sampler.steps,
                seed,
            )?);
            if let Some(dir) = dump_dir {
                save_rgb(&dir.join(format!("{}.png", r.sample_id)), &image)?;
            }
            let (_, ious) = probe_attention(
                model,
                params,
                adapters,
                manifest,
                r,
                &dataset.vocabulary,
                &config.sampler,
                config.iou_threshold,
            )?;
            grade_record(&grader, r, &image, Some(ious[r.controlled]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let adapter_hash =
        adapters.map(|a| hash_tensors(a.tensors().iter().map(|(k, v)| (k.as_str(), v))));
    let hash = json_hash(&(
        "generated",
        model.hash(),
        params.content_hash(),
        adapter_hash,
        &manifest.generator_config_hash,
        config,
        ids(&records),
    ));
    BenchmarkReport::assemble(samples, hash)
}
