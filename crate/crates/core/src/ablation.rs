//! Three-arm loss ablation: adapters trained with the vanilla, masked and
//! masked+attention objectives on a shared dataset, base and seed set, then
//! benchmarked side by side.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{run_benchmark, BenchmarkConfig, BenchmarkReport};
use crate::glyphforge::{build_dataset, DatasetConfig, DatasetManifest, MANIFEST_FILE};
use crate::params::{hash_tensors, json_hash};
use crate::trainer::{base_model, initial_state, train, Stage, TrainConfig};
use crate::wordcon::{load_base, LossMode};

/// Settings for pretraining the base the adapters attach to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Generated under `out_dir/data` unless `manifest` points at an existing build.
    pub dataset: DatasetConfig,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Existing base file; when absent one is pretrained with `pretrain`.
    pub base: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    /// Template for every arm; `loss_mode`, `seed`, `manifest`, `base` and `out_dir` are overridden.
    pub train: TrainConfig,
    pub modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dataset: DatasetConfig::default(),
            manifest: None,
            out_dir: PathBuf::new(),
            base: None,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            modes: LossMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: AblationConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [
            cfg.manifest.as_mut(),
            cfg.base.as_mut(),
            Some(&mut cfg.out_dir),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config(
                "ablation needs at least one mode and one seed",
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub type_acc: f64,
    pub word_acc: f64,
    pub total_acc: f64,
    pub ocr_precision: f64,
    pub ocr_recall: f64,
    pub attention_iou: f64,
    pub val_cfm_start: f64,
    pub val_cfm_end: f64,
    pub initial_adapter_hash: String,
    pub report_run_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub loss_mode: LossMode,
    pub type_acc: f64,
    pub word_acc: f64,
    pub total_acc: f64,
    pub ocr_precision: f64,
    pub ocr_recall: f64,
    pub attention_iou: f64,
    pub val_cfm_reduction: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmSummary>,
    pub base_hash: String,
    pub config_hash: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl ArmSummary {
    fn from_seeds(loss_mode: LossMode, seeds: Vec<SeedResult>) -> Self {
        ArmSummary {
            loss_mode,
            type_acc: mean(seeds.iter().map(|s| s.type_acc)),
            word_acc: mean(seeds.iter().map(|s| s.word_acc)),
            total_acc: mean(seeds.iter().map(|s| s.total_acc)),
            ocr_precision: mean(seeds.iter().map(|s| s.ocr_precision)),
            ocr_recall: mean(seeds.iter().map(|s| s.ocr_recall)),
            attention_iou: mean(seeds.iter().map(|s| s.attention_iou)),
            val_cfm_reduction: mean(seeds.iter().map(|s| 1.0 - s.val_cfm_end / s.val_cfm_start)),
            seeds,
        }
    }
}

impl AblationReport {
    pub fn arm(&self, mode: LossMode) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.loss_mode == mode)
    }

    /// Plain-text table, one row per arm.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "loss_mode", "type", "word", "total", "ocr_p", "ocr_r", "attn_iou", "val_red"
        );
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.4} {:>8.4}",
                a.loss_mode.name(),
                a.type_acc,
                a.word_acc,
                a.total_acc,
                a.ocr_precision,
                a.ocr_recall,
                a.attention_iou,
                a.val_cfm_reduction
            );
        }
        out
    }
}

/// Pretrains an attribute-blind base on every parameter and returns its path.
pub fn pretrain_base(config: &AblationConfig, manifest: &Path) -> Result<PathBuf> {
    let out_dir = config.out_dir.join("base");
    let path = out_dir.join(crate::trainer::BASE_FILE);
    let cfg = TrainConfig {
        manifest: manifest.to_path_buf(),
        out_dir,
        stage: Stage::Base,
        base: None,
        model: config.train.model.clone(),
        base_seed: config.train.base_seed,
        loss_mode: LossMode::Vanilla,
        batch_size: config.pretrain.batch_size,
        grad_accum: 1,
        steps: config.pretrain.steps,
        learning_rate: config.pretrain.learning_rate,
        seed: config.pretrain.seed,
        checkpoint_every: 0,
        val_every: 0,
        attribute_blind: true,
        mask_source: crate::trainer::MaskSource::None,
        ..config.train.clone()
    };
    train(&cfg, None)?;
    Ok(path)
}

/// Resolves the dataset, building it under `out_dir/data` when needed.
pub fn ensure_dataset(config: &AblationConfig) -> Result<PathBuf> {
    if let Some(m) = &config.manifest {
        return Ok(m.clone());
    }
    let dir = config.out_dir.join("data");
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let existing = DatasetManifest::read_jsonl(&manifest)?;
        if existing.generator_config_hash == config.dataset.hash() {
            return Ok(manifest);
        }
    }
    build_dataset(&config.dataset, &dir, config.train.exec)?;
    Ok(manifest)
}

/// Trains and benchmarks one arm for one seed.
pub fn run_arm(
    config: &AblationConfig,
    manifest: &Path,
    base: &Path,
    mode: LossMode,
    seed: u64,
) -> Result<(SeedResult, BenchmarkReport)> {
    let arm_dir = config
        .out_dir
        .join(format!("{}-seed{seed}", mode.name().replace('+', "_")));
    let cfg = TrainConfig {
        manifest: manifest.to_path_buf(),
        out_dir: arm_dir.clone(),
        stage: Stage::Adapter,
        base: Some(base.to_path_buf()),
        loss_mode: mode,
        seed,
        attribute_blind: false,
        mask_source: if mode.uses_masks() {
            match &config.train.mask_source {
                crate::trainer::MaskSource::None => crate::trainer::MaskSource::Dataset,
                other => other.clone(),
            }
        } else {
            config.train.mask_source.clone()
        },
        ..config.train.clone()
    };
    let (model, params) = base_model(&cfg)?;
    let init = initial_state(&cfg, &model, &params, None)?;
    let initial_adapter_hash = hash_tensors(init.tensors.iter().map(|(k, v)| (k.as_str(), v)));
    let outcome = train(&cfg, None)?;
    let adapters = outcome.adapters()?;
    let loaded = DatasetManifest::read_jsonl(manifest)?;
    let report = run_benchmark(
        &model,
        &params,
        Some(&adapters),
        &loaded,
        &config.benchmark,
        None,
    )?;
    report.write(&arm_dir.join("report.json"))?;
    let first = outcome.validation.first().map_or(f64::NAN, |v| v.val_cfm);
    let last = outcome.validation.last().map_or(f64::NAN, |v| v.val_cfm);
    let result = SeedResult {
        seed,
        type_acc: report.type_acc,
        word_acc: report.word_acc,
        total_acc: report.total_acc,
        ocr_precision: report.ocr_precision,
        ocr_recall: report.ocr_recall,
        attention_iou: report.mean_attention_iou,
        val_cfm_start: first,
        val_cfm_end: last,
        initial_adapter_hash,
        report_run_id: report.run_id.clone(),
    };
    Ok((result, report))
}

/// Runs every arm over every seed; writes `ablation.json` and `ablation.txt`.
/// A failing arm aborts the run, leaving earlier arms' artifacts in place.
pub fn ablate(config: &AblationConfig) -> Result<AblationReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let snapshot = config.out_dir.join("ablation_config.json");
    std::fs::write(&snapshot, serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(&snapshot, e))?;
    let manifest = ensure_dataset(config)?;
    let base = match &config.base {
        Some(b) => b.clone(),
        None => pretrain_base(config, &manifest)?,
    };
    let (_, base_params) = load_base(&base)?;
    let mut arms = Vec::with_capacity(config.modes.len());
    for &mode in &config.modes {
        let mut seeds = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            log::info!("ablation arm {} seed {seed}", mode.name());
            seeds.push(run_arm(config, &manifest, &base, mode, seed)?.0);
        }
        arms.push(ArmSummary::from_seeds(mode, seeds));
    }
    let report = AblationReport {
        arms,
        base_hash: base_params.content_hash(),
        config_hash: json_hash(config),
    };
    let json = config.out_dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&json, e))?;
    let txt = config.out_dir.join("ablation.txt");
    std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::SamplerSettings;
    use crate::flowmodel::ModelConfig;

    fn tiny(dir: &Path) -> AblationConfig {
        AblationConfig {
            dataset: DatasetConfig {
                num_samples: 12,
                test_fraction: 0.25,
                ..DatasetConfig::default()
            },
            out_dir: dir.to_path_buf(),
            pretrain: PretrainConfig {
                steps: 2,
                batch_size: 2,
                ..PretrainConfig::default()
            },
            train: TrainConfig {
                model: ModelConfig {
                    hidden_dim: 16,
                    heads: 2,
                    ..ModelConfig::default()
                },
                batch_size: 2,
                steps: 2,
                val_samples: 2,
                val_draws: 1,
                ..TrainConfig::default()
            },
            seeds: vec![5],
            benchmark: BenchmarkConfig {
                sampler: SamplerSettings {
                    steps: 2,
                    ..SamplerSettings::default()
                },
                ..BenchmarkConfig::default()
            },
            ..AblationConfig::default()
        }
    }

    #[test]
    fn three_arms_share_initial_adapters_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = ablate(&cfg).unwrap();
        assert_eq!(report.arms.len(), 3);
        assert_eq!(report.table().lines().count(), 4);
        let h0 = &report.arms[0].seeds[0].initial_adapter_hash;
        assert!(report
            .arms
            .iter()
            .all(|a| &a.seeds[0].initial_adapter_hash == h0));
        assert!(
            dir.path().join("ablation.json").exists() && dir.path().join("ablation.txt").exists()
        );

        let again = ablate(&cfg).unwrap();
        assert_eq!(report, again);
    }
}
