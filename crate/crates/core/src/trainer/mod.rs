//! Reproducible training of adapter factors (or, for base pretraining, of
//! every model parameter) with checkpointing and a JSONL metrics log.

mod state;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::flowmodel::{
    conditional_target, forward, forward_process, gaussian, init_params, patchify, Condition,
    ModelConfig,
};
use crate::glyphforge::{DatasetConfig, DatasetManifest, ManifestRecord, Split};
use crate::grounding::{DatasetMasks, ImportedMasks, MaskProvider};
use crate::imageio::load_rgb;
use crate::params::{json_hash, ParamStore};
use crate::tensor::Mat;
use crate::wordcon::{
    cfm_loss, init_adapter, load_base, objective_and_grads, save_base, select_parameters,
    AdapterSet, GradTarget, LossBreakdown, LossMode, LossWeights, MaskSet, ObjectiveInput,
};

pub use state::{AdamConfig, RunningStats, TrainState, STATE_KIND, STATE_VERSION};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const ADAPTER_FILE: &str = "adapter.wcon";
pub const BASE_FILE: &str = "base.wcon";
pub const STATE_FILE: &str = "state.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "train_config.json";

/// What the run optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Low-rank factors on the text-attention projections; the base is frozen.
    #[default]
    Adapter,
    /// Every base parameter (pretraining the model the adapters attach to).
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskSource {
    /// The generator's own per-word masks, located through the manifest.
    #[default]
    Dataset,
    /// `<dir>/<sample_id>.word<i>.png` produced by an external grounding model.
    Import { dir: PathBuf },
    /// No masks; only valid with the vanilla loss.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub stage: Stage,
    /// Base parameter file; when absent the base is a seeded random initialisation of `model`.
    pub base: Option<PathBuf>,
    pub model: ModelConfig,
    pub base_seed: u64,
    pub loss_mode: LossMode,
    pub rank: usize,
    /// Adapter scale numerator; defaults to `rank`.
    pub alpha: Option<f64>,
    pub lambda_attn: f64,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimiser step.
    pub grad_accum: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Evaluate validation flow-matching loss every this many steps (0: start and end only).
    pub val_every: u64,
    pub val_samples: usize,
    pub val_draws: usize,
    pub mask_source: MaskSource,
    /// Clear every typographic attribute from the conditions.
    pub attribute_blind: bool,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            stage: Stage::Adapter,
            base: None,
            model: ModelConfig::default(),
            base_seed: 0,
            loss_mode: LossMode::MaskedAttn,
            rank: 4,
            alpha: None,
            lambda_attn: crate::wordcon::DEFAULT_LAMBDA_ATTN,
            batch_size: 8,
            grad_accum: 1,
            steps: 500,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            checkpoint_every: 0,
            val_every: 0,
            val_samples: 32,
            val_draws: 4,
            mask_source: MaskSource::Dataset,
            attribute_blind: false,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config(
                "batch_size and grad_accum must be at least 1",
            ));
        }
        if self.stage == Stage::Adapter && self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.lambda_attn >= 0.0 && self.lambda_attn.is_finite()) {
            return Err(Error::config("lambda_attn must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.mask_source == MaskSource::None && self.loss_mode.uses_masks() {
            return Err(Error::config(format!(
                "loss mode {} needs masks",
                self.loss_mode.name()
            )));
        }
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::config("manifest path is required"));
        }
        if self.val_draws == 0 {
            return Err(Error::config("val_draws must be at least 1"));
        }
        self.model.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_attn: self.lambda_attn,
        }
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// Hash of every setting that changes the optimisation trajectory.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.val_every = 0;
        c.exec = ExecMode::default();
        json_hash(&c)
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let p = (step as f64 / self.steps.max(1) as f64).min(1.0);
                let f = final_fraction
                    + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                self.learning_rate * f
            }
        }
    }

    pub fn adapter_seed(&self) -> u64 {
        self.seed ^ 0xA11A_A11A
    }

    /// Loads a JSON config; relative paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = dir.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.out_dir);
        if let Some(b) = cfg.base.as_mut() {
            resolve(b);
        }
        if let MaskSource::Import { dir } = &mut cfg.mask_source {
            resolve(dir);
        }
        Ok(cfg)
    }
}

/// One decoded training or validation sample.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample_id: String,
    pub x0: Mat,
    pub cond: Condition,
    pub masks: MaskSet,
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub manifest: DatasetManifest,
    pub dataset: DatasetConfig,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn provider(source: &MaskSource, manifest: &DatasetManifest) -> Option<Box<dyn MaskProvider>> {
    match source {
        MaskSource::Dataset => Some(Box::new(DatasetMasks::new(manifest))),
        MaskSource::Import { dir } => Some(Box::new(ImportedMasks { dir: dir.clone() })),
        MaskSource::None => None,
    }
}

/// Decodes one manifest record into latent, condition and masks.
pub fn load_example(
    record: &ManifestRecord,
    manifest: &DatasetManifest,
    vocabulary: &[String],
    model: &ModelConfig,
    masks: Option<&dyn MaskProvider>,
    attribute_blind: bool,
) -> Result<Example> {
    let image = load_rgb(&manifest.resolve(&record.image_path))?;
    if image.dim() != (model.image_size, model.image_size, 3) {
        return Err(Error::Validation(format!(
            "{}: image is {:?}, model expects {}px",
            record.sample_id,
            image.dim(),
            model.image_size
        )));
    }
    let x0 = patchify(&image, model.patch_size)?;
    let mut cond = Condition::from_words(&record.words_with_attrs(), vocabulary)?;
    if attribute_blind {
        cond = cond.without_attributes();
    }
    cond.validate(model)?;
    let masks = match masks {
        Some(p) => p.masks(record, model.patch_size)?,
        None => MaskSet::full(model.grid(), record.words.len()),
    };
    if masks.len() != record.words.len() {
        return Err(Error::Validation(format!(
            "{}: {} masks for {} words",
            record.sample_id,
            masks.len(),
            record.words.len()
        )));
    }
    Ok(Example {
        sample_id: record.sample_id.clone(),
        x0,
        cond,
        masks,
    })
}

impl TrainingData {
    pub fn load(config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        let manifest = DatasetManifest::read_jsonl(&config.manifest)?;
        let dataset = manifest.config()?;
        if manifest.records.is_empty() {
            return Err(Error::Validation("manifest has no records".into()));
        }
        if let Some(r) = manifest
            .records
            .iter()
            .find(|r| r.generator_config_hash != dataset.hash())
        {
            return Err(Error::Validation(format!(
                "{} was generated by a different config",
                r.sample_id
            )));
        }
        if dataset.vocabulary.len() > model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary of {} words exceeds model vocab_size {}",
                dataset.vocabulary.len(),
                model.vocab_size
            )));
        }
        let prov = provider(&config.mask_source, &manifest);
        let load = |split: Split, limit: usize| -> Result<Vec<Example>> {
            let records: Vec<&ManifestRecord> = manifest.split(split).take(limit).collect();
            config
                .exec
                .map(&records, |r| {
                    load_example(
                        r,
                        &manifest,
                        &dataset.vocabulary,
                        model,
                        prov.as_deref(),
                        config.attribute_blind,
                    )
                })
                .into_iter()
                .collect()
        };
        let train = load(Split::Train, usize::MAX)?;
        let val = load(Split::Test, config.val_samples)?;
        if train.is_empty() {
            return Err(Error::Validation("manifest has no training samples".into()));
        }
        Ok(TrainingData {
            manifest,
            dataset,
            train,
            val,
        })
    }
}

/// Resolves the frozen (or, for base training, initial) model.
pub fn base_model(config: &TrainConfig) -> Result<(ModelConfig, ParamStore)> {
    match &config.base {
        Some(path) => load_base(path),
        None => Ok((
            config.model.clone(),
            init_params(&config.model, config.base_seed)?,
        )),
    }
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_mask: f64,
    pub loss_attn: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub val_cfm: f64,
}

/// Everything a step needs besides the mutable state.
pub struct StepContext<'a> {
    pub model: &'a ModelConfig,
    pub base: &'a ParamStore,
    pub config: &'a TrainConfig,
    pub examples: &'a [Example],
}

/// One optimiser step; returns the batch-mean loss components.
pub fn train_step(ctx: &StepContext<'_>, state: &mut TrainState) -> Result<LossBreakdown> {
    let n = ctx.config.batch_size * ctx.config.grad_accum;
    let ids = state.next_batch(ctx.examples.len(), n);
    let (rows, cols) = ctx.model.latent_shape();
    let draws: Vec<(usize, f64, Mat)> = ids
        .iter()
        .map(|&i| {
            let t: f64 = state.rng.random();
            (i, t, gaussian(&mut state.rng, rows, cols))
        })
        .collect();

    let (params_owned, adapters, target) = match state.stage {
        Stage::Adapter => (None, Some(state.adapters()?), GradTarget::Adapters),
        Stage::Base => (
            Some(ParamStore::from_map(state.tensors.clone())),
            None,
            GradTarget::Base,
        ),
    };
    let params = params_owned.as_ref().unwrap_or(ctx.base);
    let mode = ctx.config.loss_mode;
    let weights = ctx.config.weights();
    let results = ctx.config.exec.map(&draws, |(i, t, eps)| {
        let ex = &ctx.examples[*i];
        let input = ObjectiveInput {
            x0: &ex.x0,
            eps,
            t: *t,
            cond: &ex.cond,
            masks: &ex.masks,
        };
        objective_and_grads(
            ctx.model,
            params,
            adapters.as_ref(),
            target,
            input,
            mode,
            weights,
        )
    });

    let inv = 1.0 / n as f64;
    let mut loss = LossBreakdown::default();
    let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        loss.add_scaled(&l, inv);
        for (k, v) in g {
            match grads.get_mut(&k) {
                Some(acc) => acc.axpy(inv, &v),
                None => {
                    let mut v = v;
                    v.scale_assign(inv);
                    grads.insert(k, v);
                }
            }
        }
    }
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: (state.step + 1) as usize,
            sample_ids: ids
                .iter()
                .map(|&i| ctx.examples[i].sample_id.clone())
                .collect(),
        });
    }
    let lr = ctx.config.learning_rate_at(state.step);
    state.apply_adam(
        &grads,
        &AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        lr,
    )?;
    state.step += 1;
    state.stats.record(state.step, &loss);
    Ok(loss)
}

/// Mean flow-matching loss over fixed `(t, eps)` draws per example.
pub fn validation_cfm(
    model: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    examples: &[Example],
    draws: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Validation("no validation samples".into()));
    }
    let (rows, cols) = model.latent_shape();
    let losses = exec.map_range(examples.len(), |i| -> Result<f64> {
        let ex = &examples[i];
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut total = 0.0;
        for d in 0..draws {
            // Stratified times cover [0, 1] evenly at every draw count.
            let t = (d as f64 + rng.random::<f64>()) / draws as f64;
            let eps = gaussian(&mut rng, rows, cols);
            let state = forward_process(&ex.x0, &eps, t)?;
            let (v, _) = forward(model, params, adapters, &state, &ex.cond)?;
            total += cfm_loss(&v.v, &conditional_target(&ex.x0, &eps, t)?.v)?;
        }
        Ok(total / draws as f64)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Seed of the fixed validation draws; shared by every run on the same dataset seed.
pub const VALIDATION_SEED: u64 = 0x005E_ED0F_7E57;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub model: ModelConfig,
    pub metrics_path: PathBuf,
    pub validation: Vec<ValidationPoint>,
    /// `adapter.wcon` or `base.wcon`, depending on the stage.
    pub artifact: PathBuf,
}

impl TrainOutcome {
    pub fn adapters(&self) -> Result<AdapterSet> {
        self.state.adapters()
    }
}

fn append_jsonl<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.create(true);
    if append {
        opts.append(true);
    } else {
        opts.write(true).truncate(true);
    }
    opts.open(path).map_err(|e| Error::io(path, e))
}

/// Fresh state for `config`, or the one stored at `resume`.
pub fn initial_state(
    config: &TrainConfig,
    model: &ModelConfig,
    base: &ParamStore,
    resume: Option<&Path>,
) -> Result<TrainState> {
    if let Some(path) = resume {
        return TrainState::load(path, &model.hash(), &config.trajectory_hash());
    }
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(match config.stage {
        Stage::Adapter => {
            let ad = init_adapter(
                model,
                &select_parameters(model),
                config.rank,
                config.alpha,
                config.adapter_seed(),
            )?;
            TrainState::from_adapters(&ad, rng, model.hash(), config.trajectory_hash())
        }
        Stage::Base => TrainState::new(
            Stage::Base,
            0,
            0.0,
            base.as_map().clone(),
            rng,
            model.hash(),
            config.trajectory_hash(),
        ),
    })
}

/// Runs (or resumes) a training job and writes its artifacts under `config.out_dir`.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, base) = base_model(config)?;
    if let (Stage::Base, Some(base)) = (config.stage, &config.base) {
        log::info!("continuing base training from {}", base.display());
    }
    let data = TrainingData::load(config, &model)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snapshot = serde_json::to_string_pretty(config)?;
    let snap_path = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&snap_path, snapshot).map_err(|e| Error::io(&snap_path, e))?;

    let mut state = initial_state(config, &model, &base, resume)?;
    if state.stage != config.stage {
        return Err(Error::Incompatible(
            "checkpoint stage differs from config".into(),
        ));
    }
    let resuming = resume.is_some() && state.step > 0;
    let metrics_path = out.join(METRICS_FILE);
    let val_path = out.join(VALIDATION_FILE);
    let mut metrics = open_log(&metrics_path, resuming)?;
    let mut val_log = open_log(&val_path, resuming)?;
    let mut validation = Vec::new();

    let evaluate = |state: &TrainState| -> Result<f64> {
        if data.val.is_empty() {
            return Ok(f64::NAN);
        }
        match state.stage {
            Stage::Adapter => {
                let ad = state.adapters()?;
                validation_cfm(
                    &model,
                    &base,
                    Some(&ad),
                    &data.val,
                    config.val_draws,
                    VALIDATION_SEED,
                    config.exec,
                )
            }
            Stage::Base => {
                let p = ParamStore::from_map(state.tensors.clone());
                validation_cfm(
                    &model,
                    &p,
                    None,
                    &data.val,
                    config.val_draws,
                    VALIDATION_SEED,
                    config.exec,
                )
            }
        }
    };
    let mut record_val = |state: &TrainState, log: &mut File| -> Result<()> {
        let point = ValidationPoint {
            step: state.step,
            val_cfm: evaluate(state)?,
        };
        append_jsonl(log, &val_path, &point)?;
        validation.push(point);
        Ok(())
    };
    if !resuming {
        record_val(&state, &mut val_log)?;
    }

    let ctx = StepContext {
        model: &model,
        base: &base,
        config,
        examples: &data.train,
    };
    let started = Instant::now();
    let offset = state.stats.wallclock_s;
    while state.step < config.steps {
        let loss = train_step(&ctx, &mut state)?;
        state.stats.wallclock_s = offset + started.elapsed().as_secs_f64();
        let line = StepMetrics {
            step: state.step,
            loss_total: loss.total,
            loss_mask: loss.masked,
            loss_attn: loss.attn,
            wallclock_s: state.stats.wallclock_s,
        };
        append_jsonl(&mut metrics, &metrics_path, &line)?;
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            state.save(
                &out.join("checkpoints")
                    .join(format!("step_{:06}.ckpt", state.step)),
            )?;
        }
        if config.val_every > 0 && state.step % config.val_every == 0 && state.step < config.steps {
            record_val(&state, &mut val_log)?;
        }
        if state.step % 50 == 0 {
            log::info!(
                "step {} loss {:.5} (mask {:.5}, attn {:.5})",
                state.step,
                loss.total,
                loss.masked,
                loss.attn
            );
        }
    }
    record_val(&state, &mut val_log)?;

    let artifact = match state.stage {
        Stage::Adapter => {
            let path = out.join(ADAPTER_FILE);
            state.adapters()?.save(&path, &model)?;
            path
        }
        Stage::Base => {
            let path = out.join(BASE_FILE);
            let info =
                serde_json::json!({ "steps": state.step, "train_config_hash": config.hash() });
            save_base(
                &path,
                &model,
                &ParamStore::from_map(state.tensors.clone()),
                info,
            )?;
            path
        }
    };
    state.save(&out.join(STATE_FILE))?;
    Ok(TrainOutcome {
        state,
        model,
        metrics_path,
        validation,
        artifact,
    })
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
