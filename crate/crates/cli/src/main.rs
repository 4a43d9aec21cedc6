use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use wordcon_core::ablation::{ablate, AblationConfig};
use wordcon_core::evalharness::{probe_attention, run_benchmark, BenchmarkConfig, SamplerSettings};
use wordcon_core::flowmodel::{sample_pixels, Condition, ModelConfig};
use wordcon_core::glyphforge::{
    build_dataset, AttributeKind, AttributeSet, DatasetConfig, DatasetManifest, FontClass,
};
use wordcon_core::imageio::{save_attention_map, save_rgb};
use wordcon_core::params::ParamStore;
use wordcon_core::trainer::{
    base_model, train, TrainConfig, TrainState, RESOLVED_CONFIG_FILE, STATE_FILE,
};
use wordcon_core::wordcon::{load_base, merge_adapter, save_base, AdapterSet, ADAPTER_KIND};
use wordcon_core::{Error, ExecMode};

#[derive(Parser)]
#[command(
    name = "wordcon",
    version,
    about = "Word-level typography control for a miniature flow transformer"
)]
struct Cli {
    /// Seed override: dataset seed for `synth`, run seed for `train`, sampler
    /// seed for `sample`/`eval`, probe noise seed for `attn-probe`, the single
    /// seed for `ablate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: a directory, or the file for `sample` and `merge-adapter`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset: images, per-word masks and a JSONL manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train adapters (or a base) from a JSON TrainConfig.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a state checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one image for a condition.
    Sample {
        /// Adapter file, training state or base file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Base parameters; defaults to the base recorded by the training run.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Words as `WORD[:attr+attr]`, e.g. `GO:bold UP`.
        #[arg(long, num_args = 1.., conflicts_with = "sample")]
        words: Vec<String>,
        /// Take the condition from this manifest sample instead.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "sans")]
        font: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Benchmark an adapter on the test split of a manifest.
    Eval {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// JSON BenchmarkConfig.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write every generated image under `<out>/images`.
        #[arg(long)]
        dump_images: bool,
    },
    /// Fold adapter factors into base weights.
    MergeAdapter {
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Per-word attention maps and mask IoU for one manifest sample.
    AttnProbe {
        /// Adapter file, training state or base file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
    },
    /// Train and benchmark the vanilla, masked and masked+attn arms.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn required_out(out: Option<PathBuf>, command: &str) -> anyhow::Result<PathBuf> {
    out.ok_or_else(|| Error::Config(format!("{command} needs --out")).into())
}

/// What a checkpoint path resolved to.
struct Loaded {
    model: ModelConfig,
    params: ParamStore,
    adapters: Option<AdapterSet>,
    run: Option<TrainConfig>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// The training run an artifact belongs to, found by its config snapshot.
fn owning_run(artifact: &Path) -> anyhow::Result<Option<TrainConfig>> {
    let mut dir = artifact.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let snap = d.join(RESOLVED_CONFIG_FILE);
        if snap.exists() {
            return Ok(Some(read_json(&snap)?));
        }
        dir = d.parent();
    }
    Ok(None)
}

fn container_kind(path: &Path) -> anyhow::Result<String> {
    let c = wordcon_core::params::read_container(path)?;
    Ok(c.metadata
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string())
}

fn resolve_base(
    explicit: Option<&Path>,
    run: Option<&TrainConfig>,
) -> anyhow::Result<(ModelConfig, ParamStore)> {
    if let Some(b) = explicit {
        return Ok(load_base(b)?);
    }
    match run {
        Some(cfg) => Ok(base_model(cfg)?),
        None => bail!(Error::Config(
            "no --base given and no training run snapshot found next to the checkpoint".into()
        )),
    }
}

fn load_checkpoint(path: &Path, base: Option<&Path>) -> anyhow::Result<Loaded> {
    let run = owning_run(path)?;
    let kind = container_kind(path)?;
    if kind == ADAPTER_KIND {
        let (model, params) = resolve_base(base, run.as_ref())?;
        let adapters = AdapterSet::load(path, &model)?;
        return Ok(Loaded {
            model,
            params,
            adapters: Some(adapters),
            run,
        });
    }
    if kind == "wordcon-base" {
        let (model, params) = load_base(path)?;
        return Ok(Loaded {
            model,
            params,
            adapters: None,
            run,
        });
    }
    let state = TrainState::load_unchecked(path)?;
    let (model, params) = resolve_base(base, run.as_ref())?;
    if state.model_config_hash != model.hash() {
        bail!(Error::Incompatible(format!(
            "{} belongs to a different model config",
            path.display()
        )));
    }
    match state.stage {
        wordcon_core::trainer::Stage::Adapter => Ok(Loaded {
            model,
            params,
            adapters: Some(state.adapters()?),
            run,
        }),
        wordcon_core::trainer::Stage::Base => Ok(Loaded {
            model,
            params: ParamStore::from_map(state.tensors.clone()),
            adapters: None,
            run,
        }),
    }
}

fn manifest_for(
    explicit: Option<&Path>,
    run: Option<&TrainConfig>,
) -> anyhow::Result<DatasetManifest> {
    let path = match (explicit, run) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.manifest.clone(),
        (None, None) => bail!(Error::Config(
            "--manifest is required for this checkpoint".into()
        )),
    };
    Ok(DatasetManifest::read_jsonl(&path)?)
}

fn parse_word(spec: &str, font: FontClass) -> anyhow::Result<(String, AttributeSet)> {
    let (word, attrs) = spec.split_once(':').unwrap_or((spec, ""));
    let mut set = AttributeSet::plain(font);
    for a in attrs.split('+').filter(|a| !a.is_empty()) {
        let kind = AttributeKind::ALL
            .into_iter()
            .find(|k| k.name() == a)
            .ok_or_else(|| Error::Config(format!("unknown attribute {a:?}")))?;
        set.set(kind, true);
    }
    Ok((word.to_uppercase(), set))
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: DatasetConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = build_dataset(&cfg, out, ExecMode::default())?;
    println!(
        "wrote {} samples to {}",
        manifest.records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    let outcome = train(&cfg, resume)?;
    println!(
        "trained {} steps; artifact {}; state {}",
        outcome.state.step,
        outcome.artifact.display(),
        cfg.out_dir.join(STATE_FILE).display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    base: Option<&Path>,
    words: &[String],
    sample: Option<&str>,
    manifest: Option<&Path>,
    font: &str,
    steps: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let loaded = load_checkpoint(checkpoint, base)?;
    let manifest = manifest_for(manifest, loaded.run.as_ref())?;
    let vocabulary = manifest.config()?.vocabulary;
    let condition_words = match sample {
        Some(id) => manifest
            .get(id)
            .ok_or_else(|| Error::Validation(format!("sample {id} is not in the manifest")))?
            .words_with_attrs(),
        None => {
            if words.is_empty() {
                bail!(Error::Config("give --words or --sample".into()));
            }
            let font: FontClass =
                serde_json::from_value(serde_json::Value::String(font.to_lowercase()))
                    .map_err(|_| Error::Config(format!("unknown font class {font:?}")))?;
            words
                .iter()
                .map(|w| parse_word(w, font))
                .collect::<anyhow::Result<Vec<_>>>()?
        }
    };
    let cond = Condition::from_words(&condition_words, &vocabulary)?;
    let image = sample_pixels(
        &loaded.model,
        &loaded.params,
        loaded.adapters.as_ref(),
        &cond,
        steps,
        seed,
    )?;
    save_rgb(out, &image)?;
    let snapshot = serde_json::json!({
        "checkpoint": checkpoint,
        "words": condition_words,
        "steps": steps,
        "seed": seed,
    });
    write_json(&out.with_extension("json"), &snapshot)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    adapter: &Path,
    manifest: &Path,
    out: &Path,
    base: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    dump_images: bool,
) -> anyhow::Result<()> {
    let mut bench: BenchmarkConfig = match config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = seed {
        bench.sampler.seed = s;
    }
    let run = owning_run(adapter)?;
    let (model, params) = resolve_base(base, run.as_ref())?;
    let adapters = AdapterSet::load(adapter, &model)?;
    let manifest = DatasetManifest::read_jsonl(manifest)?;
    write_json(
        &out.join("eval_config.json"),
        &serde_json::json!({ "adapter": adapter, "manifest": manifest.root, "benchmark": bench }),
    )?;
    let dump = dump_images.then(|| out.join("images"));
    let report = run_benchmark(
        &model,
        &params,
        Some(&adapters),
        &manifest,
        &bench,
        dump.as_deref(),
    )?;
    report.write(&out.join("report.json"))?;
    println!(
        "type {:.2} word {:.2} total {:.2} ocr p/r {:.2}/{:.2} attention IoU {:.4} (run {})",
        report.type_acc,
        report.word_acc,
        report.total_acc,
        report.ocr_precision,
        report.ocr_recall,
        report.mean_attention_iou,
        report.run_id
    );
    Ok(())
}

fn cmd_merge(adapter: &Path, base: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let run = owning_run(adapter)?;
    let (model, params) = resolve_base(base, run.as_ref())?;
    let adapters = AdapterSet::load(adapter, &model)?;
    let merged = merge_adapter(&params, &adapters)?;
    save_base(
        out,
        &model,
        &merged,
        serde_json::json!({ "merged_from": adapter }),
    )?;
    write_json(
        &out.with_extension("json"),
        &serde_json::json!({ "adapter": adapter, "base": base, "model": model }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    checkpoint: &Path,
    sample: &str,
    manifest: Option<&Path>,
    base: Option<&Path>,
    out: Option<&Path>,
    t: f64,
    seed: u64,
) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Error::Config(format!("t = {t} is outside [0, 1]")));
    }
    let loaded = load_checkpoint(checkpoint, base)?;
    let manifest = manifest_for(manifest, loaded.run.as_ref())?;
    let record = manifest
        .get(sample)
        .ok_or_else(|| Error::Validation(format!("sample {sample} is not in the manifest")))?;
    let vocabulary = manifest.config()?.vocabulary;
    let settings = SamplerSettings {
        probe_t: t,
        seed,
        ..SamplerSettings::default()
    };
    let (maps, ious) = probe_attention(
        &loaded.model,
        &loaded.params,
        loaded.adapters.as_ref(),
        &manifest,
        record,
        &vocabulary,
        &settings,
        wordcon_core::evalharness::DEFAULT_IOU_THRESHOLD,
    )?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("attn_probe")
    });
    let mut words = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let png = out.join(format!("{sample}.word{i}.attn.png"));
        save_attention_map(&png, map, loaded.model.patch_size)?;
        words.push(serde_json::json!({
            "word": record.words[i],
            "attrs": record.attrs[i],
            "iou": ious[i],
            "map": map,
            "png": png.file_name().map(|n| n.to_string_lossy().into_owned()),
        }));
    }
    let summary = serde_json::json!({
        "checkpoint": checkpoint,
        "sample_id": sample,
        "t": t,
        "seed": seed,
        "controlled": record.controlled,
        "words": words,
    });
    write_json(&out.join(format!("{sample}.attn.json")), &summary)?;
    for (i, iou) in ious.iter().enumerate() {
        println!("{} word{i} {:<4} IoU {:.4}", sample, record.words[i], iou);
    }
    Ok(())
}

fn cmd_ablate(config: &Path, out: Option<&Path>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = AblationConfig::from_file(config)?;
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let report = ablate(&cfg)?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let Cli { seed, out, command } = cli;
    match command {
        Command::Synth { config } => cmd_synth(&config, &required_out(out, "synth")?, seed),
        Command::Train { config, resume } => {
            cmd_train(&config, resume.as_deref(), seed, out.as_deref())
        }
        Command::Sample {
            checkpoint,
            base,
            words,
            sample,
            manifest,
            font,
            steps,
        } => cmd_sample(
            &checkpoint,
            base.as_deref(),
            &words,
            sample.as_deref(),
            manifest.as_deref(),
            &font,
            steps,
            seed.unwrap_or(0),
            &required_out(out, "sample")?,
        ),
        Command::Eval {
            adapter,
            manifest,
            base,
            config,
            dump_images,
        } => cmd_eval(
            &adapter,
            &manifest,
            &required_out(out, "eval")?,
            base.as_deref(),
            config.as_deref(),
            seed,
            dump_images,
        ),
        Command::MergeAdapter { adapter, base } => cmd_merge(
            &adapter,
            base.as_deref(),
            &required_out(out, "merge-adapter")?,
        ),
        Command::AttnProbe {
            checkpoint,
            sample,
            manifest,
            base,
            t,
        } => cmd_probe(
            &checkpoint,
            &sample,
            manifest.as_deref(),
            base.as_deref(),
            out.as_deref(),
            t,
            seed.unwrap_or(0),
        ),
        Command::Ablate { config } => cmd_ablate(&config, out.as_deref(), seed),
    }
}

/// 2: configuration, 3: validation, 4: non-finite loss, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(
            Error::Validation(_)
            | Error::MissingMask(_)
            | Error::NonBinaryMask { .. }
            | Error::Incompatible(_)
            | Error::Integrity { .. }
            | Error::UnsupportedCharacter { .. }
            | Error::PixelHeightTooSmall { .. }
            | Error::EmptyText
            | Error::LayoutOverflow { .. }
            | Error::OutOfRange(_)
            | Error::Shape(_),
        ) => 3,
        Some(Error::NonFiniteLoss { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
