use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::flowmodel::{parameter_shapes, ModelConfig};
use crate::params::{read_container, write_container, DType, ParamStore};
use crate::tensor::{gemm, Mat};

pub const ADAPTER_KIND: &str = "wordcon-adapter";
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Weight names of the text-stream attention projections in every double block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub names: Vec<String>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

pub fn select_parameters(cfg: &ModelConfig) -> TargetSet {
    let names = (0..cfg.double_blocks)
        .flat_map(|b| {
            ["q", "k", "v", "out"]
                .into_iter()
                .map(move |p| format!("double_blocks.{b}.txt_attn.{p}.weight"))
        })
        .collect();
    TargetSet { names }
}

/// Factors of one low-rank update `delta = scale * b * a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    /// `rank x d_in`.
    pub a: Mat,
    /// `d_out x rank`.
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub factors: BTreeMap<String, LowRank>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    kind: String,
    base_config_hash: String,
    base_config: ModelConfig,
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
}

impl AdapterSet {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of trainable scalars, `sum r * (d_in + d_out)`.
    pub fn trainable_count(&self) -> usize {
        self.factors.values().map(|f| f.a.len() + f.b.len()).sum()
    }

    /// Flattened `(name, matrix)` view of every factor, `<target>.lora_a` / `<target>.lora_b`.
    pub fn tensors(&self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        for (name, f) in &self.factors {
            out.insert(format!("{name}.lora_a"), f.a.clone());
            out.insert(format!("{name}.lora_b"), f.b.clone());
        }
        out
    }

    pub fn from_tensors(
        rank: usize,
        alpha: f64,
        targets: &[String],
        mut tensors: BTreeMap<String, Mat>,
    ) -> Result<Self> {
        let mut factors = BTreeMap::new();
        for t in targets {
            let a = tensors
                .remove(&format!("{t}.lora_a"))
                .ok_or_else(|| Error::Incompatible(format!("adapter lacks {t}.lora_a")))?;
            let b = tensors
                .remove(&format!("{t}.lora_b"))
                .ok_or_else(|| Error::Incompatible(format!("adapter lacks {t}.lora_b")))?;
            if a.rows() != rank || b.cols() != rank {
                return Err(Error::Incompatible(format!(
                    "factors of {t} do not have rank {rank}"
                )));
            }
            factors.insert(t.clone(), LowRank { a, b });
        }
        Ok(AdapterSet {
            rank,
            alpha,
            factors,
        })
    }

    /// Checks every factor against the weight it modifies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes: BTreeMap<String, (usize, usize)> = parameter_shapes(cfg).into_iter().collect();
        for (name, f) in &self.factors {
            let &(d_out, d_in) = shapes.get(name).ok_or_else(|| {
                Error::Incompatible(format!("adapter target {name} is not a model parameter"))
            })?;
            if f.a.shape() != (self.rank, d_in) || f.b.shape() != (d_out, self.rank) {
                return Err(Error::Incompatible(format!(
                    "adapter factors for {name} do not match {d_out}x{d_in}"
                )));
            }
        }
        Ok(())
    }

    /// Writes factors as `f32` with a header pinning the base model configuration.
    pub fn save(&self, path: &Path, base: &ModelConfig) -> Result<()> {
        let header = AdapterHeader {
            kind: ADAPTER_KIND.into(),
            base_config_hash: base.hash(),
            base_config: base.clone(),
            rank: self.rank,
            alpha: self.alpha,
            targets: self.factors.keys().cloned().collect(),
        };
        write_container(
            path,
            &serde_json::to_value(header)?,
            &self.tensors(),
            DType::F32,
        )
    }

    /// Loads an adapter file, refusing it unless it was trained against `base`.
    pub fn load(path: &Path, base: &ModelConfig) -> Result<Self> {
        let (set, cfg) = Self::load_any(path)?;
        if cfg.hash() != base.hash() {
            return Err(Error::Incompatible(format!(
                "{} was trained against model config {} but the base is {}",
                path.display(),
                cfg.hash(),
                base.hash()
            )));
        }
        Ok(set)
    }

    /// Loads an adapter file along with the base configuration it records.
    pub fn load_any(path: &Path) -> Result<(Self, ModelConfig)> {
        let c = read_container(path)?;
        let header: AdapterHeader = serde_json::from_value(c.metadata).map_err(|e| {
            Error::Incompatible(format!("{} has no adapter header: {e}", path.display()))
        })?;
        if header.kind != ADAPTER_KIND {
            return Err(Error::Incompatible(format!(
                "{} is a {:?} file, not an adapter",
                path.display(),
                header.kind
            )));
        }
        if header.base_config.hash() != header.base_config_hash {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: "base config hash does not match header".into(),
            });
        }
        let set = Self::from_tensors(header.rank, header.alpha, &header.targets, c.tensors)?;
        set.check_against(&header.base_config)?;
        Ok((set, header.base_config))
    }
}

/// Fresh adapters: `A ~ N(0, 0.02^2)` seeded, `B = 0`. `alpha` defaults to `rank`.
pub fn init_adapter(
    cfg: &ModelConfig,
    targets: &TargetSet,
    rank: usize,
    alpha: Option<f64>,
    seed: u64,
) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    let shapes: BTreeMap<String, (usize, usize)> = parameter_shapes(cfg).into_iter().collect();
    let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = BTreeMap::new();
    for name in &targets.names {
        let &(d_out, d_in) = shapes
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown adapter target {name}")))?;
        if rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "rank {rank} exceeds min({d_in}, {d_out}) for {name}"
            )));
        }
        let a = Mat::from_vec(
            rank,
            d_in,
            (0..rank * d_in).map(|_| normal.sample(&mut rng)).collect(),
        );
        factors.insert(
            name.clone(),
            LowRank {
                a,
                b: Mat::zeros(d_out, rank),
            },
        );
    }
    Ok(AdapterSet {
        rank,
        alpha: alpha.unwrap_or(rank as f64),
        factors,
    })
}

/// Folds each low-rank delta into its base weight; every other tensor is copied unchanged.
pub fn merge_adapter(params: &ParamStore, adapters: &AdapterSet) -> Result<ParamStore> {
    let mut out = params.clone();
    for (name, f) in &adapters.factors {
        let w = out
            .get_mut(name)
            .ok_or_else(|| Error::Incompatible(format!("base has no parameter {name}")))?;
        if w.shape() != (f.b.rows(), f.a.cols()) || f.a.rows() != f.b.cols() {
            return Err(Error::Incompatible(format!(
                "adapter factors for {name} do not match {:?}",
                w.shape()
            )));
        }
        gemm(adapters.scale(), &f.b, false, &f.a, false, 1.0, w);
    }
    Ok(out)
}

pub(crate) fn base_metadata(cfg: &ModelConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({ "kind": "wordcon-base", "model_config": cfg, "config_hash": cfg.hash(), "info": extra })
}

/// Writes base parameters as `f32` along with their model configuration.
pub fn save_base(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamStore,
    extra: serde_json::Value,
) -> Result<()> {
    params.save(path, &base_metadata(cfg, extra), DType::F32)
}

/// Reads base parameters and checks them against the recorded configuration.
pub fn load_base(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let (params, meta) = ParamStore::load(path)?;
    let cfg: ModelConfig = meta
        .get("model_config")
        .cloned()
        .ok_or_else(|| {
            Error::Incompatible(format!("{} has no model_config header", path.display()))
        })
        .and_then(|v| serde_json::from_value(v).map_err(Error::from))?;
    for (name, shape) in parameter_shapes(&cfg) {
        let m = params
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("{} lacks {name}", path.display())))?;
        if m.shape() != shape {
            return Err(Error::Incompatible(format!(
                "{name} in {} has shape {:?}, expected {shape:?}",
                path.display(),
                m.shape()
            )));
        }
    }
    Ok((cfg, params))
}
