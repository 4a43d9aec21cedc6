use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};
use crate::params::{read_container, write_container, DType};
use crate::tensor::Mat;
use crate::wordcon::{AdapterSet, LossBreakdown};

pub const STATE_KIND: &str = "wordcon-train-state";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Exponential moving averages of the logged losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningStats {
    pub ema: LossBreakdown,
    pub last: LossBreakdown,
    pub wallclock_s: f64,
}

impl RunningStats {
    const DECAY: f64 = 0.9;

    pub fn record(&mut self, step: u64, loss: &LossBreakdown) {
        if step <= 1 {
            self.ema = *loss;
        } else {
            let mut e = LossBreakdown::default();
            e.add_scaled(&self.ema, Self::DECAY);
            e.add_scaled(loss, 1.0 - Self::DECAY);
            self.ema = e;
        }
        self.last = *loss;
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub stage: Stage,
    pub rank: usize,
    pub alpha: f64,
    /// Trainable tensors: adapter factors (`<target>.lora_a/b`) or base parameters.
    pub tensors: BTreeMap<String, Mat>,
    pub adam_m: BTreeMap<String, Mat>,
    pub adam_v: BTreeMap<String, Mat>,
    pub rng: ChaCha8Rng,
    /// Current epoch's sample order and position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub stats: RunningStats,
    pub model_config_hash: String,
    pub train_config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    version: u32,
    step: u64,
    stage: Stage,
    rank: usize,
    alpha: f64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    stats: RunningStats,
    model_config_hash: String,
    train_config_hash: String,
}

fn zeros_like(map: &BTreeMap<String, Mat>) -> BTreeMap<String, Mat> {
    map.iter()
        .map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols())))
        .collect()
}

impl TrainState {
    pub fn new(
        stage: Stage,
        rank: usize,
        alpha: f64,
        tensors: BTreeMap<String, Mat>,
        rng: ChaCha8Rng,
        model_config_hash: String,
        train_config_hash: String,
    ) -> Self {
        TrainState {
            step: 0,
            stage,
            rank,
            alpha,
            adam_m: zeros_like(&tensors),
            adam_v: zeros_like(&tensors),
            tensors,
            rng,
            order: Vec::new(),
            cursor: 0,
            stats: RunningStats::default(),
            model_config_hash,
            train_config_hash,
        }
    }

    pub fn from_adapters(
        adapters: &AdapterSet,
        rng: ChaCha8Rng,
        model_config_hash: String,
        train_config_hash: String,
    ) -> Self {
        Self::new(
            Stage::Adapter,
            adapters.rank,
            adapters.alpha,
            adapters.tensors(),
            rng,
            model_config_hash,
            train_config_hash,
        )
    }

    /// The adapter factors held by an adapter-stage state.
    pub fn adapters(&self) -> Result<AdapterSet> {
        if self.stage != Stage::Adapter {
            return Err(Error::config("base-stage state holds no adapters"));
        }
        let targets: Vec<String> = self
            .tensors
            .keys()
            .filter_map(|k| k.strip_suffix(".lora_a"))
            .map(str::to_string)
            .collect();
        AdapterSet::from_tensors(self.rank, self.alpha, &targets, self.tensors.clone())
    }

    /// Scalars covered by the optimiser.
    pub fn trainable_scalars(&self) -> usize {
        self.adam_m.values().map(Mat::len).sum()
    }

    /// Draws the next `n` sample indices from a reshuffled-per-epoch order over `0..len`.
    pub fn next_batch(&mut self, len: usize, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One bias-corrected Adam update with step size `lr`.
    pub fn apply_adam(
        &mut self,
        grads: &BTreeMap<String, Mat>,
        adam: &AdamConfig,
        lr: f64,
    ) -> Result<()> {
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        for (name, p) in self.tensors.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::shape(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}",
                    g.shape()
                )));
            }
            let m = self.adam_m.get_mut(name).expect("moments mirror tensors");
            let v = self.adam_v.get_mut(name).expect("moments mirror tensors");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = adam.beta1 * *mi + (1.0 - adam.beta1) * gi;
                *vi = adam.beta2 * *vi + (1.0 - adam.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + adam.eps);
            }
        }
        Ok(())
    }

    /// Writes the state losslessly (`f64` tensors, RNG and optimiser moments).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StateHeader {
            kind: STATE_KIND.into(),
            version: STATE_VERSION,
            step: self.step,
            stage: self.stage,
            rank: self.rank,
            alpha: self.alpha,
            rng: self.rng.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
            stats: self.stats,
            model_config_hash: self.model_config_hash.clone(),
            train_config_hash: self.train_config_hash.clone(),
        };
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [
            ("param", &self.tensors),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            for (k, v) in map {
                tensors.insert(format!("{prefix}/{k}"), v.clone());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_container(path, &serde_json::to_value(header)?, &tensors, DType::F64)
    }

    /// Reads a state file without checking which run it belongs to.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let header: StateHeader =
            serde_json::from_value(c.metadata).map_err(|e| Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("bad state header: {e}"),
            })?;
        if header.kind != STATE_KIND {
            return Err(Error::Incompatible(format!(
                "{} is not a training state",
                path.display()
            )));
        }
        if header.version != STATE_VERSION {
            return Err(Error::Incompatible(format!(
                "state version {} is not supported",
                header.version
            )));
        }
        let mut maps: [BTreeMap<String, Mat>; 3] = Default::default();
        for (name, m) in c.tensors {
            let (prefix, key) = name.split_once('/').ok_or_else(|| Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("bad tensor {name}"),
            })?;
            let slot = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => {
                    return Err(Error::Integrity {
                        path: path.to_path_buf(),
                        reason: format!("bad tensor {name}"),
                    })
                }
            };
            maps[slot].insert(key.to_string(), m);
        }
        let [tensors, adam_m, adam_v] = maps;
        if tensors.keys().ne(adam_m.keys()) || tensors.keys().ne(adam_v.keys()) {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: "optimiser moments do not match tensors".into(),
            });
        }
        Ok(TrainState {
            step: header.step,
            stage: header.stage,
            rank: header.rank,
            alpha: header.alpha,
            tensors,
            adam_m,
            adam_v,
            rng: header.rng,
            order: header.order,
            cursor: header.cursor,
            stats: header.stats,
            model_config_hash: header.model_config_hash,
            train_config_hash: header.train_config_hash,
        })
    }

    /// Reads a state file, refusing one written for a different model or run configuration.
    pub fn load(path: &Path, model_config_hash: &str, train_config_hash: &str) -> Result<Self> {
        let s = Self::load_unchecked(path)?;
        if s.model_config_hash != model_config_hash {
            return Err(Error::Incompatible(format!(
                "{} was written for model config {}, not {model_config_hash}",
                path.display(),
                s.model_config_hash
            )));
        }
        if s.train_config_hash != train_config_hash {
            return Err(Error::Incompatible(format!(
                "{} was written for training config {}, not {train_config_hash}",
                path.display(),
                s.train_config_hash
            )));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::ModelConfig;
    use crate::wordcon::{init_adapter, select_parameters};
    use rand::{Rng, SeedableRng};

    fn state() -> TrainState {
        let cfg = ModelConfig::default();
        let ad = init_adapter(&cfg, &select_parameters(&cfg), 4, None, 0).unwrap();
        let mut s =
            TrainState::from_adapters(&ad, ChaCha8Rng::seed_from_u64(9), cfg.hash(), "run".into());
        let grads: BTreeMap<String, Mat> = s
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x + 0.5)))
            .collect();
        s.apply_adam(&grads, &AdamConfig::default(), 1e-3).unwrap();
        s.step = 1;
        s.next_batch(10, 3);
        let _: u64 = s.rng.random();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        s.save(&p1).unwrap();
        let back = TrainState::load(&p1, &s.model_config_hash, "run").unwrap();
        assert_eq!(back, s);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_hashes_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let p = dir.path().join("a.ckpt");
        s.save(&p).unwrap();
        assert!(matches!(
            TrainState::load(&p, "other", "run"),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            TrainState::load(&p, &s.model_config_hash, "other"),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        state().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            TrainState::load_unchecked(&p),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = TrainState::new(
            Stage::Base,
            0,
            0.0,
            [("w".to_string(), Mat::from_vec(1, 2, vec![1.0, -1.0]))]
                .into_iter()
                .collect(),
            ChaCha8Rng::seed_from_u64(0),
            String::new(),
            String::new(),
        );
        let grads = [("w".to_string(), Mat::from_vec(1, 2, vec![3.0, -0.2]))]
            .into_iter()
            .collect();
        s.apply_adam(&grads, &AdamConfig::default(), 0.1).unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((s.tensors["w"].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((s.tensors["w"].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn epochs_visit_every_index() {
        let mut s = state();
        s.order.clear();
        s.cursor = 0;
        let mut seen = s.next_batch(7, 7);
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
}
