//! Miniature rectified-flow transformer with double-stream joint-attention
//! blocks and single-stream blocks, operating directly on pixel patches.

mod model;
mod sampler;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphforge::AttributeSet;
use crate::params::json_hash;
use crate::tensor::Mat;

pub use model::{
    bind_params, encode_condition, encode_condition_graph, extract_word_attention, forward,
    forward_graph, init_params, parameter_shapes, word_attention_graph, AttentionMap,
    AttentionRecord, BoundAdapters, BoundParams, ForwardVars, Reduction,
};
pub use sampler::{euler_integrate, gaussian, sample, sample_pixels};

/// Pixel channels carried by every patch.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub vocab_size: usize,
    pub max_words: usize,
    /// Hidden width of every feed-forward layer, as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            hidden_dim: 64,
            heads: 4,
            double_blocks: 2,
            single_blocks: 2,
            vocab_size: 10,
            max_words: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("double_blocks", self.double_blocks),
            ("single_blocks", self.single_blocks),
            ("vocab_size", self.vocab_size),
            ("max_words", self.max_words),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be at least 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::config(
                "hidden_dim must be even for the timestep embedding",
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.num_patches(), self.patch_dim())
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }
}

/// Interpolation coefficients of the forward process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// `a(t) = 1 - t`, `b(t) = t`.
    #[default]
    Linear,
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("time {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn coefficients(self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        match self {
            NoiseSchedule::Linear => Ok((1.0 - t, t)),
        }
    }

    /// Time derivatives `(a'(t), b'(t))`.
    pub fn derivatives(self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        match self {
            NoiseSchedule::Linear => Ok((-1.0, 1.0)),
        }
    }
}

pub fn noise_schedule(t: f64) -> Result<(f64, f64)> {
    NoiseSchedule::Linear.coefficients(t)
}

/// A noised latent `z_t` in patch layout (`num_patches x patch_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Mat,
    pub t: f64,
}

impl LatentState {
    pub fn new(z: Mat, t: f64) -> Result<Self> {
        check_t(t)?;
        if !z.is_finite() {
            return Err(Error::Validation("latent has non-finite entries".into()));
        }
        Ok(LatentState { z, t })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub v: Mat,
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn forward_process(x0: &Mat, eps: &Mat, t: f64) -> Result<LatentState> {
    same_shape(x0, eps)?;
    let (a, b) = noise_schedule(t)?;
    Ok(LatentState {
        z: x0.zip_map(eps, |x, e| a * x + b * e),
        t,
    })
}

/// The regression target `d z_t / dt` for the pair `(x0, eps)`.
pub fn conditional_target(x0: &Mat, eps: &Mat, t: f64) -> Result<VelocityField> {
    same_shape(x0, eps)?;
    let (da, db) = NoiseSchedule::Linear.derivatives(t)?;
    Ok(VelocityField {
        v: x0.zip_map(eps, |x, e| da * x + db * e),
    })
}

/// One text token per word: vocabulary id plus typographic attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub words: Vec<(usize, AttributeSet)>,
}

impl Condition {
    pub fn new(words: Vec<(usize, AttributeSet)>) -> Self {
        Condition { words }
    }

    /// Maps words to their index in `vocabulary`.
    pub fn from_words(words: &[(String, AttributeSet)], vocabulary: &[String]) -> Result<Self> {
        let words = words
            .iter()
            .map(|(w, a)| {
                vocabulary
                    .iter()
                    .position(|v| v == w)
                    .map(|id| (id, *a))
                    .ok_or_else(|| {
                        Error::OutOfRange(format!("word {w:?} is not in the vocabulary"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Condition { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.words.is_empty() || self.words.len() > config.max_words {
            return Err(Error::OutOfRange(format!(
                "condition has {} words, expected 1..={}",
                self.words.len(),
                config.max_words
            )));
        }
        if let Some((id, _)) = self.words.iter().find(|(id, _)| *id >= config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {id} >= vocab_size {}",
                config.vocab_size
            )));
        }
        Ok(())
    }

    /// The same words with every typographic attribute cleared.
    pub fn without_attributes(&self) -> Condition {
        Condition {
            words: self
                .words
                .iter()
                .map(|(id, a)| (*id, AttributeSet::plain(a.font_class)))
                .collect(),
        }
    }
}

/// Maps an `H x W x 3` image in `[0, 1]` to a patch latent in `[-1, 1]`.
pub fn patchify(image: &Array3<f32>, patch_size: usize) -> Result<Mat> {
    let (h, w, c) = image.dim();
    if h % patch_size != 0 || w % patch_size != 0 || c != CHANNELS {
        return Err(Error::shape(format!(
            "image {h}x{w}x{c} does not tile into {patch_size}px patches"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut out = Mat::zeros(gh * gw, dim);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for ch in 0..c {
                        row[k] = image[[py * patch_size + y, px * patch_size + x, ch]] as f64 * 2.0
                            - 1.0;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; values are mapped back to `[0, 1]` without clamping.
pub fn unpatchify(latent: &Mat, image_size: usize, patch_size: usize) -> Result<Array3<f32>> {
    let g = image_size / patch_size;
    if !image_size.is_multiple_of(patch_size)
        || latent.shape() != (g * g, patch_size * patch_size * CHANNELS)
    {
        return Err(Error::shape(format!(
            "latent {:?} does not match a {image_size}px image with {patch_size}px patches",
            latent.shape()
        )));
    }
    let mut out = Array3::<f32>::zeros((image_size, image_size, CHANNELS));
    for py in 0..g {
        for px in 0..g {
            let row = latent.row(py * g + px);
            let mut k = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for ch in 0..CHANNELS {
                        out[[py * patch_size + y, px * patch_size + x, ch]] =
                            ((row[k] + 1.0) / 2.0) as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphforge::FontClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(noise_schedule(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(noise_schedule(1.0).unwrap(), (0.0, 1.0));
        assert_eq!(noise_schedule(0.25).unwrap(), (0.75, 0.25));
        assert!(noise_schedule(1.5).is_err());
        assert!(noise_schedule(-0.1).is_err());
    }

    #[test]
    fn forward_process_examples() {
        let x0 = random_mat(4, 6, 1);
        let eps = random_mat(4, 6, 2);
        assert_eq!(forward_process(&x0, &eps, 0.0).unwrap().z, x0);
        assert_eq!(forward_process(&x0, &eps, 1.0).unwrap().z, eps);
        let z = forward_process(&Mat::filled(2, 2, 2.0), &Mat::filled(2, 2, 1.0), 0.5)
            .unwrap()
            .z;
        assert_eq!(z, Mat::filled(2, 2, 1.5));
        assert!(forward_process(&x0, &random_mat(3, 6, 0), 0.5).is_err());
    }

    #[test]
    fn target_examples() {
        let x0 = random_mat(4, 6, 3);
        assert_eq!(
            conditional_target(&x0, &x0, 0.3).unwrap().v,
            Mat::zeros(4, 6)
        );
        let ones = Mat::filled(4, 6, 1.0);
        assert_eq!(
            conditional_target(&Mat::zeros(4, 6), &ones, 0.9).unwrap().v,
            ones
        );
    }

    #[test]
    fn patchify_round_trip() {
        let img =
            Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 8 + x) * 3 + c) as f32 / 191.0);
        let lat = patchify(&img, 4).unwrap();
        assert_eq!(lat.shape(), (4, 48));
        let back = unpatchify(&lat, 8, 4).unwrap();
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            single_blocks: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn condition_lookup() {
        let vocab: Vec<String> = ["GO", "UP"].iter().map(|s| s.to_string()).collect();
        let a = AttributeSet::plain(FontClass::Sans);
        let c = Condition::from_words(&[("UP".into(), a)], &vocab).unwrap();
        assert_eq!(c.words, vec![(1, a)]);
        assert!(Condition::from_words(&[("NO".into(), a)], &vocab).is_err());
        let cfg = ModelConfig {
            vocab_size: 1,
            ..ModelConfig::default()
        };
        assert!(c.validate(&cfg).is_err());
    }
}
