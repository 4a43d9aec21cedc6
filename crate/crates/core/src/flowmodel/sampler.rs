use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{forward, unpatchify, Condition, LatentState, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::wordcon::AdapterSet;

/// A `rows x cols` matrix of standard normal draws.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// Integrates `dz/dt = velocity(z, t)` from `t = 1` down to `t = 0` with
/// `steps` uniform Euler steps.
pub fn euler_integrate(
    z1: Mat,
    steps: usize,
    mut velocity: impl FnMut(&Mat, f64) -> Result<Mat>,
) -> Result<Mat> {
    if steps == 0 {
        return Err(Error::OutOfRange("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for s in 0..steps {
        let t = 1.0 - s as f64 * dt;
        let v = velocity(&z, t)?;
        z.axpy(-dt, &v);
    }
    Ok(z)
}

/// Generates a latent for `cond`, starting from seeded Gaussian noise.
pub fn sample(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    cond: &Condition,
    steps: usize,
    seed: u64,
) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = cfg.latent_shape();
    let z1 = gaussian(&mut rng, r, c);
    euler_integrate(z1, steps, |z, t| {
        let state = LatentState::new(z.clone(), t)?;
        Ok(forward(cfg, params, adapters, &state, cond)?.0.v)
    })
}

/// [`sample`] decoded to an image in `[0, 1]`.
pub fn sample_pixels(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    cond: &Condition,
    steps: usize,
    seed: u64,
) -> Result<Array3<f32>> {
    let z = sample(cfg, params, adapters, cond, steps, seed)?;
    Ok(unpatchify(&z, cfg.image_size, cfg.patch_size)?.mapv(|v| v.clamp(0.0, 1.0)))
}
