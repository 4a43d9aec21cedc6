use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowmodel::{
    extract_word_attention, word_attention_graph, AttentionRecord, ForwardVars, Reduction,
};
use crate::tensor::Mat;

pub const DEFAULT_LAMBDA_ATTN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_attn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_attn: DEFAULT_LAMBDA_ATTN,
        }
    }
}

/// Area-average pooling per patch followed by a 0.5 threshold.
pub fn downsample_mask(pixel_mask: &Array2<bool>, patch_size: usize) -> Result<Array2<bool>> {
    let (h, w) = pixel_mask.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} mask does not tile into {patch_size}px patches"
        )));
    }
    let area = patch_size * patch_size;
    Ok(Array2::from_shape_fn(
        (h / patch_size, w / patch_size),
        |(gy, gx)| {
            let mut count = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    count += pixel_mask[[gy * patch_size + y, gx * patch_size + x]] as usize;
                }
            }
            2 * count >= area
        },
    ))
}

/// Per-word latent-grid masks and their union.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Array2<bool>>,
    pub union: Array2<bool>,
}

impl MaskSet {
    pub fn new(masks: Vec<Array2<bool>>) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::shape("mask set needs at least one mask"))?;
        let dim = first.dim();
        if dim.0 != dim.1 {
            return Err(Error::shape(format!("mask grid {dim:?} is not square")));
        }
        let mut union = Array2::from_elem(dim, false);
        for m in &masks {
            if m.dim() != dim {
                return Err(Error::shape(format!(
                    "mask grids differ: {:?} vs {dim:?}",
                    m.dim()
                )));
            }
            union.zip_mut_with(m, |u, &v| *u |= v);
        }
        Ok(MaskSet { masks, union })
    }

    /// A set whose single mask covers the whole grid.
    pub fn full(grid: usize, words: usize) -> Self {
        MaskSet::new(vec![Array2::from_elem((grid, grid), true); words.max(1)])
            .expect("uniform shapes")
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.union.dim().0
    }

    /// Mask `i` as a `1 x grid^2` row of zeros and ones.
    pub fn row(&self, i: usize) -> Mat {
        Mat::row_vector(self.masks[i].iter().map(|&b| b as u8 as f64).collect())
    }

    /// The union broadcast over `cols` latent channels (`grid^2 x cols`).
    pub fn union_weights(&self, cols: usize) -> Mat {
        let n = self.union.len();
        let mut m = Mat::zeros(n, cols);
        for (r, &b) in self.union.iter().enumerate() {
            if b {
                m.row_mut(r).fill(1.0);
            }
        }
        m
    }
}

fn check_shapes(a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "velocity shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every latent element.
pub fn cfm_loss(v_pred: &Mat, target: &Mat) -> Result<f64> {
    check_shapes(v_pred, target)?;
    let sum: f64 = v_pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// Squared error restricted to the mask union, divided by the total element count.
pub fn masked_loss(v_pred: &Mat, target: &Mat, masks: &MaskSet) -> Result<f64> {
    check_shapes(v_pred, target)?;
    if masks.union.len() != v_pred.rows() {
        return Err(Error::shape(format!(
            "mask grid of {} cells vs {} latent rows",
            masks.union.len(),
            v_pred.rows()
        )));
    }
    let weights = masks.union_weights(v_pred.cols());
    let sum: f64 = v_pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((p, t), m)| {
            let d = m * (p - t);
            d * d
        })
        .sum();
    Ok(sum / v_pred.len() as f64)
}

/// Mean over words of the per-cell squared error between each word's
/// attention map and its mask.
pub fn joint_attention_loss(rec: &AttentionRecord, masks: &MaskSet) -> Result<f64> {
    if masks.len() != rec.n_text {
        return Err(Error::shape(format!(
            "{} masks for {} text tokens",
            masks.len(),
            rec.n_text
        )));
    }
    if masks.grid() != rec.grid {
        return Err(Error::shape(format!(
            "mask grid {} vs attention grid {}",
            masks.grid(),
            rec.grid
        )));
    }
    let mut total = 0.0;
    for (i, m) in masks.masks.iter().enumerate() {
        let map = extract_word_attention(rec, i, Reduction::MeanMaxRescale)?;
        let sum: f64 = map
            .values
            .data()
            .iter()
            .zip(m.iter())
            .map(|(a, &b)| (a - b as u8 as f64).powi(2))
            .sum();
        total += sum / m.len() as f64;
    }
    Ok(total / masks.len() as f64)
}

pub fn total_loss(masked: f64, attn: f64, w: LossWeights) -> f64 {
    masked + w.lambda_attn * attn
}

pub fn cfm_loss_graph(g: &mut Graph, v_pred: Var, target: &Mat) -> Result<Var> {
    check_shapes(g.value(v_pred), target)?;
    let t = g.constant(target.clone());
    let d = g.sub(v_pred, t);
    let sq = g.mul(d, d);
    Ok(g.mean_all(sq))
}

pub fn masked_loss_graph(g: &mut Graph, v_pred: Var, target: &Mat, masks: &MaskSet) -> Result<Var> {
    let (rows, cols) = g.value(v_pred).shape();
    check_shapes(g.value(v_pred), target)?;
    if masks.union.len() != rows {
        return Err(Error::shape(format!(
            "mask grid of {} cells vs {rows} latent rows",
            masks.union.len()
        )));
    }
    let t = g.constant(target.clone());
    let w = g.constant(masks.union_weights(cols));
    let d = g.sub(v_pred, t);
    let md = g.mul(d, w);
    let sq = g.mul(md, md);
    Ok(g.mean_all(sq))
}

pub fn joint_attention_loss_graph(g: &mut Graph, fv: &ForwardVars, masks: &MaskSet) -> Result<Var> {
    if masks.len() != fv.n_text {
        return Err(Error::shape(format!(
            "{} masks for {} text tokens",
            masks.len(),
            fv.n_text
        )));
    }
    let n = masks.union.len();
    let mut acc: Option<Var> = None;
    for i in 0..masks.len() {
        let map = word_attention_graph(g, fv, i, n)?;
        let m = g.constant(masks.row(i));
        let d = g.sub(map, m);
        let sq = g.mul(d, d);
        let l = g.mean_all(sq);
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l),
        });
    }
    let acc = acc.expect("mask set is nonempty");
    Ok(g.scale(acc, 1.0 / masks.len() as f64))
}
