use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{Condition, LatentState, ModelConfig, VelocityField};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::glyphforge::{AttributeKind, FontClass};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::wordcon::AdapterSet;

const PROJECTIONS: [&str; 4] = ["q", "k", "v", "out"];

fn linear_shapes(out: &mut Vec<(String, (usize, usize))>, prefix: &str, d_in: usize, d_out: usize) {
    out.push((format!("{prefix}.weight"), (d_out, d_in)));
    out.push((format!("{prefix}.bias"), (1, d_out)));
}

/// Every parameter name and shape, in a fixed order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let h = cfg.hidden_dim;
    let m = h * cfg.mlp_ratio;
    let mut out = Vec::new();
    linear_shapes(&mut out, "img_in", cfg.patch_dim(), h);
    out.push(("img_pos".into(), (cfg.num_patches(), h)));
    linear_shapes(&mut out, "time_in.fc1", h, h);
    linear_shapes(&mut out, "time_in.fc2", h, h);
    out.push(("txt_embed.word".into(), (cfg.vocab_size, h)));
    out.push(("txt_embed.attr".into(), (AttributeKind::ALL.len(), h)));
    out.push(("txt_embed.font".into(), (FontClass::ALL.len(), h)));
    out.push(("txt_embed.slot".into(), (cfg.max_words, h)));
    for i in 0..cfg.double_blocks {
        for stream in ["img", "txt"] {
            for p in PROJECTIONS {
                linear_shapes(
                    &mut out,
                    &format!("double_blocks.{i}.{stream}_attn.{p}"),
                    h,
                    h,
                );
            }
            linear_shapes(
                &mut out,
                &format!("double_blocks.{i}.{stream}_mlp.fc1"),
                h,
                m,
            );
            linear_shapes(
                &mut out,
                &format!("double_blocks.{i}.{stream}_mlp.fc2"),
                m,
                h,
            );
        }
    }
    for i in 0..cfg.single_blocks {
        for p in PROJECTIONS {
            linear_shapes(&mut out, &format!("single_blocks.{i}.attn.{p}"), h, h);
        }
        linear_shapes(&mut out, &format!("single_blocks.{i}.mlp.fc1"), h, m);
        linear_shapes(&mut out, &format!("single_blocks.{i}.mlp.fc2"), m, h);
    }
    linear_shapes(&mut out, "final", h, cfg.patch_dim());
    out
}

fn init_std(name: &str, shape: (usize, usize)) -> f64 {
    if name.ends_with(".bias") {
        0.0
    } else if name.starts_with("txt_embed.") {
        1.0
    } else if name == "img_pos" {
        0.5
    } else {
        1.0 / (shape.1 as f64).sqrt()
    }
}

/// Seeded random initialisation of a full parameter set.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in parameter_shapes(cfg) {
        let std = init_std(&name, shape);
        let data = if std == 0.0 {
            vec![0.0; shape.0 * shape.1]
        } else {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..shape.0 * shape.1)
                .map(|_| normal.sample(&mut rng))
                .collect()
        };
        store.insert(name, Mat::from_vec(shape.0, shape.1, data));
    }
    Ok(store)
}

/// Parameters recorded as graph leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Records every parameter as a leaf; `trainable` selects which need gradients.
pub fn bind_params(
    g: &mut Graph,
    params: &ParamStore,
    trainable: &dyn Fn(&str) -> bool,
) -> BoundParams {
    let vars = params
        .iter()
        .map(|(name, m)| (name.to_string(), g.leaf(m.clone(), trainable(name))))
        .collect();
    BoundParams { vars }
}

/// Low-rank factors recorded as graph leaves, keyed by target weight name.
#[derive(Debug, Clone)]
pub struct BoundAdapters {
    pub scale: f64,
    pub factors: BTreeMap<String, (Var, Var)>,
}

impl BoundAdapters {
    pub fn bind(g: &mut Graph, adapters: &AdapterSet, trainable: bool) -> Self {
        let factors = adapters
            .factors
            .iter()
            .map(|(name, f)| {
                (
                    name.clone(),
                    (
                        g.leaf(f.a.clone(), trainable),
                        g.leaf(f.b.clone(), trainable),
                    ),
                )
            })
            .collect();
        BoundAdapters {
            scale: adapters.scale(),
            factors,
        }
    }
}

fn linear(
    g: &mut Graph,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let weight_name = format!("{prefix}.weight");
    let w = p.get(&weight_name)?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let xw = g.matmul_t(x, w);
    let mut y = g.add_row(xw, b);
    if let Some(&(a, bf)) = adapters.and_then(|ad| ad.factors.get(&weight_name)) {
        let xa = g.matmul_t(x, a);
        let delta = g.matmul_t(xa, bf);
        let delta = g.scale(delta, adapters.map_or(1.0, |ad| ad.scale));
        y = g.add(y, delta);
    }
    Ok(y)
}

fn mlp(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let hdn = linear(g, p, None, &format!("{prefix}.fc1"), x)?;
    let hdn = g.gelu(hdn);
    linear(g, p, None, &format!("{prefix}.fc2"), hdn)
}

/// Multi-head softmax attention; returns the merged output and each head's
/// probability matrix.
fn attention(g: &mut Graph, heads: usize, q: Var, k: Var, v: Var) -> (Var, Vec<Var>) {
    let dim = g.value(q).cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let pr = g.softmax_rows(scores);
        outs.push(g.matmul(pr, vh));
        probs.push(pr);
    }
    (g.concat_cols(&outs), probs)
}

fn sinusoidal(t: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Mat::row_vector(out)
}

/// Text tokens: word + set attributes + font + slot embeddings.
pub fn encode_condition_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    cond: &Condition,
) -> Result<Var> {
    cond.validate(cfg)?;
    let ids: Vec<usize> = cond.words.iter().map(|(id, _)| *id).collect();
    let fonts: Vec<usize> = cond
        .words
        .iter()
        .map(|(_, a)| a.font_class.index())
        .collect();
    let slots: Vec<usize> = (0..cond.len()).collect();
    let mut select = Mat::zeros(cond.len(), AttributeKind::ALL.len());
    for (i, (_, a)) in cond.words.iter().enumerate() {
        for (j, kind) in AttributeKind::ALL.iter().enumerate() {
            if a.has(*kind) {
                select.set(i, j, 1.0);
            }
        }
    }
    let word = g.gather_rows(p.get("txt_embed.word")?, &ids);
    let font = g.gather_rows(p.get("txt_embed.font")?, &fonts);
    let slot = g.gather_rows(p.get("txt_embed.slot")?, &slots);
    let sel = g.constant(select);
    let attr = g.matmul(sel, p.get("txt_embed.attr")?);
    let x = g.add(word, attr);
    let x = g.add(x, font);
    Ok(g.add(x, slot))
}

pub fn encode_condition(cfg: &ModelConfig, params: &ParamStore, cond: &Condition) -> Result<Mat> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, &|_| false);
    let v = encode_condition_graph(&mut g, cfg, &p, cond)?;
    Ok(g.value(v).clone())
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub velocity: Var,
    /// Per double block, per head: text-query rows of the joint attention
    /// probabilities (`n_text x (n_text + n_image)`).
    pub text_rows: Vec<Vec<Var>>,
    pub n_text: usize,
}

pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    z: Var,
    t: f64,
    cond: &Condition,
) -> Result<ForwardVars> {
    if g.value(z).shape() != cfg.latent_shape() {
        return Err(Error::shape(format!(
            "latent {:?} does not match model latent {:?}",
            g.value(z).shape(),
            cfg.latent_shape()
        )));
    }
    let n = cfg.num_patches();
    let k = cond.len();

    let img = linear(g, p, None, "img_in", z)?;
    let mut img = g.add(img, p.get("img_pos")?);
    let temb = g.constant(sinusoidal(t, cfg.hidden_dim));
    let temb = linear(g, p, None, "time_in.fc1", temb)?;
    let temb = g.silu(temb);
    let temb = linear(g, p, None, "time_in.fc2", temb)?;
    img = g.add_row(img, temb);
    let mut txt = encode_condition_graph(g, cfg, p, cond)?;

    let mut text_rows = Vec::with_capacity(cfg.double_blocks);
    for b in 0..cfg.double_blocks {
        let pre = format!("double_blocks.{b}");
        let xi = g.layer_norm(img);
        let xt = g.layer_norm(txt);
        let mut qkv = Vec::with_capacity(3);
        for proj in ["q", "k", "v"] {
            let ti = linear(g, p, adapters, &format!("{pre}.txt_attn.{proj}"), xt)?;
            let ii = linear(g, p, None, &format!("{pre}.img_attn.{proj}"), xi)?;
            qkv.push(g.concat_rows(&[ti, ii]));
        }
        let (o, probs) = attention(g, cfg.heads, qkv[0], qkv[1], qkv[2]);
        text_rows.push(probs.iter().map(|&pr| g.slice_rows(pr, 0, k)).collect());
        let ot = g.slice_rows(o, 0, k);
        let oi = g.slice_rows(o, k, k + n);
        let dt = linear(g, p, adapters, &format!("{pre}.txt_attn.out"), ot)?;
        let di = linear(g, p, None, &format!("{pre}.img_attn.out"), oi)?;
        txt = g.add(txt, dt);
        img = g.add(img, di);
        let ni = g.layer_norm(img);
        let mi = mlp(g, p, &format!("{pre}.img_mlp"), ni)?;
        img = g.add(img, mi);
        let nt = g.layer_norm(txt);
        let mt = mlp(g, p, &format!("{pre}.txt_mlp"), nt)?;
        txt = g.add(txt, mt);
    }

    let mut x = g.concat_rows(&[txt, img]);
    for b in 0..cfg.single_blocks {
        let pre = format!("single_blocks.{b}");
        let nx = g.layer_norm(x);
        let q = linear(g, p, None, &format!("{pre}.attn.q"), nx)?;
        let kk = linear(g, p, None, &format!("{pre}.attn.k"), nx)?;
        let v = linear(g, p, None, &format!("{pre}.attn.v"), nx)?;
        let (o, _) = attention(g, cfg.heads, q, kk, v);
        let o = linear(g, p, None, &format!("{pre}.attn.out"), o)?;
        x = g.add(x, o);
        let nx = g.layer_norm(x);
        let m = mlp(g, p, &format!("{pre}.mlp"), nx)?;
        x = g.add(x, m);
    }
    let img = g.slice_rows(x, k, k + n);
    let img = g.layer_norm(img);
    let velocity = linear(g, p, None, "final", img)?;
    Ok(ForwardVars {
        velocity,
        text_rows,
        n_text: k,
    })
}

/// Text-query rows of every double block's joint attention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub n_text: usize,
    pub grid: usize,
    /// `[block][head]`, each `n_text x (n_text + grid^2)`; rows sum to 1.
    pub blocks: Vec<Vec<Mat>>,
}

impl AttentionRecord {
    /// The text-to-image slice for one block and head.
    pub fn image_slice(&self, block: usize, head: usize) -> Mat {
        let m = &self.blocks[block][head];
        let n = self.grid * self.grid;
        let mut out = Mat::zeros(self.n_text, n);
        for r in 0..self.n_text {
            out.row_mut(r)
                .copy_from_slice(&m.row(r)[self.n_text..self.n_text + n]);
        }
        out
    }

    /// Largest deviation of any stored row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|m| (0..m.rows()).map(move |r| (m.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// One spatial map over the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub grid: usize,
    /// `grid x grid`, row-major over patch rows.
    pub values: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over heads and double blocks, then division by the maximum.
    #[default]
    MeanMaxRescale,
    /// Mean over heads and double blocks only.
    Mean,
}

pub fn extract_word_attention(
    rec: &AttentionRecord,
    word_index: usize,
    reduction: Reduction,
) -> Result<AttentionMap> {
    if word_index >= rec.n_text {
        return Err(Error::OutOfRange(format!(
            "word index {word_index} >= {} text tokens",
            rec.n_text
        )));
    }
    let n = rec.grid * rec.grid;
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for block in &rec.blocks {
        for head in block {
            let row = &head.row(word_index)[rec.n_text..rec.n_text + n];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            count += 1;
        }
    }
    let mut values = Mat::from_vec(rec.grid, rec.grid, acc);
    values.scale_assign(1.0 / count as f64);
    if reduction == Reduction::MeanMaxRescale {
        let max = values
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        values = values.map(|v| v / max);
    }
    Ok(AttentionMap {
        grid: rec.grid,
        values,
    })
}

/// Differentiable counterpart of [`extract_word_attention`] with the default
/// reduction; returns a `1 x grid^2` row.
pub fn word_attention_graph(
    g: &mut Graph,
    fv: &ForwardVars,
    word_index: usize,
    n_image: usize,
) -> Result<Var> {
    if word_index >= fv.n_text {
        return Err(Error::OutOfRange(format!(
            "word index {word_index} >= {} text tokens",
            fv.n_text
        )));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for block in &fv.text_rows {
        for &rows in block {
            let r = g.slice_rows(rows, word_index, word_index + 1);
            let r = g.slice_cols(r, fv.n_text, fv.n_text + n_image);
            acc = Some(match acc {
                None => r,
                Some(a) => g.add(a, r),
            });
            count += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::config("model has no double blocks"))?;
    let mean = g.scale(acc, 1.0 / count as f64);
    Ok(g.div_by_max(mean))
}

/// Velocity and attention record for one latent, evaluated without gradients.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    state: &LatentState,
    cond: &Condition,
) -> Result<(VelocityField, AttentionRecord)> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, &|_| false);
    let ad = adapters.map(|a| BoundAdapters::bind(&mut g, a, false));
    let z = g.constant(state.z.clone());
    let fv = forward_graph(&mut g, cfg, &p, ad.as_ref(), z, state.t, cond)?;
    let blocks = fv
        .text_rows
        .iter()
        .map(|b| b.iter().map(|&v| g.value(v).clone()).collect())
        .collect();
    let rec = AttentionRecord {
        n_text: fv.n_text,
        grid: cfg.grid(),
        blocks,
    };
    Ok((
        VelocityField {
            v: g.value(fv.velocity).clone(),
        },
        rec,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::sampler::gaussian;
    use crate::glyphforge::AttributeSet;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 32,
            heads: 2,
            vocab_size: 6,
            max_words: 3,
            image_size: 16,
            ..ModelConfig::default()
        }
    }

    fn state(cfg: &ModelConfig, seed: u64, t: f64) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = cfg.latent_shape();
        LatentState::new(gaussian(&mut rng, r, c), t).unwrap()
    }

    fn cond() -> Condition {
        let a = AttributeSet::plain(FontClass::Sans);
        Condition::new(vec![(1, AttributeSet { bold: true, ..a }), (4, a)])
    }

    #[test]
    fn output_shape_and_row_sums() {
        let cfg = small();
        let params = init_params(&cfg, 0).unwrap();
        let (v, rec) = forward(&cfg, &params, None, &state(&cfg, 1, 0.4), &cond()).unwrap();
        assert_eq!(v.v.shape(), cfg.latent_shape());
        assert!(rec.max_row_sum_error() <= 1e-6);
        assert_eq!(rec.blocks.len(), cfg.double_blocks);
        assert_eq!(rec.blocks[0].len(), cfg.heads);
        assert!(rec
            .image_slice(0, 0)
            .data()
            .iter()
            .all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let params = init_params(&cfg, 0).unwrap();
        let s = state(&cfg, 2, 0.7);
        assert_eq!(
            forward(&cfg, &params, None, &s, &cond()).unwrap(),
            forward(&cfg, &params, None, &s, &cond()).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small();
        let params = init_params(&cfg, 0).unwrap();
        let bad = LatentState::new(Mat::zeros(3, 3), 0.5).unwrap();
        assert!(matches!(
            forward(&cfg, &params, None, &bad, &cond()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bold_flag_changes_only_its_slot() {
        let cfg = small();
        let params = init_params(&cfg, 3).unwrap();
        let c1 = cond();
        let mut c2 = cond();
        c2.words[0].1.bold = false;
        let (t1, t2) = (
            encode_condition(&cfg, &params, &c1).unwrap(),
            encode_condition(&cfg, &params, &c2).unwrap(),
        );
        assert_ne!(t1.row(0), t2.row(0));
        assert_eq!(t1.row(1), t2.row(1));

        let mut zeroed = params.clone();
        *zeroed.get_mut("txt_embed.attr").unwrap() = Mat::zeros(3, cfg.hidden_dim);
        assert_eq!(
            encode_condition(&cfg, &zeroed, &c1).unwrap(),
            encode_condition(&cfg, &zeroed, &c2).unwrap()
        );
        assert!(
            encode_condition(&cfg, &params, &Condition::new(vec![(99, c1.words[0].1)])).is_err()
        );
    }

    #[test]
    fn hand_computed_reduction() {
        // 1 text token, 2x2 grid, 2 blocks x 2 heads.
        let row = |img: [f64; 4]| {
            let text = 1.0 - img.iter().sum::<f64>();
            Mat::from_vec(1, 5, vec![text, img[0], img[1], img[2], img[3]])
        };
        let rec = AttentionRecord {
            n_text: 1,
            grid: 2,
            blocks: vec![
                vec![row([0.1, 0.2, 0.3, 0.2]), row([0.0, 0.4, 0.0, 0.2])],
                vec![row([0.2, 0.2, 0.2, 0.2]), row([0.1, 0.0, 0.1, 0.6])],
            ],
        };
        // Means: [0.1, 0.2, 0.15, 0.3]; max 0.3.
        let m = extract_word_attention(&rec, 0, Reduction::MeanMaxRescale).unwrap();
        let expect = [0.1 / 0.3, 0.2 / 0.3, 0.15 / 0.3, 1.0];
        for (a, b) in m.values.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean = extract_word_attention(&rec, 0, Reduction::Mean).unwrap();
        assert!((mean.values.get(1, 1) - 0.3).abs() < 1e-12);
        assert!(extract_word_attention(&rec, 1, Reduction::Mean).is_err());
    }

    #[test]
    fn uniform_and_one_hot_maps() {
        let uniform = AttentionRecord {
            n_text: 1,
            grid: 2,
            blocks: vec![vec![Mat::filled(1, 5, 0.2)]],
        };
        let m = extract_word_attention(&uniform, 0, Reduction::MeanMaxRescale).unwrap();
        assert!(m.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let one_hot = AttentionRecord {
            n_text: 1,
            grid: 2,
            blocks: vec![vec![Mat::from_vec(1, 5, vec![0.0, 0.0, 0.0, 1.0, 0.0])]],
        };
        let m = extract_word_attention(&one_hot, 0, Reduction::MeanMaxRescale).unwrap();
        assert_eq!(m.values.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn graph_reduction_matches_numeric() {
        let cfg = small();
        let params = init_params(&cfg, 5).unwrap();
        let s = state(&cfg, 6, 0.3);
        let (_, rec) = forward(&cfg, &params, None, &s, &cond()).unwrap();
        let mut g = Graph::new();
        let p = bind_params(&mut g, &params, &|_| false);
        let z = g.constant(s.z.clone());
        let fv = forward_graph(&mut g, &cfg, &p, None, z, s.t, &cond()).unwrap();
        for w in 0..2 {
            let v = word_attention_graph(&mut g, &fv, w, cfg.num_patches()).unwrap();
            let numeric = extract_word_attention(&rec, w, Reduction::MeanMaxRescale).unwrap();
            assert!(
                g.value(v)
                    .max_abs_diff(&numeric.values.clone().reshaped(1, cfg.num_patches()))
                    < 1e-12
            );
        }
    }

    #[test]
    fn swapping_words_swaps_maps_without_slot_embeddings() {
        let cfg = small();
        let mut params = init_params(&cfg, 7).unwrap();
        *params.get_mut("txt_embed.slot").unwrap() = Mat::zeros(cfg.max_words, cfg.hidden_dim);
        let s = state(&cfg, 8, 0.5);
        let c = cond();
        let swapped = Condition::new(vec![c.words[1], c.words[0]]);
        let (v1, r1) = forward(&cfg, &params, None, &s, &c).unwrap();
        let (v2, r2) = forward(&cfg, &params, None, &s, &swapped).unwrap();
        assert!(v1.v.max_abs_diff(&v2.v) < 1e-12);
        for w in 0..2 {
            let a = extract_word_attention(&r1, w, Reduction::Mean).unwrap();
            let b = extract_word_attention(&r2, 1 - w, Reduction::Mean).unwrap();
            assert!(a.values.max_abs_diff(&b.values) < 1e-12);
        }
    }

    #[test]
    fn parameter_names_are_unique_and_initialised() {
        let cfg = ModelConfig::default();
        let shapes = parameter_shapes(&cfg);
        let params = init_params(&cfg, 0).unwrap();
        assert_eq!(params.len(), shapes.len());
        for (name, shape) in shapes {
            assert_eq!(params.get(&name).unwrap().shape(), shape, "{name}");
        }
        assert_eq!(init_params(&cfg, 0).unwrap(), params);
    }
}
