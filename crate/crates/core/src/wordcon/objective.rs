use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{
    cfm_loss_graph, joint_attention_loss_graph, masked_loss_graph, LossWeights, MaskSet,
};
use super::AdapterSet;
use crate::autograd::Graph;
use crate::error::Result;
use crate::flowmodel::{
    bind_params, conditional_target, forward_graph, forward_process, BoundAdapters, Condition,
    ModelConfig,
};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "masked")]
    Masked,
    #[default]
    #[serde(rename = "masked+attn")]
    MaskedAttn,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Vanilla, LossMode::Masked, LossMode::MaskedAttn];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Vanilla => "vanilla",
            LossMode::Masked => "masked",
            LossMode::MaskedAttn => "masked+attn",
        }
    }

    pub fn uses_masks(self) -> bool {
        self != LossMode::Vanilla
    }
}

/// Every loss component for one evaluation, whether or not it is weighted in.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cfm: f64,
    pub masked: f64,
    pub attn: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.cfm.is_finite()
            && self.masked.is_finite()
            && self.attn.is_finite()
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.cfm += s * other.cfm;
        self.masked += s * other.masked;
        self.attn += s * other.attn;
    }
}

/// Which tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// Only the adapter factors (`<target>.lora_a`, `<target>.lora_b`).
    Adapters,
    /// Every base parameter; adapters, if any, stay fixed.
    Base,
}

/// One training example at a fixed time and noise draw.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInput<'a> {
    pub x0: &'a Mat,
    pub eps: &'a Mat,
    pub t: f64,
    pub cond: &'a Condition,
    pub masks: &'a MaskSet,
}

/// Evaluates the configured objective on one example and returns its loss
/// components and gradients keyed by tensor name.
pub fn objective_and_grads(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    target: GradTarget,
    input: ObjectiveInput<'_>,
    mode: LossMode,
    weights: LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Mat>)> {
    let state = forward_process(input.x0, input.eps, input.t)?;
    let velocity_target = conditional_target(input.x0, input.eps, input.t)?.v;

    let mut g = Graph::new();
    let base_trainable = target == GradTarget::Base;
    let p = bind_params(&mut g, params, &|_| base_trainable);
    let ad = adapters.map(|a| BoundAdapters::bind(&mut g, a, target == GradTarget::Adapters));
    let z = g.constant(state.z);
    let fv = forward_graph(&mut g, cfg, &p, ad.as_ref(), z, state.t, input.cond)?;

    let cfm = cfm_loss_graph(&mut g, fv.velocity, &velocity_target)?;
    let masked = masked_loss_graph(&mut g, fv.velocity, &velocity_target, input.masks)?;
    let attn = joint_attention_loss_graph(&mut g, &fv, input.masks)?;
    let loss = match mode {
        LossMode::Vanilla => cfm,
        LossMode::Masked => masked,
        LossMode::MaskedAttn => {
            let weighted = g.scale(attn, weights.lambda_attn);
            g.add(masked, weighted)
        }
    };
    let breakdown = LossBreakdown {
        total: g.value(loss).item(),
        cfm: g.value(cfm).item(),
        masked: g.value(masked).item(),
        attn: g.value(attn).item(),
    };

    let mut grads = g.backward(loss);
    let mut out = BTreeMap::new();
    match target {
        GradTarget::Adapters => {
            if let Some(ad) = &ad {
                for (name, &(a, b)) in &ad.factors {
                    let ga = grads
                        .take(a)
                        .unwrap_or_else(|| Mat::zeros(g.value(a).rows(), g.value(a).cols()));
                    let gb = grads
                        .take(b)
                        .unwrap_or_else(|| Mat::zeros(g.value(b).rows(), g.value(b).cols()));
                    out.insert(format!("{name}.lora_a"), ga);
                    out.insert(format!("{name}.lora_b"), gb);
                }
            }
        }
        GradTarget::Base => {
            for (name, v) in p.iter() {
                let gv = grads
                    .take(v)
                    .unwrap_or_else(|| Mat::zeros(g.value(v).rows(), g.value(v).cols()));
                out.insert(name.to_string(), gv);
            }
        }
    }
    Ok((breakdown, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::{gaussian, init_params};
    use crate::glyphforge::{AttributeSet, FontClass};
    use crate::wordcon::{init_adapter, select_parameters};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (
        ModelConfig,
        ParamStore,
        AdapterSet,
        Mat,
        Mat,
        Condition,
        MaskSet,
    ) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            heads: 2,
            image_size: 8,
            vocab_size: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 1).unwrap();
        let mut ad = init_adapter(&cfg, &select_parameters(&cfg), 2, None, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in ad.factors.values_mut() {
            f.b = gaussian(&mut rng, f.b.rows(), f.b.cols());
            f.b.scale_assign(0.1);
        }
        let (r, c) = cfg.latent_shape();
        let x0 = gaussian(&mut rng, r, c);
        let eps = gaussian(&mut rng, r, c);
        let a = AttributeSet::plain(FontClass::Sans);
        let cond = Condition::new(vec![(1, AttributeSet { italic: true, ..a }), (3, a)]);
        let mut m0 = Array2::from_elem((2, 2), false);
        m0[[0, 0]] = true;
        let mut m1 = Array2::from_elem((2, 2), false);
        m1[[1, 1]] = true;
        (
            cfg,
            params,
            ad,
            x0,
            eps,
            cond,
            MaskSet::new(vec![m0, m1]).unwrap(),
        )
    }

    #[test]
    fn modes_share_components() {
        let (cfg, params, ad, x0, eps, cond, masks) = setup();
        let input = ObjectiveInput {
            x0: &x0,
            eps: &eps,
            t: 0.4,
            cond: &cond,
            masks: &masks,
        };
        let w = LossWeights::default();
        let run = |mode| {
            objective_and_grads(
                &cfg,
                &params,
                Some(&ad),
                GradTarget::Adapters,
                input,
                mode,
                w,
            )
            .unwrap()
            .0
        };
        let (v, m, ma) = (
            run(LossMode::Vanilla),
            run(LossMode::Masked),
            run(LossMode::MaskedAttn),
        );
        assert_eq!(v.cfm, m.cfm);
        assert_eq!(v.total, v.cfm);
        assert_eq!(m.total, m.masked);
        assert!((ma.total - (ma.masked + 0.01 * ma.attn)).abs() < 1e-12);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (cfg, params, ad, x0, eps, cond, masks) = setup();
        let input = ObjectiveInput {
            x0: &x0,
            eps: &eps,
            t: 0.6,
            cond: &cond,
            masks: &masks,
        };
        let w = LossWeights::default();
        let (_, grads) = objective_and_grads(
            &cfg,
            &params,
            Some(&ad),
            GradTarget::Adapters,
            input,
            LossMode::MaskedAttn,
            w,
        )
        .unwrap();
        let h = 1e-5;
        let name = "double_blocks.1.txt_attn.v.weight";
        for (which, idx) in [("lora_a", 3), ("lora_b", 5), ("lora_b", 0)] {
            let eval = |delta: f64| {
                let mut a2 = ad.clone();
                let f = a2.factors.get_mut(name).unwrap();
                let m = if which == "lora_a" {
                    &mut f.a
                } else {
                    &mut f.b
                };
                m.data_mut()[idx] += delta;
                objective_and_grads(
                    &cfg,
                    &params,
                    Some(&a2),
                    GradTarget::Adapters,
                    input,
                    LossMode::MaskedAttn,
                    w,
                )
                .unwrap()
                .0
                .total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[&format!("{name}.{which}")].data()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{which}[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn base_gradients_cover_every_parameter() {
        let (cfg, params, _, x0, eps, cond, masks) = setup();
        let input = ObjectiveInput {
            x0: &x0,
            eps: &eps,
            t: 0.5,
            cond: &cond,
            masks: &masks,
        };
        let (_, grads) = objective_and_grads(
            &cfg,
            &params,
            None,
            GradTarget::Base,
            input,
            LossMode::Vanilla,
            LossWeights::default(),
        )
        .unwrap();
        assert_eq!(grads.len(), params.len());
        assert!(grads["img_in.weight"].data().iter().any(|&x| x != 0.0));
    }
}
