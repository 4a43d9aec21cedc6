use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use wordcon_core::evalharness::{
    accuracy_metrics, attention_alignment, judge, Localization, SampleVerdict, WordGrade,
};
use wordcon_core::flowmodel::{
    conditional_target, forward_process, init_params, patchify, unpatchify, AttentionMap,
    ModelConfig,
};
use wordcon_core::glyphforge::{
    compose_sample, default_vocabulary, validate_masks, AttributeSet, BBox, BackgroundKind,
    BackgroundSpec, FontClass, LayoutPolicy, RasterConfig, Rasterizer,
};
use wordcon_core::params::{decode_container, encode_container, DType};
use wordcon_core::tensor::Mat;
use wordcon_core::wordcon::{
    cfm_loss, downsample_mask, init_adapter, masked_loss, merge_adapter, select_parameters, MaskSet,
};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

fn bool_grid(n: usize) -> impl Strategy<Value = Array2<bool>> {
    prop::collection::vec(any::<bool>(), n * n)
        .prop_map(move |d| Array2::from_shape_vec((n, n), d).unwrap())
}

fn attrs() -> impl Strategy<Value = AttributeSet> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(bold, italic, underline)| {
        AttributeSet {
            bold,
            italic,
            underline,
            font_class: FontClass::Sans,
        }
    })
}

fn grade() -> impl Strategy<Value = WordGrade> {
    (any::<bool>(), any::<bool>(), attrs()).prop_map(|(word_identified, attribute_correct, m)| {
        WordGrade {
            word: "GO".into(),
            word_identified,
            attribute_correct: word_identified && attribute_correct,
            matched_attribute: m,
            localization: Localization {
                score: 1.0,
                bbox: BBox {
                    x: 0,
                    y: 0,
                    w: 1,
                    h: 1,
                },
                px_height: 8,
            },
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracies_are_percentages_and_total_implies_word_identified(
        grades in prop::collection::vec(prop::collection::vec(grade(), 2), 1..20),
        expected in prop::collection::vec(attrs(), 2),
    ) {
        let verdicts: Vec<SampleVerdict> = grades
            .iter()
            .map(|g| judge(g, &expected, &[0]).unwrap())
            .collect();
        for (v, g) in verdicts.iter().zip(&grades) {
            if v.total_ok {
                prop_assert!(g[0].word_identified);
            }
        }
        let acc = accuracy_metrics(&verdicts).unwrap();
        for p in [acc.type_acc, acc.word_acc, acc.total_acc] {
            prop_assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn attention_iou_is_bounded_and_exact_on_the_mask(
        mask in bool_grid(6),
        noise in prop::collection::vec(0.0f64..1.0, 36),
        threshold in 0.05f64..0.95,
    ) {
        let map = AttentionMap { grid: 6, values: Mat::from_vec(6, 6, noise) };
        let iou = attention_alignment(&map, &mask, threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        let exact = AttentionMap {
            grid: 6,
            values: Mat::from_vec(6, 6, mask.iter().map(|&b| b as u8 as f64).collect()),
        };
        prop_assert_eq!(attention_alignment(&exact, &mask, threshold).unwrap(), 1.0);
    }

    #[test]
    fn container_round_trips_and_detects_corruption(
        a in mat(3, 5),
        b in mat(1, 4),
        flip in any::<prop::sample::Index>(),
    ) {
        let tensors: BTreeMap<String, Mat> =
            [("blocks.0.w".to_string(), a), ("head.b".to_string(), b)].into();
        let meta = serde_json::json!({ "kind": "test" });
        let bytes = encode_container(&meta, &tensors, DType::F64).unwrap();
        let back = decode_container(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back.tensors, &tensors);
        prop_assert_eq!(&back.metadata, &meta);

        let narrow = encode_container(&meta, &tensors, DType::F32).unwrap();
        let back = decode_container(&narrow, Path::new("mem")).unwrap();
        for (name, m) in &tensors {
            let expect = m.map(|x| x as f32 as f64);
            prop_assert_eq!(&back.tensors[name], &expect);
        }

        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 0x10;
        prop_assert!(decode_container(&bad, Path::new("mem")).is_err());
        prop_assert!(decode_container(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn masked_loss_is_bounded_by_the_full_loss(
        pred in mat(16, 3),
        target in mat(16, 3),
        masks in prop::collection::vec(bool_grid(4), 1..4),
    ) {
        let set = MaskSet::new(masks).unwrap();
        let full = cfm_loss(&pred, &target).unwrap();
        let masked = masked_loss(&pred, &target, &set).unwrap();
        prop_assert!(masked >= 0.0 && masked <= full + 1e-12);
        let everything = masked_loss(&pred, &target, &MaskSet::full(4, 2)).unwrap();
        prop_assert!((everything - full).abs() <= 1e-12 * full.max(1.0));
    }

    #[test]
    fn downsampling_by_one_is_identity_and_full_masks_stay_full(mask in bool_grid(8)) {
        prop_assert_eq!(downsample_mask(&mask, 1).unwrap(), mask.clone());
        let full = Array2::from_elem((8, 8), true);
        prop_assert!(downsample_mask(&full, 4).unwrap().iter().all(|&b| b));
        let coarse = downsample_mask(&mask, 2).unwrap();
        prop_assert_eq!(coarse.dim(), (4, 4));
    }

    #[test]
    fn interpolation_hits_data_and_noise_and_target_is_constant(
        x0 in mat(4, 3),
        eps in mat(4, 3),
        t in 0.0f64..=1.0,
    ) {
        prop_assert_eq!(forward_process(&x0, &eps, 0.0).unwrap().z, x0.clone());
        prop_assert_eq!(forward_process(&x0, &eps, 1.0).unwrap().z, eps.clone());
        let v = conditional_target(&x0, &eps, t).unwrap().v;
        prop_assert!(v.max_abs_diff(&eps.zip_map(&x0, |e, x| e - x)) <= 1e-12);
        let zt = forward_process(&x0, &eps, t).unwrap().z;
        let expect = x0.zip_map(&eps, |x, e| (1.0 - t) * x + t * e);
        prop_assert!(zt.max_abs_diff(&expect) <= 1e-12);
        prop_assert!(forward_process(&x0, &eps, t + 1.5).is_err());
    }

    #[test]
    fn patchify_round_trips(pixels in prop::collection::vec(0.0f32..1.0, 8 * 8 * 3)) {
        let image = Array3::from_shape_vec((8, 8, 3), pixels).unwrap();
        let latent = patchify(&image, 4).unwrap();
        prop_assert_eq!(latent.shape(), (4, 48));
        prop_assert_eq!(unpatchify(&latent, 8, 4).unwrap(), image);
    }

    #[test]
    fn fresh_adapters_merge_to_the_base(seed in any::<u64>(), rank in 1usize..5) {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            hidden_dim: 8,
            heads: 2,
            double_blocks: 1,
            single_blocks: 1,
            vocab_size: 4,
            max_words: 2,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, seed).unwrap();
        let adapters = init_adapter(&cfg, &select_parameters(&cfg), rank, None, seed ^ 1).unwrap();
        prop_assert_eq!(adapters.trainable_count(), 4 * rank * 16);
        let merged = merge_adapter(&params, &adapters).unwrap();
        prop_assert_eq!(merged.as_map(), params.as_map());
    }

    #[test]
    fn composed_masks_are_valid(
        picks in prop::collection::vec((0usize..10, attrs()), 1..3),
        px in 8u32..11,
        seed in any::<u64>(),
        kind in prop::sample::select(vec![
            BackgroundKind::Solid,
            BackgroundKind::Gradient,
            BackgroundKind::Noise,
        ]),
    ) {
        let vocab = default_vocabulary();
        let words: Vec<(String, AttributeSet)> =
            picks.iter().map(|(i, a)| (vocab[*i].clone(), *a)).collect();
        let background = BackgroundSpec { kind, ..BackgroundSpec::solid(0.5) };
        let layout = LayoutPolicy { px_height: (px, px), ..LayoutPolicy::default() };
        let raster = Rasterizer::new(RasterConfig::default());
        let sample = compose_sample(&words, 32, &background, &layout, seed, &raster).unwrap();
        let report = validate_masks(&sample);
        prop_assert!(report.passed(), "{}", report.summary());
        prop_assert_eq!(sample.pixel_masks.len(), words.len());
    }
}
