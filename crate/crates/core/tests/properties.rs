mod common;

use std::collections::BTreeMap;

use mars_core::blocks::{
    channel_attention_forward, channel_attention_gate, domain_classifier_forward,
    multi_scale_attention_forward, residual_attention_forward, residual_block_forward,
    ChannelAttentionParams, DomainClassifierParams, FeatureMap, MultiScaleAttentionParams,
    ResidualBlockParams,
};
use mars_core::boxes::{iou, BBox};
use mars_core::data::{apply_domain_augmentation, generate_synthetic_dataset, LetterboxTransform};
use mars_core::detector::{decode_predictions, non_max_suppression, Detection, ModelConfig, RawPrediction};
use mars_core::evaluation::{compute_ap, ApMode, ClassDetection};
use mars_core::graph::Mode;
use mars_core::params::ParamStore;
use mars_core::training::{assign_targets, GtObject, ImageTargets};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = common::randn(&mut rng, &[c, h, w], 1.0);
    FeatureMap::new(t.into_dimensionality().unwrap()).unwrap()
}

fn boxes_strategy(extent: f64, max: usize) -> impl Strategy<Value = Vec<BBox>> {
    prop::collection::vec(
        (0.0..extent - 2.0, 0.0..extent - 2.0, 1.0..extent, 1.0..extent),
        0..max,
    )
    .prop_map(move |v| {
        v.into_iter()
            .map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(extent), (y + h).min(extent)))
            .filter(|b| b.has_area())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocks_preserve_shape(c in 1usize..=64, h in 1usize..=32, w in 1usize..=32, seed in 0u64..1000) {
        let x = feature_map(seed, c, h, w);
        let mut st = ParamStore::new(seed);
        let rp = ResidualBlockParams::new(&mut st, "r", c);
        let cp = ChannelAttentionParams::new(&mut st, "c", c, 16).unwrap();
        let mp = MultiScaleAttentionParams::new(&mut st, "m", [c, c, c]);
        prop_assert_eq!(residual_block_forward(&x, &rp, &st, Mode::Eval).unwrap().shape(), (c, h, w));
        prop_assert_eq!(channel_attention_forward(&x, &cp, &st).unwrap().shape(), (c, h, w));
        prop_assert_eq!(residual_attention_forward(&x, &rp, &cp, &st, Mode::Eval).unwrap().shape(), (c, h, w));
        let maps = [x.clone(), x.clone(), x.clone()];
        for y in multi_scale_attention_forward(&maps, &mp, &st).unwrap() {
            prop_assert_eq!(y.shape(), (c, h, w));
        }
        let gate = channel_attention_gate(&x, &cp, &st).unwrap();
        prop_assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic(c in 1usize..8, h in 1usize..8, seed in 0u64..1000) {
        let x = feature_map(seed, c, h, h);
        let mut st = ParamStore::new(seed);
        let rp = ResidualBlockParams::new(&mut st, "r", c);
        let cp = ChannelAttentionParams::new(&mut st, "c", c, 2).unwrap();
        let a = residual_attention_forward(&x, &rp, &cp, &st, Mode::Eval).unwrap();
        let b = residual_attention_forward(&x, &rp, &cp, &st, Mode::Eval).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn domain_distribution_is_a_simplex(c in 1usize..6, h in 1usize..20, scale in 0.1f64..50.0, seed in 0u64..1000) {
        let x = feature_map(seed, c, h, h);
        let x = FeatureMap::new(x.values().mapv(|v| v * scale)).unwrap();
        let mut st = ParamStore::new(seed);
        let dp = DomainClassifierParams::new(&mut st, "d", c, 8, 7);
        let d = domain_classifier_forward(&x, &dp, &st).unwrap();
        prop_assert_eq!(d.len(), 7);
        prop_assert!(d.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_branch_identity(c in 1usize..10, h in 1usize..10, seed in 0u64..1000) {
        let x = feature_map(seed, c, h, h);
        let mut st = ParamStore::new(seed);
        let rp = ResidualBlockParams::new(&mut st, "r", c);
        let cp = ChannelAttentionParams::new(&mut st, "c", c, 4).unwrap();
        rp.conv2.zero(&mut st);
        rp.bn2.set_identity(&mut st);
        // Identity statistics with zero input leave `beta = 0` exactly.
        let y = residual_block_forward(&x, &rp, &st, Mode::Eval).unwrap();
        prop_assert_eq!(y.values(), x.values());
        let y = residual_attention_forward(&x, &rp, &cp, &st, Mode::Eval).unwrap();
        prop_assert_eq!(y.values(), x.values());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn letterbox_round_trip(w in 1u32..2000, h in 1u32..2000, fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
        let t = LetterboxTransform::for_size(w, h, 416);
        let x0 = fx * w as f64;
        let y0 = fy * h as f64;
        let b = BBox::new(x0, y0, x0 + fw * (w as f64 - x0), y0 + fh * (h as f64 - y0));
        let back = t.inverse_box(&t.forward_box(&b));
        for (p, q) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() <= 0.5);
        }
        let f = t.forward_box(&b);
        for v in f.to_array() {
            prop_assert!((-1e-9..=416.0 + 1e-9).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_ignores_input_order(gt in boxes_strategy(60.0, 5), dets in boxes_strategy(60.0, 8), seed in any::<u64>()) {
        let mut gmap = BTreeMap::new();
        gmap.insert("a".to_string(), gt);
        let dets: Vec<ClassDetection> = dets
            .into_iter()
            .enumerate()
            .map(|(i, b)| ClassDetection { image_id: "a".into(), bbox: b, confidence: ((i * 7) % 5) as f64 / 5.0 })
            .collect();
        let mut shuffled = dets.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for mode in [ApMode::AllPoint, ApMode::ElevenPoint] {
            let a = compute_ap(&dets, &gmap, 0.5, mode);
            let b = compute_ap(&shuffled, &gmap, 0.5, mode);
            prop_assert_eq!(a.ap, b.ap);
            prop_assert!((0.0..=1.0).contains(&a.ap));
            prop_assert!(a.tp <= a.num_det && a.tp <= a.num_gt);
        }
    }

    #[test]
    fn duplicate_of_matched_box_is_a_false_positive(gt in boxes_strategy(60.0, 5), dets in boxes_strategy(60.0, 6)) {
        prop_assume!(!gt.is_empty());
        let mut gmap = BTreeMap::new();
        gmap.insert("a".to_string(), gt.clone());
        let mut list: Vec<ClassDetection> = dets
            .into_iter()
            .map(|b| ClassDetection { image_id: "a".into(), bbox: b, confidence: 0.5 })
            .collect();
        list.push(ClassDetection { image_id: "a".into(), bbox: gt[0], confidence: 1.0 });
        let before = compute_ap(&list, &gmap, 0.5, ApMode::AllPoint);
        list.push(ClassDetection { image_id: "a".into(), bbox: gt[0], confidence: 0.9 });
        let after = compute_ap(&list, &gmap, 0.5, ApMode::AllPoint);
        prop_assert_eq!(after.fp, before.fp + 1);
        prop_assert_eq!(after.tp, before.tp);
        prop_assert!(after.ap <= before.ap);
    }

    #[test]
    fn nms_postcondition(boxes in boxes_strategy(80.0, 20), thr in 0.1f64..0.9) {
        let dets: Vec<Detection> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| Detection { bbox: *b, class_id: i % 2, confidence: ((i * 13) % 10) as f64 / 10.0 + 0.05 })
            .collect();
        let kept = non_max_suppression(&dets, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.bbox, &b.bbox) < thr);
                }
            }
        }
    }

    #[test]
    fn decode_shrinks_with_threshold_and_clips(seed in any::<u64>(), lo in 0.0f64..0.5, extra in 0.0f64..0.5) {
        let cfg = ModelConfig::toy(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = RawPrediction {
            scales: cfg.grid_sizes().map(|g| common::randn(&mut rng, &[1, cfg.head_channels(), g, g], 3.0)),
        };
        let loose = decode_predictions(&raw, &cfg, lo).unwrap();
        let tight = decode_predictions(&raw, &cfg, lo + extra).unwrap();
        prop_assert!(tight[0].len() <= loose[0].len());
        for d in &tight[0] {
            prop_assert!(loose[0].contains(d));
        }
        for d in &loose[0] {
            for v in d.bbox.to_array() {
                prop_assert!((0.0..=64.0).contains(&v));
            }
            prop_assert!((0.0..=1.0).contains(&d.confidence));
        }
    }

    #[test]
    fn assignment_is_complete_and_masks_disjoint(boxes in boxes_strategy(96.0, 6)) {
        let cfg = ModelConfig::toy(96);
        let objs: Vec<GtObject> = boxes.iter().enumerate().map(|(i, b)| GtObject { bbox: *b, class_id: i % 5 }).collect();
        let t = assign_targets(&[ImageTargets { image_id: "p", objects: &objs }], &cfg, 0.5).unwrap();
        prop_assert_eq!(t.num_positive() + t.dropped, objs.len());
        prop_assert_eq!(t.assignments.len(), t.num_positive());
        for s in &t.scales {
            for (o, i) in s.objectness.iter().zip(s.ignore.iter()) {
                prop_assert!(!(*o > 0.0 && *i > 0.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_manifests_are_valid(n in 1usize..6, size in 32u32..160, seed in any::<u64>()) {
        let m = generate_synthetic_dataset(n, size, seed).unwrap();
        prop_assert_eq!(m.len(), n);
        prop_assert!(m.violations().is_empty());
        for r in &m.records {
            prop_assert!((1..=4).contains(&r.objects.len()));
            for o in &r.objects {
                prop_assert!(o.bbox.x_min < o.bbox.x_max && o.bbox.y_min < o.bbox.y_max);
                prop_assert!(o.bbox.x_max <= size as f64 && o.bbox.y_max <= size as f64);
            }
        }
    }

    #[test]
    fn augmentation_preserves_size_and_is_deterministic(domain in 0usize..7, strength in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = image::RgbImage::from_fn(24, 16, |x, y| image::Rgb([(x * 10) as u8, (y * 15) as u8, ((x + y) * 5) as u8]));
        let a = apply_domain_augmentation(&img, domain, strength, seed).unwrap();
        let b = apply_domain_augmentation(&img, domain, strength, seed).unwrap();
        prop_assert_eq!(a.dimensions(), img.dimensions());
        prop_assert_eq!(&a, &b);
        if domain == 0 {
            prop_assert_eq!(&a, &img);
        }
    }
}

#[test]
fn class_histogram_covers_all_classes() {
    let m = generate_synthetic_dataset(1000, 32, 3).unwrap();
    let mut counts = [0usize; 5];
    for r in &m.records {
        for o in &r.objects {
            counts[m.class_index(&o.class_name).unwrap()] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

#[test]
fn unknown_domain_is_rejected() {
    let img = image::RgbImage::new(4, 4);
    assert!(apply_domain_augmentation(&img, 7, 1.0, 0).is_err());
}
