mod common;

use proptest::prelude::*;

use dstnet::autograd::Var;
use dstnet::color::{hsv_pixel, hsv_to_rgb};
use dstnet::config::{parse_value, Settings};
use dstnet::container::Container;
use dstnet::data::{epoch_order, split_dataset, synthetic_pairs, test_count};
use dstnet::image::{reflect_index, Image};
use dstnet::loss::{hsv_loss, pixel_loss, tv_loss, PixelVariant};
use dstnet::metrics::loe;
use dstnet::model::{apply_curves, curve_step};
use dstnet::priors::min_max_normalize;
use dstnet::tensor::Tensor;

fn unit_image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0u8..=255, h * w * 3).prop_map(move |v| Image::new(h, w, v.into_iter().map(|b| b as f64 / 255.0).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_stays_in_unit_interval_and_is_monotone(x in 0.0f64..=1.0, dx in 1e-6f64..0.5, a in -1.0f64..=1.0, k in 1usize..=8) {
        let y = (x + dx).min(1.0);
        let (mut fx, mut fy) = (x, y);
        for _ in 0..k {
            fx = curve_step(fx, a);
            fy = curve_step(fy, a);
            prop_assert!((0.0..=1.0).contains(&fx));
            prop_assert!(fy >= fx);
        }
    }

    #[test]
    fn batched_curves_match_scalar(vals in prop::collection::vec(0.0f64..=1.0, 12), maps in prop::collection::vec(-1.0f64..=1.0, 24)) {
        // 1×3×2×2 image, K = 2
        let img = Var::constant(Tensor::new(&[1, 3, 2, 2], vals.clone()).unwrap());
        let a = Var::constant(Tensor::new(&[1, 6, 2, 2], maps.clone()).unwrap());
        let out = apply_curves(&img, &a);
        for (i, &got) in out.value().data().iter().enumerate() {
            let want = (0..2).fold(vals[i], |v, n| curve_step(v, maps[n * 12 + i]));
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn hsv_round_trips(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let [h, s, v] = hsv_pixel([r, g, b]);
        prop_assert!((0.0..2.0 * std::f64::consts::PI).contains(&h));
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&v));
        let back = hsv_to_rgb([h, s, v]);
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn paired_losses_vanish_on_identical_inputs(v in prop::collection::vec(0.0f64..=1.0, 3 * 16)) {
        let x = Var::constant(Tensor::new(&[1, 3, 4, 4], v).unwrap());
        prop_assert_eq!(pixel_loss(&x, &x, PixelVariant::L1).unwrap().value().data()[0], 0.0);
        prop_assert_eq!(pixel_loss(&x, &x, PixelVariant::SmoothL1).unwrap().value().data()[0], 0.0);
        prop_assert!(hsv_loss(&x, &x, 1.0, 1.0).unwrap().value().data()[0].abs() < 1e-12);
        prop_assert!(tv_loss(&x).value().data()[0] >= 0.0);
    }

    #[test]
    fn reflect_index_stays_in_range_and_mirrors(i in -500isize..500, n in 1usize..40) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        prop_assert_eq!(reflect_index(-i, n), reflect_index(i, n));
        if (0..n as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
    }

    #[test]
    fn normalize_maps_into_unit_interval(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let n = min_max_normalize(&v);
        prop_assert_eq!(n.len(), v.len());
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            prop_assert!(n.contains(&0.0) && n.contains(&1.0));
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(len in 1usize..200, seed in any::<u64>(), epoch in 0u64..1000) {
        let mut o = epoch_order(len, seed, epoch);
        prop_assert_eq!(&o, &epoch_order(len, seed, epoch));
        o.sort_unstable();
        prop_assert_eq!(o, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_disjoint_and_sized(n in 2usize..120, seed in any::<u64>()) {
        let (train, test) = split_dataset(synthetic_pairs(n, 1, 1), seed).unwrap();
        prop_assert_eq!(test.len(), test_count(n));
        prop_assert_eq!(train.len() + test.len(), n);
        let names = |p: &[dstnet::data::Pair]| p.iter().map(|p| p.name()).collect::<std::collections::BTreeSet<_>>();
        prop_assert!(names(train.pairs()).is_disjoint(&names(test.pairs())));
    }

    #[test]
    fn container_round_trips(arrays in prop::collection::vec(prop::collection::vec(any::<f64>(), 0..20), 0..5), tag in "[a-z]{0,8}") {
        let mut c = Container::new("proptest", serde_json::json!({ "tag": tag }));
        for (i, a) in arrays.iter().enumerate() {
            c.push(format!("a{i}"), Tensor::new(&[a.len()], a.clone()).unwrap());
        }
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.kind, "proptest");
        prop_assert_eq!(&back.meta, &c.meta);
        prop_assert_eq!(back.arrays.len(), arrays.len());
        for ((_, t), a) in back.arrays.iter().zip(&arrays) {
            let same = t.data().iter().zip(a).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn loe_ignores_joint_monotone_tone_maps(a in unit_image(6, 7), b in unit_image(6, 7), g in 0.3f64..3.0) {
        let base = loe(&a, &b).unwrap();
        let f = |v: f64| v.powf(g);
        prop_assert_eq!(loe(&a.map(f), &b.map(f)).unwrap(), base);
    }

    #[test]
    fn overrides_parse_and_land(w3 in 0.0f64..10.0, seed in 0u64..1_000_000, crop in 8usize..512) {
        let s = Settings::resolve(None, &[
            format!("loss.w3={w3:?}"),
            format!("train.seed={seed}"),
            format!("train.crop={crop}"),
        ]).unwrap();
        prop_assert_eq!(s.train.loss.w3, w3);
        prop_assert_eq!(s.train.seed, seed);
        prop_assert_eq!(s.train.crop, crop);
        let again = Settings::resolve(None, &[]).unwrap();
        prop_assert_eq!(again.train.crop, 192);
    }

    #[test]
    fn parse_value_falls_back_to_string(word in "[a-z_]{1,12}") {
        prop_assume!(!["true", "false", "inf", "nan"].contains(&word.as_str()));
        prop_assert_eq!(parse_value(&word), serde_json::Value::String(word.clone()));
    }
}
