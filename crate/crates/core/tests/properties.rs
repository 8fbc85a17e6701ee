mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::*;
use seenet::eval::ConfusionMatrix;
use seenet::masks::{
    flip_fuse, fuse_attention, mask_for_sc, normalize_map, ternary_mask, AttentionMap, Thresholds,
};
use seenet::proxy_gt::{generate_proxy_gt, harmonic_mean, ProxyLabelMap, SaliencyMap};
use seenet::tensor::{ops, MaskMap, Tensor};

fn map_strategy(max_side: usize) -> impl Strategy<Value = AttentionMap<f64>> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], h * w)
            .prop_map(move |v| AttentionMap::new(h, w, v).unwrap())
    })
}

fn thresholds() -> impl Strategy<Value = Thresholds> {
    (0.0..0.9f64, 0.01..1.0f64).prop_map(|(low, gap)| {
        let high = (low + gap * (1.0 - low)).max(low + 1e-6).min(1.0);
        Thresholds::new(high, low).unwrap()
    })
}

fn unit_maps(n: usize) -> impl Strategy<Value = Vec<AttentionMap<f32>>> {
    (1..=6usize, 1..=6usize).prop_flat_map(move |(h, w)| {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0..=1.0f32], h * w)
                .prop_map(move |v| AttentionMap::new(h, w, v).unwrap()),
            n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn zones_match_reference(map in map_strategy(10), t in thresholds()) {
        let tm = ternary_mask(&map, t).unwrap();
        let want = zones_ref(map.values(), t.high, t.low);
        prop_assert_eq!(tm.values(), want.as_slice());
        let z = tm.zone_counts();
        prop_assert_eq!(z.attention + z.potential + z.background, map.values().len());
    }

    #[test]
    fn normalizing_does_not_move_zones(map in map_strategy(10), t in thresholds(), k in -30i32..30) {
        let tm = ternary_mask(&map, t).unwrap();
        let scaled = map.scaled(2f64.powi(k)).unwrap();
        prop_assert_eq!(&ternary_mask(&scaled, t).unwrap(), &tm);
        prop_assert_eq!(mask_for_sc(&scaled, t).unwrap(), mask_for_sc(&map, t).unwrap());
        // Division by the max is not a power-of-two scaling, so only
        // pixels clear of both cuts are compared.
        let n = normalize_map(&map);
        let tn = ternary_mask(&n, t).unwrap();
        let max = map.max();
        for (i, &v) in map.values().iter().enumerate() {
            let r = v / max;
            if (r - t.high).abs() > 1e-12 && (r - t.low).abs() > 1e-12 {
                prop_assert_eq!(tn.values()[i], tm.values()[i]);
            }
        }
    }

    #[test]
    fn background_mask_covers_the_background_zone(map in map_strategy(10), t in thresholds()) {
        let tm = ternary_mask(&map, t).unwrap();
        let sc = mask_for_sc(&map, t).unwrap();
        for (&z, &c) in tm.values().iter().zip(sc.values()) {
            if z == -1 {
                prop_assert_eq!(c, 1);
            }
            if z == 0 {
                prop_assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn fusion_is_a_semilattice(maps in unit_maps(3)) {
        let (a, b, c) = (&maps[0], &maps[1], &maps[2]);
        for f in [fuse_attention::<f32>, flip_fuse::<f32>] {
            let ab = f(a, b).unwrap();
            prop_assert_eq!(&ab, &f(b, a).unwrap());
            prop_assert_eq!(f(&ab, c).unwrap(), f(a, &f(b, c).unwrap()).unwrap());
            let aa = f(a, a).unwrap();
            prop_assert_eq!(aa.values(), a.values());
            for ((&x, &y), &m) in a.values().iter().zip(b.values()).zip(ab.values()) {
                prop_assert!(m >= x && m >= y && (m == x || m == y));
            }
        }
    }

    #[test]
    fn fusion_rejects_mismatched_shapes(maps in unit_maps(1)) {
        let a = &maps[0];
        let b = AttentionMap::<f32>::zeros(a.height() + 1, a.width());
        prop_assert!(fuse_attention(a, &b).is_err());
        prop_assert!(flip_fuse(&b, a).is_err());
    }

    #[test]
    fn harmonic_mean_lies_between_its_inputs(a in 0.0..=1.0f64, d in 0.0..=1.0f64, w in 0.01..20.0f64) {
        let h = harmonic_mean(a, d, w).unwrap();
        prop_assert_eq!(h, harm_ref(a, d, w));
        if a > 0.0 && d > 0.0 {
            prop_assert!(h >= a.min(d) * (1.0 - 1e-12) && h <= a.max(d) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn harmonic_mean_rejects_bad_inputs(a in 1.0001..5.0f64, w in -5.0..=0.0f64) {
        prop_assert!(harmonic_mean(a, 0.5, 1.0).is_err());
        prop_assert!(harmonic_mean(0.5, a, 1.0).is_err());
        prop_assert!(harmonic_mean(0.5, 0.5, w).is_err());
    }

    #[test]
    fn c_relu_is_rectify_times_mask(
        (h, w, x, m) in (1..5usize, 1..5usize).prop_flat_map(|(h, w)| (
            Just(h),
            Just(w),
            prop::collection::vec(-4.0..4.0f32, 2 * h * w),
            prop::collection::vec(-1..=1i8, h * w),
        ))
    ) {
        let t = Tensor::new(vec![2, h, w], x.clone()).unwrap();
        let mask = MaskMap::new(h, w, m.clone()).unwrap();
        let y = ops::c_relu_forward(&t, &mask).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            prop_assert_eq!(v, crelu_ref(x[i], m[i % (h * w)]));
        }
    }

    #[test]
    fn proxy_labels_match_brute_force(
        (n, sal, atts, w) in (1..40usize, 1..=3usize).prop_flat_map(|(n, k)| (
            Just(n),
            prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), Just(0.5f32), 0.0..=1.0f32], n),
            prop::collection::btree_map(1..=20u8, prop::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0..=1.0f32], n), k),
            prop_oneof![Just(1.0), 0.1..5.0f64],
        ))
    ) {
        let d = SaliencyMap::new(1, n, sal.clone()).unwrap();
        let maps: BTreeMap<u8, AttentionMap> = atts
            .iter()
            .map(|(&c, v)| (c, AttentionMap::new(1, n, v.clone()).unwrap()))
            .collect();
        let y: Vec<u8> = atts.keys().copied().collect();
        let g = generate_proxy_gt(&d, &maps, &y, w).unwrap();
        let want = proxy_ref(&sal, &atts, w);
        prop_assert_eq!(g.labels(), want.as_slice());
        prop_assert!(g.labels().iter().all(|l| *l == 0 || y.contains(l)));
    }

    #[test]
    fn miou_matches_set_counting(
        (m, gt, pred) in (1..=5u8).prop_flat_map(|m| (
            Just(m),
            prop::collection::vec(0..=m, 1..80),
            prop::collection::vec(0..=m, 80),
        ))
    ) {
        let n = gt.len();
        let pred = &pred[..n];
        let mut cm = ConfusionMatrix::new(m as usize);
        cm.accumulate(
            &ProxyLabelMap::new(1, n, pred.to_vec()).unwrap(),
            &ProxyLabelMap::new(1, n, gt.clone()).unwrap(),
            None,
        ).unwrap();
        let r = cm.miou().unwrap();
        let (per, mean) = miou_ref(&gt, pred, m as usize + 1);
        prop_assert_eq!(r.per_class, per);
        prop_assert_eq!(Some(r.mean), mean);
    }

    #[test]
    fn merged_matrices_equal_joint_accumulation(
        a in prop::collection::vec((0..=3u8, 0..=3u8), 1..40),
        b in prop::collection::vec((0..=3u8, 0..=3u8), 1..40),
    ) {
        let lm = |v: &[(u8, u8)], pick: fn(&(u8, u8)) -> u8| {
            ProxyLabelMap::new(1, v.len(), v.iter().map(pick).collect()).unwrap()
        };
        let fill = |v: &[(u8, u8)], cm: &mut ConfusionMatrix| {
            cm.accumulate(&lm(v, |p| p.1), &lm(v, |p| p.0), Some(3)).unwrap();
        };
        let (mut x, mut y, mut joint) = (ConfusionMatrix::new(3), ConfusionMatrix::new(3), ConfusionMatrix::new(3));
        fill(&a, &mut x);
        fill(&b, &mut y);
        fill(&[a.clone(), b.clone()].concat(), &mut joint);
        x.merge(&y).unwrap();
        prop_assert_eq!(x, joint);
    }
}
