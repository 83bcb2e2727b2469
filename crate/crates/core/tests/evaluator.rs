mod common;

use proptest::prelude::*;
use srpn_core::evaluator::{average_precision, match_detections};
use srpn_core::{BBox64, Detection64};

fn boxes(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<BBox64>> {
    prop::collection::vec(
        (0..10u8, 0..10u8, 2..6u8, 2..6u8).prop_map(|(x, y, h, w)| BBox64::new(x as f64 * 3.0, y as f64 * 3.0, h as f64 * 4.0, w as f64 * 4.0)),
        n,
    )
}

/// Detections with pairwise distinct scores.
fn distinct_dets(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Detection64>> {
    boxes(n).prop_flat_map(|bs| {
        let k = bs.len();
        (Just(bs), Just((0..k).collect::<Vec<usize>>()).prop_shuffle())
    })
    .prop_map(|(bs, perm)| {
        bs.into_iter()
            .zip(perm)
            .map(|(bbox, r)| Detection64 { bbox, score: (r as f64 + 1.0) / 64.0 })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matching_agrees_with_reference(
        dets in prop::collection::vec((0..10u8, 0..10u8, 2..6u8, 2..6u8, 0..4u8), 0..20),
        gt in boxes(0..20),
        thr in prop::sample::select(vec![0.1, 0.3, 0.5]),
    ) {
        let dets: Vec<Detection64> = dets
            .into_iter()
            .map(|(x, y, h, w, s)| Detection64 {
                bbox: BBox64::new(x as f64 * 3.0, y as f64 * 3.0, h as f64 * 4.0, w as f64 * 4.0),
                score: s as f64 / 4.0,
            })
            .collect();
        let m = match_detections(&dets, &gt, thr);
        prop_assert_eq!((m.tp, m.fp, m.fn_), common::match_reference(&dets, &gt, thr));
        prop_assert_eq!(m.tp + m.fn_, gt.len());
        prop_assert_eq!(m.tp + m.fp, dets.len());
        let mut used: Vec<usize> = m.matches.iter().map(|p| p.1).collect();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), m.tp);
    }

    #[test]
    fn ap_matches_threshold_enumeration(dets in distinct_dets(1..25), gt in boxes(1..8)) {
        let ap = average_precision(&[(dets.clone(), gt.clone())], 0.3);
        let want = common::ap_by_thresholds(&dets, &gt, 0.3);
        prop_assert!((ap - want).abs() < 1e-12, "{} vs {}", ap, want);
    }

    #[test]
    fn ap_ignores_monotone_rescoring(dets in distinct_dets(1..25), gt in boxes(1..8)) {
        let squashed: Vec<Detection64> = dets
            .iter()
            .map(|d| Detection64 { bbox: d.bbox, score: 1.0 / (1.0 + (-8.0 * d.score + 3.0).exp()) })
            .collect();
        let a = average_precision(&[(dets, gt.clone())], 0.3);
        let b = average_precision(&[(squashed, gt)], 0.3);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn crafted_ten_detection_ap() {
    let gt: Vec<BBox64> = (0..5).map(|i| BBox64::new(i as f64 * 20.0, 0.0, 10.0, 10.0)).collect();
    let hit = |i: usize| BBox64::new(i as f64 * 20.0 + 1.0, 0.0, 10.0, 10.0);
    let miss = |i: usize| BBox64::new(i as f64 * 20.0 + 5.0, 50.0, 10.0, 10.0);
    // rank order: hit, miss, hit, hit, miss, miss, hit, duplicate, miss, hit
    let ranked = [hit(0), miss(0), hit(1), hit(2), miss(1), miss(2), hit(3), hit(0), miss(3), hit(4)];
    let dets: Vec<Detection64> = ranked
        .iter()
        .enumerate()
        .map(|(r, &bbox)| Detection64 { bbox, score: 1.0 - r as f64 / 10.0 })
        .collect();
    let ap = average_precision(&[(dets.clone(), gt.clone())], 0.3);
    assert!((ap - common::ap_by_thresholds(&dets, &gt, 0.3)).abs() < 1e-12);
    let hand = 0.2 * 1.0 + 0.2 * (3.0 / 4.0) + 0.2 * (3.0 / 4.0) + 0.2 * (4.0 / 7.0) + 0.2 * (5.0 / 10.0);
    assert!((ap - hand).abs() < 1e-12, "{ap} vs {hand}");
}
