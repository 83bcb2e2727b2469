mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use srpn_core::anchors::AnchorLabel;
use srpn_core::losses::{triplet_loss, Margin};
use srpn_core::sampling::{make_pairs, make_triplets, ohem_select_labels};
use srpn_core::{Tape64, Tensor64};

fn to_label(c: i8) -> AnchorLabel {
    match c {
        1 => AnchorLabel::Positive,
        -1 => AnchorLabel::Negative,
        _ => AnchorLabel::Ignore,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ohem_keeps_hardest_negatives(
        cells in prop::collection::vec((prop::sample::select(vec![1i8, -1, -1, -1, -1, -1, 0]), 0.0..5.0f64), 1..300),
    ) {
        let (codes, losses): (Vec<i8>, Vec<f64>) = cells.into_iter().unzip();
        let labels: Vec<AnchorLabel> = codes.iter().map(|&c| to_label(c)).collect();
        let pos: Vec<usize> = (0..codes.len()).filter(|&i| codes[i] == 1).collect();
        let available = codes.iter().filter(|&&c| c == -1).count();
        let max_total = 4 * codes.len();
        let picked = ohem_select_labels(&labels, &losses, 3.0, max_total);
        let picked_neg: Vec<usize> = picked.iter().copied().filter(|&i| codes[i] == -1).collect();
        let k = if pos.is_empty() { available } else { (3 * pos.len()).min(available) };
        prop_assert_eq!(picked_neg, common::hardest_negatives(&codes, &losses, k));
        let picked_pos: Vec<usize> = picked.iter().copied().filter(|&i| codes[i] == 1).collect();
        prop_assert_eq!(picked_pos, pos);
        prop_assert!(picked.iter().all(|&i| codes[i] != 0));
    }

    #[test]
    fn pairs_are_balanced_and_consistent(labels in prop::collection::vec(any::<bool>(), 3..40), n in 2usize..64, seed in any::<u64>()) {
        prop_assume!(labels.iter().filter(|&&l| l).count() >= 2 && labels.iter().any(|&l| !l));
        let ps = make_pairs(&labels, n, seed).unwrap();
        prop_assert_eq!(ps.pairs.len(), n);
        prop_assert!(!ps.unbalanced);
        let sim = ps.similar_count() as i64;
        prop_assert!((sim - (n as i64 - sim)).abs() <= 1);
        for p in &ps.pairs {
            prop_assert!(p.first != p.second);
            prop_assert_eq!(p.similar, labels[p.first] == labels[p.second]);
        }
    }

    #[test]
    fn triplets_follow_label_pattern(labels in prop::collection::vec(any::<bool>(), 3..40), n in 1usize..64, seed in any::<u64>()) {
        let ts = match make_triplets(&labels, n, seed) {
            Ok(ts) => ts,
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(ts.triplets.len(), n);
        for t in &ts.triplets {
            prop_assert!(t.anchor != t.positive);
            prop_assert_eq!(labels[t.anchor], labels[t.positive]);
            prop_assert_ne!(labels[t.anchor], labels[t.negative]);
        }
    }

    #[test]
    fn triplet_loss_ignores_rotation(
        v in prop::collection::vec(-2.0..2.0f64, 6),
        angle in 0.0..std::f64::consts::TAU,
    ) {
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |p: &[f64]| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let eval = |a: Vec<f64>, p: Vec<f64>, n: Vec<f64>| {
            let tape = Tape64::new();
            let [a, p, n] = [a, p, n].map(|e| tape.constant(Tensor64::vector(&e)));
            let l = triplet_loss(&tape, a, p, n, Margin::new(2.0).unwrap()).unwrap();
            let out = tape.value(l).item().unwrap();
            out
        };
        let plain = eval(v[0..2].to_vec(), v[2..4].to_vec(), v[4..6].to_vec());
        let turned = eval(rot(&v[0..2]), rot(&v[2..4]), rot(&v[4..6]));
        prop_assert!((plain - turned).abs() < 1e-12);
    }
}

#[test]
fn three_embedding_triplets_match_enumeration() {
    let labels = [true, true, false];
    let expected: BTreeSet<(usize, usize, usize)> = common::enumerate_fg_triplets(&labels).into_iter().collect();
    assert_eq!(expected, BTreeSet::from([(0, 1, 2), (1, 0, 2)]));
    let drawn: BTreeSet<(usize, usize, usize)> = make_triplets(&labels, 64, 3)
        .unwrap()
        .triplets
        .iter()
        .map(|t| (t.anchor, t.positive, t.negative))
        .collect();
    assert_eq!(drawn, expected);
}

#[test]
fn ohem_two_positives_hundred_negatives() {
    let mut labels = vec![AnchorLabel::Negative; 102];
    labels[0] = AnchorLabel::Positive;
    labels[1] = AnchorLabel::Positive;
    let losses: Vec<f64> = (0..102).map(|i| ((i * 37) % 101) as f64).collect();
    let picked = ohem_select_labels(&labels, &losses, 3.0, 256);
    assert_eq!(picked.len(), 8);
    let codes: Vec<i8> = labels.iter().map(|l| if *l == AnchorLabel::Positive { 1 } else { -1 }).collect();
    let neg: Vec<usize> = picked.into_iter().filter(|&i| i >= 2).collect();
    assert_eq!(neg, common::hardest_negatives(&codes, &losses, 6));
}
