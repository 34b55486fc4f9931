use dudes::metrics::{detection_auroc, iou, sparsification_curve, ConfusionMatrix, DEFAULT_FRACTIONS};
use dudes::VOID;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class (tp, fp, fn) by direct enumeration over pixels.
fn brute_counts(pred: &[u8], gt: &[u8], classes: usize) -> Vec<(u64, u64, u64)> {
    (0..classes as u8)
        .map(|c| {
            let mut t = (0, 0, 0);
            for (&p, &g) in pred.iter().zip(gt) {
                if g == VOID {
                    continue;
                }
                match (p == c, g == c) {
                    (true, true) => t.0 += 1,
                    (true, false) => t.1 += 1,
                    (false, true) => t.2 += 1,
                    _ => {}
                }
            }
            t
        })
        .collect()
}

fn brute_auroc(scores: &[f32], positives: &[bool]) -> Option<f64> {
    let pos: Vec<f32> = scores.iter().zip(positives).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f32> = scores.iter().zip(positives).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn random_instance(rng: &mut ChaCha8Rng, classes: u8) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
    let gt = (0..h * w)
        .map(|_| if rng.gen_bool(0.15) { VOID } else { rng.gen_range(0..classes) })
        .collect();
    let pred = (0..h * w).map(|_| rng.gen_range(0..classes)).collect();
    (pred, gt)
}

#[test]
fn iou_matches_enumeration_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let classes = rng.gen_range(2..=5u8);
        let (pred, gt) = random_instance(&mut rng, classes);
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.add_maps(&pred, &gt).unwrap();
        let counts = brute_counts(&pred, &gt, classes as usize);
        let report = iou(&cm);
        for (c, &(tp, fp, fn_)) in counts.iter().enumerate() {
            let row: u64 = (0..classes as usize).map(|p| cm.count(c, p)).sum();
            let col: u64 = (0..classes as usize).map(|g| cm.count(g, c)).sum();
            assert_eq!(cm.count(c, c), tp);
            assert_eq!(col - tp, fp);
            assert_eq!(row - tp, fn_);
            let expect = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            assert_eq!(report.per_class[c], expect);
        }
        assert_eq!(cm.total(), gt.iter().filter(|&&g| g != VOID).count() as u64);
    }
}

#[test]
fn auroc_matches_pair_counting_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=100);
        // Coarse score grid so ties are common.
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..12) as f32 / 11.0).collect();
        let positives: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let fast = detection_auroc(&scores, &positives).unwrap();
        let slow = brute_auroc(&scores, &positives);
        match (fast, slow) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn streaming_confusion_equals_single_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut whole = ConfusionMatrix::new(4);
    let mut parts = ConfusionMatrix::new(4);
    for _ in 0..20 {
        let (pred, gt) = random_instance(&mut rng, 4);
        whole.add_maps(&pred, &gt).unwrap();
        let mut part = ConfusionMatrix::new(4);
        part.add_maps(&pred, &gt).unwrap();
        parts.merge(&part).unwrap();
    }
    assert_eq!(whole, parts);
}

proptest! {
    #[test]
    fn iou_matches_enumeration_on_8x8(
        cells in proptest::collection::vec((0u8..4, 0u8..5), 64)
    ) {
        let pred: Vec<u8> = cells.iter().map(|c| c.0).collect();
        let gt: Vec<u8> = cells.iter().map(|c| if c.1 == 4 { VOID } else { c.1 }).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.add_maps(&pred, &gt).unwrap();
        for (c, &(tp, fp, fn_)) in brute_counts(&pred, &gt, 4).iter().enumerate() {
            let expect = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            prop_assert_eq!(cm.iou().per_class[c], expect);
        }
    }

    #[test]
    fn void_regions_leave_counts_unchanged(
        cells in proptest::collection::vec((0u8..3, 0u8..3), 1..50),
        extra in proptest::collection::vec(0u8..3, 1..50),
    ) {
        let pred: Vec<u8> = cells.iter().map(|c| c.0).collect();
        let gt: Vec<u8> = cells.iter().map(|c| c.1).collect();
        let mut a = ConfusionMatrix::new(3);
        a.add_maps(&pred, &gt).unwrap();
        let mut b = a.clone();
        b.add_maps(&extra, &vec![VOID; extra.len()]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auroc_matches_pair_counting(
        cells in proptest::collection::vec((0u8..6, any::<bool>()), 2..100)
    ) {
        let scores: Vec<f32> = cells.iter().map(|c| c.0 as f32 * 0.1).collect();
        let positives: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let fast = detection_auroc(&scores, &positives).unwrap();
        let slow = brute_auroc(&scores, &positives);
        prop_assert_eq!(fast.is_some(), slow.is_some());
        if let (Some(a), Some(b)) = (fast, slow) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fraction_zero_is_plain_miou(
        cells in proptest::collection::vec((0u8..3, 0u8..4, 0u8..10), 1..80)
    ) {
        let pred: Vec<u8> = cells.iter().map(|c| c.0).collect();
        let gt: Vec<u8> = cells.iter().map(|c| if c.1 == 3 { VOID } else { c.1 }).collect();
        let unc: Vec<f32> = cells.iter().map(|c| c.2 as f32).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.add_maps(&pred, &gt).unwrap();
        let curve = sparsification_curve(&pred, &gt, &unc, 3, &DEFAULT_FRACTIONS).unwrap();
        prop_assert_eq!(curve[0].1, cm.iou().miou);
    }
}
