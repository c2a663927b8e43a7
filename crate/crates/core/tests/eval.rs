use evtex_core::detector::{decode, GridOutput};
use evtex_core::eval::{compute_ap, compute_seqasr, sequence_detected, ScoredBox, MATCH_IOU};
use evtex_core::geometry::BBox;
use proptest::prelude::*;

mod common;
use common::brute_force_ap;

fn arb_case() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<Option<BBox>>)> {
    let gt = prop::collection::vec(
        prop::option::weighted(0.8, (0.0..40.0f64, 0.0..40.0f64, 4.0..20.0f64, 4.0..20.0f64)),
        1..=10,
    );
    gt.prop_flat_map(|gt| {
        let n = gt.len();
        let gt: Vec<Option<BBox>> = gt.into_iter().map(|g| g.map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))).collect();
        (Just(gt), prop::collection::vec((0..n, -4.0..4.0f64, -4.0..4.0f64, 0.7..1.3f64), 0..=20))
    })
    .prop_flat_map(|(gt, dets)| {
        let k = dets.len();
        (Just(gt), Just(dets), Just((0..k).collect::<Vec<usize>>()).prop_shuffle())
    })
    .prop_map(|(gt, dets, ranks)| {
        let boxes = dets
            .iter()
            .zip(&ranks)
            .map(|(&(s, dx, dy, sc), &r)| {
                let anchor = gt[s].unwrap_or(BBox::new(10.0, 10.0, 20.0, 20.0));
                let [cx, cy] = anchor.center();
                let (hw, hh) = (anchor.width() * sc / 2.0, anchor.height() * sc / 2.0);
                ScoredBox {
                    sequence: s,
                    bbox: BBox::new(cx + dx - hw, cy + dy - hh, cx + dx + hw, cy + dy + hh),
                    conf: (r as f64 + 1.0) / 32.0,
                }
            })
            .collect();
        (boxes, gt)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ap_matches_brute_force((dets, gt) in arb_case()) {
        let fast = compute_ap(&dets, &gt, MATCH_IOU);
        let slow = brute_force_ap(&dets, &gt);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

proptest! {
    #[test]
    fn ap_is_invariant_under_monotone_rescoring((dets, gt) in arb_case()) {
        let rescored: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { conf: (3.0 * d.conf).exp() - 7.0, ..*d }).collect();
        prop_assert_eq!(compute_ap(&dets, &gt, MATCH_IOU), compute_ap(&rescored, &gt, MATCH_IOU));
    }

    #[test]
    fn seqasr_is_exact(flags in prop::collection::vec(any::<bool>(), 1..50)) {
        let n = flags.iter().filter(|&&f| f).count();
        let v = compute_seqasr(&flags).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, 1.0 - n as f64 / flags.len() as f64);
    }

    #[test]
    fn raising_threshold_never_adds_detections(
        cells in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..48.0f64, 0.0..48.0f64, 2.0..16.0f64), 1..40),
        lo in 0.001..0.5f64,
        bump in 0.0..0.5f64,
    ) {
        let grid = GridOutput {
            obj: cells.iter().map(|c| c.0).collect(),
            cls: cells.iter().map(|c| c.1).collect(),
            boxes: cells.iter().map(|c| BBox::new(c.2, c.3, c.2 + c.4, c.3 + c.4)).collect(),
        };
        let gt = Some(BBox::new(10.0, 10.0, 30.0, 40.0));
        let low = decode(&grid, lo);
        let high = decode(&grid, (lo + bump).min(0.999));
        prop_assert!(high.len() <= low.len());
        let boxes = |d: &[evtex_core::detector::Detection]| d.iter().map(|d| d.bbox).collect::<Vec<_>>();
        prop_assert!(sequence_detected(&boxes(&low), gt, MATCH_IOU) || !sequence_detected(&boxes(&high), gt, MATCH_IOU));
    }
}

#[test]
fn ap_perfect_and_undefined() {
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    let d = ScoredBox { sequence: 0, bbox: g, conf: 0.9 };
    assert_eq!(compute_ap(&[d], &[Some(g)], MATCH_IOU), Some(1.0));
    assert_eq!(compute_ap(&[d], &[None], MATCH_IOU), None);
    assert_eq!(compute_ap(&[], &[Some(g)], MATCH_IOU), Some(0.0));
}

#[test]
fn ap_ranks_false_positive_first() {
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    let fp = ScoredBox { sequence: 0, bbox: BBox::new(30.0, 30.0, 40.0, 40.0), conf: 0.9 };
    let tp = ScoredBox { sequence: 0, bbox: g, conf: 0.5 };
    let ap = compute_ap(&[fp, tp], &[Some(g)], MATCH_IOU).unwrap();
    assert!((ap - 0.5).abs() < 1e-12);
}

#[test]
fn seqasr_examples() {
    let mut flags = vec![true; 4];
    flags.extend([false; 6]);
    assert!((compute_seqasr(&flags).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(compute_seqasr(&[true; 5]).unwrap(), 0.0);
    assert_eq!(compute_seqasr(&[false; 5]).unwrap(), 1.0);
    assert!(compute_seqasr(&[]).is_err());
}

#[test]
fn detection_requires_iou_match() {
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert!(!sequence_detected(&[BBox::new(20.0, 20.0, 30.0, 30.0)], Some(g), MATCH_IOU));
    assert!(sequence_detected(&[BBox::new(0.0, 0.0, 10.0, 11.0)], Some(g), MATCH_IOU));
    assert!(!sequence_detected(&[g], None, MATCH_IOU));
}
