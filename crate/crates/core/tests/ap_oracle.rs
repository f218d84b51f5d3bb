mod common;

use common::ap::{b, for_each_case, oracle_ap, to_detections, to_gts, B};
use maskguide::detect::{
    average_precision, iou, mean_ap, per_class_ap, ApWarning, Detection, GtBox,
};
use maskguide::mask::{RegionBox, RegionClass};
use proptest::prelude::*;
use std::collections::BTreeMap;

#[test]
fn matches_brute_force_oracle_on_exhaustive_grid() {
    let mut worst: f64 = 0.0;
    let cases = for_each_case(|dets, gts, t| {
        let got = average_precision(&to_detections(dets), &to_gts(gts), t)
            .unwrap()
            .ap;
        let want = oracle_ap(dets, gts, t);
        let diff = (got - want).abs();
        assert!(
            diff <= 1e-12,
            "dets {dets:?} gts {gts:?} thresh {t}: {got} vs {want}"
        );
        worst = worst.max(diff);
    });
    assert!(cases > 1_000_000, "grid too small: {cases}");
}

#[test]
fn oracle_reproduces_hand_computed_five_sixths() {
    let gts = [b(0, 0.0, 0.0, 10.0, 10.0), b(0, 20.0, 0.0, 10.0, 10.0)];
    let dets = [
        (gts[0], 0.9),
        (b(0, 50.0, 50.0, 5.0, 5.0), 0.8),
        (gts[1], 0.7),
    ];
    assert!((oracle_ap(&dets, &gts, 0.5) - 5.0 / 6.0).abs() < 1e-15);
    let got = average_precision(&to_detections(&dets), &to_gts(&gts), 0.5).unwrap();
    assert!((got.ap - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn empty_cases_carry_warnings() {
    let none = average_precision(&[], &[], 0.5).unwrap();
    assert_eq!((none.ap, none.warning), (1.0, Some(ApWarning::Empty)));
    let dets = to_detections(&[(b(0, 0.0, 0.0, 1.0, 1.0), 0.5)]);
    let no_gt = average_precision(&dets, &[], 0.5).unwrap();
    assert_eq!(
        (no_gt.ap, no_gt.warning),
        (0.0, Some(ApWarning::NoGroundTruth))
    );
}

#[test]
fn iou_examples() {
    let r = |x, y, w, h| RegionBox::new(RegionClass::Vein, x, y, w, h).unwrap();
    assert_eq!(iou(&r(0.0, 0.0, 10.0, 10.0), &r(0.0, 0.0, 10.0, 10.0)), 1.0);
    assert_eq!(
        iou(&r(0.0, 0.0, 10.0, 10.0), &r(20.0, 0.0, 10.0, 10.0)),
        0.0
    );
    assert!((iou(&r(0.0, 0.0, 10.0, 10.0), &r(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn mean_ap_examples() {
    let m = |v: f64, c: f64| BTreeMap::from([(RegionClass::Vein, v), (RegionClass::Contour, c)]);
    assert_eq!(mean_ap(&m(1.0, 1.0)).unwrap(), 1.0);
    assert_eq!(mean_ap(&m(1.0, 0.0)).unwrap(), 0.5);
    assert!(mean_ap(&BTreeMap::new()).is_err());
}

#[test]
fn classes_are_scored_separately() {
    let bx = |c, x| RegionBox::new(c, x, 0.0, 10.0, 10.0).unwrap();
    let gts = vec![
        (
            RegionClass::Vein,
            GtBox {
                region: bx(RegionClass::Vein, 0.0),
                image_id: "a".into(),
            },
        ),
        (
            RegionClass::Contour,
            GtBox {
                region: bx(RegionClass::Contour, 30.0),
                image_id: "a".into(),
            },
        ),
    ];
    // A contour-labelled detection on the vein GT must not count for veins.
    let dets = vec![
        (
            RegionClass::Contour,
            Detection::new("a", bx(RegionClass::Contour, 0.0), 0.9).unwrap(),
        ),
        (
            RegionClass::Contour,
            Detection::new("a", bx(RegionClass::Contour, 30.0), 0.8).unwrap(),
        ),
    ];
    let per = per_class_ap(&dets, &gts, 0.5).unwrap();
    assert_eq!(per[&RegionClass::Vein].ap, 0.0);
    assert_eq!(per[&RegionClass::Contour].ap, 0.5);
}

fn arb_box() -> impl Strategy<Value = B> {
    (
        0u8..2,
        0.0..40.0f64,
        0.0..40.0f64,
        1.0..20.0f64,
        1.0..20.0f64,
    )
        .prop_map(|(i, x, y, w, h)| b(i, x, y, w, h))
}

fn arb_case() -> impl Strategy<Value = (Vec<(B, f64)>, Vec<B>)> {
    (
        prop::collection::vec((arb_box(), 0.0..=1.0f64), 0..8),
        prop::collection::vec(arb_box(), 1..5),
    )
}

proptest! {
    #[test]
    fn ap_is_a_probability((dets, gts) in arb_case(), t in 0.05..=1.0f64) {
        let ap = average_precision(&to_detections(&dets), &to_gts(&gts), t).unwrap().ap;
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - oracle_ap(&dets, &gts, t)).abs() <= 1e-12);
    }

    #[test]
    fn removing_a_false_positive_never_lowers_ap((dets, gts) in arb_case(), t in 0.05..=1.0f64) {
        let full = average_precision(&to_detections(&dets), &to_gts(&gts), t).unwrap().ap;
        // A detection in an image with no GTs is a false positive wherever it ranks.
        let mut extended = dets.clone();
        extended.push((b(9, 0.0, 0.0, 5.0, 5.0), 0.5));
        let with_fp = average_precision(&to_detections(&extended), &to_gts(&gts), t).unwrap().ap;
        prop_assert!(with_fp <= full + 1e-12);
    }

    #[test]
    fn monotone_confidence_rescaling_is_invisible((dets, gts) in arb_case(), t in 0.05..=1.0f64) {
        let base = average_precision(&to_detections(&dets), &to_gts(&gts), t).unwrap().ap;
        let squashed: Vec<(B, f64)> = dets.iter().map(|&(bx, c)| (bx, c * c * 0.5)).collect();
        let again = average_precision(&to_detections(&squashed), &to_gts(&gts), t).unwrap().ap;
        prop_assert!((base - again).abs() <= 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
        let r = |x: B| RegionBox::new(RegionClass::Vein, x.x, x.y, x.w, x.h).unwrap();
        let (ab, ba) = (iou(&r(a), &r(c)), iou(&r(c), &r(a)));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}
