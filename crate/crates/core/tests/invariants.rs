use maskguide::attention::{
    attention_map, blend_tensors, total_loss, AttentionHead, BlendWeights, LossWeights,
};
use maskguide::mask::{rasterize_boxes, to_ground_truth, BinaryMask, RegionBox, RegionClass};
use maskguide::tape::Tape;
use maskguide::Tensor;
use proptest::prelude::*;

fn tensor(shape: [usize; 4], range: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn head() -> impl Strategy<Value = AttentionHead> {
    (-3.0..3.0f64, -3.0..3.0f64, -2.0..2.0f64).prop_map(|(a, b, c)| AttentionHead::new(a, b, c))
}

fn check_distributions(t: &Tensor, cells: usize) -> Result<(), TestCaseError> {
    for s in t.data().chunks(cells) {
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_maps_are_distributions(m in tensor([2, 3, 5, 4], 50.0), h in head()) {
        let a = attention_map(&m, &h).unwrap();
        prop_assert_eq!(a.shape(), &[2, 1, 5, 4]);
        check_distributions(&a, 20)?;
    }

    #[test]
    fn ground_truth_maps_are_distributions(
        bits in prop::collection::vec(any::<bool>(), 64),
        factor in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let mask = BinaryMask::new(8, 8, bits).unwrap();
        let side = 8 / factor;
        let gt = to_ground_truth(&mask, side, side).unwrap();
        prop_assert_eq!(gt.is_degenerate(), mask.is_empty());
        check_distributions(&Tensor::new(&[1, 1, side, side], gt.values().to_vec()).unwrap(), side * side)?;
    }

    #[test]
    fn attention_ignores_constant_shifts(m in tensor([1, 2, 3, 3], 5.0), h in head(), c in -10.0..10.0f64) {
        let a = attention_map(&m, &h).unwrap();
        let b = attention_map(&m.map(|v| v + c), &h).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in tensor([1, 1, 4, 4], 20.0), c in -100.0..100.0f64) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + c));
        let (sa, sb) = (tape.spatial_softmax(a).unwrap(), tape.spatial_softmax(b).unwrap());
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_blend_is_bit_exact(m in tensor([2, 3, 4, 4], 1e3), v in tensor([2, 1, 4, 4], 1.0)) {
        let out = blend_tensors(&m, &v, &v, BlendWeights::IDENTITY).unwrap();
        prop_assert_eq!(out, m);
    }

    #[test]
    fn blend_with_uniform_maps_is_a_scalar_factor(m in tensor([1, 2, 4, 4], 10.0)) {
        let u = Tensor::full(&[1, 1, 4, 4], 1.0 / 16.0);
        let out = blend_tensors(&m, &u, &u, BlendWeights::DEFAULT).unwrap();
        let factor = 0.3 + 0.7 / 16.0;
        for (o, x) in out.data().iter().zip(m.data()) {
            prop_assert!((o - factor * x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum(
        v in 0.0..10.0f64, c in 0.0..10.0f64, ce in 0.0..10.0f64,
        d in 0.0..2.0f64, l in 0.0..2.0f64, mu in 0.01..2.0f64,
    ) {
        let w = LossWeights::new(d, l, mu).unwrap();
        let b = total_loss(v, c, ce, w).unwrap();
        prop_assert_eq!(b.total, d * v + l * c + mu * ce);
        prop_assert!(b.total >= 0.0);
    }

    #[test]
    fn rasterized_boxes_cover_their_pixel_centers(
        x in 0.0..30.0f64, y in 0.0..30.0f64, w in 0.5..20.0f64, h in 0.5..20.0f64,
    ) {
        let b = RegionBox::new(RegionClass::Vein, x, y, w, h).unwrap();
        let mask = rasterize_boxes(&[b], 32, 32, RegionClass::Vein).unwrap();
        for py in 0..32 {
            for px in 0..32 {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let inside = cx >= x && cx < x + w && cy >= y && cy < y + h;
                prop_assert_eq!(mask.get(px, py), inside, "pixel ({}, {})", px, py);
            }
        }
    }
}

#[test]
fn blend_weights_must_sum_to_one() {
    assert!(BlendWeights::new(0.3, 0.5, 0.2).is_ok());
    assert!(BlendWeights::new(0.5, 0.5, 0.5).is_err());
    assert!(BlendWeights::new(1.2, -0.2, 0.0).is_err());
}

#[test]
fn empty_mask_degenerates_to_uniform() {
    let gt = to_ground_truth(&BinaryMask::empty(4, 4), 2, 2).unwrap();
    assert!(gt.is_degenerate());
    assert_eq!(gt.values(), &[0.25; 4]);
}
