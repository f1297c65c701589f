//! Property tests for the core invariants: softmax normalization and
//! shift invariance, concat/split roundtrips, schedule monotonicity, dice
//! identities, argmax invariance of box selection, broadcast semantics, and
//! the affine combination law.

mod common;

use promptseg_core::data::{gen_synthetic, ShapeFamily, SyntheticSpec};
use promptseg_core::decoder::{calibrate, combine, predict_orig};
use promptseg_core::loss::dice_score;
use promptseg_core::optim::LrSchedule;
use promptseg_core::prompt::{mask_bbox, select_best_box, BoundingBox};
use promptseg_core::tensor::{concat_axis0, Tensor};
use proptest::prelude::*;

fn small_tensor(max_dim: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-50.0..50.0f64, r * c)
            .prop_map(move |data| Tensor::from_vec(&[r, c], data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalize_and_shift_invariant(
        t in small_tensor(6),
        shift in -100.0..100.0f64,
    ) {
        let y = t.softmax_lastdim().unwrap();
        let cols = t.shape()[1];
        for row in y.to_vec().chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = t.add_scalar(shift).softmax_lastdim().unwrap();
        for (a, b) in y.to_vec().iter().zip(shifted.to_vec()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_roundtrip_is_bit_exact(
        a in small_tensor(5),
        rows_b in 1usize..5,
    ) {
        let cols = a.shape()[1];
        let b = Tensor::full(&[rows_b, cols], 0.123456789);
        let joined = concat_axis0(&[a.clone(), b.clone()]).unwrap();
        let a_rows = a.shape()[0];
        let back_a = joined.slice_axis(0, 0, a_rows).unwrap();
        let back_b = joined.slice_axis(0, a_rows, rows_b).unwrap();
        prop_assert!(back_a.to_vec().iter().zip(a.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(back_b.to_vec().iter().zip(b.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lr_schedule_is_non_increasing(lr0 in 1e-6..1.0f64, iter_max in 1u64..500) {
        let sched = LrSchedule::new(lr0, iter_max).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=iter_max {
            let lr = sched.at(i).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        prop_assert_eq!(sched.at(iter_max).unwrap(), 0.0);
    }

    #[test]
    fn dice_score_symmetric_bounded_and_identity(
        bits_a in proptest::collection::vec(0u8..2, 16),
        bits_b in proptest::collection::vec(0u8..2, 16),
    ) {
        let a = Tensor::from_vec(&[4, 4], bits_a.iter().map(|&v| v as f64).collect()).unwrap();
        let b = Tensor::from_vec(&[4, 4], bits_b.iter().map(|&v| v as f64).collect()).unwrap();
        let ab = dice_score(&a, &b);
        let ba = dice_score(&b, &a);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        let nonempty = bits_a.iter().any(|&v| v == 1) || bits_b.iter().any(|&v| v == 1);
        if nonempty {
            prop_assert_eq!(ab == 1.0, bits_a == bits_b);
        } else {
            prop_assert_eq!(ab, 1.0);
        }
    }

    #[test]
    fn best_box_invariant_under_monotone_confidence_maps(
        confs in proptest::collection::vec(0.0..1.0f64, 1..8),
    ) {
        let boxes: Vec<BoundingBox> = confs
            .iter()
            .map(|&c| BoundingBox::new(0.0, 0.0, 4.0, 4.0, c).unwrap())
            .collect();
        let baseline = select_best_box(&boxes).map(|b| b as *const _ as usize);
        // strictly monotone maps on [0, 1]
        let transforms: [fn(f64) -> f64; 3] =
            [|c| c * 0.5, |c| c * c * 0.9 + 0.05 * c, |c| 1.0 - (1.0 - c) * 0.7];
        for f in transforms {
            let mapped: Vec<BoundingBox> = boxes
                .iter()
                .map(|b| BoundingBox::new(b.x1, b.y1, b.x2, b.y2, f(b.confidence)).unwrap())
                .collect();
            let chosen = select_best_box(&mapped).map(|b| {
                mapped.iter().position(|m| std::ptr::eq(m, b)).unwrap()
            });
            let base_idx = baseline.map(|ptr| {
                boxes
                    .iter()
                    .position(|m| m as *const _ as usize == ptr)
                    .unwrap()
            });
            prop_assert_eq!(chosen, base_idx);
        }
    }

    #[test]
    fn combine_is_affine_in_alpha(
        data_a in proptest::collection::vec(-10.0..10.0f64, 8),
        data_b in proptest::collection::vec(-10.0..10.0f64, 8),
        alpha in 0.0..1.0f64,
    ) {
        let m_orig = Tensor::from_vec(&[1, 2, 2, 2], data_a).unwrap();
        let m_new = Tensor::from_vec(&[1, 2, 2, 2], data_b).unwrap();
        let at_alpha = combine(&m_orig, &m_new, alpha).unwrap();
        let at_zero = combine(&m_orig, &m_new, 0.0).unwrap();
        for ((fa, f0), (o, n)) in at_alpha
            .to_vec()
            .iter()
            .zip(at_zero.to_vec())
            .zip(m_orig.to_vec().iter().zip(m_new.to_vec()))
        {
            prop_assert!((fa - f0 - alpha * (o - n)).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrated_masks_are_batch_constant(
        b in 1usize..4,
        n in 1usize..3,
        c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut r = common::rng(seed);
        let u = Tensor::randn(&[b, c, 3, 3], 1.0, &mut r);
        let h = Tensor::randn(&[b, n, c], 1.0, &mut r);
        let m = calibrate(&u, &h).unwrap();
        let first = m.slice_axis(0, 0, 1).unwrap().to_vec();
        for bi in 1..b {
            prop_assert_eq!(m.slice_axis(0, bi, 1).unwrap().to_vec(), first.clone());
        }
        // and it matches the independent loop reference
        let reference = common::calibrate_loop_reference(&u, &h);
        for (x, y) in m.to_vec().iter().zip(reference) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        // b=1 closed form: c * M_new == M_orig
        if b == 1 {
            let orig = predict_orig(&u, &h).unwrap();
            for (x, y) in m.to_vec().iter().zip(orig.to_vec()) {
                prop_assert!((x * c as f64 - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn oracle_box_is_tight_on_generated_masks() {
    // Shrinking the oracle box by one pixel on any side must exclude at
    // least one foreground pixel; the box always contains all of them.
    for (family, seed) in [(ShapeFamily::Ellipse, 3u64), (ShapeFamily::Rectangle, 4u64)] {
        let spec = SyntheticSpec {
            family,
            count: 12,
            seed,
            ..SyntheticSpec::default()
        };
        for sample in gen_synthetic(&spec).unwrap() {
            let (x1, y1, x2, y2) = mask_bbox(&sample.mask).expect("nonempty mask");
            let mask = sample.mask.to_vec();
            let w = sample.width();
            let mut contained = true;
            let mut on_left = false;
            let mut on_right = false;
            let mut on_top = false;
            let mut on_bottom = false;
            for y in 0..sample.height() {
                for x in 0..w {
                    if mask[y * w + x] > 0.5 {
                        if x < x1 || x > x2 || y < y1 || y > y2 {
                            contained = false;
                        }
                        on_left |= x == x1;
                        on_right |= x == x2;
                        on_top |= y == y1;
                        on_bottom |= y == y2;
                    }
                }
            }
            assert!(contained, "box must contain all foreground");
            assert!(
                on_left && on_right && on_top && on_bottom,
                "each side must touch foreground (tightness)"
            );
        }
    }
}
