mod common;

use std::collections::HashSet;

use brainformer::loss::*;
use brainformer::metrics::*;
use brainformer::LabelVolume;
use brainformer_tensor::{check_gradients, Coords, Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn hd95_matches_brute_force_on_random_masks() {
    let extents = [9, 8, 7];
    let mut r = rng(42);
    for i in 0..100 {
        let (a, b) = if i % 2 == 0 {
            (random_set(&mut r, extents, 100), random_set(&mut r, extents, 100))
        } else {
            (random_blob(&mut r, extents), random_blob(&mut r, extents))
        };
        assert!(a.len() <= 100 && b.len() <= 100);
        let got = hd95(&mask_of(extents, &a), &mask_of(extents, &b));
        assert_eq!(got, hd95_oracle(extents, &a, &b), "pair {i}");
    }
}

#[test]
fn unit_shifted_cubes_are_one_voxel_apart() {
    let cube = |o: usize| -> HashSet<P> {
        let mut s = HashSet::new();
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..2 {
                    s.insert([h + o + 2, w + 2, d + 2]);
                }
            }
        }
        s
    };
    let e = [8, 8, 8];
    assert_eq!(hd95(&mask_of(e, &cube(0)), &mask_of(e, &cube(1))), Some(1.0));
    assert_eq!(hd95_oracle(e, &cube(0), &cube(1)), Some(1.0));
    let one = |h| HashSet::from([[h, 3, 3]]);
    assert_eq!(hd95(&mask_of(e, &one(3)), &mask_of(e, &one(4))), Some(1.0));
}

#[test]
fn set_metrics_match_set_arithmetic() {
    let extents = [6, 6, 6];
    let mut r = rng(7);
    for _ in 0..100 {
        let (a, b) = (random_set(&mut r, extents, 100), random_set(&mut r, extents, 100));
        let (ma, mb) = (mask_of(extents, &a), mask_of(extents, &b));
        let inter = a.intersection(&b).count() as f64;
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let want_dice = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
        assert_eq!(dice(&ma, &mb), want_dice);
        if nb > 0.0 {
            assert_eq!(sensitivity(&ma, &mb), inter / nb);
        }
        if na > 0.0 {
            assert_eq!(ppv(&ma, &mb), inter / na);
        }
    }
}

#[test]
fn empty_set_conventions() {
    let e = [3, 3, 3];
    let empty = mask_of(e, &HashSet::new());
    let one = mask_of(e, &HashSet::from([[1, 1, 1]]));
    assert_eq!((dice(&empty, &empty), sensitivity(&empty, &empty), ppv(&empty, &empty)), (1.0, 1.0, 1.0));
    assert_eq!((dice(&empty, &one), sensitivity(&empty, &one), ppv(&empty, &one)), (0.0, 0.0, 0.0));
    assert_eq!((dice(&one, &empty), sensitivity(&one, &empty), ppv(&one, &empty)), (0.0, 0.0, 0.0));
    assert_eq!(hd95(&empty, &one), None);
    assert_eq!(hd95(&empty, &empty), None);
}

#[test]
fn report_json_and_table_cover_every_region() {
    let gt = LabelVolume::new([2, 2, 2], vec![0, 1, 2, 3, 0, 0, 1, 2]).unwrap();
    let pred = LabelVolume::zeros([2, 2, 2]);
    let rep = evaluate_labels(&pred, &gt).unwrap();
    let json = rep.to_json();
    for r in ["WT", "TC", "ET"] {
        for m in ["dice", "sensitivity", "ppv"] {
            assert_eq!(json[format!("{r}.{m}")], 0.0);
        }
        assert!(json[format!("{r}.hd95")].is_null());
        assert!(rep.to_table().contains(r));
    }
    let same = evaluate_labels(&gt, &gt).unwrap();
    for r in Region::ALL {
        let m = same.region(r);
        assert_eq!((m.dice, m.sensitivity, m.ppv, m.hd95), (1.0, 1.0, 1.0, Some(0.0)));
    }
    assert!(evaluate_labels(&LabelVolume::zeros([2, 2, 3]), &gt).is_err());
}

#[test]
fn region_membership() {
    let table = [(0u8, [false, false, false]), (1, [true, true, false]), (2, [true, false, false]), (3, [true, true, true])];
    for (label, want) in table {
        assert_eq!(Region::ALL.map(|r| r.contains(label)), want, "label {label}");
    }
}

#[test]
fn loss_by_hand() {
    // zero logits: every class probability is 1/4
    let labels = LabelVolume::new([1, 1, 2], vec![1, 3]).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[4, 1, 1, 2]).unwrap());
    let l = softmax_dice_loss(&mut tape, z, &labels).unwrap();
    let e = DICE_EPS;
    let present = (2.0 * 0.25 + e) / (0.5 + 1.0 + e);
    let absent = e / (0.5 + e);
    // classes 1 and 3 present, 0 and 2 absent
    let want = 1.0 - (2.0 * present + 2.0 * absent) / 4.0;
    assert!((tape.value(l).item().unwrap() - want).abs() < 1e-15);
}

#[test]
fn loss_near_zero_for_confident_correct_logits() {
    let labels = LabelVolume::new([2, 1, 2], vec![0, 1, 2, 3]).unwrap();
    let mut logits = Tensor::zeros(&[4, 2, 1, 2]).unwrap();
    for (i, &l) in labels.voxels().iter().enumerate() {
        logits.data_mut()[l as usize * 4 + i] = 40.0;
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits);
    let l = softmax_dice_loss(&mut tape, z, &labels).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-10);
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let labels = LabelVolume::zeros([2, 2, 2]);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 2, 2, 2]).unwrap());
    assert!(softmax_dice_loss(&mut tape, z, &labels).is_err());
    let z = tape.constant(Tensor::zeros(&[4, 2, 2, 1]).unwrap());
    assert!(softmax_dice_loss(&mut tape, z, &labels).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let labels = LabelVolume::new([2, 2, 2], vec![0, 1, 2, 3, 3, 1, 0, 2]).unwrap();
    let logits = randn(&[4, 2, 2, 2], 3);
    let reports = check_gradients(
        |tape, v| softmax_dice_loss(tape, v[0], &labels).map_err(to_tensor_err),
        &[logits],
        1e-6,
        Coords::All,
    )
    .unwrap();
    assert!(reports[0].max_rel_error < 1e-5, "{}", reports[0].max_rel_error);
}

fn random_labels(extents: P, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let n = extents.iter().product();
    LabelVolume::new(extents, (0..n).map(|_| r.random_range(0..4)).collect()).unwrap()
}

fn loss_at(logits: &Tensor, labels: &LabelVolume) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = softmax_dice_loss(&mut tape, z, labels).unwrap();
    tape.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dice_is_symmetric(seed in any::<u64>()) {
        let e = [5, 5, 4];
        let mut r = rng(seed);
        let (a, b) = (mask_of(e, &random_set(&mut r, e, 60)), mask_of(e, &random_set(&mut r, e, 60)));
        prop_assert_eq!(dice(&a, &b), dice(&b, &a));
        prop_assert_eq!(sensitivity(&a, &b), ppv(&b, &a));
        prop_assert_eq!(hd95(&a, &b), hd95(&b, &a));
    }

    #[test]
    fn identical_masks_are_perfect(seed in any::<u64>()) {
        let e = [5, 4, 4];
        let s = random_set(&mut rng(seed), e, 50);
        prop_assume!(!s.is_empty());
        let m = mask_of(e, &s);
        prop_assert_eq!((dice(&m, &m), sensitivity(&m, &m), ppv(&m, &m)), (1.0, 1.0, 1.0));
        prop_assert_eq!(hd95(&m, &m), Some(0.0));
    }

    #[test]
    fn regions_nest(seed in any::<u64>()) {
        let labels = random_labels([4, 3, 5], seed);
        let m = region_masks(&labels);
        prop_assert!(m.et.is_subset_of(&m.tc));
        prop_assert!(m.tc.is_subset_of(&m.wt));
        let hist = labels.histogram();
        prop_assert_eq!(hist.iter().sum::<usize>(), 60);
        prop_assert_eq!(m.wt.count(), hist[1] + hist[2] + hist[3]);
        prop_assert_eq!(m.tc.count(), hist[1] + hist[3]);
        prop_assert_eq!(m.et.count(), hist[3]);
    }

    #[test]
    fn loss_decreases_toward_target(seed in any::<u64>(), scale in 0.5f64..4.0) {
        let labels = random_labels([2, 2, 3], seed);
        let z0 = randn(&[4, 2, 2, 3], seed ^ 9);
        let target = brainformer::loss::one_hot(&labels);
        let mut prev = f64::INFINITY;
        for step in 0..8 {
            let t = step as f64 * 0.5;
            let z = Tensor::new(z0.shape().to_vec(), z0.data().iter().zip(target.data()).map(|(a, g)| a + t * scale * g).collect()).unwrap();
            let l = loss_at(&z, &labels);
            prop_assert!(l < prev, "step {}: {} !< {}", step, l, prev);
            prev = l;
        }
    }
}
