//! Dice loss and metric formulas against hand counts, algebraic identities,
//! and finite differences.

mod common;

use ardu::objective::{
    confusion_counts, dice_loss, mean_metrics, metrics, threshold, ConfusionCounts, DiceConfig,
};
use ardu::tensor::Tensor;
use common::{check_grads, TestRng};
use proptest::prelude::*;

fn t(shape: [usize; 4], data: &[f32]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn dice_loss_zero_on_perfect_binary_prediction() {
    let target = t([1, 1, 2, 2], &[1.0, 0.0, 1.0, 1.0]);
    for lambda in [0.5, 1.0, 7.0] {
        let loss = dice_loss(&target, &target, lambda).unwrap().item();
        assert_eq!(loss, 0.0, "lambda {lambda}");
    }
}

#[test]
fn dice_loss_zero_when_both_empty() {
    let zero = Tensor::zeros([1, 1, 3, 3]);
    assert_eq!(dice_loss(&zero, &zero, 1.0).unwrap().item(), 0.0);
}

#[test]
fn dice_loss_single_pixel_half() {
    // y = 1, pred = 0, lambda = 1: 1 - 1/2.
    let pred = t([1, 1, 1, 1], &[0.0]);
    let target = t([1, 1, 1, 1], &[1.0]);
    assert_eq!(dice_loss(&pred, &target, 1.0).unwrap().item(), 0.5);
}

#[test]
fn dice_loss_rejects_shape_mismatch() {
    let a = Tensor::zeros([1, 1, 2, 2]);
    let b = Tensor::zeros([1, 1, 2, 3]);
    assert!(dice_loss(&a, &b, 1.0).is_err());
}

#[test]
fn dice_loss_gradient_matches_finite_differences() {
    let mut rng = TestRng::new(3);
    let pred = rng.tensor([2, 1, 4, 4], 0.05, 0.95);
    let target_data: Vec<f32> = rng
        .uniform(32, 0.0, 1.0)
        .iter()
        .map(|v| f32::from(*v > 0.5))
        .collect();
    let target = t([2, 1, 4, 4], &target_data);
    check_grads(
        &[&pred],
        &mut || dice_loss(&pred, &target, 1.0).unwrap(),
        30,
        1e-3,
        1e-3,
        "dice loss",
    );
}

#[test]
fn soft_and_hard_dice_agree_on_binary_predictions() {
    let mut rng = TestRng::new(4);
    for seed in 0..10 {
        let mut draw = TestRng::new(seed + 40);
        let bits = |r: &mut TestRng| -> Vec<f32> {
            r.uniform(25, 0.0, 1.0).iter().map(|v| f32::from(*v > 0.4)).collect()
        };
        let pred = t([1, 1, 5, 5], &bits(&mut draw));
        let target = t([1, 1, 5, 5], &bits(&mut rng));
        let soft = 1.0 - dice_loss(&pred, &target, 1e-7).unwrap().item() as f64;
        let hard = metrics(&confusion_counts(&pred, &target).unwrap()).dsc;
        assert!((soft - hard).abs() < 1e-4, "seed {seed}: soft {soft} hard {hard}");
    }
}

#[test]
fn confusion_counts_hand_oracle() {
    let pred = t([1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
    let target = t([1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]);
    let c = confusion_counts(&pred, &target).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });

    let same = confusion_counts(&target, &target).unwrap();
    assert_eq!((same.fp, same.fn_), (0, 0));

    let complement = t([1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
    let c = confusion_counts(&complement, &target).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
}

#[test]
fn confusion_counts_reject_non_binary() {
    let soft = t([1, 1, 1, 2], &[0.5, 1.0]);
    let target = t([1, 1, 1, 2], &[1.0, 0.0]);
    assert!(confusion_counts(&soft, &target).is_err());
    assert!(confusion_counts(&target, &soft).is_err());
}

#[test]
fn metrics_substitution_and_conventions() {
    let m = metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 });
    assert_eq!(m.dsc, 0.5);
    assert!((m.iou - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.recall, 0.5);
    assert_eq!(m.precision, 0.5);

    let perfect = metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 3 });
    assert_eq!((perfect.dsc, perfect.iou, perfect.recall, perfect.precision), (1.0, 1.0, 1.0, 1.0));

    let both_empty = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
    assert_eq!(
        (both_empty.dsc, both_empty.iou, both_empty.recall, both_empty.precision),
        (1.0, 1.0, 1.0, 1.0)
    );

    // Empty target, nonempty prediction.
    let spurious = metrics(&ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 6 });
    assert_eq!((spurious.dsc, spurious.recall), (0.0, 0.0));

    // Empty prediction, nonempty target.
    let missed = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 6 });
    assert_eq!((missed.dsc, missed.precision), (0.0, 0.0));
}

#[test]
fn dsc_iou_identity_over_random_counts() {
    let mut rng = TestRng::new(5);
    for _ in 0..1000 {
        let draw = rng.uniform(4, 0.0, 50.0);
        let c = ConfusionCounts {
            tp: draw[0] as u64,
            fp: draw[1] as u64,
            fn_: draw[2] as u64,
            tn: draw[3] as u64,
        };
        let m = metrics(&c);
        assert!(
            (m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12,
            "counts {c:?}"
        );
    }
}

#[test]
fn threshold_edges_and_validation() {
    let pred = t([1, 1, 1, 3], &[0.49, 0.5, 0.51]);
    let bin = threshold(&pred, 0.5).unwrap();
    assert_eq!(bin.to_vec(), vec![0.0, 1.0, 1.0]);
    assert!(threshold(&pred, 0.0).is_err());
    assert!(threshold(&pred, 1.0).is_err());

    let zeros = Tensor::zeros([1, 1, 2, 2]);
    assert!(threshold(&zeros, 0.5).unwrap().to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn dice_config_validation() {
    assert!(DiceConfig::default().validate().is_ok());
    assert!(DiceConfig { lambda: 0.0, threshold: 0.5 }.validate().is_err());
    assert!(DiceConfig { lambda: 1.0, threshold: 1.0 }.validate().is_err());
}

#[test]
fn mean_metrics_averages_per_image() {
    let a = metrics(&ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 3 });
    let b = metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    let mean = mean_metrics(&[a, b]);
    assert_eq!(mean.dsc, 0.75);
    assert_eq!(mean.precision, 0.75);
}

#[test]
fn percent_formatting_two_decimals() {
    let m = metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    assert_eq!(m.as_percent_row(), "50.00\t33.33\t50.00\t50.00");
}

proptest! {
    #[test]
    fn dice_loss_stays_in_unit_interval(
        seed in 0u64..1000,
        lambda in 0.01f32..10.0,
    ) {
        let mut rng = TestRng::new(seed);
        let pred = rng.tensor([1, 1, 3, 3], 0.0, 1.0);
        let bits: Vec<f32> = rng.uniform(9, 0.0, 1.0).iter().map(|v| f32::from(*v > 0.5)).collect();
        let target = t([1, 1, 3, 3], &bits);
        let loss = dice_loss(&pred, &target, lambda).unwrap().item();
        prop_assert!((0.0..1.0).contains(&loss), "loss {loss}");
    }

    #[test]
    fn raising_threshold_never_adds_foreground(seed in 0u64..500, lo in 0.1f32..0.5) {
        let mut rng = TestRng::new(seed);
        let pred = rng.tensor([1, 1, 4, 4], 0.0, 1.0);
        let hi = lo + 0.3;
        let at_lo = threshold(&pred, lo).unwrap();
        let at_hi = threshold(&pred, hi).unwrap();
        for (a, b) in at_lo.data().iter().zip(at_hi.data().iter()) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn dsc_identity_property(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, tn in 0u64..100) {
        let m = metrics(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
    }
}
