mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracles::{brute_force_metrics, random_label_pair};
use spseg::head::{HeadConfig, HeadVariant};
use spseg::metrics::{cost_report, evaluate};
use spseg::Error;

proptest! {
    #[test]
    fn evaluate_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, truth, k, ignore) = random_label_pair(&mut rng);
        match (evaluate(&pred, &truth, k, ignore), brute_force_metrics(&pred, &truth, k, ignore)) {
            (Ok(r), Some(o)) => {
                prop_assert_eq!(r.pixel_acc.to_bits(), o.pixel_acc.to_bits());
                prop_assert_eq!(r.mean_acc.to_bits(), o.mean_acc.to_bits());
                prop_assert_eq!(r.mean_iu.to_bits(), o.mean_iu.to_bits());
                prop_assert_eq!(&r.per_class_iu, &o.per_class_iu);
                prop_assert_eq!(&r.confusion, &o.confusion);
                for (c, row) in r.confusion.iter().enumerate() {
                    let gt = truth.iter().filter(|&&t| t == c).count() as u64;
                    prop_assert_eq!(row.iter().sum::<u64>(), gt);
                }
            }
            (Err(Error::NoValidPixels), None) => {}
            (r, o) => prop_assert!(false, "{r:?} vs {o:?}"),
        }
    }
}

#[test]
fn hand_counted_two_class_case() {
    let r = evaluate(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
    assert_eq!(r.pixel_acc, 0.75);
    assert_eq!(r.per_class_iu, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((r.mean_iu - 0.5833).abs() < 1e-4);
    assert_eq!(r.mean_acc, 0.75);
}

#[test]
fn shape_mismatch_and_all_ignored() {
    assert!(evaluate(&[0, 1], &[0], 2, None).is_err());
    assert!(matches!(evaluate(&[0, 0], &[4, 4], 2, Some(4)), Err(Error::NoValidPixels)));
}

#[test]
fn cost_grows_with_budget_and_full_budget_is_dense() {
    let head = HeadConfig::new(HeadVariant::Resblock, 5376, 60, 1.0);
    let costs: Vec<_> = [250, 750, 1600]
        .iter()
        .map(|&b| cost_report(448, 448, b, &head, 10).unwrap())
        .collect();
    assert!(costs.windows(2).all(|w| w[0].sampled_total_macs < w[1].sampled_total_macs));
    assert!(costs.iter().all(|c| c.cost_ratio < 0.02));
    let full = cost_report(16, 16, 256, &head, 10).unwrap();
    assert_eq!(full.sampled_head_macs, full.dense_head_macs);
    assert!(cost_report(16, 16, 257, &head, 10).is_err());
}
