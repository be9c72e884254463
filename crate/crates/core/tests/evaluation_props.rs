use proptest::prelude::*;

use ctforensics::evaluation::{
    area_verdict, real_false_positive_areas, scan_verdict, slice_metrics, AreaOutcome,
    AreaVerdictSpec, MetricsReport, SlicePrediction,
};
use ctforensics::Label;

fn brute_scan(labels: &[bool], n: usize, m: usize) -> bool {
    (0..=labels.len() - m).any(|s| labels[s..s + m].iter().filter(|&&p| p).count() >= n)
}

fn brute_area(pos: &[bool], central: usize, spec: &AreaVerdictSpec) -> AreaOutcome {
    let m = spec.window;
    let hit = (0..=pos.len() - m)
        .filter(|&s| s <= central && central < s + m)
        .any(|s| pos[s..s + m].iter().filter(|&&p| p).count() >= spec.threshold);
    if hit {
        AreaOutcome::TruePositive
    } else {
        AreaOutcome::FalseNegative
    }
}

proptest! {
    #[test]
    fn scan_rule_matches_brute_force(labels in prop::collection::vec(any::<bool>(), 10..40), n in 1usize..=10) {
        prop_assert_eq!(scan_verdict(&labels, n, 10).unwrap(), brute_scan(&labels, n, 10));
    }

    #[test]
    fn area_rule_matches_brute_force(
        pos in prop::collection::vec(any::<bool>(), 10..40),
        central in 0usize..40,
        k in 1usize..=10,
    ) {
        let spec = AreaVerdictSpec { window: 10, threshold: k };
        let central = central % pos.len();
        prop_assert_eq!(area_verdict(&pos, central, &spec).unwrap(), brute_area(&pos, central, &spec));
    }

    #[test]
    fn false_positive_areas_are_disjoint_and_start_and_end_positive(
        pos in prop::collection::vec(prop::bool::weighted(0.7), 0..40),
    ) {
        let spec = AreaVerdictSpec::default();
        let areas = real_false_positive_areas(&pos, &spec);
        for w in areas.windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        for &(a, b) in &areas {
            prop_assert!(a <= b && pos[a] && pos[b]);
        }
        // any qualifying window is covered by some area
        if pos.len() >= spec.window {
            for s in 0..=pos.len() - spec.window {
                if pos[s..s + spec.window].iter().filter(|&&p| p).count() >= spec.threshold {
                    let first = (s..).find(|&i| pos[i]).unwrap();
                    prop_assert!(areas.iter().any(|&(a, b)| a <= first && first <= b));
                }
            }
        }
    }

    #[test]
    fn metrics_are_consistent_with_counts(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let r = MetricsReport::from_counts(tp, tn, fp, fn_);
        prop_assert_eq!(r.total(), tp + tn + fp + fn_);
        match (r.precision, r.recall, r.f1) {
            (Some(p), Some(q), Some(f)) if p + q > 0.0 => {
                prop_assert!((f - 2.0 * p * q / (p + q)).abs() < 1e-12)
            }
            _ => {}
        }
        prop_assert_eq!(r.precision.is_none(), tp + fp == 0);
        prop_assert_eq!(r.recall.is_none(), tp + fn_ == 0);
    }
}

#[test]
fn boundary_windows() {
    let spec = AreaVerdictSpec::default();
    let mut nine = vec![true; 9];
    nine.push(false);
    assert_eq!(
        area_verdict(&nine, 4, &spec).unwrap(),
        AreaOutcome::TruePositive
    );
    let mut eight = vec![true; 8];
    eight.extend([false, false]);
    assert_eq!(
        area_verdict(&eight, 4, &spec).unwrap(),
        AreaOutcome::FalseNegative
    );
    assert!(scan_verdict(&nine, 9, 10).unwrap());
    assert!(!scan_verdict(&eight, 9, 10).unwrap());
    assert!(scan_verdict(&eight, 9, 11).is_err());
    assert!(area_verdict(&eight[..9], 4, &spec).is_err());
}

#[test]
fn slice_metrics_count_each_cell() {
    let p = |t: Label, y: Label| SlicePrediction {
        scan_id: "s".into(),
        slice_index: 0,
        label_pred: y,
        score: 0.0,
        ground_truth: Some(t),
        tamper_area_id: None,
    };
    let preds = vec![
        p(Label::Fake, Label::Fake),
        p(Label::Fake, Label::Real),
        p(Label::Real, Label::Real),
        p(Label::Real, Label::Real),
        p(Label::Real, Label::Fake),
    ];
    let r = slice_metrics(&preds).unwrap();
    assert_eq!((r.tp, r.fn_, r.tn, r.fp), (1, 1, 2, 1));
    assert_eq!(r.accuracy, Some(0.6));
    assert_eq!(r.precision, Some(0.5));
}
