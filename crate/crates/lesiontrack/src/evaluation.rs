//! Pair-level and lesion-level statistics.
//!
//! Pair scores (`p_true`, ground-truth label) feed three analyses:
//!
//! * [`roc`] — the full ROC curve with trapezoidal AUC, sweeping one
//!   threshold step per distinct score so ties collapse into a single
//!   (possibly diagonal) segment;
//! * [`optimize_threshold`] — picks the decision threshold maximizing the
//!   geometric mean of sensitivity and specificity, evaluating every
//!   distinct-score midpoint plus the endpoints 0 and 1 (metrics are step
//!   functions of the threshold, so midpoints cover every reachable
//!   partition and cannot miss plateau edges the way a continuous sweep
//!   can);
//! * [`confusion`] — raw 2×2 counts at a fixed threshold.
//!
//! Lesion-level outcome tallies from
//! [`categorize_against_truth`](crate::tracking::categorize_against_truth)
//! are condensed into a [`DevelopmentReport`]; categories absent from the
//! truth are reported as absent rather than as a fabricated 0% rate.
//!
//! Everything here is a pure function of its inputs. A score counts as a
//! positive prediction when `score >= threshold`, the same rule the
//! tracking stage applies to its correspondence graph.

use crate::error::{Error, Result};
use crate::tracking::TruthTallies;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Decision threshold producing this point (`+inf` for the all-negative
    /// corner).
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// A ROC curve: operating points from the all-negative corner (0,0) to the
/// all-positive corner (1,1), sorted by threshold descending, plus the
/// trapezoidal area under the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Classification metrics at one decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub threshold: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub g_mean: f64,
    pub f1: f64,
}

/// 2×2 confusion counts. The positive class is "same lesion" (label
/// `true`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }
}

/// Per-category success rates of a tracking run; `None` marks a category
/// absent from the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevelopmentReport {
    /// All truly remaining lesions tracked with exactly the right edges.
    pub remaining_overall: Option<f64>,
    pub remaining_single: Option<f64>,
    pub split: Option<f64>,
    pub fused: Option<f64>,
    pub resolved: Option<f64>,
    pub new: Option<f64>,
}

fn reject_nan(scores: &[(f64, bool)]) -> Result<()> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    let pos = scores.iter().filter(|(_, l)| *l).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "both classes required: {pos} positive / {neg} negative scores"
        )));
    }
    Ok((pos, neg))
}

/// Builds the ROC curve of `(score, label)` pairs.
///
/// The sweep visits one threshold per distinct score, descending; tied
/// scores move as one group, producing a single diagonal segment instead
/// of an order-dependent staircase. Requires both classes present.
pub fn roc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    reject_nan(scores)?;
    let (pos, neg) = class_counts(scores)?;

    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("no NaN scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Counts the 2×2 confusion table at `threshold`. Total and infallible:
/// a score is a positive prediction iff `score >= threshold` (NaN scores
/// therefore count as negative predictions).
pub fn confusion(scores: &[(f64, bool)], threshold: f64) -> Confusion {
    let mut c = Confusion {
        true_positive: 0,
        false_positive: 0,
        false_negative: 0,
        true_negative: 0,
    };
    for &(score, label) in scores {
        let predicted = score >= threshold;
        match (predicted, label) {
            (true, true) => c.true_positive += 1,
            (true, false) => c.false_positive += 1,
            (false, true) => c.false_negative += 1,
            (false, false) => c.true_negative += 1,
        }
    }
    c
}

impl MetricsTable {
    /// Derives all metrics from confusion counts. Ratios with an empty
    /// denominator are reported as 0 so every field stays in `[0, 1]`.
    pub fn from_confusion(threshold: f64, c: &Confusion) -> MetricsTable {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let sensitivity = ratio(c.true_positive, c.true_positive + c.false_negative);
        let specificity = ratio(c.true_negative, c.true_negative + c.false_positive);
        let precision = ratio(c.true_positive, c.true_positive + c.false_positive);
        let accuracy = ratio(c.true_positive + c.true_negative, c.total());
        let g_mean = (sensitivity * specificity).sqrt();
        let f1 = if precision + sensitivity == 0.0 {
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        MetricsTable {
            threshold,
            accuracy,
            sensitivity,
            specificity,
            precision,
            g_mean,
            f1,
        }
    }
}

/// Finds the decision threshold maximizing the G-mean
/// `sqrt(sensitivity · specificity)` and returns the full metrics there.
///
/// Candidates are the midpoints between consecutive distinct scores plus
/// the endpoints 0 and 1 — every partition the step-constant metrics can
/// reach. Ties are broken toward higher sensitivity, then lower
/// threshold. Scores must be probabilities in `[0, 1]` with both classes
/// present.
pub fn optimize_threshold(scores: &[(f64, bool)]) -> Result<MetricsTable> {
    reject_nan(scores)?;
    class_counts(scores)?;
    if let Some((s, _)) = scores.iter().find(|(s, _)| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidInput(format!(
            "score {s} outside [0, 1]; threshold optimization assumes probabilities"
        )));
    }

    let mut distinct: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("no NaN scores"));
    distinct.dedup();

    let mut candidates = vec![0.0, 1.0];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));

    let mut best: Option<MetricsTable> = None;
    for t in candidates {
        let m = MetricsTable::from_confusion(t, &confusion(scores, t));
        let better = match &best {
            None => true,
            Some(b) => {
                m.g_mean > b.g_mean
                    || (m.g_mean == b.g_mean && m.sensitivity > b.sensitivity)
                    || (m.g_mean == b.g_mean
                        && m.sensitivity == b.sensitivity
                        && m.threshold < b.threshold)
            }
        };
        if better {
            best = Some(m);
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

/// Condenses outcome tallies into per-category success rates, leaving
/// categories absent from the truth as `None`.
pub fn development_report(tallies: &TruthTallies) -> DevelopmentReport {
    DevelopmentReport {
        remaining_overall: tallies.remaining_overall.rate(),
        remaining_single: tallies.remaining_single.rate(),
        split: tallies.split.rate(),
        fused: tallies.fused.rate(),
        resolved: tallies.resolved.rate(),
        new: tallies.new.rate(),
    }
}

/// Writes ROC points as `threshold,fpr,tpr` CSV rows.
pub fn write_roc_csv<W: Write>(mut w: W, curve: &RocCurve) -> std::io::Result<()> {
    writeln!(w, "threshold,fpr,tpr")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::CategoryTally;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Brute-force rank statistic P(s⁺ > s⁻) + ½·P(s⁺ = s⁻).
    fn mann_whitney(scores: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scores.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    fn random_scores(n: usize, seed: u64, grid: Option<u32>) -> Vec<(f64, bool)> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = match grid {
                    // Coarse grid forces plenty of ties.
                    Some(g) => rng.gen_range(0..=g) as f64 / g as f64,
                    None => rng.gen_range(0.0..=1.0),
                };
                (s, rng.gen_bool(0.5))
            })
            .collect()
    }

    #[test]
    fn perfectly_separated_scores_have_auc_one() {
        let scores = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        let curve = roc(&scores).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(curve.points.first().unwrap().tpr, 0.0);
        assert_eq!(curve.points.last().unwrap().tpr, 1.0);
        assert_eq!(curve.points.last().unwrap().fpr, 1.0);
    }

    #[test]
    fn constant_scores_give_the_diagonal_and_auc_half() {
        let scores = vec![(0.7, true), (0.7, false), (0.7, true), (0.7, false)];
        let curve = roc(&scores).unwrap();
        assert_eq!(curve.auc, 0.5);
        // One tied group: (0,0) then straight to (1,1).
        assert_eq!(curve.points.len(), 2);
        assert_eq!((curve.points[1].fpr, curve.points[1].tpr), (1.0, 1.0));
    }

    #[test]
    fn auc_matches_the_rank_statistic_on_random_pairs() {
        for (seed, grid) in [(1, None), (2, Some(20)), (3, Some(5))] {
            let scores = random_scores(200, seed, grid);
            let curve = roc(&scores).unwrap();
            let mw = mann_whitney(&scores);
            assert!(
                (curve.auc - mw).abs() < 1e-9,
                "auc {} vs rank statistic {mw}",
                curve.auc
            );
        }
    }

    #[test]
    fn single_class_input_is_rejected() {
        assert!(roc(&[(0.5, true), (0.7, true)]).is_err());
        assert!(roc(&[(0.5, false)]).is_err());
        assert!(optimize_threshold(&[(0.5, true)]).is_err());
        assert!(roc(&[(f64::NAN, true), (0.2, false)]).is_err());
    }

    #[test]
    fn roc_points_are_sorted_and_monotone() {
        let scores = random_scores(300, 9, Some(10));
        let curve = roc(&scores).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fpr <= w[1].fpr);
            assert!(w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn optimum_separating_midpoint_has_accuracy_one() {
        let scores = vec![(0.9, true), (0.7, true), (0.3, false), (0.2, false)];
        let m = optimize_threshold(&scores).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.g_mean, 1.0);
        assert_eq!(m.threshold, 0.5, "midpoint of 0.3 and 0.7");
    }

    #[test]
    fn reported_metrics_match_tabulated_reference_values() {
        // Counts engineered for sensitivity 0.881, specificity 0.800 and
        // precision ≈ 0.755: their G-mean lands at 0.84 and F1 near 0.82.
        let c = Confusion {
            true_positive: 881,
            false_negative: 119,
            false_positive: 286,
            true_negative: 1144,
        };
        let m = MetricsTable::from_confusion(0.5, &c);
        assert!((m.sensitivity - 0.881).abs() < 1e-12);
        assert!((m.specificity - 0.800).abs() < 1e-12);
        assert!((m.precision - 0.755).abs() < 5e-4);
        assert!((m.g_mean - 0.84).abs() < 5e-3, "g_mean {}", m.g_mean);
        assert!((m.f1 - 0.82).abs() < 1e-2, "f1 {}", m.f1);
    }

    #[test]
    fn midpoint_search_equals_fine_grid_sweep() {
        for seed in [11, 12, 13] {
            let scores = random_scores(150, seed, Some(25));
            let m = optimize_threshold(&scores).unwrap();
            let mut grid_best = 0.0f64;
            let mut t = 0.0;
            while t <= 1.0 + 1e-12 {
                let g = MetricsTable::from_confusion(t, &confusion(&scores, t)).g_mean;
                grid_best = grid_best.max(g);
                t += 1e-4;
            }
            assert!(
                (m.g_mean - grid_best).abs() < 1e-9,
                "midpoint {} vs grid {grid_best}",
                m.g_mean
            );
        }
    }

    #[test]
    fn ties_break_toward_higher_sensitivity_then_lower_threshold() {
        // Symmetric scores: thresholds 0.5-mirrored give equal g_mean.
        let scores = vec![(0.9, true), (0.6, false), (0.4, true), (0.1, false)];
        let m = optimize_threshold(&scores).unwrap();
        // Candidates 0.25 and 0.75 both give g_mean sqrt(0.5); 0.25 keeps
        // sensitivity 1.0 and wins.
        assert_eq!(m.sensitivity, 1.0);
        assert!((m.g_mean - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.threshold, 0.25);
    }

    #[test]
    fn confusion_examples() {
        let all_pos = vec![(1.0, true), (1.0, true), (1.0, true)];
        let c = confusion(&all_pos, 0.5);
        assert_eq!(c.false_negative, 0);
        assert_eq!(c.true_positive, 3);

        let scores = random_scores(100, 4, None);
        let c = confusion(&scores, 2.0);
        assert_eq!(c.true_positive, 0);
        assert_eq!(c.false_positive, 0);
        assert_eq!(c.total(), 100);
    }

    #[test]
    fn confusion_counts_match_a_hand_tally() {
        let scores = vec![
            (0.9, true),  // tp
            (0.5, false), // fp (>= threshold)
            (0.4, true),  // fn
            (0.3, false), // tn
            (0.5, true),  // tp
            (0.2, false), // tn
        ];
        let c = confusion(&scores, 0.5);
        assert_eq!(
            c,
            Confusion {
                true_positive: 2,
                false_positive: 1,
                false_negative: 1,
                true_negative: 2
            }
        );
    }

    #[test]
    fn development_report_keeps_absent_categories_absent() {
        let t = |total, correct| CategoryTally { total, correct };
        let tallies = TruthTallies {
            remaining_single: t(8, 7),
            split: t(0, 0),
            fused: t(2, 1),
            resolved: t(4, 4),
            new: t(0, 0),
            remaining_overall: t(10, 8),
        };
        let r = development_report(&tallies);
        assert_eq!(r.remaining_single, Some(0.875));
        assert_eq!(r.split, None);
        assert_eq!(r.fused, Some(0.5));
        assert_eq!(r.resolved, Some(1.0));
        assert_eq!(r.new, None);
        assert_eq!(r.remaining_overall, Some(0.8));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"split\":null"), "{json}");
    }

    #[test]
    fn roc_csv_has_header_and_corner_rows() {
        let scores = vec![(0.8, true), (0.3, false)];
        let curve = roc(&scores).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,fpr,tpr");
        assert_eq!(lines[1], "inf,0,0");
        assert_eq!(lines[2], "0.8,0,1");
        assert_eq!(lines[3], "0.3,1,1");
    }

    proptest! {
        #[test]
        fn auc_equals_rank_statistic_everywhere(
            raw in proptest::collection::vec((0u32..=8, any::<bool>()), 2..60)
        ) {
            let scores: Vec<(f64, bool)> =
                raw.iter().map(|&(s, l)| (s as f64 / 8.0, l)).collect();
            prop_assume!(scores.iter().any(|(_, l)| *l));
            prop_assume!(scores.iter().any(|(_, l)| !*l));
            let curve = roc(&scores).unwrap();
            prop_assert!((curve.auc - mann_whitney(&scores)).abs() < 1e-9);
        }

        #[test]
        fn metric_identities_hold_at_any_threshold(
            raw in proptest::collection::vec((0u32..=10, any::<bool>()), 1..50),
            threshold in 0.0f64..=1.0,
        ) {
            let scores: Vec<(f64, bool)> =
                raw.iter().map(|&(s, l)| (s as f64 / 10.0, l)).collect();
            let c = confusion(&scores, threshold);
            prop_assert_eq!(c.total(), scores.len());
            let m = MetricsTable::from_confusion(threshold, &c);
            let (tp, fp, fne, tn) = (
                c.true_positive as f64,
                c.false_positive as f64,
                c.false_negative as f64,
                c.true_negative as f64,
            );
            prop_assert_eq!(m.accuracy, (tp + tn) / scores.len() as f64);
            if tp + fne > 0.0 {
                prop_assert_eq!(m.sensitivity, tp / (tp + fne));
            }
            if tn + fp > 0.0 {
                prop_assert_eq!(m.specificity, tn / (tn + fp));
            }
            if tp + fp > 0.0 {
                prop_assert_eq!(m.precision, tp / (tp + fp));
            }
            prop_assert_eq!(m.g_mean, (m.sensitivity * m.specificity).sqrt());
            for v in [m.accuracy, m.sensitivity, m.specificity, m.precision, m.g_mean, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn roc_is_invariant_under_monotone_score_transforms(
            raw in proptest::collection::vec((0u32..=8, any::<bool>()), 2..60)
        ) {
            let scores: Vec<(f64, bool)> =
                raw.iter().map(|&(s, l)| (s as f64 / 8.0, l)).collect();
            prop_assume!(scores.iter().any(|(_, l)| *l));
            prop_assume!(scores.iter().any(|(_, l)| !*l));
            let transformed: Vec<(f64, bool)> = scores
                .iter()
                .map(|&(s, l)| (2.0 * s * s * s + 1.0, l)) // strictly increasing on [0,1]
                .collect();
            let a = roc(&scores).unwrap();
            let b = roc(&transformed).unwrap();
            prop_assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                prop_assert_eq!(p.fpr, q.fpr);
                prop_assert_eq!(p.tpr, q.tpr);
            }
            prop_assert_eq!(a.auc, b.auc);
        }

        #[test]
        fn optimizer_metrics_are_consistent_with_confusion(
            raw in proptest::collection::vec((0u32..=10, any::<bool>()), 2..50),
        ) {
            let scores: Vec<(f64, bool)> =
                raw.iter().map(|&(s, l)| (s as f64 / 10.0, l)).collect();
            prop_assume!(scores.iter().any(|(_, l)| *l));
            prop_assume!(scores.iter().any(|(_, l)| !*l));
            let m = optimize_threshold(&scores).unwrap();
            let again = MetricsTable::from_confusion(m.threshold, &confusion(&scores, m.threshold));
            prop_assert_eq!(m, again);
        }
    }
}
