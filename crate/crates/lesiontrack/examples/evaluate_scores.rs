//! Evaluation statistics: ROC curves, AUC, confusion and G-mean optimum.
//!
//! The evaluation module computes ROC curves by sweeping every distinct
//! score as a threshold, integrates the AUC with the trapezoid rule, and
//! picks the deployment threshold by maximizing the geometric mean of
//! sensitivity and specificity. This example runs those statistics on a
//! synthetic score set and cross-checks the AUC against the
//! Wilcoxon–Mann–Whitney rank form.
//!
//! Run with:
//!
//! ```text
//! cargo run --release -p lesiontrack --example evaluate_scores
//! ```

use lesiontrack::evaluation::{confusion, optimize_threshold, roc, MetricsTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn main() -> lesiontrack::Result<()> {
    // Two overlapping score populations: true pairs score high on
    // average, false pairs low.
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let mut scores: Vec<(f64, bool)> = Vec::new();
    for _ in 0..300 {
        scores.push((rng.gen::<f64>().powf(0.35), true));
        scores.push((rng.gen::<f64>().powf(2.5), false));
    }

    let curve = roc(&scores)?;
    println!(
        "ROC over {} scores: {} points, AUC {:.4}",
        scores.len(),
        curve.points.len(),
        curve.auc
    );

    // The trapezoid AUC equals the probability that a random true pair
    // outscores a random false pair (ties count half).
    let mut wins = 0.0;
    let mut total = 0.0;
    for (s_true, _) in scores.iter().filter(|(_, l)| *l) {
        for (s_false, _) in scores.iter().filter(|(_, l)| !*l) {
            total += 1.0;
            if s_true > s_false {
                wins += 1.0;
            } else if s_true == s_false {
                wins += 0.5;
            }
        }
    }
    println!(
        "rank-statistic AUC {:.4} (difference {:.2e})",
        wins / total,
        (curve.auc - wins / total).abs()
    );

    let best = optimize_threshold(&scores)?;
    println!(
        "\nG-mean optimum: threshold {:.4} -> G-mean {:.4}",
        best.threshold, best.g_mean
    );
    for threshold in [0.25, best.threshold, 0.75] {
        let table = MetricsTable::from_confusion(threshold, &confusion(&scores, threshold));
        println!(
            "threshold {:.4}: accuracy {:.3}, sensitivity {:.3}, specificity {:.3}, G-mean {:.3}, F1 {:.3}",
            table.threshold, table.accuracy, table.sensitivity, table.specificity, table.g_mean, table.f1
        );
    }
    Ok(())
}
