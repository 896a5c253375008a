//! Correspondence graph construction and per-lesion development outcomes.
//!
//! Every candidate lesion pair is scored by the classifier; scores at or
//! above the decision threshold become *decided* edges of a bipartite
//! graph over baseline and follow-up lesions. No uniqueness constraint or
//! matching optimization is applied — several assignments (a split or
//! fusion) or none (a resolved or new lesion) are all meaningful results.
//! The outcome of every lesion then follows from the decided edge
//! structure alone:
//!
//! * baseline side: [`Resolved`](BaselineOutcome::Resolved) (no decided
//!   edge), [`Split`](BaselineOutcome::Split) (≥ 2 decided edges),
//!   [`FusedMember`](BaselineOutcome::FusedMember) (exactly one decided
//!   edge, into a follow-up lesion shared with another baseline lesion)
//!   or [`RemainingSingle`](BaselineOutcome::RemainingSingle) (one
//!   decided edge, exclusively held);
//! * follow-up side: [`Matched`](FollowupOutcome::Matched) (any decided
//!   edge) or [`New`](FollowupOutcome::New).
//!
//! A baseline lesion participating in both a split and a fusion is
//! categorized `Split`; `FusedMember` applies only when the split
//! condition is absent.

use crate::error::{Error, Result};
use crate::net::SiameseNet;
use crate::patch::{candidate_pairs, extract_pair, PatchSpec, RoiMargins};
use crate::volume::{label_mask, Lesion, ScanPair};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Development outcome of a baseline lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineOutcome {
    RemainingSingle,
    Split,
    FusedMember,
    Resolved,
}

/// Development outcome of a follow-up lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FollowupOutcome {
    Matched,
    New,
}

/// One scored candidate correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub baseline_id: u32,
    pub followup_id: u32,
    pub p_true: f64,
    /// `p_true >= threshold`.
    pub decided: bool,
}

/// The thresholded correspondence graph plus per-lesion outcomes.
///
/// The outcome maps cover *every* lesion of their scan — baseline lesions
/// without any candidate partner appear as `Resolved`, follow-up lesions
/// appearing in no candidate pair as `New`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentReport {
    pub edges: Vec<ScoredEdge>,
    pub baseline_outcomes: BTreeMap<u32, BaselineOutcome>,
    pub followup_outcomes: BTreeMap<u32, FollowupOutcome>,
    /// Decision threshold applied to `p_true`.
    pub threshold: f64,
    /// SHA-256 of the model checkpoint that produced the scores, when the
    /// scores came from a saved model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checkpoint_sha256: Option<String>,
}

/// Scores every candidate lesion pair of a registered scan pair and
/// derives each lesion's outcome at the given threshold.
///
/// Lesions are taken from the two mask volumes; candidates are generated
/// with the default ROI margins. `spec` must match the network's input
/// (it selects nothing on its own but guards against scoring patches the
/// model was not trained for).
pub fn track(
    scanpair: &ScanPair,
    model: &SiameseNet,
    spec: PatchSpec,
    threshold: f64,
) -> Result<AssignmentReport> {
    if !threshold.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite decision threshold {threshold}"
        )));
    }
    if spec != model.spec() {
        return Err(Error::InvalidInput(format!(
            "patch spec {spec} does not match the model's input spec {}",
            model.spec()
        )));
    }
    let transform = scanpair.transform()?;
    let baseline_lesions = label_mask(&scanpair.baseline.mask)?;
    let followup_lesions = label_mask(&scanpair.followup.mask)?;
    let candidates = candidate_pairs(
        &baseline_lesions,
        &followup_lesions,
        transform,
        RoiMargins::default(),
    );

    let by_id = |lesions: &[Lesion]| -> BTreeMap<u32, usize> {
        lesions.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    };
    let base_idx = by_id(&baseline_lesions);
    let follow_idx = by_id(&followup_lesions);

    // Patch extraction parallelizes over pairs; order is preserved.
    let extracted = candidates
        .par_iter()
        .map(|c| {
            let b = &baseline_lesions[base_idx[&c.baseline_id]];
            let f = &followup_lesions[follow_idx[&c.followup_id]];
            extract_pair(b, f, transform, &spec, scanpair)
                .map_err(|e| with_pair_context(e, c.baseline_id, c.followup_id))
        })
        .collect::<Result<Vec<_>>>()?;

    let patch_refs: Vec<_> = extracted
        .iter()
        .map(|r| (&r.baseline_patch, &r.followup_patch))
        .collect();
    let scores = model.forward_pairs(&patch_refs)?;

    let edges: Vec<ScoredEdge> = candidates
        .iter()
        .zip(&scores)
        .map(|(c, s)| ScoredEdge {
            baseline_id: c.baseline_id,
            followup_id: c.followup_id,
            p_true: s.p_true,
            decided: s.p_true >= threshold,
        })
        .collect();

    let baseline_ids: Vec<u32> = baseline_lesions.iter().map(|l| l.id).collect();
    let followup_ids: Vec<u32> = followup_lesions.iter().map(|l| l.id).collect();
    let (baseline_outcomes, followup_outcomes) =
        derive_outcomes(&baseline_ids, &followup_ids, &edges)?;

    Ok(AssignmentReport {
        edges,
        baseline_outcomes,
        followup_outcomes,
        threshold,
        model_checkpoint_sha256: None,
    })
}

/// Attaches the offending pair to a propagated extraction/model error.
fn with_pair_context(e: Error, baseline_id: u32, followup_id: u32) -> Error {
    let tag = format!("pair (baseline {baseline_id} → follow-up {followup_id})");
    match e {
        Error::Dimension(m) => Error::Dimension(format!("{tag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{tag}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("{tag}: {m}")),
        Error::Usage(m) => Error::Usage(format!("{tag}: {m}")),
        other => other,
    }
}

/// Derives every lesion's outcome from the decided edge structure. Pure
/// graph logic: the scores themselves play no further role.
///
/// `baseline_ids`/`followup_ids` enumerate *all* lesions of each scan
/// (also the ones without edges); edges must reference known ids and no
/// pair may appear twice.
pub fn derive_outcomes(
    baseline_ids: &[u32],
    followup_ids: &[u32],
    edges: &[ScoredEdge],
) -> Result<(BTreeMap<u32, BaselineOutcome>, BTreeMap<u32, FollowupOutcome>)> {
    let base_set: BTreeSet<u32> = baseline_ids.iter().copied().collect();
    let follow_set: BTreeSet<u32> = followup_ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for e in edges {
        if !base_set.contains(&e.baseline_id) {
            return Err(Error::InvalidInput(format!(
                "edge references unknown baseline lesion {}",
                e.baseline_id
            )));
        }
        if !follow_set.contains(&e.followup_id) {
            return Err(Error::InvalidInput(format!(
                "edge references unknown follow-up lesion {}",
                e.followup_id
            )));
        }
        if !seen.insert((e.baseline_id, e.followup_id)) {
            return Err(Error::InvalidInput(format!(
                "duplicate edge (baseline {} → follow-up {})",
                e.baseline_id, e.followup_id
            )));
        }
    }

    // Decided partner sets per lesion.
    let mut partners_of_base: BTreeMap<u32, BTreeSet<u32>> =
        base_set.iter().map(|&id| (id, BTreeSet::new())).collect();
    let mut partners_of_follow: BTreeMap<u32, BTreeSet<u32>> =
        follow_set.iter().map(|&id| (id, BTreeSet::new())).collect();
    for e in edges.iter().filter(|e| e.decided) {
        partners_of_base
            .get_mut(&e.baseline_id)
            .expect("validated id")
            .insert(e.followup_id);
        partners_of_follow
            .get_mut(&e.followup_id)
            .expect("validated id")
            .insert(e.baseline_id);
    }

    let baseline_outcomes = partners_of_base
        .iter()
        .map(|(&id, partners)| {
            let outcome = match partners.len() {
                0 => BaselineOutcome::Resolved,
                1 => {
                    let f = partners.iter().next().expect("one partner");
                    if partners_of_follow[f].len() >= 2 {
                        BaselineOutcome::FusedMember
                    } else {
                        BaselineOutcome::RemainingSingle
                    }
                }
                _ => BaselineOutcome::Split,
            };
            (id, outcome)
        })
        .collect();
    let followup_outcomes = partners_of_follow
        .iter()
        .map(|(&id, partners)| {
            let outcome = if partners.is_empty() {
                FollowupOutcome::New
            } else {
                FollowupOutcome::Matched
            };
            (id, outcome)
        })
        .collect();
    Ok((baseline_outcomes, followup_outcomes))
}

/// Per-category tally of correctly categorized lesions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTally {
    /// Lesions whose ground-truth development falls in this category.
    pub total: usize,
    /// Of those, lesions the report handled correctly.
    pub correct: usize,
}

impl CategoryTally {
    /// Success rate, or `None` when the category is absent from the truth.
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Tallies of [`categorize_against_truth`], one per truth category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthTallies {
    pub remaining_single: CategoryTally,
    pub split: CategoryTally,
    pub fused: CategoryTally,
    pub resolved: CategoryTally,
    pub new: CategoryTally,
    /// All truly remaining lesions (single, split and fused together),
    /// counted correct purely by edge-set equality.
    pub remaining_overall: CategoryTally,
}

impl TruthTallies {
    /// Adds another set of tallies (e.g. a further case of a test split)
    /// into this one, category by category.
    pub fn absorb(&mut self, other: &TruthTallies) {
        for (mine, theirs) in [
            (&mut self.remaining_single, other.remaining_single),
            (&mut self.split, other.split),
            (&mut self.fused, other.fused),
            (&mut self.resolved, other.resolved),
            (&mut self.new, other.new),
            (&mut self.remaining_overall, other.remaining_overall),
        ] {
            mine.total += theirs.total;
            mine.correct += theirs.correct;
        }
    }
}

/// Compares a report against ground-truth correspondence edges.
///
/// Truth outcomes are derived from `truth_edges` with the same graph
/// rules. A truly remaining lesion (single/split/fused) counts as tracked
/// successfully iff its decided edge set equals its truth edge set — and,
/// for the subcategory tallies, its predicted category matches; resolved
/// and new lesions count by category match (for them the two criteria
/// coincide).
pub fn categorize_against_truth(
    report: &AssignmentReport,
    truth_edges: &[(u32, u32)],
) -> Result<TruthTallies> {
    let baseline_ids: Vec<u32> = report.baseline_outcomes.keys().copied().collect();
    let followup_ids: Vec<u32> = report.followup_outcomes.keys().copied().collect();
    let truth_scored: Vec<ScoredEdge> = truth_edges
        .iter()
        .map(|&(b, f)| ScoredEdge {
            baseline_id: b,
            followup_id: f,
            p_true: 1.0,
            decided: true,
        })
        .collect();
    let (truth_base, truth_follow) = derive_outcomes(&baseline_ids, &followup_ids, &truth_scored)
        .map_err(|e| match e {
            Error::InvalidInput(m) => {
                Error::InvalidInput(format!("truth/report id mismatch: {m}"))
            }
            other => other,
        })?;

    let predicted_partners = decided_partner_sets(&baseline_ids, &report.edges);
    let truth_partners = decided_partner_sets(&baseline_ids, &truth_scored);

    let mut tallies = TruthTallies {
        remaining_single: CategoryTally { total: 0, correct: 0 },
        split: CategoryTally { total: 0, correct: 0 },
        fused: CategoryTally { total: 0, correct: 0 },
        resolved: CategoryTally { total: 0, correct: 0 },
        new: CategoryTally { total: 0, correct: 0 },
        remaining_overall: CategoryTally { total: 0, correct: 0 },
    };

    for (&id, &truth_outcome) in &truth_base {
        let predicted = report.baseline_outcomes[&id];
        let category_match = predicted == truth_outcome;
        let edges_match = predicted_partners[&id] == truth_partners[&id];
        let tally = match truth_outcome {
            BaselineOutcome::RemainingSingle => &mut tallies.remaining_single,
            BaselineOutcome::Split => &mut tallies.split,
            BaselineOutcome::FusedMember => &mut tallies.fused,
            BaselineOutcome::Resolved => &mut tallies.resolved,
        };
        tally.total += 1;
        let remaining = truth_outcome != BaselineOutcome::Resolved;
        if category_match && (!remaining || edges_match) {
            tally.correct += 1;
        }
        if remaining {
            tallies.remaining_overall.total += 1;
            if edges_match {
                tallies.remaining_overall.correct += 1;
            }
        }
    }
    for (&id, &truth_outcome) in &truth_follow {
        if truth_outcome == FollowupOutcome::New {
            tallies.new.total += 1;
            if report.followup_outcomes[&id] == FollowupOutcome::New {
                tallies.new.correct += 1;
            }
        }
    }
    Ok(tallies)
}

/// Decided follow-up partner set of every baseline lesion.
fn decided_partner_sets(
    baseline_ids: &[u32],
    edges: &[ScoredEdge],
) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut map: BTreeMap<u32, BTreeSet<u32>> =
        baseline_ids.iter().map(|&id| (id, BTreeSet::new())).collect();
    for e in edges.iter().filter(|e| e.decided) {
        if let Some(set) = map.get_mut(&e.baseline_id) {
            set.insert(e.followup_id);
        }
    }
    map
}
