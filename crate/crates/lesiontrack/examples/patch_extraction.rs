//! Extract co-located patch pairs for candidate lesion correspondences.
//!
//! For every candidate (baseline lesion, follow-up lesion) pair, a
//! hierarchy of four geometric rules picks one extraction point per time
//! point — Case I when the projected baseline center of mass lands inside
//! the follow-up lesion, Case II for the reverse projection, Case III for
//! overlapping masks, and Case IV projecting toward the other lesion when
//! nothing overlaps. A multi-channel patch is cropped around each point
//! and the pair is labeled against the phantom's truth edges.
//!
//! Run with:
//!
//! ```text
//! cargo run --release -p lesiontrack --example patch_extraction
//! ```

use lesiontrack::patch::archive::{ArchiveReader, ArchiveWriter};
use lesiontrack::patch::{
    candidate_pairs, extract_pair, PatchChannels, PatchShape, PatchSpec, RoiMargins,
};
use lesiontrack::phantom::{generate_case, Tier};
use lesiontrack::volume::label_mask;
use std::collections::{BTreeMap, BTreeSet};

fn main() -> lesiontrack::Result<()> {
    let (_, case) = generate_case(3, 1, Tier::Hard)?;
    let transform = case.truth.transform.clone();
    let mut pair = case.pair;
    pair.transform = Some(transform.clone());

    let baseline = label_mask(&pair.baseline.mask)?;
    let followup = label_mask(&pair.followup.mask)?;
    let truth: BTreeSet<(u32, u32)> = case.truth.edges.iter().copied().collect();
    println!(
        "{} baseline and {} follow-up lesions, {} true edges",
        baseline.len(),
        followup.len(),
        truth.len()
    );

    // Candidate pairing: a follow-up lesion is considered for a baseline
    // lesion when it intersects the (±10, ±10, ±5)-voxel expanded ROI
    // around the projected baseline lesion.
    let candidates = candidate_pairs(&baseline, &followup, &transform, RoiMargins::default());
    println!("{} candidate pairs within the expanded ROI\n", candidates.len());

    let spec = PatchSpec::new(PatchShape::P2d50, PatchChannels::CtPet);
    let by_id = |lesions: &[lesiontrack::Lesion]| -> BTreeMap<u32, lesiontrack::Lesion> {
        lesions.iter().cloned().map(|l| (l.id, l)).collect()
    };
    let bmap = by_id(&baseline);
    let fmap = by_id(&followup);

    let out = std::env::temp_dir().join("lesiontrack_example_patches");
    std::fs::create_dir_all(&out).expect("create output directory");
    let base = out.join("demo");
    let mut writer = ArchiveWriter::create(&base, spec)?;
    let mut case_counts: BTreeMap<String, usize> = BTreeMap::new();
    for cand in &candidates {
        let result = extract_pair(
            &bmap[&cand.baseline_id],
            &fmap[&cand.followup_id],
            &transform,
            &spec,
            &pair,
        )?;
        let label = truth.contains(&(cand.baseline_id, cand.followup_id));
        *case_counts.entry(result.case_used.to_string()).or_default() += 1;
        if label {
            println!(
                "true pair ({}, {}): case {}, points {:?} -> {:?}, patch {:?}",
                cand.baseline_id,
                cand.followup_id,
                result.case_used,
                result.p_baseline,
                result.p_followup,
                result.baseline_patch.dim()
            );
        }
        writer.append(cand.baseline_id, cand.followup_id, Some(label), &result)?;
    }
    let written = writer.finish()?;
    println!("\nextraction rule usage: {case_counts:?}");

    // Archives round-trip exactly.
    let reader = ArchiveReader::open(&base)?;
    println!(
        "archive {}: {written} records of {} patches",
        base.display(),
        reader.spec()
    );
    assert_eq!(reader.len(), candidates.len());
    Ok(())
}
