//! Generate a small synthetic phantom dataset and inspect its ground truth.
//!
//! Each case is a baseline/follow-up pair of CT+PET volumes with scripted
//! lesion evolution (persisting, splitting, merging, resolving and newly
//! appearing lesions) and a known affine misalignment between the two time
//! points. The exact correspondence graph is stored alongside the volumes,
//! which is what makes fully automatic end-to-end validation possible.
//!
//! Run with:
//!
//! ```text
//! cargo run --release -p lesiontrack --example phantom_dataset
//! ```

use lesiontrack::phantom::{generate_case, Tier};
use lesiontrack::volume::label_mask;
use std::collections::BTreeMap;

fn main() -> lesiontrack::Result<()> {
    let out = std::env::temp_dir().join("lesiontrack_example_phantom");
    std::fs::create_dir_all(&out).expect("create output directory");

    println!("writing 3 easy-tier cases to {}\n", out.display());
    for index in 0..3u64 {
        let (config, case) = generate_case(7, index, Tier::Easy)?;
        let name = format!("case_{index:03}");
        case.write(&out, &name)?;

        let (nb, nf) = case.truth.lesion_counts();
        println!("{name}: dims {:?}, seed {}", config.dims, config.seed);
        println!("  lesions: {nb} baseline, {nf} follow-up");
        println!("  true correspondence edges: {:?}", case.truth.edges);

        let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
        for outcome in case.truth.categories.baseline.values() {
            *outcomes.entry(format!("{outcome:?}")).or_default() += 1;
        }
        println!("  baseline outcomes: {outcomes:?}");

        // The stored masks are consistent with re-labeling the volumes.
        let baseline = label_mask(&case.pair.baseline.mask)?;
        let voxels: usize = baseline.iter().map(|l| l.volume_vox).sum();
        println!(
            "  relabeled baseline: {} lesions, {voxels} foreground voxels",
            baseline.len()
        );

        // The misalignment between the time points is known exactly.
        let t = &case.truth.transform.translation;
        println!(
            "  true transform translation: [{:.2}, {:.2}, {:.2}] voxels\n",
            t[0], t[1], t[2]
        );
    }
    println!("per-case files: 8 volumes (.volhdr/.volraw) + <case>_truth.json");
    Ok(())
}
