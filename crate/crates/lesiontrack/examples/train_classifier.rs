//! Train the Siamese patch-pair classifier on a small phantom dataset.
//!
//! The network is built from scratch (convolutions, batch normalization,
//! max pooling, dropout, an L1 feature-difference merge and a dense
//! softmax head) with its own backpropagation; no external ML framework
//! is involved. This example trains the 2D variant briefly on balanced
//! pairs from a few phantom cases and prints the epoch history.
//!
//! Run with:
//!
//! ```text
//! cargo run --release -p lesiontrack --example train_classifier
//! ```

use lesiontrack::net::{train, SiameseNet, TrainConfig, TrainPair, Variant};
use lesiontrack::patch::{
    candidate_pairs, extract_pair, PatchChannels, PatchShape, PatchSpec, RoiMargins,
};
use lesiontrack::phantom::{generate_case, Tier};
use lesiontrack::pipeline::balance_pairs;
use lesiontrack::volume::label_mask;
use std::collections::{BTreeMap, BTreeSet};

fn main() -> lesiontrack::Result<()> {
    let spec = PatchSpec::new(PatchShape::P2d50, PatchChannels::CtPet);

    // Harvest labeled pairs from a handful of hard-tier cases (clustered
    // lesions give a healthy false-pair fraction).
    let mut pairs = Vec::new();
    for index in 0..8u64 {
        let (_, case) = generate_case(11, index, Tier::Hard)?;
        let transform = case.truth.transform.clone();
        let mut scan = case.pair;
        scan.transform = Some(transform.clone());
        let baseline = label_mask(&scan.baseline.mask)?;
        let followup = label_mask(&scan.followup.mask)?;
        let bmap: BTreeMap<u32, _> = baseline.iter().map(|l| (l.id, l)).collect();
        let fmap: BTreeMap<u32, _> = followup.iter().map(|l| (l.id, l)).collect();
        let truth: BTreeSet<(u32, u32)> = case.truth.edges.iter().copied().collect();
        for cand in candidate_pairs(&baseline, &followup, &transform, RoiMargins::default()) {
            let r = extract_pair(
                bmap[&cand.baseline_id],
                fmap[&cand.followup_id],
                &transform,
                &spec,
                &scan,
            )?;
            pairs.push(TrainPair {
                a: r.baseline_patch,
                b: r.followup_patch,
                label: truth.contains(&(cand.baseline_id, cand.followup_id)),
            });
        }
    }

    // Balance classes, then hold out every fifth pair for validation.
    let balanced = balance_pairs(pairs, 9)?;
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for (i, p) in balanced.into_iter().enumerate() {
        if i % 5 == 0 {
            val_set.push(p);
        } else {
            train_set.push(p);
        }
    }
    println!(
        "training on {} pairs, validating on {}",
        train_set.len(),
        val_set.len()
    );

    let mut net = SiameseNet::new(Variant::D2, spec.channels, 1);
    let cfg = TrainConfig {
        epochs: 24,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train(&mut net, &train_set, &val_set, &cfg)?;
    println!("epoch      lr   train_loss  train_acc  val_loss  val_acc");
    for e in outcome.history.iter().step_by(2) {
        println!(
            "{:5}  {:.1e}      {:.4}      {:.3}    {:.4}    {:.3}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        );
    }
    println!(
        "\nbest epoch {} with validation loss {:.4}",
        outcome.best_epoch, outcome.best_val_loss
    );

    // Scores are probabilities from the softmax head.
    let sample: Vec<_> = val_set.iter().take(3).map(|p| (&p.a, &p.b)).collect();
    for (score, pair) in net.forward_pairs(&sample)?.iter().zip(&val_set) {
        println!(
            "p_true {:.3} for a pair labeled {}",
            score.p_true, pair.label
        );
    }
    Ok(())
}
