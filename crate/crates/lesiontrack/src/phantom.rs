//! Synthetic ground-truth scan pairs.
//!
//! Annotated baseline/follow-up studies are not redistributable, so every
//! desk-scale experiment in this crate runs on phantoms: analytic scenes made
//! of a smooth soft-tissue background (≈ −100 HU), ellipsoidal bones
//! (≈ +700 HU) and isotropic Gaussian PET hotspots placed inside the bones.
//! A scripted list of [`LesionEvent`]s decides how each lesion evolves
//! between the two time points — persist (optionally changing size), split
//! into fragments, fuse with neighbours, resolve, or appear fresh — and the
//! generator records the resulting correspondence edges by construction.
//!
//! The time points are related by a known affine map using the convention of
//! the [`registration`](crate::registration) module (baseline voxel
//! coordinates into the follow-up grid). Follow-up volumes are produced by
//! evaluating the evolved analytic scene at the *inverse*-mapped position of
//! every follow-up voxel, so the misalignment between the emitted files is
//! exactly the configured transform with no resampling error on top.
//!
//! Lesion masks are the output of [`segment_lesions`] on the *noiseless* PET
//! and the bone mask; Gaussian noise is added to the emitted CT/PET volumes
//! afterwards. Each constructed lesion is matched back to its connected
//! component, which both yields the truth edges in terms of final lesion
//! labels and verifies that no two scripted lesions accidentally merged.
//! Everything is deterministic under the config seed.
//!
//! Lesion intensity profiles are isotropic Gaussians in voxel units with
//! σ of roughly 2–4 voxels scaled to peak SUV 5–15, comfortably above the
//! default segmentation threshold of 3. The `lesion_spacing` knob sets the
//! minimum distance between lesions of *different* script events: large
//! values give well-separated, easy-to-track scenes, small values produce
//! crowded scenes where wrong candidates fall inside each other's search
//! regions.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::tracking::{derive_outcomes, BaselineOutcome, FollowupOutcome, ScoredEdge};
use crate::volume::{segment_lesions, Lesion, Modality, ScanPair, TimePointVolumes, Volume};

/// SUV threshold used to derive the emitted lesion masks.
pub const DEFAULT_SUV_THRESHOLD: f64 = 3.0;

/// Soft-tissue CT baseline value in HU.
const SOFT_TISSUE_HU: f64 = -100.0;
/// Added on top of soft tissue inside bones (≈ +700 HU total).
const BONE_DELTA_HU: f64 = 800.0;
/// Gaussian hotspots are truncated at this many σ.
const PET_SUPPORT_SIGMAS: f64 = 4.5;
/// Clear space required between the thresholded footprints of two lesions of
/// the same time point so their masks never touch (26-connectivity) and
/// their summed tails stay below the segmentation threshold.
const BLOB_GAP: f64 = 3.0;
/// A lesion's thresholded footprint must stay this far inside its bone.
const BONE_MARGIN: f64 = 1.5;
/// Rejection-sampling budget per script event within one scene attempt.
const PLACEMENT_ATTEMPTS: usize = 2000;
/// Whole-scene restarts when greedy placement paints itself into a corner.
const SCENE_ATTEMPTS: usize = 25;
/// Primary lesion σ is drawn from this range (voxels).
const SIGMA_RANGE: std::ops::Range<f64> = 2.0..3.4;
/// Peak SUV is drawn from this range.
const PEAK_RANGE: std::ops::Range<f64> = 5.0..15.0;
/// Split/merge clusters use smaller, dimmer lesions so a whole ring of them
/// fits inside a bone.
const CLUSTER_SIGMA_RANGE: std::ops::Range<f64> = 1.8..2.3;
const CLUSTER_PEAK_RANGE: std::ops::Range<f64> = 5.0..7.0;
/// σ never leaves this range after persist scaling or fragmentation.
const SIGMA_FLOOR: f64 = 1.6;
const SIGMA_CEIL: f64 = 4.3;

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn new(center: [f64; 3], radii: [f64; 3]) -> Ellipsoid {
        Ellipsoid { center, radii }
    }

    /// True if `p` lies inside the ellipsoid shrunk by `margin` on every
    /// semi-axis. `margin = 0` tests plain membership.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let r = self.radii[a] - margin;
            if r <= 0.0 {
                return false;
            }
            let d = (p[a] - self.center[a]) / r;
            q += d * d;
        }
        q <= 1.0
    }

    /// Uniform sample from the ellipsoid shrunk by `margin`, or `None` when
    /// the shrunk ellipsoid is empty (the sampler itself cannot fail).
    fn sample(&self, rng: &mut ChaCha12Rng, margin: f64) -> Option<[f64; 3]> {
        let radii: Vec<f64> = self.radii.iter().map(|r| r - margin).collect();
        if radii.iter().any(|&r| r <= 0.0) {
            return None;
        }
        // Rejection from the unit cube; acceptance ≈ 52%.
        loop {
            let u = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
                return Some([
                    self.center[0] + radii[0] * u[0],
                    self.center[1] + radii[1] * u[1],
                    self.center[2] + radii[2] * u[2],
                ]);
            }
        }
    }
}

/// One scripted lesion fate.
///
/// Each event is self-contained: it spawns its own baseline and/or follow-up
/// lesions and the truth edges between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionEvent {
    /// One baseline lesion matched by one follow-up lesion at the same
    /// anatomical position; `scale` multiplies the follow-up σ to model
    /// growth or shrinkage. Truth: 1 edge.
    Persist { scale: f64 },
    /// One baseline lesion divided into `fragments ≥ 2` smaller follow-up
    /// lesions arranged around the original site. Truth: `fragments` edges.
    Split { fragments: usize },
    /// `group ≥ 2` neighbouring baseline lesions fused into a single
    /// follow-up lesion at their common center. Truth: `group` edges.
    Merge { group: usize },
    /// Baseline lesion with no follow-up uptake. Truth: no edge.
    Resolve,
    /// Follow-up lesion with no baseline counterpart. Truth: no edge.
    New,
}

impl LesionEvent {
    fn kind(&self) -> &'static str {
        match self {
            LesionEvent::Persist { .. } => "persist",
            LesionEvent::Split { .. } => "split",
            LesionEvent::Merge { .. } => "merge",
            LesionEvent::Resolve => "resolve",
            LesionEvent::New => "new",
        }
    }

    /// (baseline lesions, follow-up lesions, truth edges) spawned by the event.
    pub fn multiplicities(&self) -> (usize, usize, usize) {
        match *self {
            LesionEvent::Persist { .. } => (1, 1, 1),
            LesionEvent::Split { fragments } => (1, fragments, fragments),
            LesionEvent::Merge { group } => (group, 1, group),
            LesionEvent::Resolve => (1, 0, 0),
            LesionEvent::New => (0, 1, 0),
        }
    }
}

/// Full description of one synthetic case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Voxel spacing in mm (only carried through to the emitted volumes; the
    /// scene itself is defined in voxel units).
    pub spacing: [f64; 3],
    /// Bone layout; every lesion is placed inside one of these.
    pub bones: Vec<Ellipsoid>,
    /// Scripted lesion evolution.
    pub events: Vec<LesionEvent>,
    /// True baseline→follow-up transform.
    pub transform: AffineTransform,
    /// Gaussian noise σ added to the emitted CT volumes (HU).
    pub ct_noise: f64,
    /// Gaussian noise σ added to the emitted PET volumes (SUV).
    pub pet_noise: f64,
    /// Minimum distance between lesions of different script events (voxels).
    pub lesion_spacing: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// Check the config invariants.
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidInput(format!(
                "phantom dims {:?} too small; every axis must be ≥ 16 voxels",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "phantom spacing {:?} must be positive",
                self.spacing
            )));
        }
        if self.bones.is_empty() {
            return Err(Error::InvalidInput(
                "phantom needs at least one bone".into(),
            ));
        }
        for (i, ev) in self.events.iter().enumerate() {
            match *ev {
                LesionEvent::Persist { scale } => {
                    if !(0.3..=2.5).contains(&scale) {
                        return Err(Error::InvalidInput(format!(
                            "event {i}: persist scale {scale} outside [0.3, 2.5]"
                        )));
                    }
                }
                LesionEvent::Split { fragments } => {
                    if !(2..=6).contains(&fragments) {
                        return Err(Error::InvalidInput(format!(
                            "event {i}: split needs 2–6 fragments, got {fragments}"
                        )));
                    }
                }
                LesionEvent::Merge { group } => {
                    if !(2..=6).contains(&group) {
                        return Err(Error::InvalidInput(format!(
                            "event {i}: merge needs a group of 2–6, got {group}"
                        )));
                    }
                }
                LesionEvent::Resolve | LesionEvent::New => {}
            }
        }
        let det = self.transform.matrix.determinant().abs();
        if !(det > 0.5) {
            return Err(Error::InvalidInput(format!(
                "true transform must satisfy |det A| > 0.5, got {det:.4}"
            )));
        }
        for (name, sigma) in [("ct_noise", self.ct_noise), ("pet_noise", self.pet_noise)] {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be a finite value ≥ 0, got {sigma}"
                )));
            }
        }
        if !self.lesion_spacing.is_finite() || self.lesion_spacing < 0.0 {
            return Err(Error::InvalidInput(format!(
                "lesion_spacing must be a finite value ≥ 0, got {}",
                self.lesion_spacing
            )));
        }
        Ok(())
    }
}

/// Correspondence truth for one generated case.
///
/// Edge endpoints are the deterministic labels assigned by
/// [`segment_lesions`] on the emitted masks, so they line up with what any
/// downstream stage sees when it labels those masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True (baseline_id, followup_id) correspondences, sorted.
    pub edges: Vec<(u32, u32)>,
    /// The transform the volumes were generated with.
    pub transform: AffineTransform,
    pub categories: TruthCategories,
}

/// Per-lesion outcome labels, derived from the truth edges with the same
/// rules the tracker applies to decided edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCategories {
    pub baseline: BTreeMap<u32, BaselineOutcome>,
    pub followup: BTreeMap<u32, FollowupOutcome>,
}

impl GroundTruth {
    /// (baseline lesions, follow-up lesions).
    pub fn lesion_counts(&self) -> (usize, usize) {
        (
            self.categories.baseline.len(),
            self.categories.followup.len(),
        )
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::format(path, format!("truth serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("invalid truth JSON: {e}")))
    }
}

/// One generated case: volumes, bone masks and correspondence truth.
///
/// `pair.transform` is left unset — recovering it is the registration
/// stage's job; the true transform lives in `truth.transform`.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub pair: ScanPair,
    pub baseline_bone: Volume,
    pub followup_bone: Volume,
    pub truth: GroundTruth,
}

impl PhantomCase {
    /// File stems used under a case directory: `<case>_<part>.volhdr/.volraw`
    /// for volumes plus `<case>_truth.json`.
    pub const VOLUME_PARTS: [&'static str; 8] = [
        "baseline_ct",
        "baseline_pet",
        "baseline_mask",
        "baseline_bone",
        "followup_ct",
        "followup_pet",
        "followup_mask",
        "followup_bone",
    ];

    fn volumes(&self) -> [&Volume; 8] {
        [
            &self.pair.baseline.ct,
            &self.pair.baseline.pet,
            &self.pair.baseline.mask,
            &self.baseline_bone,
            &self.pair.followup.ct,
            &self.pair.followup.pet,
            &self.pair.followup.mask,
            &self.followup_bone,
        ]
    }

    /// Write all volumes and the truth JSON under `dir` with the `case` stem.
    pub fn write(&self, dir: impl AsRef<Path>, case: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (part, vol) in Self::VOLUME_PARTS.iter().zip(self.volumes()) {
            vol.save(dir.join(format!("{case}_{part}")))?;
        }
        self.truth.save_json(dir.join(format!("{case}_truth.json")))
    }

    /// Load a case previously written by [`PhantomCase::write`].
    pub fn load(dir: impl AsRef<Path>, case: &str) -> Result<PhantomCase> {
        let dir = dir.as_ref();
        let load = |part: &str| Volume::load(dir.join(format!("{case}_{part}")));
        let baseline = TimePointVolumes::new(
            load("baseline_ct")?,
            load("baseline_pet")?,
            load("baseline_mask")?,
        )?;
        let followup = TimePointVolumes::new(
            load("followup_ct")?,
            load("followup_pet")?,
            load("followup_mask")?,
        )?;
        Ok(PhantomCase {
            pair: ScanPair::new(baseline, followup)?,
            baseline_bone: load("baseline_bone")?,
            followup_bone: load("followup_bone")?,
            truth: GroundTruth::load_json(dir.join(format!("{case}_truth.json")))?,
        })
    }
}

/// A single Gaussian hotspot of the analytic scene, in baseline voxel
/// coordinates (follow-up lesions are mapped through the transform when the
/// follow-up grid is rendered).
#[derive(Debug, Clone)]
struct Blob {
    event: usize,
    center: [f64; 3],
    sigma: f64,
    peak: f64,
}

impl Blob {
    /// Radius of the noiseless thresholded footprint.
    fn seg_radius(&self) -> f64 {
        self.sigma * (2.0 * (self.peak / DEFAULT_SUV_THRESHOLD).ln()).sqrt()
    }
}

/// Scripted scene: hotspots of both time points plus blob-level truth edges
/// (`(baseline index, follow-up index)` into the two vectors).
struct Scene {
    baseline: Vec<Blob>,
    followup: Vec<Blob>,
    edges: Vec<(usize, usize)>,
    /// One anchor point per placed event; `lesion_spacing` applies between
    /// these, not between individual cluster members.
    anchors: Vec<[f64; 3]>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// `n` points on an xy-circle of radius `r` around `c`, at a random phase.
fn ring(rng: &mut ChaCha12Rng, c: [f64; 3], n: usize, r: f64) -> Vec<[f64; 3]> {
    let phase = rng.gen_range(0.0..TAU);
    (0..n)
        .map(|k| {
            let a = phase + TAU * k as f64 / n as f64;
            [c[0] + r * a.cos(), c[1] + r * a.sin(), c[2]]
        })
        .collect()
}

/// True if the sphere of `margin` voxels around `p` lies inside the grid.
fn in_grid(p: [f64; 3], dims: [usize; 3], margin: f64) -> bool {
    (0..3).all(|a| p[a] - margin >= 0.0 && p[a] + margin <= dims[a] as f64 - 1.0)
}

/// Expand one event at anchored position `c` into its blobs and local edges.
fn expand_event(
    rng: &mut ChaCha12Rng,
    index: usize,
    event: LesionEvent,
    c: [f64; 3],
    sigma: f64,
    peak: f64,
) -> (Vec<Blob>, Vec<Blob>, Vec<(usize, usize)>) {
    let blob = |center: [f64; 3], sigma: f64, peak: f64| Blob {
        event: index,
        center,
        sigma: sigma.clamp(SIGMA_FLOOR, SIGMA_CEIL),
        peak,
    };
    match event {
        LesionEvent::Persist { scale } => (
            vec![blob(c, sigma, peak)],
            vec![blob(c, sigma * scale, peak)],
            vec![(0, 0)],
        ),
        LesionEvent::Split { fragments } => {
            let parent = blob(c, sigma * 1.2, peak);
            let frag_sigma = (sigma * 0.7).max(SIGMA_FLOOR);
            let frag_r = blob(c, frag_sigma, peak).seg_radius();
            let radius = (2.0 * frag_r + BLOB_GAP) / (2.0 * (std::f64::consts::PI / fragments as f64).sin());
            let frags: Vec<Blob> = ring(rng, c, fragments, radius)
                .into_iter()
                .map(|p| blob(p, frag_sigma, peak * rng.gen_range(0.85..1.0)))
                .collect();
            let edges = (0..fragments).map(|k| (0, k)).collect();
            (vec![parent], frags, edges)
        }
        LesionEvent::Merge { group } => {
            let member_sigma = (sigma * 0.7).max(SIGMA_FLOOR);
            let member_r = blob(c, member_sigma, peak).seg_radius();
            let radius = (2.0 * member_r + BLOB_GAP) / (2.0 * (std::f64::consts::PI / group as f64).sin());
            let members: Vec<Blob> = ring(rng, c, group, radius)
                .into_iter()
                .map(|p| blob(p, member_sigma, peak * rng.gen_range(0.85..1.0)))
                .collect();
            let fused = blob(c, sigma * 1.25, peak);
            let edges = (0..group).map(|k| (k, 0)).collect();
            (members, vec![fused], edges)
        }
        LesionEvent::Resolve => (vec![blob(c, sigma, peak)], vec![], vec![]),
        LesionEvent::New => (vec![], vec![blob(c, sigma, peak)], vec![]),
    }
}

/// Place every scripted event, rejecting layouts that violate the bone,
/// grid-bounds or spacing constraints. Greedy placement can paint itself
/// into a corner, so a failed event restarts the whole scene (the random
/// stream keeps advancing, so this stays deterministic).
fn place_script(cfg: &PhantomConfig, rng: &mut ChaCha12Rng) -> Result<Scene> {
    let mut stuck: Option<(usize, &'static str)> = None;
    for _ in 0..SCENE_ATTEMPTS {
        match try_place_scene(cfg, rng) {
            Ok(scene) => return Ok(scene),
            Err(failed) => stuck = Some(failed),
        }
    }
    let (i, kind) = stuck.expect("at least one scene attempt ran");
    Err(Error::InvalidInput(format!(
        "event {i} ({kind}): could not place lesion cluster after {SCENE_ATTEMPTS} scene \
         attempts (bone too small or scene too crowded)"
    )))
}

/// One greedy pass over the script; `Err` carries the event that failed.
fn try_place_scene(
    cfg: &PhantomConfig,
    rng: &mut ChaCha12Rng,
) -> std::result::Result<Scene, (usize, &'static str)> {
    let mut scene = Scene {
        baseline: Vec::new(),
        followup: Vec::new(),
        edges: Vec::new(),
        anchors: Vec::new(),
    };
    for (i, &event) in cfg.events.iter().enumerate() {
        let cluster = matches!(event, LesionEvent::Split { .. } | LesionEvent::Merge { .. });
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bone = &cfg.bones[rng.gen_range(0..cfg.bones.len())];
            let (sigma, peak) = if cluster {
                (
                    rng.gen_range(CLUSTER_SIGMA_RANGE),
                    rng.gen_range(CLUSTER_PEAK_RANGE),
                )
            } else {
                (rng.gen_range(SIGMA_RANGE), rng.gen_range(PEAK_RANGE))
            };
            // Expand around the origin first so the anchor can be sampled
            // with the cluster's real extent as the bone inset.
            let (mut base, mut follow, edges) = expand_event(rng, i, event, [0.0; 3], sigma, peak);
            let extent = base
                .iter()
                .chain(&follow)
                .map(|b| dist(b.center, [0.0; 3]) + b.seg_radius())
                .fold(0.0, f64::max);
            let Some(c) = bone.sample(rng, extent + BONE_MARGIN) else {
                continue;
            };
            for b in base.iter_mut().chain(follow.iter_mut()) {
                for a in 0..3 {
                    b.center[a] += c[a];
                }
            }
            if fits(cfg, bone, c, &base, &follow, &scene) {
                let b0 = scene.baseline.len();
                let f0 = scene.followup.len();
                scene.baseline.extend(base);
                scene.followup.extend(follow);
                scene
                    .edges
                    .extend(edges.into_iter().map(|(b, f)| (b0 + b, f0 + f)));
                scene.anchors.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err((i, event.kind()));
        }
    }
    Ok(scene)
}

/// Bone containment, grid bounds and spacing for a candidate cluster.
fn fits(
    cfg: &PhantomConfig,
    bone: &Ellipsoid,
    anchor: [f64; 3],
    base: &[Blob],
    follow: &[Blob],
    scene: &Scene,
) -> bool {
    let each = |blobs: &[Blob], followup_grid: bool| -> bool {
        blobs.iter().all(|b| {
            let r = b.seg_radius();
            if !bone.contains(b.center, r + BONE_MARGIN) {
                return false;
            }
            if followup_grid {
                // The lesion materializes in the follow-up grid at the
                // transformed position; keep its footprint in bounds there.
                let q = cfg.transform.forward(b.center);
                in_grid(q, cfg.dims, r * 1.2 + 2.0)
            } else {
                in_grid(b.center, cfg.dims, r + 2.0)
            }
        })
    };
    if !each(base, false) || !each(follow, true) {
        return false;
    }
    // The difficulty knob separates event *sites*; individual lesions of the
    // same time point must additionally never touch after thresholding,
    // whatever the knob says.
    if !scene
        .anchors
        .iter()
        .all(|&a| dist(a, anchor) >= cfg.lesion_spacing)
    {
        return false;
    }
    let untouched = |a: &Blob, b: &Blob| dist(a.center, b.center) >= a.seg_radius() + b.seg_radius() + BLOB_GAP;
    base.iter()
        .all(|new| scene.baseline.iter().all(|old| untouched(new, old)))
        && follow
            .iter()
            .all(|new| scene.followup.iter().all(|old| untouched(new, old)))
}

/// Smooth soft-tissue variation (HU) — fixed analytic field with gradients
/// along all axes so intensity registration has signal everywhere.
fn smooth_tissue(dims: [usize; 3], p: [f64; 3]) -> f64 {
    let u = p[0] / dims[0] as f64;
    let v = p[1] / dims[1] as f64;
    let w = p[2] / dims[2] as f64;
    25.0 * (TAU * (1.3 * u + 0.6 * v) + 0.9).sin() * (TAU * (0.8 * w - 0.4 * u) - 0.5).cos()
        + 15.0 * (TAU * (0.5 * v + 0.7 * w) + 2.1).sin()
}

fn in_any_bone(bones: &[Ellipsoid], p: [f64; 3]) -> bool {
    bones.iter().any(|b| b.contains(p, 0.0))
}

/// Render a CT or bone-mask volume. `view` is the follow-up→baseline inverse
/// map when rendering the follow-up grid, `None` for the baseline grid.
fn render_anatomy(cfg: &PhantomConfig, view: Option<&AffineTransform>, modality: Modality) -> Result<Volume> {
    Volume::from_fn(cfg.dims, cfg.spacing, modality, |x, y, z| {
        let grid = [x as f64, y as f64, z as f64];
        let p = match view {
            None => grid,
            Some(inv) => inv.forward(grid),
        };
        match modality {
            Modality::Mask => {
                if in_any_bone(&cfg.bones, p) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let mut hu = SOFT_TISSUE_HU + smooth_tissue(cfg.dims, p);
                if in_any_bone(&cfg.bones, p) {
                    hu += BONE_DELTA_HU;
                }
                hu as f32
            }
        }
    })
}

/// Render the noiseless PET of one time point by splatting truncated
/// Gaussians. For the follow-up grid, each blob's support box is the hull of
/// its forward-mapped scene-space support and samples are taken at the
/// inverse-mapped voxel position.
fn render_pet(
    cfg: &PhantomConfig,
    blobs: &[Blob],
    view: Option<(&AffineTransform, &AffineTransform)>,
) -> Result<Volume> {
    let mut vol = Volume::zeros(cfg.dims, cfg.spacing, Modality::Pet)?;
    for blob in blobs {
        let ext = PET_SUPPORT_SIGMAS * blob.sigma;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for cx in [-ext, ext] {
            for cy in [-ext, ext] {
                for cz in [-ext, ext] {
                    let corner = [
                        blob.center[0] + cx,
                        blob.center[1] + cy,
                        blob.center[2] + cz,
                    ];
                    let q = match view {
                        None => corner,
                        Some((fwd, _)) => fwd.forward(corner),
                    };
                    for a in 0..3 {
                        lo[a] = lo[a].min(q[a]);
                        hi[a] = hi[a].max(q[a]);
                    }
                }
            }
        }
        let lo: Vec<usize> = (0..3).map(|a| lo[a].floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| (hi[a].ceil() as usize).min(cfg.dims[a] - 1))
            .collect();
        let two_s2 = 2.0 * blob.sigma * blob.sigma;
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let grid = [x as f64, y as f64, z as f64];
                    let p = match view {
                        None => grid,
                        Some((_, inv)) => inv.forward(grid),
                    };
                    let mut d2 = 0.0;
                    for a in 0..3 {
                        let d = p[a] - blob.center[a];
                        d2 += d * d;
                    }
                    if d2 <= ext * ext {
                        let g = blob.peak * (-d2 / two_s2).exp();
                        vol.set(x, y, z, vol.get(x, y, z) + g as f32);
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Add i.i.d. Gaussian noise in the volume's storage order. PET volumes are
/// clamped at 0 (activity cannot be negative).
fn add_noise(vol: &mut Volume, sigma: f64, rng: &mut ChaCha12Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidInput(format!("invalid noise σ {sigma}: {e}")))?;
    let clamp = vol.modality() == Modality::Pet;
    for v in vol.data_mut() {
        let noisy = *v as f64 + normal.sample(rng);
        *v = if clamp { noisy.max(0.0) } else { noisy } as f32;
    }
    Ok(())
}

/// Map every scripted blob to the label of the connected component that
/// contains its (grid-mapped) center, verifying a 1:1 correspondence between
/// scripted lesions and segmented components.
fn identify(
    blobs: &[Blob],
    lesions: &[Lesion],
    to_grid: Option<&AffineTransform>,
    time_name: &str,
) -> Result<Vec<u32>> {
    let mut claimed: BTreeMap<u32, usize> = BTreeMap::new();
    let mut ids = Vec::with_capacity(blobs.len());
    for blob in blobs {
        let p = match to_grid {
            None => blob.center,
            Some(t) => t.forward(blob.center),
        };
        let voxel = [
            p[0].round() as i32,
            p[1].round() as i32,
            p[2].round() as i32,
        ];
        let lesion = lesions.iter().find(|l| l.contains(voxel)).ok_or_else(|| {
            Error::InvalidInput(format!(
                "event {}: {time_name} lesion at {:?} was not recovered by segmentation",
                blob.event, voxel
            ))
        })?;
        if let Some(&other) = claimed.get(&lesion.id) {
            return Err(Error::InvalidInput(format!(
                "events {other} and {}: {time_name} lesions merged into one component",
                blob.event
            )));
        }
        claimed.insert(lesion.id, blob.event);
        ids.push(lesion.id);
    }
    if claimed.len() != lesions.len() {
        return Err(Error::InvalidInput(format!(
            "{time_name} segmentation found {} components but the script placed {}",
            lesions.len(),
            blobs.len()
        )));
    }
    Ok(ids)
}

/// Generate one case: volumes for both time points, bone masks and truth.
///
/// Deterministic under `cfg.seed`; errors name the script event when a
/// lesion cluster cannot be placed.
pub fn generate(cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    let inv = cfg.transform.inverted()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let scene = place_script(cfg, &mut rng)?;

    let baseline_bone = render_anatomy(cfg, None, Modality::Mask)?;
    let followup_bone = render_anatomy(cfg, Some(&inv), Modality::Mask)?;
    let mut baseline_ct = render_anatomy(cfg, None, Modality::Ct)?;
    let mut followup_ct = render_anatomy(cfg, Some(&inv), Modality::Ct)?;
    let mut baseline_pet = render_pet(cfg, &scene.baseline, None)?;
    let mut followup_pet = render_pet(cfg, &scene.followup, Some((&cfg.transform, &inv)))?;

    // Masks and truth labels come from the noiseless PET.
    let (baseline_mask, baseline_lesions) =
        segment_lesions(&baseline_pet, &baseline_bone, DEFAULT_SUV_THRESHOLD)?;
    let (followup_mask, followup_lesions) =
        segment_lesions(&followup_pet, &followup_bone, DEFAULT_SUV_THRESHOLD)?;
    let base_ids = identify(&scene.baseline, &baseline_lesions, None, "baseline")?;
    let follow_ids = identify(
        &scene.followup,
        &followup_lesions,
        Some(&cfg.transform),
        "follow-up",
    )?;

    let mut edges: Vec<(u32, u32)> = scene
        .edges
        .iter()
        .map(|&(b, f)| (base_ids[b], follow_ids[f]))
        .collect();
    edges.sort_unstable();
    let scored: Vec<ScoredEdge> = edges
        .iter()
        .map(|&(b, f)| ScoredEdge {
            baseline_id: b,
            followup_id: f,
            p_true: 1.0,
            decided: true,
        })
        .collect();
    let all_base: Vec<u32> = baseline_lesions.iter().map(|l| l.id).collect();
    let all_follow: Vec<u32> = followup_lesions.iter().map(|l| l.id).collect();
    let (baseline_cat, followup_cat) = derive_outcomes(&all_base, &all_follow, &scored)?;

    // Noise goes in last, in a fixed draw order, so masks and truth never
    // depend on it.
    add_noise(&mut baseline_ct, cfg.ct_noise, &mut rng)?;
    add_noise(&mut baseline_pet, cfg.pet_noise, &mut rng)?;
    add_noise(&mut followup_ct, cfg.ct_noise, &mut rng)?;
    add_noise(&mut followup_pet, cfg.pet_noise, &mut rng)?;

    let pair = ScanPair::new(
        TimePointVolumes::new(baseline_ct, baseline_pet, baseline_mask)?,
        TimePointVolumes::new(followup_ct, followup_pet, followup_mask)?,
    )?;
    Ok(PhantomCase {
        pair,
        baseline_bone,
        followup_bone,
        truth: GroundTruth {
            edges,
            transform: cfg.transform.clone(),
            categories: TruthCategories {
                baseline: baseline_cat,
                followup: followup_cat,
            },
        },
    })
}

/// Difficulty tier for randomized cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Well-separated lesions; every true partner is the only plausible one.
    Easy,
    /// Crowded scenes: neighbouring lesions fall into each other's candidate
    /// regions, and split/merge clusters are larger.
    Hard,
}

impl Tier {
    /// The inter-event spacing the tier stands for (voxels).
    pub fn lesion_spacing(self) -> f64 {
        match self {
            Tier::Easy => 12.0,
            Tier::Hard => 7.5,
        }
    }
}

/// Layout-rejection retries inside [`generate_case`].
const CASE_ATTEMPTS: usize = 10;

/// Default grid of randomized cases (voxels).
pub const DEFAULT_DIMS: [usize; 3] = [96, 96, 80];
/// Default voxel spacing of randomized cases (mm).
pub const DEFAULT_SPACING: [f64; 3] = [2.0, 2.0, 3.0];

/// Generate the `case_index`-th case of a batch keyed by `master_seed`, at
/// the default grid. See [`generate_case_with_dims`].
pub fn generate_case(
    master_seed: u64,
    case_index: u64,
    tier: Tier,
) -> Result<(PhantomConfig, PhantomCase)> {
    generate_case_with_dims(master_seed, case_index, tier, DEFAULT_DIMS, DEFAULT_SPACING)
}

/// Generate the `case_index`-th case of a batch keyed by `master_seed`.
///
/// Crowded tiers occasionally produce layouts the generator rejects (for
/// example two follow-up lesions whose summed intensity tails bridge after
/// thresholding). This helper walks a deterministic seed chain until a case
/// generates cleanly, so batch generation is reproducible yet robust; a
/// config that still fails after [`CASE_ATTEMPTS`] seeds is reported.
pub fn generate_case_with_dims(
    master_seed: u64,
    case_index: u64,
    tier: Tier,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<(PhantomConfig, PhantomCase)> {
    let mut seed = derive_case_seed(master_seed, case_index);
    let mut last_err = None;
    for _ in 0..CASE_ATTEMPTS {
        let cfg = random_config_with_dims(seed, tier, dims, spacing);
        match generate(&cfg) {
            Ok(case) => return Ok((cfg, case)),
            Err(e) => last_err = Some(e),
        }
        seed = derive_case_seed(seed, 0);
    }
    Err(Error::InvalidInput(format!(
        "case {case_index}: no valid layout in {CASE_ATTEMPTS} attempts; last error: {}",
        last_err.expect("at least one attempt ran")
    )))
}

/// Per-case seed derived from a master seed (splitmix64 of master ⊕ index).
pub fn derive_case_seed(master_seed: u64, case_index: u64) -> u64 {
    let mut z = master_seed.wrapping_add(
        case_index
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Randomized case configuration at the default grid (96×96×80 voxels,
/// 2×2×3 mm spacing).
pub fn random_config(seed: u64, tier: Tier) -> PhantomConfig {
    random_config_with_dims(seed, tier, DEFAULT_DIMS, DEFAULT_SPACING)
}

/// Randomized case configuration: three bones whose size scales with the
/// grid, a shuffled event script, a small rigid-ish misalignment
/// (translations within ±7/±7/±3.5 voxels, rotations within ±5°, isotropic
/// scale within [0.96, 1.04]) and mild sensor noise.
pub fn random_config_with_dims(
    seed: u64,
    tier: Tier,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> PhantomConfig {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let [nx, ny, nz] = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let jitter = |rng: &mut ChaCha12Rng, v: f64, frac: f64| v * rng.gen_range(1.0 - frac..1.0 + frac);
    let bone = |rng: &mut ChaCha12Rng, cx: f64, cy: f64, cz: f64, rx: f64, ry: f64, rz: f64| {
        Ellipsoid::new(
            [
                jitter(rng, cx * nx, 0.04),
                jitter(rng, cy * ny, 0.04),
                jitter(rng, cz * nz, 0.04),
            ],
            [
                jitter(rng, rx * nx, 0.10),
                jitter(rng, ry * ny, 0.10),
                jitter(rng, rz * nz, 0.10),
            ],
        )
    };
    let bones = vec![
        bone(&mut rng, 0.30, 0.50, 0.45, 0.13, 0.12, 0.32),
        bone(&mut rng, 0.70, 0.50, 0.45, 0.13, 0.12, 0.32),
        bone(&mut rng, 0.50, 0.26, 0.52, 0.17, 0.13, 0.17),
    ];

    let mut events = Vec::new();
    let (split_max, merge_max, extra) = match tier {
        Tier::Easy => (3, 2, 0),
        Tier::Hard => (4, 3, 1),
    };
    for _ in 0..rng.gen_range(3..=4) {
        events.push(LesionEvent::Persist {
            scale: rng.gen_range(0.8..1.3),
        });
    }
    for _ in 0..rng.gen_range(1..=1 + extra) {
        events.push(LesionEvent::Split {
            fragments: rng.gen_range(2..=split_max),
        });
    }
    for _ in 0..rng.gen_range(1..=1 + extra) {
        events.push(LesionEvent::Merge {
            group: rng.gen_range(2..=merge_max),
        });
    }
    events.push(LesionEvent::Resolve);
    for _ in 0..rng.gen_range(1..=2) {
        events.push(LesionEvent::New);
    }
    events.shuffle(&mut rng);

    let deg = std::f64::consts::PI / 180.0;
    let rot = Rotation3::from_euler_angles(
        rng.gen_range(-1.5..1.5) * deg,
        rng.gen_range(-1.5..1.5) * deg,
        rng.gen_range(-4.0..4.0) * deg,
    );
    let scale = rng.gen_range(0.96..1.04);
    let matrix: Matrix3<f64> = rot.into_inner() * scale;
    let translation = nalgebra::Vector3::new(
        rng.gen_range(-7.0..7.0),
        rng.gen_range(-7.0..7.0),
        rng.gen_range(-3.5..3.5),
    );
    let transform = AffineTransform::new(matrix, translation, AffineTransform::center_for_dims(dims));

    PhantomConfig {
        dims,
        spacing,
        bones,
        events,
        transform,
        ct_noise: 8.0,
        pet_noise: 0.35,
        lesion_spacing: tier.lesion_spacing(),
        seed: rng.gen(),
    }
}

/// Case-index assignment to train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    fn lesions(&self, counts: &[usize]) -> [usize; 3] {
        let sum = |ids: &[usize]| ids.iter().map(|&i| counts[i]).sum();
        [sum(&self.train), sum(&self.validation), sum(&self.test)]
    }
}

fn split_group_mut(s: &mut DatasetSplit, g: usize) -> &mut Vec<usize> {
    match g {
        0 => &mut s.train,
        1 => &mut s.validation,
        _ => &mut s.test,
    }
}

/// The standard train/validation/test ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Split cases (given their per-case lesion counts) into train/validation/
/// test at the case level, so no case straddles two splits.
///
/// Case counts come from rounding the ratios; starting from a seeded shuffle,
/// case swaps between splits then greedily pull the *lesion*-level fractions
/// toward the same ratios (a case-level split cannot hit them exactly).
pub fn split_dataset(
    lesion_counts: &[usize],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let n = lesion_counts.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 cases to form train/validation/test splits, got {n}"
        )));
    }
    let n_val = ((rv * n as f64).round() as usize).max(1);
    let n_test = ((rs * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::InvalidInput(format!(
            "ratios ({rt}, {rv}, {rs}) leave no training cases for {n} cases"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    let mut split = DatasetSplit {
        test: order.split_off(n - n_test),
        validation: order.split_off(n - n_test - n_val),
        train: order,
    };

    let total: usize = lesion_counts.iter().sum();
    if total > 0 {
        let targets = [rt, rv, rs];
        let objective = |s: &DatasetSplit| -> f64 {
            s.lesions(lesion_counts)
                .iter()
                .zip(targets)
                .map(|(&l, t)| (l as f64 / total as f64 - t).abs())
                .sum()
        };
        // Greedy improvement: best case swap between any two splits, until
        // no swap helps. Case counts are preserved by swapping 1-for-1.
        for _ in 0..500 {
            let mut best: Option<(f64, usize, usize, usize, usize)> = None;
            let current = objective(&split);
            let groups = [&split.train, &split.validation, &split.test];
            for ga in 0..3 {
                for gb in (ga + 1)..3 {
                    for (ia, &ca) in groups[ga].iter().enumerate() {
                        for (ib, &cb) in groups[gb].iter().enumerate() {
                            if lesion_counts[ca] == lesion_counts[cb] {
                                continue;
                            }
                            let mut trial = split.clone();
                            split_group_mut(&mut trial, ga)[ia] = cb;
                            split_group_mut(&mut trial, gb)[ib] = ca;
                            let obj = objective(&trial);
                            if obj + 1e-12 < best.map_or(current, |(o, ..)| o) {
                                best = Some((obj, ga, ia, gb, ib));
                            }
                        }
                    }
                }
            }
            let Some((_, ga, ia, gb, ib)) = best else {
                break;
            };
            let ca = split_group_mut(&mut split, ga)[ia];
            let cb = split_group_mut(&mut split, gb)[ib];
            split_group_mut(&mut split, ga)[ia] = cb;
            split_group_mut(&mut split, gb)[ib] = ca;
        }
    }

    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn one_bone_config(events: Vec<LesionEvent>, seed: u64) -> PhantomConfig {
        let dims = [48, 48, 32];
        PhantomConfig {
            dims,
            spacing: [2.0, 2.0, 3.0],
            bones: vec![Ellipsoid::new([24.0, 24.0, 16.0], [15.0, 13.0, 11.0])],
            events,
            transform: AffineTransform::identity(AffineTransform::center_for_dims(dims)),
            ct_noise: 0.0,
            pet_noise: 0.0,
            lesion_spacing: 10.0,
            seed,
        }
    }

    fn bits(v: &Volume) -> Vec<u32> {
        v.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn persist_identity_zero_noise_reproduces_baseline_exactly() {
        let cfg = one_bone_config(vec![LesionEvent::Persist { scale: 1.0 }], 11);
        let case = generate(&cfg).unwrap();
        assert_eq!(bits(&case.pair.baseline.ct), bits(&case.pair.followup.ct));
        assert_eq!(bits(&case.pair.baseline.pet), bits(&case.pair.followup.pet));
        assert_eq!(
            bits(&case.pair.baseline.mask),
            bits(&case.pair.followup.mask)
        );
        assert_eq!(bits(&case.baseline_bone), bits(&case.followup_bone));
        assert_eq!(case.truth.edges, vec![(1, 1)]);
        assert_eq!(
            case.truth.categories.baseline.get(&1),
            Some(&BaselineOutcome::RemainingSingle)
        );
        assert_eq!(
            case.truth.categories.followup.get(&1),
            Some(&FollowupOutcome::Matched)
        );
    }

    #[test]
    fn split_into_three_produces_three_edges_from_one_baseline() {
        let cfg = one_bone_config(vec![LesionEvent::Split { fragments: 3 }], 4);
        let case = generate(&cfg).unwrap();
        assert_eq!(case.truth.lesion_counts(), (1, 3));
        assert_eq!(case.truth.edges, vec![(1, 1), (1, 2), (1, 3)]);
        assert_eq!(
            case.truth.categories.baseline.get(&1),
            Some(&BaselineOutcome::Split)
        );
        for id in 1..=3 {
            assert_eq!(
                case.truth.categories.followup.get(&id),
                Some(&FollowupOutcome::Matched)
            );
        }
    }

    #[test]
    fn merge_pair_produces_two_edges_into_one_followup() {
        let cfg = one_bone_config(vec![LesionEvent::Merge { group: 2 }], 9);
        let case = generate(&cfg).unwrap();
        assert_eq!(case.truth.lesion_counts(), (2, 1));
        assert_eq!(case.truth.edges, vec![(1, 1), (2, 1)]);
        for id in 1..=2 {
            assert_eq!(
                case.truth.categories.baseline.get(&id),
                Some(&BaselineOutcome::FusedMember)
            );
        }
    }

    #[test]
    fn resolved_lesion_leaves_no_followup_signal() {
        let cfg = one_bone_config(vec![LesionEvent::Resolve, LesionEvent::New], 21);
        let case = generate(&cfg).unwrap();
        assert!(case.truth.edges.is_empty());
        assert_eq!(case.truth.lesion_counts(), (1, 1));
        assert_eq!(
            case.truth.categories.baseline.get(&1),
            Some(&BaselineOutcome::Resolved)
        );
        assert_eq!(
            case.truth.categories.followup.get(&1),
            Some(&FollowupOutcome::New)
        );
        // The one follow-up component is the new lesion, far from the
        // resolved site (zero noise: all signal is scripted).
        let base = crate::volume::label_mask(&case.pair.baseline.mask).unwrap();
        let follow = crate::volume::label_mask(&case.pair.followup.mask).unwrap();
        let d = dist(base[0].com, follow[0].com);
        assert!(d >= cfg.lesion_spacing - 2.0, "new lesion landed {d:.1} voxels from the resolved one");
    }

    /// A mixed script on a non-trivial transform with noise: every event
    /// contributes exactly its declared lesion/edge multiplicities.
    fn mixed_config(seed: u64) -> PhantomConfig {
        let dims = [64, 64, 48];
        let deg = std::f64::consts::PI / 180.0;
        let rot = Rotation3::from_euler_angles(0.5 * deg, -0.4 * deg, 2.5 * deg);
        PhantomConfig {
            dims,
            spacing: [2.0, 2.0, 3.0],
            bones: vec![
                Ellipsoid::new([20.0, 32.0, 22.0], [12.0, 11.0, 16.0]),
                Ellipsoid::new([45.0, 32.0, 22.0], [12.0, 11.0, 16.0]),
            ],
            events: vec![
                LesionEvent::Persist { scale: 1.2 },
                LesionEvent::Split { fragments: 3 },
                LesionEvent::Resolve,
                LesionEvent::Merge { group: 2 },
                LesionEvent::Persist { scale: 0.9 },
                LesionEvent::New,
            ],
            transform: AffineTransform::new(
                rot.into_inner() * 1.02,
                nalgebra::Vector3::new(3.0, -4.0, 2.0),
                AffineTransform::center_for_dims(dims),
            ),
            ct_noise: 8.0,
            pet_noise: 0.3,
            lesion_spacing: 11.0,
            seed,
        }
    }

    #[test]
    fn scripted_multiplicities_match_declared_truth() {
        let cfg = mixed_config(33);
        let case = generate(&cfg).unwrap();

        let (mut base, mut follow, mut edges) = (0, 0, 0);
        for ev in &cfg.events {
            let (b, f, e) = ev.multiplicities();
            base += b;
            follow += f;
            edges += e;
        }
        assert_eq!(case.truth.lesion_counts(), (base, follow));
        assert_eq!(case.truth.edges.len(), edges);

        let count = |want: BaselineOutcome| {
            case.truth
                .categories
                .baseline
                .values()
                .filter(|&&c| c == want)
                .count()
        };
        assert_eq!(count(BaselineOutcome::RemainingSingle), 2);
        assert_eq!(count(BaselineOutcome::Split), 1);
        assert_eq!(count(BaselineOutcome::FusedMember), 2);
        assert_eq!(count(BaselineOutcome::Resolved), 1);
        let news = case
            .truth
            .categories
            .followup
            .values()
            .filter(|&&c| c == FollowupOutcome::New)
            .count();
        assert_eq!(news, 1);

        // Edge endpoints reference labeled lesions of the emitted masks.
        let base_ids: BTreeSet<u32> = case.truth.categories.baseline.keys().copied().collect();
        let follow_ids: BTreeSet<u32> = case.truth.categories.followup.keys().copied().collect();
        for &(b, f) in &case.truth.edges {
            assert!(base_ids.contains(&b) && follow_ids.contains(&f));
        }
    }

    #[test]
    fn same_config_same_seed_is_byte_identical_on_disk() {
        let cfg = mixed_config(77);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path().join("a"), "case").unwrap();
        b.write(dir.path().join("b"), "case").unwrap();
        let mut checked = 0;
        for part in PhantomCase::VOLUME_PARTS {
            for ext in ["volhdr", "volraw"] {
                let fa = std::fs::read(dir.path().join(format!("a/case_{part}.{ext}"))).unwrap();
                let fb = std::fs::read(dir.path().join(format!("b/case_{part}.{ext}"))).unwrap();
                assert_eq!(fa, fb, "mismatch in {part}.{ext}");
                checked += 1;
            }
        }
        let ta = std::fs::read(dir.path().join("a/case_truth.json")).unwrap();
        let tb = std::fs::read(dir.path().join("b/case_truth.json")).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(checked, 16);
    }

    #[test]
    fn different_seeds_change_the_volumes() {
        let mut cfg = mixed_config(1);
        let a = generate(&cfg).unwrap();
        cfg.seed = 2;
        let b = generate(&cfg).unwrap();
        assert_ne!(bits(&a.pair.baseline.pet), bits(&b.pair.baseline.pet));
    }

    #[test]
    fn zero_noise_segmentation_reproduces_emitted_masks() {
        let mut cfg = mixed_config(5);
        cfg.ct_noise = 0.0;
        cfg.pet_noise = 0.0;
        let case = generate(&cfg).unwrap();
        let (mask_b, _) = segment_lesions(
            &case.pair.baseline.pet,
            &case.baseline_bone,
            DEFAULT_SUV_THRESHOLD,
        )
        .unwrap();
        let (mask_f, _) = segment_lesions(
            &case.pair.followup.pet,
            &case.followup_bone,
            DEFAULT_SUV_THRESHOLD,
        )
        .unwrap();
        assert_eq!(bits(&mask_b), bits(&case.pair.baseline.mask));
        assert_eq!(bits(&mask_f), bits(&case.pair.followup.mask));
    }

    #[test]
    fn case_roundtrip_through_files() {
        let cfg = mixed_config(13);
        let case = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        case.write(dir.path(), "c13").unwrap();
        let loaded = PhantomCase::load(dir.path(), "c13").unwrap();
        assert_eq!(bits(&case.pair.baseline.ct), bits(&loaded.pair.baseline.ct));
        assert_eq!(
            bits(&case.pair.followup.pet),
            bits(&loaded.pair.followup.pet)
        );
        assert_eq!(bits(&case.followup_bone), bits(&loaded.followup_bone));
        assert_eq!(case.truth, loaded.truth);
        assert!(loaded.pair.transform.is_none());
    }

    #[test]
    fn truth_json_has_the_documented_shape() {
        let cfg = one_bone_config(vec![LesionEvent::Split { fragments: 2 }], 3);
        let truth = generate(&cfg).unwrap().truth;
        let v = serde_json::to_value(&truth).unwrap();
        assert!(v["edges"].as_array().unwrap()[0].as_array().unwrap().len() == 2);
        assert!(v["transform"]["A"].as_array().unwrap().len() == 3);
        assert_eq!(v["categories"]["baseline"]["1"], "SPLIT");
        assert_eq!(v["categories"]["followup"]["1"], "MATCHED");
        let back: GroundTruth = serde_json::from_value(v).unwrap();
        assert_eq!(back, truth);
    }

    #[test]
    fn placement_failure_names_the_event() {
        let mut cfg = one_bone_config(vec![LesionEvent::Persist { scale: 1.0 }], 1);
        cfg.bones = vec![Ellipsoid::new([24.0, 24.0, 16.0], [3.0, 3.0, 3.0])];
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("event 0"), "unexpected error: {err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = one_bone_config(vec![LesionEvent::Persist { scale: 1.0 }], 1);

        let mut c = ok.clone();
        c.events = vec![LesionEvent::Split { fragments: 1 }];
        assert!(generate(&c).is_err());

        let mut c = ok.clone();
        c.events = vec![LesionEvent::Merge { group: 1 }];
        assert!(generate(&c).is_err());

        let mut c = ok.clone();
        c.transform.matrix *= 0.7; // det = 0.343
        let err = generate(&c).unwrap_err().to_string();
        assert!(err.contains("det"), "unexpected error: {err}");

        let mut c = ok.clone();
        c.pet_noise = -1.0;
        assert!(generate(&c).is_err());

        let mut c = ok.clone();
        c.events = vec![LesionEvent::Persist { scale: 0.0 }];
        assert!(generate(&c).is_err());

        let mut c = ok;
        c.bones.clear();
        assert!(generate(&c).is_err());
    }

    #[test]
    fn random_configs_generate_valid_cases() {
        for seed in 0..6 {
            let cfg = random_config(seed, Tier::Easy);
            assert_eq!(cfg, random_config(seed, Tier::Easy));
            cfg.validate().unwrap();
            let case = generate(&cfg).unwrap();
            let (b, f) = case.truth.lesion_counts();
            assert!(
                (4..=24).contains(&b) && (4..=24).contains(&f),
                "seed {seed}: unexpected lesion counts ({b}, {f})"
            );
        }
        assert!(
            random_config(3, Tier::Hard).lesion_spacing < random_config(3, Tier::Easy).lesion_spacing
        );
    }

    #[test]
    fn batch_generation_recovers_from_rejected_layouts() {
        // Master seed 7, hard tier, index 31: the first derived seed draws a
        // layout the generator rejects; the seed chain must recover from it
        // deterministically.
        let first = random_config(derive_case_seed(7, 31), Tier::Hard);
        assert!(generate(&first).is_err());
        let (cfg_a, case_a) = generate_case(7, 31, Tier::Hard).unwrap();
        let (cfg_b, case_b) = generate_case(7, 31, Tier::Hard).unwrap();
        assert_eq!(cfg_a, cfg_b);
        assert_eq!(case_a.truth, case_b.truth);
        assert_ne!(cfg_a, first);
    }

    #[test]
    fn derived_case_seeds_are_deterministic_and_spread() {
        let seeds: BTreeSet<u64> = (0..100).map(|i| derive_case_seed(42, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(derive_case_seed(42, 7), derive_case_seed(42, 7));
        assert_ne!(derive_case_seed(42, 7), derive_case_seed(43, 7));
    }

    #[test]
    fn twenty_cases_split_fourteen_three_three() {
        let counts = vec![10usize; 20];
        let s = split_dataset(&counts, SPLIT_RATIOS, 7).unwrap();
        assert_eq!(s.train.len(), 14);
        assert_eq!(s.validation.len(), 3);
        assert_eq!(s.test.len(), 3);
        let all: BTreeSet<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let counts: Vec<usize> = (0..30).map(|i| 3 + i % 9).collect();
        let a = split_dataset(&counts, SPLIT_RATIOS, 1).unwrap();
        let b = split_dataset(&counts, SPLIT_RATIOS, 1).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&counts, SPLIT_RATIOS, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lesion_ratios_within_tolerance_on_varied_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let counts: Vec<usize> = (0..100)
            .map(|_| rand::Rng::gen_range(&mut rng, 1..=15))
            .collect();
        let total: usize = counts.iter().sum();
        let s = split_dataset(&counts, SPLIT_RATIOS, 5).unwrap();
        let fracs = s.lesions(&counts).map(|l| l as f64 / total as f64);
        for (frac, target) in fracs.iter().zip([0.70, 0.15, 0.15]) {
            assert!(
                (frac - target).abs() <= 0.05,
                "lesion fraction {frac:.3} vs target {target}"
            );
        }
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_dataset(&[5, 5], SPLIT_RATIOS, 0).is_err());
        assert!(split_dataset(&[5; 20], (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&[5; 20], (0.9, 0.05, -0.05), 0).is_err());
    }

    fn arb_event() -> impl Strategy<Value = LesionEvent> {
        prop_oneof![
            (0.8f64..1.3).prop_map(|scale| LesionEvent::Persist { scale }),
            (2usize..=3).prop_map(|fragments| LesionEvent::Split { fragments }),
            Just(LesionEvent::Merge { group: 2 }),
            Just(LesionEvent::Resolve),
            Just(LesionEvent::New),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Any small script generates a case whose truth matches the
        /// declared per-event multiplicities.
        #[test]
        fn small_scripts_generate_consistent_truth(
            events in proptest::collection::vec(arb_event(), 1..=3),
            seed in 0u64..1_000,
        ) {
            let dims = [64, 64, 40];
            let cfg = PhantomConfig {
                dims,
                spacing: [2.0, 2.0, 3.0],
                bones: vec![Ellipsoid::new([32.0, 32.0, 20.0], [20.0, 17.0, 13.0])],
                events: events.clone(),
                transform: AffineTransform::identity(AffineTransform::center_for_dims(dims)),
                ct_noise: 0.0,
                pet_noise: 0.0,
                lesion_spacing: 8.0,
                seed,
            };
            let case = generate(&cfg).unwrap();
            let (mut base, mut follow, mut edges) = (0, 0, 0);
            for ev in &events {
                let (b, f, e) = ev.multiplicities();
                base += b;
                follow += f;
                edges += e;
            }
            prop_assert_eq!(case.truth.lesion_counts(), (base, follow));
            prop_assert_eq!(case.truth.edges.len(), edges);
            // Truth edges are unique and reference existing labels.
            let set: BTreeSet<(u32, u32)> = case.truth.edges.iter().copied().collect();
            prop_assert_eq!(set.len(), case.truth.edges.len());
        }
    }
}
