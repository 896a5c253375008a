//! Candidate lesion pairing and patch-pair extraction.
//!
//! For every baseline lesion, follow-up lesions inside a registered,
//! margin-expanded region of interest become candidate partners. Each
//! candidate pair is turned into a pair of co-located multi-channel patches
//! (one per time point) whose extraction points are chosen by a strict
//! hierarchy of four geometric rules:
//!
//! * **Case I** — the follow-up lesion's corrected center of mass, mapped
//!   back into the baseline grid, lands inside the baseline lesion.
//! * **Case II** — symmetric: the baseline corrected CoM maps into the
//!   follow-up lesion.
//! * **Case III** — the lesions overlap after registration; the extraction
//!   point is the corrected CoM of the overlap.
//! * **Case IV** — disjoint lesions; the smaller lesion keeps its corrected
//!   CoM and the larger one gets a z-position offset half the smaller
//!   lesion's slice extent from its nearer end.
//!
//! Patches are always cropped from the *original* (unresampled) grid of each
//! time point so no interpolation artifacts enter the classifier input.

pub mod archive;

use std::collections::BTreeSet;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::volume::{axial_centroid, center_of_mass, Lesion, ScanPair, TimePointVolumes};

/// Axial patch edge length in voxels.
pub const PATCH_XY: usize = 50;
/// CT normalization window (HU): clamped then mapped to [0, 1].
pub const CT_WINDOW: (f32, f32) = (-1024.0, 2048.0);
/// PET normalization: divided by this SUV then clamped to [0, 1].
pub const PET_NORM_SUV: f32 = 20.0;

/// Patch geometry: the axial extent is always 50×50; the z extent varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchShape {
    /// Single axial slice (50×50).
    #[serde(rename = "2d50")]
    P2d50,
    /// 50×50×5: two slices above and below the extraction point.
    #[serde(rename = "3d50x5")]
    P3d50x5,
    /// 50×50×11: five slices above and below.
    #[serde(rename = "3d50x11")]
    P3d50x11,
}

impl PatchShape {
    pub fn z_extent(self) -> usize {
        match self {
            PatchShape::P2d50 => 1,
            PatchShape::P3d50x5 => 5,
            PatchShape::P3d50x11 => 11,
        }
    }

    /// Slices included on each side of the extraction point.
    pub fn z_half(self) -> i32 {
        (self.z_extent() as i32 - 1) / 2
    }
}

/// Channel layout: CT is always channel 0; the optional second channel is
/// PET, the binary lesion mask, or the segmented CT (mask × normalized CT).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchChannels {
    #[serde(rename = "ct")]
    Ct,
    #[serde(rename = "ct_pet")]
    CtPet,
    #[serde(rename = "ct_seg")]
    CtSeg,
    #[serde(rename = "ct_segct")]
    CtSegCt,
}

impl PatchChannels {
    pub fn count(self) -> usize {
        match self {
            PatchChannels::Ct => 1,
            _ => 2,
        }
    }
}

/// Full patch specification: geometry plus channel layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub shape: PatchShape,
    pub channels: PatchChannels,
}

impl PatchSpec {
    pub fn new(shape: PatchShape, channels: PatchChannels) -> Self {
        PatchSpec { shape, channels }
    }

    /// Array shape of one patch: (channels, z, y, x).
    pub fn array_shape(&self) -> [usize; 4] {
        [
            self.channels.count(),
            self.shape.z_extent(),
            PATCH_XY,
            PATCH_XY,
        ]
    }

    /// Scalar count of one patch.
    pub fn values_per_patch(&self) -> usize {
        self.array_shape().iter().product()
    }
}

impl std::fmt::Display for PatchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchShape::P2d50 => "2d50",
            PatchShape::P3d50x5 => "3d50x5",
            PatchShape::P3d50x11 => "3d50x11",
        })
    }
}

impl std::fmt::Display for PatchChannels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchChannels::Ct => "ct",
            PatchChannels::CtPet => "ct_pet",
            PatchChannels::CtSeg => "ct_seg",
            PatchChannels::CtSegCt => "ct_segct",
        })
    }
}

impl std::fmt::Display for PatchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}", self.shape, self.channels)
    }
}

/// One patch: a (channels, z, y, x) array of normalized values.
pub type PatchData = Array4<f32>;

/// ROI expansion margins in voxels of the follow-up grid. The z margin is
/// smaller because axial spacing is usually coarser.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoiMargins {
    pub dx: i32,
    pub dy: i32,
    pub dz: i32,
}

impl Default for RoiMargins {
    fn default() -> Self {
        RoiMargins {
            dx: 10,
            dy: 10,
            dz: 5,
        }
    }
}

/// A baseline/follow-up lesion pair under consideration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub baseline_id: u32,
    pub followup_id: u32,
    /// Ground-truth correspondence where known (train/val data).
    pub label: Option<bool>,
}

/// Which of the four hierarchical rules produced the extraction points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionCase {
    I,
    II,
    III,
    IV,
}

impl std::fmt::Display for ExtractionCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExtractionCase::I => "I",
            ExtractionCase::II => "II",
            ExtractionCase::III => "III",
            ExtractionCase::IV => "IV",
        })
    }
}

/// Extraction points plus the cropped patch pair.
#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub case_used: ExtractionCase,
    /// Extraction point in the baseline grid.
    pub p_baseline: [i32; 3],
    /// Extraction point in the original follow-up grid.
    pub p_followup: [i32; 3],
    pub baseline_patch: PatchData,
    pub followup_patch: PatchData,
}

/// Map CT HU to [0, 1] over the fixed window.
#[inline]
pub fn normalize_ct(v: f32) -> f32 {
    let (lo, hi) = CT_WINDOW;
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

/// Map PET SUV to [0, 1].
#[inline]
pub fn normalize_pet(v: f32) -> f32 {
    (v / PET_NORM_SUV).clamp(0.0, 1.0)
}

#[inline]
fn to_f64(p: [i32; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Round a continuous point to the nearest voxel, halves away from zero.
/// Case membership depends on this convention, so it is centralized here.
#[inline]
pub fn round_voxel(p: [f64; 3]) -> [i32; 3] {
    [
        p[0].round() as i32,
        p[1].round() as i32,
        p[2].round() as i32,
    ]
}

/// The "corrected" center of mass of a voxel set: take z = round(com.z),
/// re-center xy within that axial slice (falling back to the nearest
/// non-empty slice, ties to smaller z) and round.
pub fn corrected_com(voxels: &[[i32; 3]]) -> Result<[i32; 3]> {
    if voxels.is_empty() {
        return Err(Error::InvalidInput(
            "corrected CoM of an empty voxel set".into(),
        ));
    }
    let com = center_of_mass(voxels);
    let z0 = com[2].round() as i32;
    let z = if axial_centroid(voxels, z0).is_some() {
        z0
    } else {
        // Nearest slice that intersects the set; ties go to the smaller z.
        let mut best: Option<i32> = None;
        for v in voxels {
            let z = v[2];
            best = Some(match best {
                None => z,
                Some(b) => {
                    let (dz, db) = ((z - z0).abs(), (b - z0).abs());
                    if dz < db || (dz == db && z < b) {
                        z
                    } else {
                        b
                    }
                }
            });
        }
        best.expect("non-empty voxel set")
    };
    let c = axial_centroid(voxels, z).expect("chosen slice is non-empty");
    Ok([c[0].round() as i32, c[1].round() as i32, z])
}

/// All candidate lesion pairs: a follow-up lesion is a candidate partner of
/// a baseline lesion iff any of its voxels lies inside the baseline lesion's
/// bounding box projected into follow-up coordinates and expanded by the
/// margins. Output is ordered by (baseline_id, followup_id).
pub fn candidate_pairs(
    baseline_lesions: &[Lesion],
    followup_lesions: &[Lesion],
    t: &AffineTransform,
    margins: RoiMargins,
) -> Vec<CandidatePair> {
    let mut base_sorted: Vec<&Lesion> = baseline_lesions.iter().collect();
    base_sorted.sort_by_key(|l| l.id);
    let mut follow_sorted: Vec<&Lesion> = followup_lesions.iter().collect();
    follow_sorted.sort_by_key(|l| l.id);

    let mut out = Vec::new();
    for b in base_sorted {
        // Axis-aligned hull of the 8 projected bounding-box corners.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for cx in [b.bbox[0][0], b.bbox[1][0]] {
            for cy in [b.bbox[0][1], b.bbox[1][1]] {
                for cz in [b.bbox[0][2], b.bbox[1][2]] {
                    let p = t.forward([cx as f64, cy as f64, cz as f64]);
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
        let lo = [
            lo[0] - margins.dx as f64,
            lo[1] - margins.dy as f64,
            lo[2] - margins.dz as f64,
        ];
        let hi = [
            hi[0] + margins.dx as f64,
            hi[1] + margins.dy as f64,
            hi[2] + margins.dz as f64,
        ];
        for f in &follow_sorted {
            // Cheap reject: the lesion's bounding box must meet the ROI.
            let bbox_hits = (0..3).all(|a| {
                (f.bbox[1][a] as f64) >= lo[a] && (f.bbox[0][a] as f64) <= hi[a]
            });
            if !bbox_hits {
                continue;
            }
            let inside = f
                .voxels
                .iter()
                .any(|v| (0..3).all(|a| (v[a] as f64) >= lo[a] && (v[a] as f64) <= hi[a]));
            if inside {
                out.push(CandidatePair {
                    baseline_id: b.id,
                    followup_id: f.id,
                    label: None,
                });
            }
        }
    }
    out
}

/// Crop one multi-channel patch centered at an integer extraction point.
///
/// The axial window is `[x−25, x+24] × [y−25, y+24]`; the z window extends
/// `z_half` slices each way. Out-of-bounds voxels take the modality fill
/// value before normalization, so a corner patch is padded with air (CT),
/// zero activity (PET) and background (mask). The segmented-CT channel is
/// the mask times the *normalized* CT, making masked-out regions exactly 0.
pub fn crop_patch(tp: &TimePointVolumes, center: [i32; 3], spec: &PatchSpec) -> PatchData {
    let [nc, nz, ny, nx] = spec.array_shape();
    let half = PATCH_XY as i32 / 2;
    let z_half = spec.shape.z_half();
    let mut out = Array4::<f32>::zeros((nc, nz, ny, nx));
    for kz in 0..nz {
        let z = center[2] - z_half + kz as i32;
        for ky in 0..ny {
            let y = center[1] - half + ky as i32;
            for kx in 0..nx {
                let x = center[0] - half + kx as i32;
                let p = [x, y, z];
                let ct = normalize_ct(tp.ct.at_or_fill(p));
                out[(0, kz, ky, kx)] = ct;
                if nc > 1 {
                    out[(1, kz, ky, kx)] = match spec.channels {
                        PatchChannels::Ct => unreachable!("single-channel spec"),
                        PatchChannels::CtPet => normalize_pet(tp.pet.at_or_fill(p)),
                        PatchChannels::CtSeg => tp.mask.at_or_fill(p),
                        PatchChannels::CtSegCt => tp.mask.at_or_fill(p) * ct,
                    };
                }
            }
        }
    }
    out
}

/// Rotate one patch by k·90° in the axial plane (all channels and slices
/// identically).
pub fn rotate_patch(patch: &PatchData, k: u8) -> PatchData {
    let k = k % 4;
    if k == 0 {
        return patch.clone();
    }
    let (nc, nz, ny, nx) = patch.dim();
    debug_assert_eq!(ny, nx, "axial window is square");
    let n = ny;
    let mut out = Array4::<f32>::zeros((nc, nz, ny, nx));
    for c in 0..nc {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (sy, sx) = match k {
                        1 => (x, n - 1 - y),
                        2 => (n - 1 - y, n - 1 - x),
                        3 => (n - 1 - x, y),
                        _ => unreachable!(),
                    };
                    out[(c, z, y, x)] = patch[(c, z, sy, sx)];
                }
            }
        }
    }
    out
}

/// Rotate both patches of an extraction result by k·90° axially.
pub fn rotate_patch_pair(pair: &ExtractionResult, k: u8) -> ExtractionResult {
    ExtractionResult {
        case_used: pair.case_used,
        p_baseline: pair.p_baseline,
        p_followup: pair.p_followup,
        baseline_patch: rotate_patch(&pair.baseline_patch, k),
        followup_patch: rotate_patch(&pair.followup_patch, k),
    }
}

/// Choose extraction points for a lesion pair by the Case I→IV hierarchy
/// and crop the patch pair. See the module docs for the case definitions.
pub fn extract_pair(
    b: &Lesion,
    f: &Lesion,
    t: &AffineTransform,
    spec: &PatchSpec,
    volumes: &ScanPair,
) -> Result<ExtractionResult> {
    let t_inv = t.inverted()?;

    let (case_used, p_baseline, p_followup) = choose_points(b, f, t, &t_inv)?;

    Ok(ExtractionResult {
        case_used,
        p_baseline,
        p_followup,
        baseline_patch: crop_patch(&volumes.baseline, p_baseline, spec),
        followup_patch: crop_patch(&volumes.followup, p_followup, spec),
    })
}

/// The geometric core of [`extract_pair`], separated so tests can exercise
/// the case hierarchy without building volumes.
pub fn choose_points(
    b: &Lesion,
    f: &Lesion,
    t: &AffineTransform,
    t_inv: &AffineTransform,
) -> Result<(ExtractionCase, [i32; 3], [i32; 3])> {
    // Case I: follow-up corrected CoM projected into the baseline lesion.
    let f_ccom = corrected_com(&f.voxels)?;
    let mapped_b = round_voxel(t_inv.forward(to_f64(f_ccom)));
    if b.contains(mapped_b) {
        return Ok((ExtractionCase::I, mapped_b, f_ccom));
    }

    // Case II: baseline corrected CoM projected into the follow-up lesion.
    let b_ccom = corrected_com(&b.voxels)?;
    let mapped_f = round_voxel(t.forward(to_f64(b_ccom)));
    if f.contains(mapped_f) {
        return Ok((ExtractionCase::II, b_ccom, mapped_f));
    }

    // Case III: overlap of the baseline lesion with the inverse-mapped
    // follow-up lesion, in baseline space.
    let overlap: Vec<[i32; 3]> = f
        .voxels
        .iter()
        .map(|v| round_voxel(t_inv.forward(to_f64(*v))))
        .filter(|q| b.contains(*q))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !overlap.is_empty() {
        let p_b = corrected_com(&overlap)?;
        let mut p_f = round_voxel(t.forward(to_f64(p_b)));
        // Keep the follow-up point inside the lesion's slice range (the
        // rounded projection can drift one slice out for a skewed fit).
        p_f[2] = p_f[2].clamp(f.z_min(), f.z_max());
        return Ok((ExtractionCase::III, p_b, p_f));
    }

    // Case IV: disjoint lesions. The smaller lesion (ties: baseline) keeps
    // its corrected CoM; the larger one takes a z-position half the smaller
    // lesion's slice extent away from its nearer end.
    let baseline_is_smaller = b.volume_vox <= f.volume_vox;
    let (s, l) = if baseline_is_smaller { (b, f) } else { (f, b) };
    let p_s = corrected_com(&s.voxels)?;
    let dz_s = s.z_max() - s.z_min() + 1;

    // Compare CoM z-positions in the larger lesion's frame.
    let s_com_in_l = if baseline_is_smaller {
        t.forward(s.com)
    } else {
        t_inv.forward(s.com)
    };
    let z_extr = if s_com_in_l[2] > l.com[2] {
        l.z_max() as f64 - dz_s as f64 / 2.0
    } else {
        l.z_min() as f64 + dz_s as f64 / 2.0
    };
    let z_l = (z_extr.round() as i32).clamp(l.z_min(), l.z_max());
    let xy = axial_centroid(&l.voxels, z_l).unwrap_or([l.com[0], l.com[1]]);
    let p_l = [xy[0].round() as i32, xy[1].round() as i32, z_l];

    let (p_baseline, p_followup) = if baseline_is_smaller {
        (p_s, p_l)
    } else {
        (p_l, p_s)
    };
    Ok((ExtractionCase::IV, p_baseline, p_followup))
}
