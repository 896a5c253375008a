//! Volume representation, file I/O and lesion labeling.
//!
//! A [`Volume`] is a dense 3D scalar grid (CT, PET or binary mask) with voxel
//! spacing in millimeters. Lesions are 26-connected components of a binary
//! mask, labeled deterministically so that IDs are stable across runs.
//!
//! On disk a volume is a `<name>.volhdr` / `<name>.volraw` pair: the header is
//! a small JSON document (`dims`, `spacing_mm`, `modality`), the payload is
//! `nx·ny·nz` little-endian 32-bit floats with x varying fastest, then y,
//! then z.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::AffineTransform;

/// Scalar meaning of a volume's voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "MASK")]
    Mask,
}

impl Modality {
    /// Value used for samples that fall outside the volume (air for CT,
    /// zero activity for PET, background for masks).
    pub fn fill_value(self) -> f32 {
        match self {
            Modality::Ct => -1024.0,
            Modality::Pet => 0.0,
            Modality::Mask => 0.0,
        }
    }
}

/// Dense 3D scalar grid with spacing and modality tag.
///
/// Data is stored x-fastest: `data[x + nx*(y + ny*z)]`.
#[derive(Debug, Clone)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    data: Vec<f32>,
}

/// JSON header written next to the raw payload.
#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    modality: Modality,
}

impl Volume {
    /// Build a volume from raw data, validating the type invariants.
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        modality: Modality,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Dimension(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        let vol = Volume {
            dims,
            spacing,
            modality,
            data,
        };
        vol.check_mask_values()?;
        Ok(vol)
    }

    /// All-zero volume (useful for masks and as a canvas).
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], modality: Modality) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, modality, vec![0.0; n])
    }

    /// Evaluate `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        modality: Modality,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, modality, data)
    }

    fn check_mask_values(&self) -> Result<()> {
        if self.modality == Modality::Mask {
            if let Some(bad) = self.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidInput(format!(
                    "MASK volume contains value {bad} outside {{0, 1}}"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Flat index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// True if the signed voxel coordinate lies inside the grid.
    #[inline]
    pub fn in_bounds(&self, p: [i32; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Voxel value at a signed coordinate, or `None` when out of bounds.
    #[inline]
    pub fn at(&self, p: [i32; 3]) -> Option<f32> {
        if self.in_bounds(p) {
            Some(self.get(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    /// Voxel value at a signed coordinate, falling back to the modality's
    /// fill value outside the grid.
    #[inline]
    pub fn at_or_fill(&self, p: [i32; 3]) -> f32 {
        self.at(p).unwrap_or_else(|| self.modality.fill_value())
    }

    /// Resolve `<stem>.volhdr` / `<stem>.volraw` from a stem or either file.
    fn header_raw_paths(path: &Path) -> (PathBuf, PathBuf) {
        match path.extension().and_then(|e| e.to_str()) {
            Some("volhdr") => (path.to_path_buf(), path.with_extension("volraw")),
            Some("volraw") => (path.with_extension("volhdr"), path.to_path_buf()),
            _ => {
                let mut hdr = path.as_os_str().to_owned();
                hdr.push(".volhdr");
                let mut raw = path.as_os_str().to_owned();
                raw.push(".volraw");
                (PathBuf::from(hdr), PathBuf::from(raw))
            }
        }
    }

    /// Load a volume from a header/raw pair. `path` may be the stem or
    /// either of the two files.
    pub fn load(path: impl AsRef<Path>) -> Result<Volume> {
        let (hdr_path, raw_path) = Self::header_raw_paths(path.as_ref());
        let hdr_bytes = fs::read(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
        let header: VolumeHeader = serde_json::from_slice(&hdr_bytes)
            .map_err(|e| Error::format(&hdr_path, format!("invalid header JSON: {e}")))?;
        let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if raw.len() != n * 4 {
            return Err(Error::format(
                &raw_path,
                format!(
                    "payload holds {} bytes but dims {:?} require {}",
                    raw.len(),
                    header.dims,
                    n * 4
                ),
            ));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Volume::new(header.dims, header.spacing_mm, header.modality, data)
            .map_err(|e| Error::format(&hdr_path, e.to_string()))
    }

    /// Write the header/raw pair for this volume. `path` is treated as the
    /// stem (extensions are appended).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (hdr_path, raw_path) = Self::header_raw_paths(path.as_ref());
        if let Some(dir) = hdr_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let header = VolumeHeader {
            dims: self.dims,
            spacing_mm: self.spacing,
            modality: self.modality,
        };
        let hdr_json = serde_json::to_vec_pretty(&header)
            .map_err(|e| Error::format(&hdr_path, e.to_string()))?;
        fs::write(&hdr_path, hdr_json).map_err(|e| Error::io(&hdr_path, e))?;

        let mut raw = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        file.write_all(&raw).map_err(|e| Error::io(&raw_path, e))?;
        Ok(())
    }
}

/// Order voxels by (z, y, x); the canonical order used for lesion storage,
/// tie-breaking and deterministic labeling.
#[inline]
pub fn voxel_cmp(a: [i32; 3], b: [i32; 3]) -> Ordering {
    (a[2], a[1], a[0]).cmp(&(b[2], b[1], b[0]))
}

/// A labeled 26-connected component of a binary mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lesion {
    /// Label, 1-based; 1 is the largest component.
    pub id: u32,
    /// Member voxels, sorted by (z, y, x).
    pub voxels: Vec<[i32; 3]>,
    /// Unweighted center of mass in voxel units.
    pub com: [f64; 3],
    /// Inclusive bounding box: `[min, max]` per axis.
    pub bbox: [[i32; 3]; 2],
    /// Number of member voxels.
    pub volume_vox: usize,
}

impl Lesion {
    /// Build a lesion from its voxel set. Voxels are sorted and deduplicated;
    /// 26-connectedness is the caller's responsibility (labeling guarantees
    /// it for segmentation output).
    pub fn from_voxels(id: u32, mut voxels: Vec<[i32; 3]>) -> Result<Lesion> {
        if voxels.is_empty() {
            return Err(Error::InvalidInput(format!("lesion {id} has no voxels")));
        }
        voxels.sort_unstable_by(|a, b| voxel_cmp(*a, *b));
        voxels.dedup();
        let com = center_of_mass(&voxels);
        let mut bbox = [voxels[0], voxels[0]];
        for v in &voxels {
            for a in 0..3 {
                bbox[0][a] = bbox[0][a].min(v[a]);
                bbox[1][a] = bbox[1][a].max(v[a]);
            }
        }
        let volume_vox = voxels.len();
        Ok(Lesion {
            id,
            voxels,
            com,
            bbox,
            volume_vox,
        })
    }

    /// Membership test (binary search over the sorted voxel list).
    pub fn contains(&self, p: [i32; 3]) -> bool {
        self.voxels.binary_search_by(|v| voxel_cmp(*v, p)).is_ok()
    }

    pub fn z_min(&self) -> i32 {
        self.bbox[0][2]
    }

    pub fn z_max(&self) -> i32 {
        self.bbox[1][2]
    }

    /// Centroid of the lesion's voxels on axial slice `z`, if any.
    pub fn axial_centroid(&self, z: i32) -> Option<[f64; 2]> {
        axial_centroid(&self.voxels, z)
    }
}

/// Unweighted mean of voxel coordinates.
pub fn center_of_mass(voxels: &[[i32; 3]]) -> [f64; 3] {
    let n = voxels.len() as f64;
    let mut sum = [0.0f64; 3];
    for v in voxels {
        for a in 0..3 {
            sum[a] += v[a] as f64;
        }
    }
    [sum[0] / n, sum[1] / n, sum[2] / n]
}

/// Intensity-weighted center of mass (alternative to the default binary
/// CoM; not used by the pipeline unless explicitly requested).
pub fn center_of_mass_weighted(voxels: &[[i32; 3]], weights: &Volume) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut total = 0.0f64;
    for v in voxels {
        let w = weights.at_or_fill(*v).max(0.0) as f64;
        total += w;
        for a in 0..3 {
            sum[a] += w * v[a] as f64;
        }
    }
    if total <= 0.0 {
        return center_of_mass(voxels);
    }
    [sum[0] / total, sum[1] / total, sum[2] / total]
}

/// Centroid of the voxels lying on axial slice `z`, or `None` when the slice
/// does not intersect the set.
pub fn axial_centroid(voxels: &[[i32; 3]], z: i32) -> Option<[f64; 2]> {
    let mut sum = [0.0f64; 2];
    let mut n = 0usize;
    for v in voxels {
        if v[2] == z {
            sum[0] += v[0] as f64;
            sum[1] += v[1] as f64;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some([sum[0] / n as f64, sum[1] / n as f64])
    }
}

/// 26-connected components of the voxels satisfying `pred`, in deterministic
/// scan order (seeded by ascending flat index, x fastest).
fn components_where(
    dims: [usize; 3],
    pred: impl Fn(usize, usize, usize) -> bool,
) -> Vec<Vec<[i32; 3]>> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);

    let mut fg = vec![false; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                fg[idx(x, y, z)] = pred(x, y, z);
            }
        }
    }

    let mut visited = vec![false; n];
    let mut components = Vec::new();
    let mut stack: Vec<[i32; 3]> = Vec::new();

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(x, y, z);
                if !fg[i] || visited[i] {
                    continue;
                }
                visited[i] = true;
                stack.push([x as i32, y as i32, z as i32]);
                let mut voxels = Vec::new();
                while let Some(v) = stack.pop() {
                    voxels.push(v);
                    for dz in -1i32..=1 {
                        for dy in -1i32..=1 {
                            for dx in -1i32..=1 {
                                if dx == 0 && dy == 0 && dz == 0 {
                                    continue;
                                }
                                let q = [v[0] + dx, v[1] + dy, v[2] + dz];
                                if q[0] < 0
                                    || q[1] < 0
                                    || q[2] < 0
                                    || q[0] as usize >= nx
                                    || q[1] as usize >= ny
                                    || q[2] as usize >= nz
                                {
                                    continue;
                                }
                                let qi = idx(q[0] as usize, q[1] as usize, q[2] as usize);
                                if fg[qi] && !visited[qi] {
                                    visited[qi] = true;
                                    stack.push(q);
                                }
                            }
                        }
                    }
                }
                components.push(voxels);
            }
        }
    }
    components
}

/// Turn raw components into labeled lesions: labels 1..K by decreasing voxel
/// count, ties broken by the smallest (z, y, x) of the component's minimum
/// voxel.
fn label_components(mut components: Vec<Vec<[i32; 3]>>) -> Result<Vec<Lesion>> {
    for c in &mut components {
        c.sort_unstable_by(|a, b| voxel_cmp(*a, *b));
    }
    components.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then_with(|| voxel_cmp(a[0], b[0]))
    });
    components
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| Lesion::from_voxels(i as u32 + 1, voxels))
        .collect()
}

/// Threshold the PET volume inside the bone mask and label lesions.
///
/// A voxel is foreground iff `pet >= threshold` and `bone_mask == 1`. The
/// returned mask is binary; lesions are its 26-connected components with
/// deterministic labels (largest first).
pub fn segment_lesions(
    pet: &Volume,
    bone_mask: &Volume,
    threshold: f64,
) -> Result<(Volume, Vec<Lesion>)> {
    if pet.dims() != bone_mask.dims() {
        return Err(Error::Dimension(format!(
            "pet dims {:?} != bone mask dims {:?}",
            pet.dims(),
            bone_mask.dims()
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput(format!(
            "segmentation threshold must be > 0, got {threshold}"
        )));
    }
    let thr = threshold as f32;
    let fg = |x: usize, y: usize, z: usize| pet.get(x, y, z) >= thr && bone_mask.get(x, y, z) == 1.0;

    let mut mask = Volume::zeros(pet.dims(), pet.spacing(), Modality::Mask)?;
    let [nx, ny, nz] = pet.dims();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if fg(x, y, z) {
                    mask.set(x, y, z, 1.0);
                }
            }
        }
    }
    let lesions = label_components(components_where(pet.dims(), fg))?;
    Ok((mask, lesions))
}

/// Label the 26-connected components of an existing binary mask.
pub fn label_mask(mask: &Volume) -> Result<Vec<Lesion>> {
    let fg = |x: usize, y: usize, z: usize| mask.get(x, y, z) > 0.5;
    label_components(components_where(mask.dims(), fg))
}

/// CT, PET and lesion mask sharing one voxel grid at a single time point.
#[derive(Debug, Clone)]
pub struct TimePointVolumes {
    pub ct: Volume,
    pub pet: Volume,
    pub mask: Volume,
}

impl TimePointVolumes {
    pub fn new(ct: Volume, pet: Volume, mask: Volume) -> Result<Self> {
        let tp = TimePointVolumes { ct, pet, mask };
        tp.validate()?;
        Ok(tp)
    }

    /// Check the shared-grid invariant.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pet", &self.pet), ("mask", &self.mask)] {
            if v.dims() != self.ct.dims() {
                return Err(Error::Dimension(format!(
                    "{name} dims {:?} != ct dims {:?}",
                    v.dims(),
                    self.ct.dims()
                )));
            }
            if v.spacing() != self.ct.spacing() {
                return Err(Error::Dimension(format!(
                    "{name} spacing {:?} != ct spacing {:?}",
                    v.spacing(),
                    self.ct.spacing()
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.ct.dims()
    }
}

/// A baseline/follow-up study pair, plus the registration result once known.
///
/// The transform maps baseline voxel coordinates into the follow-up grid.
#[derive(Debug, Clone)]
pub struct ScanPair {
    pub baseline: TimePointVolumes,
    pub followup: TimePointVolumes,
    pub transform: Option<AffineTransform>,
}

impl ScanPair {
    pub fn new(baseline: TimePointVolumes, followup: TimePointVolumes) -> Result<Self> {
        baseline.validate()?;
        followup.validate()?;
        Ok(ScanPair {
            baseline,
            followup,
            transform: None,
        })
    }

    /// The transform, or an error naming the missing stage.
    pub fn transform(&self) -> Result<&AffineTransform> {
        self.transform
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("scan pair has no registration transform".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn mask_from_voxels(dims: [usize; 3], voxels: &[[usize; 3]]) -> Volume {
        let mut m = Volume::zeros(dims, [1.0, 1.0, 1.0], Modality::Mask).unwrap();
        for &[x, y, z] in voxels {
            m.set(x, y, z, 1.0);
        }
        m
    }

    fn ones_mask(dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, [1.0, 1.0, 1.0], Modality::Mask, vec![1.0; n]).unwrap()
    }

    fn pet_from_voxels(dims: [usize; 3], voxels: &[[usize; 3]], value: f32) -> Volume {
        let mut p = Volume::zeros(dims, [1.0, 1.0, 1.0], Modality::Pet).unwrap();
        for &[x, y, z] in voxels {
            p.set(x, y, z, value);
        }
        p
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("case/ct_baseline");
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let vol = Volume::from_fn([7, 5, 3], [1.52, 1.52, 4.07], Modality::Ct, |_, _, _| {
            rng.gen_range(-1024.0..2048.0)
        })
        .unwrap();
        vol.save(&stem).unwrap();
        let back = Volume::load(&stem).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.spacing(), vol.spacing());
        assert_eq!(back.modality(), vol.modality());
        assert_eq!(back.data(), vol.data());
        // Loading via either concrete file name works too.
        let via_hdr = Volume::load(dir.path().join("case/ct_baseline.volhdr")).unwrap();
        assert_eq!(via_hdr.data(), vol.data());
    }

    #[test]
    fn load_rejects_payload_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vol");
        let vol = Volume::zeros([4, 4, 2], [1.0, 1.0, 1.0], Modality::Pet).unwrap();
        vol.save(&stem).unwrap();
        // Truncate the payload by one float: 32 voxels declared, 31 stored.
        let raw_path = dir.path().join("vol.volraw");
        let raw = fs::read(&raw_path).unwrap();
        fs::write(&raw_path, &raw[..raw.len() - 4]).unwrap();
        let err = Volume::load(&stem).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
    }

    #[test]
    fn mask_values_outside_zero_one_are_rejected() {
        let err = Volume::new([2, 1, 1], [1.0; 3], Modality::Mask, vec![0.0, 0.5]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        // The same rule applies on load.
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let vol = Volume::new([2, 1, 1], [1.0; 3], Modality::Pet, vec![0.0, 0.5]).unwrap();
        vol.save(&stem).unwrap();
        let hdr_path = dir.path().join("m.volhdr");
        let hdr = fs::read_to_string(&hdr_path).unwrap().replace("PET", "MASK");
        fs::write(&hdr_path, hdr).unwrap();
        assert!(Volume::load(&stem).is_err());
    }

    #[test]
    fn segment_all_zero_pet_yields_no_lesions() {
        let dims = [6, 6, 4];
        let pet = Volume::zeros(dims, [1.0; 3], Modality::Pet).unwrap();
        let (mask, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
        assert!(lesions.is_empty());
    }

    #[test]
    fn segment_two_disjoint_blobs() {
        let dims = [12, 8, 8];
        let mut voxels = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    voxels.push([x, y, z]);
                }
            }
        }
        for z in 4..7 {
            for y in 4..7 {
                for x in 8..11 {
                    voxels.push([x, y, z]);
                }
            }
        }
        let pet = pet_from_voxels(dims, &voxels, 5.0);
        let (_, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();
        assert_eq!(lesions.len(), 2);
        assert_eq!(lesions[0].volume_vox, 27);
        assert_eq!(lesions[1].volume_vox, 27);
        // Equal size: label 1 goes to the component with the smaller
        // (z, y, x) minimum voxel.
        assert_eq!(lesions[0].voxels[0], [1, 1, 1]);
        assert_eq!(lesions[1].voxels[0], [8, 4, 4]);
    }

    #[test]
    fn blob_outside_bone_mask_is_dropped() {
        let dims = [8, 8, 4];
        let pet = pet_from_voxels(dims, &[[2, 2, 1], [3, 2, 1]], 9.0);
        let bone = mask_from_voxels(dims, &[[6, 6, 3]]);
        let (mask, lesions) = segment_lesions(&pet, &bone, 3.0).unwrap();
        assert!(lesions.is_empty());
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_voxels_are_26_connected() {
        let dims = [6, 6, 6];
        let pet = pet_from_voxels(dims, &[[1, 1, 1], [2, 2, 2], [3, 3, 3]], 4.0);
        let (_, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();
        assert_eq!(lesions.len(), 1);
        assert_eq!(lesions[0].volume_vox, 3);
    }

    #[test]
    fn labels_are_ordered_by_size_then_min_voxel() {
        let dims = [16, 6, 6];
        // Three components: sizes 2, 3, 2. Expect label 1 -> size 3,
        // labels 2/3 -> the two pairs in (z, y, x) order of their minima.
        let pet = pet_from_voxels(
            dims,
            &[
                [10, 1, 1],
                [11, 1, 1], // pair A, min (z=1,y=1,x=10)
                [1, 1, 4],
                [2, 1, 4],
                [3, 1, 4], // triple
                [1, 1, 1],
                [1, 2, 1], // pair B, min (z=1,y=1,x=1)
            ],
            8.0,
        );
        let (_, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();
        assert_eq!(lesions.len(), 3);
        assert_eq!(lesions[0].volume_vox, 3);
        assert_eq!(lesions[1].voxels[0], [1, 1, 1]);
        assert_eq!(lesions[2].voxels[0], [10, 1, 1]);
    }

    #[test]
    fn center_of_mass_examples() {
        assert_eq!(center_of_mass(&[[5, 5, 5]]), [5.0, 5.0, 5.0]);
        assert_eq!(center_of_mass(&[[0, 0, 0], [2, 0, 0]]), [1.0, 0.0, 0.0]);
        // Random blob vs direct summation oracle.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let voxels: Vec<[i32; 3]> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(0..40),
                    rng.gen_range(0..40),
                    rng.gen_range(0..40),
                ]
            })
            .collect();
        let com = center_of_mass(&voxels);
        for a in 0..3 {
            let mean = voxels.iter().map(|v| v[a] as f64).sum::<f64>() / voxels.len() as f64;
            assert!((com[a] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn axial_centroid_examples() {
        let voxels = vec![[1, 1, 4], [3, 1, 4]];
        assert_eq!(axial_centroid(&voxels, 4), Some([2.0, 1.0]));
        assert_eq!(axial_centroid(&voxels, 5), None);
    }

    #[test]
    fn sphere_equatorial_centroid_matches_center() {
        // Digital sphere of radius 4 centered at (6, 6, 6).
        let mut voxels = Vec::new();
        for z in 0..13i32 {
            for y in 0..13i32 {
                for x in 0..13i32 {
                    let d2 = (x - 6).pow(2) + (y - 6).pow(2) + (z - 6).pow(2);
                    if d2 <= 16 {
                        voxels.push([x, y, z]);
                    }
                }
            }
        }
        let lesion = Lesion::from_voxels(1, voxels).unwrap();
        let c = lesion.axial_centroid(6).unwrap();
        assert!((c[0] - 6.0).abs() < 0.5 && (c[1] - 6.0).abs() < 0.5);
        // By symmetry the digital sphere is exact here.
        assert!((c[0] - 6.0).abs() < 1e-12 && (c[1] - 6.0).abs() < 1e-12);
    }

    /// Independent oracle: union-find connected components (different
    /// algorithm family from the scan-order flood fill in the crate).
    fn union_find_components(dims: [usize; 3], fg: &[bool]) -> Vec<Vec<[i32; 3]>> {
        let [nx, ny, nz] = dims;
        let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let mut parent: Vec<usize> = (0..fg.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut root = i;
            while parent[root] != root {
                root = parent[root];
            }
            let mut cur = i;
            while parent[cur] != root {
                let next = parent[cur];
                parent[cur] = root;
                cur = next;
            }
            root
        }
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !fg[idx(x, y, z)] {
                        continue;
                    }
                    for dz in -1i32..=1 {
                        for dy in -1i32..=1 {
                            for dx in -1i32..=1 {
                                let (qx, qy, qz) =
                                    (x as i32 + dx, y as i32 + dy, z as i32 + dz);
                                if qx < 0 || qy < 0 || qz < 0 {
                                    continue;
                                }
                                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                                if qx >= nx || qy >= ny || qz >= nz || !fg[idx(qx, qy, qz)] {
                                    continue;
                                }
                                let (a, b) = (
                                    find(&mut parent, idx(x, y, z)),
                                    find(&mut parent, idx(qx, qy, qz)),
                                );
                                if a != b {
                                    parent[a] = b;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<[i32; 3]>> = Default::default();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if fg[idx(x, y, z)] {
                        let root = find(&mut parent, idx(x, y, z));
                        groups
                            .entry(root)
                            .or_default()
                            .push([x as i32, y as i32, z as i32]);
                    }
                }
            }
        }
        groups.into_values().collect()
    }

    #[test]
    fn labeling_matches_union_find_oracle_on_random_masks() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for trial in 0..20 {
            let dims = [
                rng.gen_range(3..14),
                rng.gen_range(3..12),
                rng.gen_range(3..10),
            ];
            let density = 0.1 + 0.04 * trial as f64;
            let n = dims[0] * dims[1] * dims[2];
            let fg: Vec<bool> = (0..n).map(|_| rng.gen_bool(density.min(0.9))).collect();
            let pet = Volume::new(
                dims,
                [1.0; 3],
                Modality::Pet,
                fg.iter().map(|&b| if b { 5.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            let (_, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();

            let mut expected = union_find_components(dims, &fg);
            for c in &mut expected {
                c.sort_unstable_by(|a, b| voxel_cmp(*a, *b));
            }
            expected.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| voxel_cmp(a[0], b[0])));

            assert_eq!(lesions.len(), expected.len());
            for (lesion, exp) in lesions.iter().zip(&expected) {
                assert_eq!(lesion.voxels, *exp);
            }
        }
    }

    proptest! {
        #[test]
        fn component_union_equals_mask_support(
            nx in 1usize..9, ny in 1usize..9, nz in 1usize..7, seed in 0u64..1000
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let dims = [nx, ny, nz];
            let n = nx * ny * nz;
            let data: Vec<f32> = (0..n)
                .map(|_| if rng.gen_bool(0.35) { 4.0 } else { 0.0 })
                .collect();
            let pet = Volume::new(dims, [1.0; 3], Modality::Pet, data.clone()).unwrap();
            let (mask, lesions) = segment_lesions(&pet, &ones_mask(dims), 3.0).unwrap();

            // Union of lesion voxel sets equals the mask support, with no overlap.
            let mut seen = std::collections::BTreeSet::new();
            for lesion in &lesions {
                prop_assert!(lesion.volume_vox >= 1);
                prop_assert_eq!(lesion.volume_vox, lesion.voxels.len());
                for v in &lesion.voxels {
                    prop_assert!(seen.insert(*v), "voxel {:?} in two lesions", v);
                }
            }
            let support: usize = mask.data().iter().map(|&v| v as usize).sum();
            prop_assert_eq!(seen.len(), support);

            // Labels are 1..K with non-increasing sizes.
            for (i, lesion) in lesions.iter().enumerate() {
                prop_assert_eq!(lesion.id, i as u32 + 1);
                if i > 0 {
                    prop_assert!(lesions[i - 1].volume_vox >= lesion.volume_vox);
                }
                // com inside bbox.
                for a in 0..3 {
                    prop_assert!(lesion.com[a] >= lesion.bbox[0][a] as f64 - 1e-12);
                    prop_assert!(lesion.com[a] <= lesion.bbox[1][a] as f64 + 1e-12);
                }
            }
        }
    }
}
