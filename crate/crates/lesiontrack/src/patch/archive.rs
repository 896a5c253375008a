//! On-disk patch archive: a JSON manifest plus one raw float32 blob.
//!
//! The manifest (`<base>.manifest.json`) stores the patch spec and one
//! record per pair — lesion IDs, case, extraction points, optional label and
//! the byte offset of the pair's data. The blob (`<base>.patches.blob`)
//! stores, per pair, the baseline patch followed by the follow-up patch as
//! little-endian f32 in (channel, z, y, x) order. Records can be loaded
//! individually, so training can stream pairs without holding every patch
//! in memory.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{ExtractionCase, ExtractionResult, PatchData, PatchSpec};
use crate::error::{Error, Result};

/// Per-pair metadata stored in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub baseline_id: u32,
    pub followup_id: u32,
    pub case: ExtractionCase,
    pub p_baseline: [i32; 3],
    pub p_followup: [i32; 3],
    /// Ground-truth correspondence where known.
    pub label: Option<bool>,
    /// Byte offset of this pair's data within the blob.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: PatchSpec,
    values_per_patch: usize,
    pairs: Vec<PairRecord>,
}

fn archive_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut manifest = base.as_os_str().to_owned();
    manifest.push(".manifest.json");
    let mut blob = base.as_os_str().to_owned();
    blob.push(".patches.blob");
    (PathBuf::from(manifest), PathBuf::from(blob))
}

/// Streaming writer for a patch archive.
pub struct ArchiveWriter {
    spec: PatchSpec,
    values_per_patch: usize,
    manifest_path: PathBuf,
    blob: BufWriter<File>,
    pairs: Vec<PairRecord>,
    offset: u64,
}

impl ArchiveWriter {
    /// Create `<base>.manifest.json` / `<base>.patches.blob` (truncating any
    /// existing archive).
    pub fn create(base: impl AsRef<Path>, spec: PatchSpec) -> Result<Self> {
        let (manifest_path, blob_path) = archive_paths(base.as_ref());
        if let Some(dir) = blob_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let blob = File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Ok(ArchiveWriter {
            spec,
            values_per_patch: spec.values_per_patch(),
            manifest_path,
            blob: BufWriter::new(blob),
            pairs: Vec::new(),
            offset: 0,
        })
    }

    /// Append one extracted pair.
    pub fn append(
        &mut self,
        baseline_id: u32,
        followup_id: u32,
        label: Option<bool>,
        result: &ExtractionResult,
    ) -> Result<()> {
        for patch in [&result.baseline_patch, &result.followup_patch] {
            if patch.shape() != self.spec.array_shape() {
                return Err(Error::Dimension(format!(
                    "patch shape {:?} does not match archive spec {:?}",
                    patch.shape(),
                    self.spec.array_shape()
                )));
            }
        }
        let record = PairRecord {
            baseline_id,
            followup_id,
            case: result.case_used,
            p_baseline: result.p_baseline,
            p_followup: result.p_followup,
            label,
            offset: self.offset,
        };
        for patch in [&result.baseline_patch, &result.followup_patch] {
            for &v in patch.iter() {
                self.blob
                    .write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(&self.manifest_path, e))?;
            }
            self.offset += (self.values_per_patch * 4) as u64;
        }
        self.pairs.push(record);
        Ok(())
    }

    /// Flush the blob and write the manifest; returns the pair count.
    pub fn finish(mut self) -> Result<usize> {
        self.blob
            .flush()
            .map_err(|e| Error::io(&self.manifest_path, e))?;
        let manifest = Manifest {
            spec: self.spec,
            values_per_patch: self.values_per_patch,
            pairs: self.pairs,
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::format(&self.manifest_path, e.to_string()))?;
        fs::write(&self.manifest_path, json).map_err(|e| Error::io(&self.manifest_path, e))?;
        Ok(manifest.pairs.len())
    }
}

/// Random-access reader over a patch archive.
pub struct ArchiveReader {
    manifest: Manifest,
    blob: File,
    blob_path: PathBuf,
}

impl ArchiveReader {
    pub fn open(base: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, blob_path) = archive_paths(base.as_ref());
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&manifest_path, format!("invalid manifest: {e}")))?;
        if manifest.values_per_patch != manifest.spec.values_per_patch() {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "values_per_patch {} inconsistent with spec ({})",
                    manifest.values_per_patch,
                    manifest.spec.values_per_patch()
                ),
            ));
        }
        let blob = File::open(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let blob_len = blob
            .metadata()
            .map_err(|e| Error::io(&blob_path, e))?
            .len();
        let pair_bytes = (manifest.values_per_patch * 8) as u64;
        if let Some(r) = manifest.pairs.iter().find(|r| r.offset + pair_bytes > blob_len) {
            return Err(Error::format(
                &blob_path,
                format!(
                    "record ({}, {}) at offset {} exceeds blob length {}",
                    r.baseline_id, r.followup_id, r.offset, blob_len
                ),
            ));
        }
        Ok(ArchiveReader {
            manifest,
            blob,
            blob_path,
        })
    }

    pub fn spec(&self) -> PatchSpec {
        self.manifest.spec
    }

    pub fn len(&self) -> usize {
        self.manifest.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.pairs.is_empty()
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.manifest.pairs
    }

    /// Load the (baseline, follow-up) patches of record `i`.
    pub fn load_pair(&mut self, i: usize) -> Result<(PatchData, PatchData)> {
        let record = self
            .manifest
            .pairs
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("archive has no record {i}")))?;
        let n = self.manifest.values_per_patch;
        self.blob
            .seek(SeekFrom::Start(record.offset))
            .map_err(|e| Error::io(&self.blob_path, e))?;
        let mut bytes = vec![0u8; n * 8];
        self.blob
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(&self.blob_path, e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let [c, z, y, x] = self.manifest.spec.array_shape();
        let make = |slice: &[f32]| -> Result<PatchData> {
            Array4::from_shape_vec((c, z, y, x), slice.to_vec())
                .map_err(|e| Error::Dimension(format!("blob reshape failed: {e}")))
        };
        Ok((make(&values[..n])?, make(&values[n..])?))
    }
}
