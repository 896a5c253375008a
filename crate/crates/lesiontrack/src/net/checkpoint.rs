//! Versioned binary model checkpoints.
//!
//! Layout: an 8-byte magic (`LTCKPT1\0`), a little-endian u32 header
//! length, a JSON header (variant, patch spec, training metadata, and the
//! declared block table), then the parameter blocks as flat little-endian
//! f32 in declared layer order — trainable tensors plus batch-norm running
//! statistics.

use super::{SiameseNet, Variant};
use crate::error::{Error, Result};
use crate::patch::PatchSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"LTCKPT1\0";

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Seed of the training run that produced the weights.
    #[serde(default)]
    pub seed: u64,
    /// Number of epochs the run executed.
    #[serde(default)]
    pub epochs_trained: usize,
    /// 1-based epoch the stored weights come from (0 if untrained).
    #[serde(default)]
    pub best_epoch: usize,
    /// Validation loss at `best_epoch` (NaN-free; 0 if untrained).
    #[serde(default)]
    pub best_val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    variant: Variant,
    spec: PatchSpec,
    metadata: CheckpointMeta,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    len: usize,
}

/// Serializes the network (weights as f32) plus metadata to `path`.
pub fn save_checkpoint(net: &SiameseNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let blocks: Vec<BlockEntry> = (0..SiameseNet::STATE_BLOCKS)
        .map(|i| {
            let (name, data) = net.state_block(i);
            BlockEntry { name: name.to_string(), len: data.len() }
        })
        .collect();
    let header = Header {
        variant: net.variant(),
        spec: net.spec(),
        metadata: meta.clone(),
        blocks,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for i in 0..SiameseNet::STATE_BLOCKS {
        for &v in net.state_block(i).1 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, rebuilding the network topology from the header and
/// filling every declared parameter block.
pub fn load_checkpoint(path: &Path) -> Result<(SiameseNet, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let header_len =
        u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(Error::format(path, "truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    if header.spec.shape != header.variant.patch_shape() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint patch shape {} does not match variant {}",
                header.spec.shape, header.variant
            ),
        ));
    }

    let mut net = SiameseNet::new(header.variant, header.spec.channels, 0);
    if header.blocks.len() != SiameseNet::STATE_BLOCKS {
        return Err(Error::format(
            path,
            format!(
                "checkpoint declares {} parameter blocks, expected {}",
                header.blocks.len(),
                SiameseNet::STATE_BLOCKS
            ),
        ));
    }
    let mut offset = body_start;
    for i in 0..SiameseNet::STATE_BLOCKS {
        let (name, data) = net.state_block(i);
        let entry = &header.blocks[i];
        if entry.name != name || entry.len != data.len() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint block {i} is {}[{}], expected {}[{}]",
                    entry.name,
                    entry.len,
                    name,
                    data.len()
                ),
            ));
        }
        let nbytes = entry.len * 4;
        if bytes.len() < offset + nbytes {
            return Err(Error::format(path, "truncated checkpoint payload"));
        }
        let block = net.state_block_mut(i);
        for (j, chunk) in bytes[offset..offset + nbytes].chunks_exact(4).enumerate() {
            block[j] = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        offset += nbytes;
    }
    if offset != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after parameter blocks", bytes.len() - offset),
        ));
    }
    Ok((net, header.metadata))
}

/// SHA-256 of a file, lowercase hex. Used to pin checkpoints in reports.
pub fn checkpoint_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchChannels;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_patch(net: &SiameseNet, seed: u64) -> crate::patch::PatchData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let [c, z, y, x] = net.spec().array_shape();
        Array4::from_shape_fn((c, z, y, x), |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn checkpoint_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path1 = dir.path().join("model1.ckpt");
        let path2 = dir.path().join("model2.ckpt");
        let net = SiameseNet::new(Variant::D3Z5, PatchChannels::CtPet, 31);
        let meta = CheckpointMeta {
            seed: 31,
            epochs_trained: 12,
            best_epoch: 7,
            best_val_loss: 0.25,
        };
        save_checkpoint(&net, &meta, &path1).unwrap();
        let (loaded, meta2) = load_checkpoint(&path1).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.variant(), net.variant());
        assert_eq!(loaded.spec(), net.spec());
        // Weights already passed through f32 once, so a second round trip
        // is exact: the re-saved file is byte-identical.
        save_checkpoint(&loaded, &meta2, &path2).unwrap();
        assert_eq!(std::fs::read(&path1).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(
            checkpoint_sha256(&path1).unwrap(),
            checkpoint_sha256(&path2).unwrap()
        );
    }

    #[test]
    fn loaded_network_scores_close_to_the_original() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 32);
        save_checkpoint(&net, &CheckpointMeta::default(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let a = random_patch(&net, 1);
        let b = random_patch(&net, 2);
        let s1 = net.forward_pair(&a, &b).unwrap();
        let s2 = loaded.forward_pair(&a, &b).unwrap();
        // Only an f32 quantization apart.
        assert!((s1.p_true - s2.p_true).abs() < 1e-3);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 33);
        save_checkpoint(&net, &CheckpointMeta::default(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTCKPT0rest").unwrap();
        assert!(load_checkpoint(&bad).is_err());

        bytes.truncate(bytes.len() - 10);
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes).unwrap();
        assert!(load_checkpoint(&trunc).is_err());
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.bin");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            checkpoint_sha256(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
