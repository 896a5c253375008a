//! Intensity-difference reference classifier.
//!
//! A deliberately simple baseline to compare the learned network against:
//! the score of a patch pair is one minus the mean absolute intensity
//! difference, `y = 1 − (1/N²)·Σ|a − b|`, over single-channel 2D CT
//! patches normalized to [0, 1]. Identical patches score 1; maximally
//! different patches score 0.

use crate::error::{Error, Result};
use crate::patch::PatchData;

/// Scores a pair of single-channel 2D CT patches by mean absolute
/// intensity difference. Errors on shape mismatch or non-2D input.
pub fn intensity_reference(a: &PatchData, b: &PatchData) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "patch shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let dim = a.dim();
    if dim.0 != 1 || dim.1 != 1 {
        return Err(Error::InvalidInput(format!(
            "intensity reference is defined on single-channel 2D patches, got {:?}",
            a.shape()
        )));
    }
    let n2 = (dim.2 * dim.3) as f64;
    let mut sum = 0.0f64;
    for (&va, &vb) in a.iter().zip(b.iter()) {
        sum += (f64::from(va) - f64::from(vb)).abs();
    }
    Ok(1.0 - sum / n2)
}
