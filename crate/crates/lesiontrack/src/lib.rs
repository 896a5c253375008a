//! Automated lesion tracking between baseline and follow-up CT/PET scan pairs.
//!
//! The library implements a complete, fully automated pipeline:
//!
//! 1. **Segmentation** ([`volume`]): threshold the PET volume inside a bone
//!    mask and label lesions as 26-connected components.
//! 2. **Registration** ([`registration`]): recover a global affine transform
//!    between the two CT volumes with a multi-resolution intensity method.
//! 3. **Patch extraction** ([`patch`]): for every candidate lesion pair,
//!    choose a pair of extraction points with a hierarchy of four geometric
//!    rules and crop co-located multi-channel patches from both time points.
//! 4. **Classification** ([`net`]): a from-scratch Siamese convolutional
//!    network scores each patch pair as "same lesion" / "different lesion".
//!    A non-trainable intensity-difference reference model is included for
//!    comparison.
//! 5. **Tracking** ([`tracking`]): threshold the scored correspondence graph
//!    and derive per-lesion outcomes (remaining, split, fused, resolved, new).
//! 6. **Evaluation** ([`evaluation`]): ROC/AUC, G-mean threshold selection,
//!    confusion matrices and outcome-category success rates.
//! 7. **Phantom data** ([`phantom`]): a synthetic dual-modality phantom
//!    generator with exact correspondence ground truth, used for testing and
//!    end-to-end validation.
//!
//! The [`pipeline`] module ties the stages together behind a configuration
//! file and is what the `lesiontrack` command-line binary calls into.
//!
//! Runnable demonstrations of each stage live in the crate's `examples/`
//! directory (`cargo run --release -p lesiontrack --example <name>`).

pub mod error;
pub mod evaluation;
pub mod net;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod tracking;
pub mod volume;

pub use error::{Error, Result};
pub use registration::AffineTransform;
pub use volume::{Lesion, Modality, ScanPair, TimePointVolumes, Volume};
