//! Siamese convolutional network for patch-pair classification.
//!
//! Two weight-sharing branches (batch-norm / conv / ReLU / max-pool stacks)
//! map each patch of a pair to a feature vector; the merge layer takes the
//! element-wise absolute difference |h₁ − h₂|, and a single dense layer
//! plus softmax yields the probability that the two patches show the same
//! lesion. Three variants share one topology and differ only in the z
//! extents of kernels and pools: a 2D variant for 50×50 patches and two 3D
//! variants for 50×50×5 and 50×50×11 patches.
//!
//! Everything is f64 on the CPU. Branch evaluation is deterministic;
//! training-time stochasticity (dropout masks, shuffling) is injected
//! through a caller-provided seeded RNG.

mod checkpoint;
mod gradcheck;
mod layers;
mod reference;
pub mod train;

pub use checkpoint::{checkpoint_sha256, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::{BN_EPS, BN_MOMENTUM, INIT_STD};
pub use reference::intensity_reference;
pub use train::{train, EpochRecord, PlateauScheduler, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::patch::{PatchChannels, PatchData, PatchShape, PatchSpec};
use layers::{
    ce_softmax_grad, cross_entropy_mean, dropout_mask, relu_backward, relu_inplace, softmax_rows,
    BatchNorm, BnCache, Conv3, Dense, MaxPool3,
};
use ndarray::{Array2, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Dropout rate applied at the three head sites during training.
pub const DROPOUT_RATE: f64 = 0.4;

/// Network variant, one per supported patch shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// 2D network on 50×50 patches.
    #[serde(rename = "d2")]
    D2,
    /// 3D network on 50×50×5 patches.
    #[serde(rename = "d3_z5")]
    D3Z5,
    /// 3D network on 50×50×11 patches.
    #[serde(rename = "d3_z11")]
    D3Z11,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::D2, Variant::D3Z5, Variant::D3Z11];

    pub fn patch_shape(self) -> PatchShape {
        match self {
            Variant::D2 => PatchShape::P2d50,
            Variant::D3Z5 => PatchShape::P3d50x5,
            Variant::D3Z11 => PatchShape::P3d50x11,
        }
    }

    pub fn from_patch_shape(shape: PatchShape) -> Self {
        match shape {
            PatchShape::P2d50 => Variant::D2,
            PatchShape::P3d50x5 => Variant::D3Z5,
            PatchShape::P3d50x11 => Variant::D3Z11,
        }
    }

    /// z-direction kernel/stride layout; x/y layouts are shared by all
    /// variants.
    fn z_layout(self) -> ZLayout {
        match self {
            // conv kernels: kz per conv layer; pools: (kernel, stride) in z.
            Variant::D2 => ZLayout {
                conv_kz: [1, 1, 1],
                pool_z: [(1, 1), (1, 1), (1, 1)],
            },
            Variant::D3Z5 => ZLayout {
                conv_kz: [2, 2, 2],
                pool_z: [(1, 1), (1, 1), (1, 1)],
            },
            Variant::D3Z11 => ZLayout {
                conv_kz: [4, 3, 3],
                pool_z: [(2, 1), (1, 1), (2, 1)],
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::D2 => "d2",
            Variant::D3Z5 => "d3_z5",
            Variant::D3Z11 => "d3_z11",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2" => Ok(Variant::D2),
            "d3_z5" => Ok(Variant::D3Z5),
            "d3_z11" => Ok(Variant::D3Z11),
            other => Err(Error::InvalidInput(format!(
                "unknown net variant {other:?} (expected d2, d3_z5 or d3_z11)"
            ))),
        }
    }
}

struct ZLayout {
    conv_kz: [usize; 3],
    pool_z: [(usize, usize); 3],
}

/// Output shape of one named stage of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub name: &'static str,
    pub channels: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

/// Expected per-stage output shapes for a variant (independent of the
/// input channel count). The flattened feature width is
/// `50 · z · y · x` of the `pool3` row.
pub fn expected_stage_shapes(variant: Variant) -> [StageShape; 6] {
    let z = match variant {
        Variant::D2 => [1usize, 1, 1, 1, 1, 1],
        Variant::D3Z5 => [4, 4, 3, 3, 2, 2],
        Variant::D3Z11 => [8, 7, 5, 5, 3, 2],
    };
    [
        StageShape { name: "conv1", channels: 20, z: z[0], y: 46, x: 46 },
        StageShape { name: "pool1", channels: 20, z: z[1], y: 22, x: 22 },
        StageShape { name: "conv2", channels: 40, z: z[2], y: 22, x: 22 },
        StageShape { name: "pool2", channels: 40, z: z[3], y: 11, x: 11 },
        StageShape { name: "conv3", channels: 50, z: z[4], y: 9, x: 9 },
        StageShape { name: "pool3", channels: 50, z: z[5], y: 4, x: 4 },
    ]
}

/// Classifier output for one patch pair. Class 1 means "same lesion".
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairScore {
    /// Softmax probability of class 1 (the pair shows the same lesion).
    pub p_true: f64,
    /// Raw dense-layer outputs `[class 0, class 1]`.
    pub logits: [f64; 2],
}

/// One labelled training pair; `label` is true when both patches show the
/// same lesion.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub a: PatchData,
    pub b: PatchData,
    pub label: bool,
}

/// The Siamese classifier. Both branches are the same storage, so weight
/// sharing holds by construction.
#[derive(Debug, Clone)]
pub struct SiameseNet {
    variant: Variant,
    spec: PatchSpec,
    feature_dim: usize,
    shape_table: Vec<StageShape>,
    bn0: BatchNorm,
    conv1: Conv3,
    pool1: MaxPool3,
    bn1: BatchNorm,
    conv2: Conv3,
    pool2: MaxPool3,
    bn2: BatchNorm,
    conv3: Conv3,
    pool3: MaxPool3,
    bn3: BatchNorm,
    dense: Dense,
}

impl SiameseNet {
    /// Builds a freshly initialized network for the given patch layout.
    /// Truncated-normal weights, zero biases, identity batch norm. Every
    /// intermediate shape is asserted against the variant's shape table.
    pub fn new(variant: Variant, channels: PatchChannels, seed: u64) -> Self {
        let spec = PatchSpec { shape: variant.patch_shape(), channels };
        let in_c = channels.count();
        let zl = variant.z_layout();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        let conv1 = Conv3::new(20, in_c, zl.conv_kz[0], 5, 0, &mut rng);
        let pool1 = MaxPool3 { k: [zl.pool_z[0].0, 3, 3], s: [zl.pool_z[0].1, 2, 2] };
        let conv2 = Conv3::new(40, 20, zl.conv_kz[1], 3, 1, &mut rng);
        let pool2 = MaxPool3 { k: [zl.pool_z[1].0, 2, 2], s: [zl.pool_z[1].1, 2, 2] };
        let conv3 = Conv3::new(50, 40, zl.conv_kz[2], 3, 0, &mut rng);
        let pool3 = MaxPool3 { k: [zl.pool_z[2].0, 2, 2], s: [zl.pool_z[2].1, 2, 2] };

        // Dry-run the spatial chain and assert it matches the shape table.
        let [c0, z0, y0, x0] = spec.array_shape();
        assert_eq!(c0, in_c);
        let expected = expected_stage_shapes(variant);
        let mut shape_table = Vec::with_capacity(6);
        let mut cur = (z0, y0, x0);
        let convs = [&conv1, &conv2, &conv3];
        let pools = [&pool1, &pool2, &pool3];
        let chans = [20usize, 40, 50];
        for i in 0..3 {
            cur = convs[i].out_spatial(cur.0, cur.1, cur.2);
            let got = StageShape {
                name: expected[2 * i].name,
                channels: chans[i],
                z: cur.0,
                y: cur.1,
                x: cur.2,
            };
            assert_eq!(got, expected[2 * i], "{variant} {} shape", got.name);
            shape_table.push(got);
            cur = pools[i].out_spatial(cur.0, cur.1, cur.2);
            let got = StageShape {
                name: expected[2 * i + 1].name,
                channels: chans[i],
                z: cur.0,
                y: cur.1,
                x: cur.2,
            };
            assert_eq!(got, expected[2 * i + 1], "{variant} {} shape", got.name);
            shape_table.push(got);
        }
        let feature_dim = 50 * cur.0 * cur.1 * cur.2;
        let expected_feat = match variant {
            Variant::D2 => 800,
            Variant::D3Z5 | Variant::D3Z11 => 1600,
        };
        assert_eq!(feature_dim, expected_feat, "{variant} flattened feature width");

        let dense = Dense::new(feature_dim, 2, &mut rng);

        SiameseNet {
            variant,
            spec,
            feature_dim,
            shape_table,
            bn0: BatchNorm::new(in_c),
            conv1,
            pool1,
            bn1: BatchNorm::new(20),
            conv2,
            pool2,
            bn2: BatchNorm::new(40),
            conv3,
            pool3,
            bn3: BatchNorm::new(50),
            dense,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn spec(&self) -> PatchSpec {
        self.spec
    }

    /// Width of the flattened branch output (800 for 2D, 1600 for 3D).
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Realized per-stage output shapes, in branch order.
    pub fn shape_table(&self) -> &[StageShape] {
        &self.shape_table
    }

    /// Validates that a patch matches this network's input layout.
    fn check_patch(&self, p: &PatchData) -> Result<()> {
        let want = self.spec.array_shape();
        let got = p.shape();
        if got != want {
            return Err(Error::Dimension(format!(
                "patch shape {got:?} does not match network input {want:?}"
            )));
        }
        Ok(())
    }

    /// Scores a single pair in inference mode (running batch-norm
    /// statistics, no dropout).
    pub fn forward_pair(&self, a: &PatchData, b: &PatchData) -> Result<PairScore> {
        Ok(self.forward_pairs(&[(a, b)])?.remove(0))
    }

    /// Scores many pairs in inference mode. Results are independent of the
    /// internal batching.
    pub fn forward_pairs(&self, pairs: &[(&PatchData, &PatchData)]) -> Result<Vec<PairScore>> {
        for (a, b) in pairs {
            self.check_patch(a)?;
            self.check_patch(b)?;
        }
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let xa = batch_from_patches(chunk.iter().map(|(a, _)| *a), self.spec);
            let xb = batch_from_patches(chunk.iter().map(|(_, b)| *b), self.spec);
            let logits = self.infer_logits(&xa, &xb);
            let probs = softmax_rows(&logits);
            for i in 0..chunk.len() {
                out.push(PairScore {
                    p_true: probs[(i, 1)],
                    logits: [logits[(i, 0)], logits[(i, 1)]],
                });
            }
        }
        Ok(out)
    }

    /// Feature vector of one patch through a single branch (inference
    /// mode). Mostly useful for inspection and tests.
    pub fn branch_features(&self, p: &PatchData) -> Result<Vec<f64>> {
        self.check_patch(p)?;
        let x = batch_from_patches(std::iter::once(p), self.spec);
        let (f, _) = self.branch_forward(&x, false);
        Ok(f.into_raw_vec_and_offset().0)
    }

    fn infer_logits(&self, xa: &Array5<f64>, xb: &Array5<f64>) -> Array2<f64> {
        let (fa, _) = self.branch_forward(xa, false);
        let (fb, _) = self.branch_forward(xb, false);
        let merged = (&fa - &fb).mapv(f64::abs);
        self.dense.forward(&merged)
    }

    // -- branch plumbing ---------------------------------------------------

    fn branch_forward(&self, x: &Array5<f64>, train: bool) -> (Array2<f64>, BranchCache) {
        let (a1, bn0) = self.bn0.forward(x, train);
        let mut r1 = self.conv1.forward(&a1);
        relu_inplace(&mut r1);
        let (p1, am1) = self.pool1.forward(&r1);
        let (a2, bn1) = self.bn1.forward(&p1, train);
        let mut r2 = self.conv2.forward(&a2);
        relu_inplace(&mut r2);
        let (p2, am2) = self.pool2.forward(&r2);
        let (a3, bn2) = self.bn2.forward(&p2, train);
        let mut r3 = self.conv3.forward(&a3);
        relu_inplace(&mut r3);
        let (p3, am3) = self.pool3.forward(&r3);
        let (o, bn3) = self.bn3.forward(&p3, train);
        let post_shape = o.dim();
        let n = post_shape.0;
        let feat = o
            .into_shape_with_order((n, self.feature_dim))
            .expect("branch output is contiguous");
        (
            feat,
            BranchCache { bn0, a1, r1, am1, bn1, a2, r2, am2, bn2, a3, r3, am3, bn3, post_shape },
        )
    }

    fn branch_backward(&mut self, cache: &BranchCache, dfeat: Array2<f64>) {
        let d = dfeat
            .into_shape_with_order(cache.post_shape)
            .expect("feature gradient is contiguous");
        let d = self.bn3.backward(&cache.bn3, &d);
        let d = self.pool3.backward(&cache.am3, cache.r3.dim(), &d);
        let d = relu_backward(&cache.r3, &d);
        let d = self.conv3.backward(&cache.a3, &d);
        let d = self.bn2.backward(&cache.bn2, &d);
        let d = self.pool2.backward(&cache.am2, cache.r2.dim(), &d);
        let d = relu_backward(&cache.r2, &d);
        let d = self.conv2.backward(&cache.a2, &d);
        let d = self.bn1.backward(&cache.bn1, &d);
        let d = self.pool1.backward(&cache.am1, cache.r1.dim(), &d);
        let d = relu_backward(&cache.r1, &d);
        let d = self.conv1.backward(&cache.a1, &d);
        let _ = self.bn0.backward(&cache.bn0, &d);
    }

    fn commit_bn_running(&mut self, cache: &BranchCache) {
        self.bn0.update_running(&cache.bn0);
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
        self.bn3.update_running(&cache.bn3);
    }

    /// One training-mode forward pass over a batch of pairs. Branch A runs
    /// (and commits its running statistics) before branch B; dropout masks
    /// are drawn flat-mask, L1-mask, dense-mask in that order. The returned
    /// loss is the plain cross-entropy (the ℓ² penalty enters only through
    /// the optimizer).
    pub(crate) fn train_forward<R: Rng>(
        &mut self,
        xa: &Array5<f64>,
        xb: &Array5<f64>,
        labels: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> (f64, usize, StepCache) {
        let n = labels.len();
        debug_assert_eq!(xa.dim().0, n);
        let (fa, ca) = self.branch_forward(xa, true);
        self.commit_bn_running(&ca);
        let (fb, cb) = self.branch_forward(xb, true);
        self.commit_bn_running(&cb);

        // Shared mask on both flattened branch outputs, then independent
        // masks on the merge output and the dense input.
        let m_flat = dropout_mask(rng, (n, self.feature_dim), dropout);
        let m_l1 = dropout_mask(rng, (n, self.feature_dim), dropout);
        let m_dense = dropout_mask(rng, (n, self.feature_dim), dropout);
        let fa_d = &fa * &m_flat;
        let fb_d = &fb * &m_flat;
        let diff = &fa_d - &fb_d;
        let sign = diff.mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let l1 = diff.mapv(f64::abs);
        let dense_in = &l1 * &m_l1 * &m_dense;
        let logits = self.dense.forward(&dense_in);
        let probs = softmax_rows(&logits);
        let loss = cross_entropy_mean(&probs, labels);
        let correct = probs
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &lab)| usize::from(row[1] > row[0]) == lab)
            .count();
        (
            loss,
            correct,
            StepCache { ca, cb, sign, m_flat, m_l1, m_dense, dense_in, probs, labels: labels.to_vec() },
        )
    }

    /// Backward pass matching [`SiameseNet::train_forward`]; accumulates
    /// parameter gradients (branch A first, then branch B).
    pub(crate) fn train_backward(&mut self, cache: &StepCache) {
        let dlogits = ce_softmax_grad(&cache.probs, &cache.labels);
        let d_dense_in = self.dense.backward(&cache.dense_in, &dlogits);
        let d_l1 = &d_dense_in * &cache.m_dense * &cache.m_l1;
        let d_fa = &d_l1 * &cache.sign * &cache.m_flat;
        let d_fb = -&d_fa;
        self.branch_backward(&cache.ca, d_fa);
        self.branch_backward(&cache.cb, d_fb);
    }

    /// Inference-mode forward + backward of the cross-entropy loss for a
    /// single pair (the "inference-deterministic" path used by the
    /// gradient check): running batch-norm statistics, no dropout.
    pub(crate) fn accumulate_pair_grad_infer(
        &mut self,
        xa: &Array5<f64>,
        xb: &Array5<f64>,
        label: usize,
    ) -> f64 {
        let (fa, ca) = self.branch_forward(xa, false);
        let (fb, cb) = self.branch_forward(xb, false);
        let diff = &fa - &fb;
        let sign = diff.mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let l1 = diff.mapv(f64::abs);
        let logits = self.dense.forward(&l1);
        let probs = softmax_rows(&logits);
        let loss = cross_entropy_mean(&probs, &[label]);
        let dlogits = ce_softmax_grad(&probs, &[label]);
        let d_l1 = self.dense.backward(&l1, &dlogits);
        let d_fa = &d_l1 * &sign;
        let d_fb = -&d_fa;
        self.branch_backward(&ca, d_fa);
        self.branch_backward(&cb, d_fb);
        loss
    }

    // -- staged inference for the finite-difference gradient check ---------

    /// Number of branch stages (`apply_stage` indices `0..BRANCH_STAGES`).
    pub(crate) const BRANCH_STAGES: usize = 10;

    /// First branch stage whose output depends on the given parameter
    /// tensor; `BRANCH_STAGES` means only the head depends on it.
    pub(crate) fn restart_stage(tensor: usize) -> usize {
        match tensor {
            0 | 1 => 0,         // bn0
            2 | 3 => 1,         // conv1
            4 | 5 => 3,         // bn1
            6 | 7 => 4,         // conv2
            8 | 9 => 6,         // bn2
            10 | 11 => 7,       // conv3
            12 | 13 => 9,       // bn3
            14 | 15 => Self::BRANCH_STAGES, // dense
            _ => unreachable!("tensor index out of range"),
        }
    }

    fn apply_stage(&self, stage: usize, x: &Array5<f64>) -> Array5<f64> {
        match stage {
            0 => self.bn0.forward(x, false).0,
            1 => {
                let mut o = self.conv1.forward(x);
                relu_inplace(&mut o);
                o
            }
            2 => self.pool1.forward(x).0,
            3 => self.bn1.forward(x, false).0,
            4 => {
                let mut o = self.conv2.forward(x);
                relu_inplace(&mut o);
                o
            }
            5 => self.pool2.forward(x).0,
            6 => self.bn2.forward(x, false).0,
            7 => {
                let mut o = self.conv3.forward(x);
                relu_inplace(&mut o);
                o
            }
            8 => self.pool3.forward(x).0,
            9 => self.bn3.forward(x, false).0,
            _ => unreachable!("stage out of range"),
        }
    }

    /// Runs a branch in inference mode, caching the input of every stage,
    /// the pre-ReLU output of each convolution, and the final feature
    /// vector. `inputs[i]` feeds stage `i`.
    pub(crate) fn branch_staged(&self, x: &Array5<f64>) -> StagedBranch {
        let mut inputs = Vec::with_capacity(Self::BRANCH_STAGES);
        let mut pre_relu = Vec::with_capacity(3);
        let mut cur = x.clone();
        for stage in 0..Self::BRANCH_STAGES {
            inputs.push(cur.clone());
            if let 1 | 4 | 7 = stage {
                let conv = match stage {
                    1 => &self.conv1,
                    4 => &self.conv2,
                    _ => &self.conv3,
                };
                let pre = conv.forward(&cur);
                pre_relu.push(pre.clone());
                cur = pre;
                relu_inplace(&mut cur);
            } else {
                cur = self.apply_stage(stage, &cur);
            }
        }
        let n = cur.dim().0;
        let feat = cur
            .into_shape_with_order((n, self.feature_dim))
            .expect("branch output is contiguous");
        StagedBranch { inputs, pre_relu, feat }
    }

    /// The convolution layer a parameter tensor belongs to, if any, with
    /// its stage index and whether the tensor holds weights (vs biases).
    pub(crate) fn conv_for_tensor(&self, tensor: usize) -> Option<(&Conv3, usize, bool)> {
        match tensor {
            2 => Some((&self.conv1, 1, true)),
            3 => Some((&self.conv1, 1, false)),
            6 => Some((&self.conv2, 4, true)),
            7 => Some((&self.conv2, 4, false)),
            10 => Some((&self.conv3, 7, true)),
            11 => Some((&self.conv3, 7, false)),
            _ => None,
        }
    }

    /// Recomputes a branch's features from stage `stage` onward.
    pub(crate) fn branch_feat_from_stage(&self, stage: usize, input: &Array5<f64>) -> Array2<f64> {
        let mut cur = input.clone();
        for s in stage..Self::BRANCH_STAGES {
            cur = self.apply_stage(s, &cur);
        }
        let n = cur.dim().0;
        cur.into_shape_with_order((n, self.feature_dim))
            .expect("branch output is contiguous")
    }

    /// Inference-mode head loss for precomputed branch features.
    pub(crate) fn head_loss(&self, fa: &Array2<f64>, fb: &Array2<f64>, label: usize) -> f64 {
        let l1 = (fa - fb).mapv(f64::abs);
        let probs = softmax_rows(&self.dense.forward(&l1));
        cross_entropy_mean(&probs, &[label])
    }

    // -- parameter plumbing -------------------------------------------------

    /// Number of trainable parameter tensors (see [`SiameseNet::param_tensor`]).
    pub(crate) const PARAM_TENSORS: usize = 16;

    /// Read access to trainable tensor `idx` in declared layer order:
    /// `(name, values, gradient, l2_decay_applies)`.
    pub(crate) fn param_tensor(&self, idx: usize) -> (&'static str, &[f64], &[f64], bool) {
        macro_rules! t {
            ($name:literal, $data:expr, $grad:expr, $decay:expr) => {
                (
                    $name,
                    $data.as_slice().expect("contiguous"),
                    $grad.as_slice().expect("contiguous"),
                    $decay,
                )
            };
        }
        match idx {
            0 => t!("bn0.gamma", self.bn0.gamma, self.bn0.dgamma, false),
            1 => t!("bn0.beta", self.bn0.beta, self.bn0.dbeta, false),
            2 => t!("conv1.w", self.conv1.w, self.conv1.dw, true),
            3 => t!("conv1.b", self.conv1.b, self.conv1.db, false),
            4 => t!("bn1.gamma", self.bn1.gamma, self.bn1.dgamma, false),
            5 => t!("bn1.beta", self.bn1.beta, self.bn1.dbeta, false),
            6 => t!("conv2.w", self.conv2.w, self.conv2.dw, true),
            7 => t!("conv2.b", self.conv2.b, self.conv2.db, false),
            8 => t!("bn2.gamma", self.bn2.gamma, self.bn2.dgamma, false),
            9 => t!("bn2.beta", self.bn2.beta, self.bn2.dbeta, false),
            10 => t!("conv3.w", self.conv3.w, self.conv3.dw, true),
            11 => t!("conv3.b", self.conv3.b, self.conv3.db, false),
            12 => t!("bn3.gamma", self.bn3.gamma, self.bn3.dgamma, false),
            13 => t!("bn3.beta", self.bn3.beta, self.bn3.dbeta, false),
            14 => t!("dense.w", self.dense.w, self.dense.dw, true),
            15 => t!("dense.b", self.dense.b, self.dense.db, false),
            _ => unreachable!("tensor index out of range"),
        }
    }

    /// Mutable access to the values of trainable tensor `idx`.
    pub(crate) fn param_tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        let arr: &mut [f64] = match idx {
            0 => self.bn0.gamma.as_slice_mut().expect("contiguous"),
            1 => self.bn0.beta.as_slice_mut().expect("contiguous"),
            2 => self.conv1.w.as_slice_mut().expect("contiguous"),
            3 => self.conv1.b.as_slice_mut().expect("contiguous"),
            4 => self.bn1.gamma.as_slice_mut().expect("contiguous"),
            5 => self.bn1.beta.as_slice_mut().expect("contiguous"),
            6 => self.conv2.w.as_slice_mut().expect("contiguous"),
            7 => self.conv2.b.as_slice_mut().expect("contiguous"),
            8 => self.bn2.gamma.as_slice_mut().expect("contiguous"),
            9 => self.bn2.beta.as_slice_mut().expect("contiguous"),
            10 => self.conv3.w.as_slice_mut().expect("contiguous"),
            11 => self.conv3.b.as_slice_mut().expect("contiguous"),
            12 => self.bn3.gamma.as_slice_mut().expect("contiguous"),
            13 => self.bn3.beta.as_slice_mut().expect("contiguous"),
            14 => self.dense.w.as_slice_mut().expect("contiguous"),
            15 => self.dense.b.as_slice_mut().expect("contiguous"),
            _ => unreachable!("tensor index out of range"),
        };
        arr
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        (0..Self::PARAM_TENSORS)
            .map(|i| self.param_tensor(i).1.len())
            .sum()
    }

    pub(crate) fn zero_grads(&mut self) {
        self.bn0.dgamma.fill(0.0);
        self.bn0.dbeta.fill(0.0);
        self.conv1.dw.fill(0.0);
        self.conv1.db.fill(0.0);
        self.bn1.dgamma.fill(0.0);
        self.bn1.dbeta.fill(0.0);
        self.conv2.dw.fill(0.0);
        self.conv2.db.fill(0.0);
        self.bn2.dgamma.fill(0.0);
        self.bn2.dbeta.fill(0.0);
        self.conv3.dw.fill(0.0);
        self.conv3.db.fill(0.0);
        self.bn3.dgamma.fill(0.0);
        self.bn3.dbeta.fill(0.0);
        self.dense.dw.fill(0.0);
        self.dense.db.fill(0.0);
    }

    /// Number of state blocks persisted in checkpoints (trainable tensors
    /// plus batch-norm running statistics).
    pub(crate) const STATE_BLOCKS: usize = 24;

    /// Read access to persistent state block `idx` in checkpoint order.
    pub(crate) fn state_block(&self, idx: usize) -> (&'static str, &[f64]) {
        macro_rules! b {
            ($name:literal, $data:expr) => {
                ($name, $data.as_slice().expect("contiguous"))
            };
        }
        match idx {
            0 => b!("bn0.gamma", self.bn0.gamma),
            1 => b!("bn0.beta", self.bn0.beta),
            2 => b!("bn0.running_mean", self.bn0.running_mean),
            3 => b!("bn0.running_var", self.bn0.running_var),
            4 => b!("conv1.w", self.conv1.w),
            5 => b!("conv1.b", self.conv1.b),
            6 => b!("bn1.gamma", self.bn1.gamma),
            7 => b!("bn1.beta", self.bn1.beta),
            8 => b!("bn1.running_mean", self.bn1.running_mean),
            9 => b!("bn1.running_var", self.bn1.running_var),
            10 => b!("conv2.w", self.conv2.w),
            11 => b!("conv2.b", self.conv2.b),
            12 => b!("bn2.gamma", self.bn2.gamma),
            13 => b!("bn2.beta", self.bn2.beta),
            14 => b!("bn2.running_mean", self.bn2.running_mean),
            15 => b!("bn2.running_var", self.bn2.running_var),
            16 => b!("conv3.w", self.conv3.w),
            17 => b!("conv3.b", self.conv3.b),
            18 => b!("bn3.gamma", self.bn3.gamma),
            19 => b!("bn3.beta", self.bn3.beta),
            20 => b!("bn3.running_mean", self.bn3.running_mean),
            21 => b!("bn3.running_var", self.bn3.running_var),
            22 => b!("dense.w", self.dense.w),
            23 => b!("dense.b", self.dense.b),
            _ => unreachable!("state block index out of range"),
        }
    }

    /// Mutable access to persistent state block `idx` in checkpoint order.
    pub(crate) fn state_block_mut(&mut self, idx: usize) -> &mut [f64] {
        let arr: &mut [f64] = match idx {
            0 => self.bn0.gamma.as_slice_mut().expect("contiguous"),
            1 => self.bn0.beta.as_slice_mut().expect("contiguous"),
            2 => self.bn0.running_mean.as_slice_mut().expect("contiguous"),
            3 => self.bn0.running_var.as_slice_mut().expect("contiguous"),
            4 => self.conv1.w.as_slice_mut().expect("contiguous"),
            5 => self.conv1.b.as_slice_mut().expect("contiguous"),
            6 => self.bn1.gamma.as_slice_mut().expect("contiguous"),
            7 => self.bn1.beta.as_slice_mut().expect("contiguous"),
            8 => self.bn1.running_mean.as_slice_mut().expect("contiguous"),
            9 => self.bn1.running_var.as_slice_mut().expect("contiguous"),
            10 => self.conv2.w.as_slice_mut().expect("contiguous"),
            11 => self.conv2.b.as_slice_mut().expect("contiguous"),
            12 => self.bn2.gamma.as_slice_mut().expect("contiguous"),
            13 => self.bn2.beta.as_slice_mut().expect("contiguous"),
            14 => self.bn2.running_mean.as_slice_mut().expect("contiguous"),
            15 => self.bn2.running_var.as_slice_mut().expect("contiguous"),
            16 => self.conv3.w.as_slice_mut().expect("contiguous"),
            17 => self.conv3.b.as_slice_mut().expect("contiguous"),
            18 => self.bn3.gamma.as_slice_mut().expect("contiguous"),
            19 => self.bn3.beta.as_slice_mut().expect("contiguous"),
            20 => self.bn3.running_mean.as_slice_mut().expect("contiguous"),
            21 => self.bn3.running_var.as_slice_mut().expect("contiguous"),
            22 => self.dense.w.as_slice_mut().expect("contiguous"),
            23 => self.dense.b.as_slice_mut().expect("contiguous"),
            _ => unreachable!("state block index out of range"),
        };
        arr
    }

    /// Snapshots every persistent state block (used for best-epoch
    /// selection during training).
    pub(crate) fn snapshot_state(&self) -> Vec<Vec<f64>> {
        (0..Self::STATE_BLOCKS)
            .map(|i| self.state_block(i).1.to_vec())
            .collect()
    }

    pub(crate) fn restore_state(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), Self::STATE_BLOCKS);
        for (i, block) in snapshot.iter().enumerate() {
            self.state_block_mut(i).copy_from_slice(block);
        }
    }

    /// Replaces the whole model state with a random draw of moderate
    /// magnitude: weights N(0, scale²), biases and batch-norm shifts
    /// N(0, (scale/4)²), running variances near 1. Unlike the tiny
    /// freshly-initialized weights, such a state has pre-activations well
    /// away from the ReLU kinks, which makes it a fair target for
    /// finite-difference gradient verification.
    pub fn randomize_state(&mut self, scale: f64, seed: u64) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let wide = Normal::new(0.0, scale).expect("positive scale");
        let narrow = Normal::new(0.0, scale / 4.0).expect("positive scale");
        for idx in 0..Self::STATE_BLOCKS {
            let name = self.state_block(idx).0;
            let block = self.state_block_mut(idx);
            for v in block.iter_mut() {
                *v = if name.ends_with(".w") {
                    wide.sample(&mut rng)
                } else if name.ends_with(".gamma") {
                    1.0 + narrow.sample(&mut rng)
                } else if name.ends_with(".running_var") {
                    (1.0 + narrow.sample(&mut rng)).abs().max(0.1)
                } else {
                    // biases, batch-norm shifts, running means
                    narrow.sample(&mut rng)
                };
            }
        }
    }
}

/// Byproducts of one branch's training-mode forward pass, in the order the
/// backward pass consumes them.
pub(crate) struct BranchCache {
    bn0: BnCache,
    a1: Array5<f64>,
    r1: Array5<f64>,
    am1: Array5<u32>,
    bn1: BnCache,
    a2: Array5<f64>,
    r2: Array5<f64>,
    am2: Array5<u32>,
    bn2: BnCache,
    a3: Array5<f64>,
    r3: Array5<f64>,
    am3: Array5<u32>,
    bn3: BnCache,
    post_shape: (usize, usize, usize, usize, usize),
}

/// Inference-mode branch pass with every intermediate cached, so a probe
/// that perturbs one parameter can resume from the first affected stage.
pub(crate) struct StagedBranch {
    /// Input of each stage; `inputs[i]` feeds stage `i`.
    pub(crate) inputs: Vec<Array5<f64>>,
    /// Pre-activation outputs of conv1, conv2 and conv3.
    pub(crate) pre_relu: Vec<Array5<f64>>,
    /// Final flattened feature row.
    pub(crate) feat: Array2<f64>,
}

/// Cache of one training step for [`SiameseNet::train_backward`].
pub(crate) struct StepCache {
    ca: BranchCache,
    cb: BranchCache,
    sign: Array2<f64>,
    m_flat: Array2<f64>,
    m_l1: Array2<f64>,
    m_dense: Array2<f64>,
    dense_in: Array2<f64>,
    probs: Array2<f64>,
    labels: Vec<usize>,
}

/// Stacks f32 patches into an f64 batch `[n, c, z, y, x]`.
pub(crate) fn batch_from_patches<'a, I>(patches: I, spec: PatchSpec) -> Array5<f64>
where
    I: IntoIterator<Item = &'a PatchData>,
{
    let [c, z, y, x] = spec.array_shape();
    let patches: Vec<&PatchData> = patches.into_iter().collect();
    let mut out = Array5::zeros((patches.len(), c, z, y, x));
    for (i, p) in patches.iter().enumerate() {
        let mut slot = out.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut slot).and(*p).for_each(|o, &v| {
            *o = f64::from(v);
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;

    fn random_patch(spec: PatchSpec, seed: u64) -> PatchData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let [c, z, y, x] = spec.array_shape();
        Array4::from_shape_fn((c, z, y, x), |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn every_variant_builds_with_expected_stage_shapes() {
        for variant in Variant::ALL {
            for channels in [PatchChannels::Ct, PatchChannels::CtPet] {
                let net = SiameseNet::new(variant, channels, 9);
                let table = net.shape_table();
                let expected = expected_stage_shapes(variant);
                assert_eq!(table, expected.as_slice());
                let feat = match variant {
                    Variant::D2 => 800,
                    _ => 1600,
                };
                assert_eq!(net.feature_dim(), feat);
            }
        }
    }

    #[test]
    fn forward_pair_probabilities_sum_to_one() {
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 1);
        let spec = net.spec();
        let a = random_patch(spec, 10);
        let b = random_patch(spec, 11);
        let s = net.forward_pair(&a, &b).unwrap();
        let probs = softmax_rows(&Array2::from_shape_vec((1, 2), s.logits.to_vec()).unwrap());
        assert_abs_diff_eq!(probs.row(0).sum(), 1.0, epsilon = 1e-12);
        assert!((0.0..=1.0).contains(&s.p_true));
    }

    #[test]
    fn pair_score_is_symmetric_in_argument_order() {
        for variant in Variant::ALL {
            let net = SiameseNet::new(variant, PatchChannels::CtPet, 2);
            let spec = net.spec();
            let a = random_patch(spec, 20);
            let b = random_patch(spec, 21);
            let ab = net.forward_pair(&a, &b).unwrap();
            let ba = net.forward_pair(&b, &a).unwrap();
            // |h1 − h2| is exactly symmetric, so the scores agree to the bit.
            assert_eq!(ab.p_true, ba.p_true);
        }
    }

    #[test]
    fn identical_patches_collapse_to_the_dense_bias() {
        let net = SiameseNet::new(Variant::D3Z5, PatchChannels::Ct, 3);
        let a = random_patch(net.spec(), 30);
        let s = net.forward_pair(&a, &a).unwrap();
        // |h − h| = 0, so the logits are exactly the dense bias (zeros at init).
        assert_eq!(s.logits, [0.0, 0.0]);
        assert_abs_diff_eq!(s.p_true, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn branch_features_share_storage_between_branches() {
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 4);
        let a = random_patch(net.spec(), 40);
        // Both "branches" are literally the same weights, so the feature of
        // a patch does not depend on which side of the pair it enters.
        let f1 = net.branch_features(&a).unwrap();
        let f2 = net.branch_features(&a).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), net.feature_dim());
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        let n1 = SiameseNet::new(Variant::D2, PatchChannels::Ct, 77);
        let n2 = SiameseNet::new(Variant::D2, PatchChannels::Ct, 77);
        for i in 0..SiameseNet::PARAM_TENSORS {
            assert_eq!(n1.param_tensor(i).1, n2.param_tensor(i).1);
        }
        let n3 = SiameseNet::new(Variant::D2, PatchChannels::Ct, 78);
        let differs = (0..SiameseNet::PARAM_TENSORS)
            .any(|i| n1.param_tensor(i).1 != n3.param_tensor(i).1);
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn patch_shape_mismatch_is_rejected() {
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 5);
        let wrong = random_patch(
            PatchSpec { shape: PatchShape::P3d50x5, channels: PatchChannels::Ct },
            50,
        );
        let ok = random_patch(net.spec(), 51);
        assert!(net.forward_pair(&wrong, &ok).is_err());
    }

    #[test]
    fn train_step_changes_weights_and_keeps_branches_shared() {
        let mut net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 6);
        let spec = net.spec();
        let xa = batch_from_patches([&random_patch(spec, 60), &random_patch(spec, 61)], spec);
        let xb = batch_from_patches([&random_patch(spec, 62), &random_patch(spec, 63)], spec);
        let before = net.conv1.w.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        net.zero_grads();
        let (loss, _, cache) = net.train_forward(&xa, &xb, &[1, 0], 0.4, &mut rng);
        assert!(loss.is_finite());
        net.train_backward(&cache);
        // Apply a plain gradient step; Adam lives in the train module.
        for idx in 0..SiameseNet::PARAM_TENSORS {
            let grad: Vec<f64> = net.param_tensor(idx).2.to_vec();
            let data = net.param_tensor_mut(idx);
            for (d, g) in data.iter_mut().zip(&grad) {
                *d -= 1e-3 * g;
            }
        }
        assert!(net.conv1.w.iter().zip(before.iter()).any(|(a, b)| a != b));
        // Weight sharing is structural: a feature never depends on the side.
        let p = random_patch(spec, 64);
        assert_eq!(net.branch_features(&p).unwrap(), net.branch_features(&p).unwrap());
    }

    #[test]
    fn staged_branch_recomputation_matches_direct_forward() {
        let net = SiameseNet::new(Variant::D3Z11, PatchChannels::Ct, 7);
        let spec = net.spec();
        let x = batch_from_patches(std::iter::once(&random_patch(spec, 70)), spec);
        let staged = net.branch_staged(&x);
        assert_eq!(staged.inputs.len(), SiameseNet::BRANCH_STAGES);
        assert_eq!(staged.pre_relu.len(), 3);
        for stage in 0..SiameseNet::BRANCH_STAGES {
            let redo = net.branch_feat_from_stage(stage, &staged.inputs[stage]);
            assert_eq!(redo, staged.feat, "restart from stage {stage} diverged");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert!("d4".parse::<Variant>().is_err());
    }
}
