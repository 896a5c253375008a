//! Training loop for the Siamese classifier: Adam with an ℓ² penalty on
//! convolution and dense weights, reduce-on-plateau learning-rate decay,
//! quarter-turn rotation augmentation, and model selection at the epoch of
//! minimum validation loss.

use super::{batch_from_patches, SiameseNet, TrainPair};
use crate::error::{Error, Result};
use crate::patch::rotate_patch;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub learning_rate: f64,
    /// ℓ² coefficient applied to convolution and dense weights (not biases
    /// or batch-norm parameters) as an additive gradient term.
    pub l2: f64,
    /// Dropout rate at the three head sites during training.
    pub dropout: f64,
    /// Epochs without validation-loss improvement before the learning rate
    /// is multiplied by `plateau_factor`.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    /// Expand training pairs with axial rotations of 90°, 180° and 270°.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-4,
            l2: 5e-4,
            dropout: super::DROPOUT_RATE,
            plateau_patience: 5,
            plateau_factor: 0.2,
            min_learning_rate: 1e-5,
            augment: true,
            seed: 0,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Result of [`train`]; the network itself is left at the weights of
/// `best_epoch`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Reduce-on-plateau schedule: when the validation loss fails to improve
/// (strictly) for `patience` consecutive epochs, the learning rate is
/// multiplied by `factor` and floored at `min_lr`. The best-seen loss is
/// kept across reductions.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    wait: usize,
    patience: usize,
    factor: f64,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        PlateauScheduler {
            lr: initial_lr,
            best: f64::INFINITY,
            wait: 0,
            patience,
            factor,
            min_lr,
        }
    }

    /// Learning rate currently in effect.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one end-of-epoch validation loss; any reduction affects the
    /// *next* epoch's learning rate.
    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
    }
}

/// Adam optimizer state, one slot per parameter tensor of the network.
pub(crate) struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(net: &SiameseNet) -> Self {
        let sizes: Vec<usize> = (0..SiameseNet::PARAM_TENSORS)
            .map(|i| net.param_tensor(i).1.len())
            .collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One Adam step over all tensors. The ℓ² term is added to the raw
    /// gradient of decaying tensors before the moment updates.
    pub fn step(&mut self, net: &mut SiameseNet, lr: f64, l2: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for idx in 0..SiameseNet::PARAM_TENSORS {
            let (grad, decay) = {
                let (_, data, grad, decay) = net.param_tensor(idx);
                let g: Vec<f64> = if decay {
                    grad.iter().zip(data).map(|(&g, &w)| g + l2 * w).collect()
                } else {
                    grad.to_vec()
                };
                (g, decay)
            };
            let _ = decay;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = net.param_tensor_mut(idx);
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Expands every pair with axial rotations k·90°, k ∈ {1, 2, 3}, applied
/// to both patches of the pair. Order: original, then k = 1, 2, 3.
pub fn expand_with_rotations(pairs: &[TrainPair]) -> Vec<TrainPair> {
    let mut out = Vec::with_capacity(pairs.len() * 4);
    for p in pairs {
        for k in 0..4u8 {
            out.push(if k == 0 {
                p.clone()
            } else {
                TrainPair {
                    a: rotate_patch(&p.a, k),
                    b: rotate_patch(&p.b, k),
                    label: p.label,
                }
            });
        }
    }
    out
}

/// Mean cross-entropy and accuracy of the network on labelled pairs, in
/// inference mode.
pub fn evaluate_pairs(net: &SiameseNet, pairs: &[TrainPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty pair set".into()));
    }
    let refs: Vec<(&crate::patch::PatchData, &crate::patch::PatchData)> =
        pairs.iter().map(|p| (&p.a, &p.b)).collect();
    let scores = net.forward_pairs(&refs)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (s, p) in scores.iter().zip(pairs) {
        let p_label = if p.label { s.p_true } else { 1.0 - s.p_true };
        loss -= p_label.max(1e-300).ln();
        if (s.p_true > 0.5) == p.label {
            correct += 1;
        }
    }
    Ok((loss / pairs.len() as f64, correct as f64 / pairs.len() as f64))
}

/// Trains the network in place and leaves it at the weights (including
/// batch-norm running statistics) of the epoch with the lowest validation
/// loss. Two calls with identical inputs and seeds produce bit-identical
/// histories and final weights.
pub fn train(
    net: &mut SiameseNet,
    train_pairs: &[TrainPair],
    val_pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if val_pairs.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidInput(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let spec = net.spec();
    let want = spec.array_shape();
    for p in train_pairs.iter().chain(val_pairs) {
        if p.a.shape() != want || p.b.shape() != want {
            return Err(Error::Dimension(format!(
                "training pair patch shape {:?}/{:?} does not match network input {:?}",
                p.a.shape(),
                p.b.shape(),
                want
            )));
        }
    }

    let data: Vec<TrainPair> = if cfg.augment {
        expand_with_rotations(train_pairs)
    } else {
        train_pairs.to_vec()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net);
    let mut sched = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_patience,
        cfg.plateau_factor,
        cfg.min_learning_rate,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut best_state: Vec<Vec<f64>> = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xa = batch_from_patches(chunk.iter().map(|&i| &data[i].a), spec);
            let xb = batch_from_patches(chunk.iter().map(|&i| &data[i].b), spec);
            let labels: Vec<usize> = chunk.iter().map(|&i| usize::from(data[i].label)).collect();
            net.zero_grads();
            let (loss, corr, cache) = net.train_forward(&xa, &xb, &labels, cfg.dropout, &mut rng);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            net.train_backward(&cache);
            adam.step(net, lr, cfg.l2);
            loss_sum += loss * labels.len() as f64;
            correct += corr;
        }
        let train_loss = loss_sum / data.len() as f64;
        let train_acc = correct as f64 / data.len() as f64;
        let (val_loss, val_acc) = evaluate_pairs(net, val_pairs)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if best.map_or(true, |(b, _)| val_loss < b) {
            best = Some((val_loss, epoch));
            best_state = net.snapshot_state();
        }
        sched.observe(val_loss);
    }

    let (best_val_loss, best_epoch) = best.expect("at least one epoch ran");
    net.restore_state(&best_state);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
    })
}

/// Writes the history as CSV with columns
/// `epoch,lr,train_loss,train_acc,val_loss,val_acc`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
