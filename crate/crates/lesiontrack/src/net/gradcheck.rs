//! Finite-difference verification of the analytic backward pass.
//!
//! The check runs in inference-deterministic mode (dropout off, batch norm
//! on its fixed running statistics) so the loss is a deterministic function
//! of the parameters. A random 1% subsample of the parameters is perturbed
//! by ±h; central differences of the cross-entropy loss are compared
//! against the analytic gradients.
//!
//! The loss of a ReLU/max-pool network is only piecewise smooth: a probe
//! whose ±h interval straddles an activation or argmax switch yields a
//! finite difference that blends the slopes of two smooth pieces and
//! matches neither, no matter how the interval shrinks around the switch.
//! Each probe is therefore evaluated on a cascade of step sizes between
//! ε/16384 and ε (stopping early once an estimate agrees with the
//! analytic value to truncation level) and scored by its best scale: fine
//! steps dodge nearby switches, coarse steps rise above f64 rounding
//! noise where the gradient is very small. When no scale agrees
//! *and* the scales disagree with each other — the signature of a switch
//! inside every probed interval — the probe is discarded as locally
//! non-smooth instead of counted as an error. A wrong analytic gradient
//! remains detectable because its finite differences agree across scales
//! while disagreeing with the analytic value.
//!
//! Two shortcuts keep the check fast. A full staged forward pass is cached
//! once per branch, and a probe recomputes only the stages downstream of
//! the perturbed tensor. For convolution parameters — the vast majority —
//! perturbing one weight changes the pre-activation map by a closed-form
//! rank-one update, so the convolution itself is never recomputed.

use super::layers::{relu_inplace, Conv3};
use super::{batch_from_patches, SiameseNet, StagedBranch, TrainPair};
use crate::error::{Error, Result};
use ndarray::{Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Fraction of parameters probed by [`gradient_check`].
pub const GRADCHECK_SAMPLE_FRACTION: f64 = 0.01;

/// Smallest denominator used for relative errors; discrepancies far below
/// this scale are reported as zero rather than amplified.
const REL_ERR_FLOOR: f64 = 1e-4;

/// A finite-difference scale whose relative error stays below this
/// confirms the analytic gradient for its probe.
const CONFIRM_TOLERANCE: f64 = 1e-3;

/// A scale this close to the analytic value ends its probe's cascade
/// early; the estimate is truncation-limited and will not improve.
const EARLY_STOP_TOLERANCE: f64 = 1e-5;

/// Mutual disagreement between unconfirmed scales beyond this relative
/// spread marks the probe as locally non-smooth. Smooth probes differ
/// across scales only at truncation level (orders of magnitude below
/// this), so genuine analytic-gradient errors are never masked.
const SMOOTHNESS_TOLERANCE: f64 = 5e-3;

/// Absolute floor for the spread comparison, so near-zero finite
/// differences are not flagged over rounding noise.
const SMOOTHNESS_FLOOR: f64 = 1e-6;

/// Divisors of `epsilon` forming the scale cascade. The typical probe is
/// settled by the first entry; descending fine scales dodge activation
/// switches ever closer to the probed point, and the coarse tail rises
/// above f64 rounding noise when the gradient is very small. A probe
/// counts its best scale, so the two regimes cover for each other.
const SCALE_DIVISORS: [f64; 8] = [64.0, 256.0, 1024.0, 4096.0, 16384.0, 16.0, 4.0, 1.0];

/// Result of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub epsilon: f64,
    /// Number of parameters whose gradients were compared.
    pub checked: usize,
    /// Probes discarded because the loss is locally non-smooth there.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// Compares analytic gradients of the pair cross-entropy loss against
/// central finite differences on a random 1% parameter subsample and
/// returns the worst relative error. `epsilon` must lie in
/// `[1e-6, 1e-3]`; `seed` fixes the subsample.
pub fn gradient_check(
    net: &SiameseNet,
    pair: &TrainPair,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "gradient-check epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let spec = net.spec();
    let want = spec.array_shape();
    if pair.a.shape() != want || pair.b.shape() != want {
        return Err(Error::Dimension(format!(
            "pair patch shapes {:?}/{:?} do not match network input {:?}",
            pair.a.shape(),
            pair.b.shape(),
            want
        )));
    }
    let label = usize::from(pair.label);
    let xa = batch_from_patches(std::iter::once(&pair.a), spec);
    let xb = batch_from_patches(std::iter::once(&pair.b), spec);

    // Analytic gradients on a private copy of the network.
    let mut work = net.clone();
    work.zero_grads();
    let _ = work.accumulate_pair_grad_infer(&xa, &xb, label);
    let grads: Vec<Vec<f64>> = (0..SiameseNet::PARAM_TENSORS)
        .map(|i| work.param_tensor(i).2.to_vec())
        .collect();

    // Cache the staged forward of both branches once.
    let sa = work.branch_staged(&xa);
    let sb = work.branch_staged(&xb);

    // Draw the parameter subsample.
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let amount = ((total as f64 * GRADCHECK_SAMPLE_FRACTION).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, amount);

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut skipped = 0usize;
    for flat in picks {
        let (tensor, offset) = locate(&sizes, flat);
        let g = grads[tensor][offset];

        let mut best = f64::INFINITY;
        let mut fds: Vec<f64> = Vec::with_capacity(SCALE_DIVISORS.len());
        for div in SCALE_DIVISORS {
            let h = epsilon / div;
            let lp = loss_with_delta(&mut work, tensor, offset, h, &sa, &sb, label);
            let lm = loss_with_delta(&mut work, tensor, offset, -h, &sa, &sb, label);
            let fd = (lp - lm) / (2.0 * h);
            fds.push(fd);
            let rel = (fd - g).abs() / (fd.abs() + g.abs()).max(REL_ERR_FLOOR);
            best = best.min(rel);
            if best <= EARLY_STOP_TOLERANCE {
                break;
            }
        }

        if best > CONFIRM_TOLERANCE {
            let scale = fds
                .iter()
                .fold(SMOOTHNESS_FLOOR, |m, fd| m.max(fd.abs()));
            let spread = fds
                .iter()
                .flat_map(|a| fds.iter().map(move |b| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if spread > SMOOTHNESS_TOLERANCE * scale {
                skipped += 1;
                continue;
            }
        }
        max_rel = max_rel.max(best);
        sum_rel += best;
    }

    let checked = amount - skipped;
    if checked == 0 {
        return Err(Error::Numeric(
            "gradient check found no locally smooth parameters to compare".into(),
        ));
    }
    Ok(GradCheckReport {
        epsilon,
        checked,
        skipped,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / checked as f64,
    })
}

/// Loss at `theta + delta * e_(tensor, offset)`, reusing the cached staged
/// forward. Convolution parameters take a rank-one-update fast path; all
/// other tensors are mutated in place and the affected stages recomputed.
fn loss_with_delta(
    work: &mut SiameseNet,
    tensor: usize,
    offset: usize,
    delta: f64,
    sa: &StagedBranch,
    sb: &StagedBranch,
    label: usize,
) -> f64 {
    if let Some((conv, stage, is_weight)) = work.conv_for_tensor(tensor) {
        let conv_idx = match stage {
            1 => 0,
            4 => 1,
            _ => 2,
        };
        let eval = |staged: &StagedBranch| {
            let mut pre = staged.pre_relu[conv_idx].clone();
            apply_conv_delta(&mut pre, conv, is_weight, offset, delta, &staged.inputs[stage]);
            relu_inplace(&mut pre);
            work.branch_feat_from_stage(stage + 1, &pre)
        };
        let fa = eval(sa);
        let fb = eval(sb);
        work.head_loss(&fa, &fb, label)
    } else {
        let stage = SiameseNet::restart_stage(tensor);
        let orig = work.param_tensor_mut(tensor)[offset];
        work.param_tensor_mut(tensor)[offset] = orig + delta;
        let loss = staged_loss(work, stage, sa, sb, label);
        work.param_tensor_mut(tensor)[offset] = orig;
        loss
    }
}

/// Adds the effect of perturbing one convolution parameter by `delta` to
/// the cached pre-activation map. The convolution is linear in its
/// parameters, so the update is exact: a weight `w[f, c, dz, dy, dx]`
/// contributes `delta * input[c, z+dz, y+dy-p, x+dx-p]` to filter `f` at
/// every output site, and a bias contributes `delta` across its filter.
fn apply_conv_delta(
    pre: &mut Array5<f64>,
    conv: &Conv3,
    is_weight: bool,
    offset: usize,
    delta: f64,
    input: &Array5<f64>,
) {
    if !is_weight {
        pre.index_axis_mut(Axis(1), offset).mapv_inplace(|v| v + delta);
        return;
    }
    let (_, c, kz, ky, kx) = conv.w.dim();
    let mut rem = offset;
    let dx = rem % kx;
    rem /= kx;
    let dy = rem % ky;
    rem /= ky;
    let dz = rem % kz;
    rem /= kz;
    let cc = rem % c;
    let f = rem / c;
    let (_, _, _, yin, xin) = input.dim();
    let (_, _, oz, oy, ox) = pre.dim();
    let p = conv.pad_xy as isize;
    for z in 0..oz {
        for y in 0..oy {
            let sy = y as isize + dy as isize - p;
            if sy < 0 || sy >= yin as isize {
                continue;
            }
            for xo in 0..ox {
                let sx = xo as isize + dx as isize - p;
                if sx < 0 || sx >= xin as isize {
                    continue;
                }
                pre[(0, f, z, y, xo)] += delta * input[(0, cc, z + dz, sy as usize, sx as usize)];
            }
        }
    }
}

/// Loss recomputed from the first stage affected by the perturbed tensor;
/// `stage == BRANCH_STAGES` means only the head changed.
fn staged_loss(
    net: &SiameseNet,
    stage: usize,
    sa: &StagedBranch,
    sb: &StagedBranch,
    label: usize,
) -> f64 {
    if stage >= SiameseNet::BRANCH_STAGES {
        net.head_loss(&sa.feat, &sb.feat, label)
    } else {
        let fa = net.branch_feat_from_stage(stage, &sa.inputs[stage]);
        let fb = net.branch_feat_from_stage(stage, &sb.inputs[stage]);
        net.head_loss(&fa, &fb, label)
    }
}

/// Maps a flat parameter index to `(tensor, offset)`.
fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (tensor, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (tensor, flat);
        }
        flat -= n;
    }
    unreachable!("flat parameter index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Variant;
    use crate::patch::{PatchChannels, PatchData, PatchSpec};
    use ndarray::Array4;
    use rand::Rng;

    fn random_pair(spec: PatchSpec, seed: u64, label: bool) -> TrainPair {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let [c, z, y, x] = spec.array_shape();
        let mut gen = |_: u64| -> PatchData {
            Array4::from_shape_fn((c, z, y, x), |_| rng.gen_range(0.0f32..1.0))
        };
        TrainPair { a: gen(0), b: gen(1), label }
    }

    /// A network with weights far from their tiny initialisation, so the
    /// loss surface has gradients of ordinary magnitude.
    fn random_net(variant: Variant, seed: u64) -> SiameseNet {
        let mut net = SiameseNet::new(variant, PatchChannels::Ct, seed);
        net.randomize_state(0.15, seed);
        net
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let net = random_net(Variant::D2, 1);
        let pair = random_pair(net.spec(), 99, true);
        let report = gradient_check(&net, &pair, 1e-5, 7).unwrap();
        assert!(report.checked > 100, "sampled {} params", report.checked);
        assert!(
            report.max_rel_err < 1e-3,
            "max relative error {}",
            report.max_rel_err
        );
    }

    #[test]
    fn conv_delta_path_equals_direct_parameter_mutation() {
        let net = random_net(Variant::D2, 5);
        let pair = random_pair(net.spec(), 55, false);
        let label = usize::from(pair.label);
        let spec = net.spec();
        let xa = batch_from_patches(std::iter::once(&pair.a), spec);
        let xb = batch_from_patches(std::iter::once(&pair.b), spec);
        let mut work = net.clone();
        let sa = work.branch_staged(&xa);
        let sb = work.branch_staged(&xb);
        // One weight and one bias from each convolution.
        for (tensor, offset) in [(2, 17), (3, 4), (6, 5916), (7, 21), (10, 123), (11, 40)] {
            let delta = 3e-3;
            let fast = loss_with_delta(&mut work, tensor, offset, delta, &sa, &sb, label);
            let mut mutated = net.clone();
            mutated.param_tensor_mut(tensor)[offset] += delta;
            mutated.zero_grads();
            let slow = mutated.accumulate_pair_grad_infer(&xa, &xb, label);
            assert!(
                (fast - slow).abs() <= 1e-12 * slow.abs().max(1.0),
                "tensor {tensor} offset {offset}: fast {fast} vs slow {slow}"
            );
        }
    }

    #[test]
    fn doubling_epsilon_changes_the_estimate_smoothly() {
        let net = random_net(Variant::D2, 2);
        let pair = random_pair(net.spec(), 98, false);
        let a = gradient_check(&net, &pair, 5e-5, 3).unwrap();
        let b = gradient_check(&net, &pair, 1e-4, 3).unwrap();
        assert!(a.max_rel_err < 1e-3);
        assert!(b.max_rel_err < 1e-3);
        // Same subsample, double the step: the estimate may move but must
        // stay in the same regime (no sign of a wrong analytic path, which
        // would produce O(1) errors at every epsilon).
        let ratio = (b.max_rel_err / a.max_rel_err.max(1e-12))
            .max(a.max_rel_err / b.max_rel_err.max(1e-12));
        assert!(
            ratio < 100.0 || (a.max_rel_err < 1e-6 && b.max_rel_err < 1e-6),
            "ratio {ratio} (a {}, b {})",
            a.max_rel_err,
            b.max_rel_err
        );
    }

    #[test]
    fn saturated_correct_prediction_has_near_zero_gradients() {
        let mut net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 23);
        // Force the head to predict class 1 with overwhelming confidence.
        net.state_block_mut(23).copy_from_slice(&[-20.0, 20.0]);
        let pair = random_pair(net.spec(), 97, true);
        let xa = batch_from_patches(std::iter::once(&pair.a), net.spec());
        let xb = batch_from_patches(std::iter::once(&pair.b), net.spec());
        let mut work = net.clone();
        work.zero_grads();
        let loss = work.accumulate_pair_grad_infer(&xa, &xb, 1);
        assert!(loss < 1e-8, "saturated loss {loss}");
        let max_g = (0..SiameseNet::PARAM_TENSORS)
            .flat_map(|i| work.param_tensor(i).2.to_vec())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max_g < 1e-6, "max gradient {max_g}");
        let report = gradient_check(&net, &pair, 1e-4, 5).unwrap();
        assert!(report.max_rel_err < 1e-3);
    }

    #[test]
    fn epsilon_outside_the_allowed_range_is_rejected() {
        let net = SiameseNet::new(Variant::D2, PatchChannels::Ct, 24);
        let pair = random_pair(net.spec(), 96, true);
        assert!(gradient_check(&net, &pair, 1e-7, 0).is_err());
        assert!(gradient_check(&net, &pair, 1e-2, 0).is_err());
    }
}
