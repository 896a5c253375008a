//! Layer primitives for the Siamese network: f64 CPU implementations of
//! 3D convolution (via per-sample im2col + gemm), max pooling, batch
//! normalization, a dense layer, ReLU, inverted dropout, and softmax
//! cross-entropy.
//!
//! Feature maps are `[n, c, z, y, x]`. Convolutions are stride-1 with
//! optional zero padding in y/x only (z is always valid); all striding is
//! done by the pooling layers. `forward` methods are pure; `backward`
//! methods accumulate parameter gradients into the layer and return the
//! gradient with respect to the layer input.

use ndarray::{Array1, Array2, Array5, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Batch-norm stabilizer added to the variance before the square root.
pub const BN_EPS: f64 = 1e-3;
/// Momentum of the running-statistics update (`r ← m·r + (1−m)·batch`).
pub const BN_MOMENTUM: f64 = 0.99;
/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.01;

/// Draws from N(0, std²), resampling until |v| ≤ 2·std.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Stride-1 3D convolution with zero padding in y/x only.
#[derive(Debug, Clone)]
pub(crate) struct Conv3 {
    /// Weights `[filters, in_channels, kz, ky, kx]`.
    pub w: Array5<f64>,
    pub b: Array1<f64>,
    pub dw: Array5<f64>,
    pub db: Array1<f64>,
    /// Symmetric zero padding applied to both y and x.
    pub pad_xy: usize,
}

impl Conv3 {
    pub fn new<R: Rng>(
        filters: usize,
        in_channels: usize,
        kz: usize,
        kxy: usize,
        pad_xy: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Array5::zeros((filters, in_channels, kz, kxy, kxy));
        for v in w.iter_mut() {
            *v = trunc_normal(rng, INIT_STD);
        }
        Conv3 {
            dw: Array5::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(filters),
            db: Array1::zeros(filters),
            pad_xy,
        }
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let d = self.w.dim();
        (d.2, d.3, d.4)
    }

    pub fn out_spatial(&self, zin: usize, yin: usize, xin: usize) -> (usize, usize, usize) {
        let (kz, ky, kx) = self.kernel();
        let p = self.pad_xy;
        (zin - kz + 1, yin + 2 * p - ky + 1, xin + 2 * p - kx + 1)
    }

    pub fn forward(&self, x: &Array5<f64>) -> Array5<f64> {
        let (n, c, zin, yin, xin) = x.dim();
        let (f, wc, kz, ky, kx) = self.w.dim();
        assert_eq!(c, wc, "conv input channel mismatch");
        let (oz, oy, ox) = self.out_spatial(zin, yin, xin);
        let k_len = c * kz * ky * kx;
        let p_len = oz * oy * ox;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((f, k_len))
            .expect("conv weights are contiguous");
        let mut out = Array5::zeros((n, f, oz, oy, ox));
        let mut cols = Array2::zeros((k_len, p_len));
        for s in 0..n {
            fill_cols(
                &mut cols,
                x.index_axis(Axis(0), s),
                (kz, ky, kx),
                self.pad_xy,
                (oz, oy, ox),
            );
            let o2 = w2.dot(&cols);
            let o2s = o2.as_slice().expect("gemm output is contiguous");
            let mut out_s = out.index_axis_mut(Axis(0), s);
            let os = out_s.as_slice_mut().expect("output is contiguous");
            for ff in 0..f {
                let bias = self.b[ff];
                let base = ff * p_len;
                for p in 0..p_len {
                    os[base + p] = o2s[base + p] + bias;
                }
            }
        }
        out
    }

    /// Accumulates `dw`/`db` and returns the input gradient. `x` must be
    /// the same tensor the forward pass saw.
    pub fn backward(&mut self, x: &Array5<f64>, dout: &Array5<f64>) -> Array5<f64> {
        let (n, c, zin, yin, xin) = x.dim();
        let (f, _, kz, ky, kx) = self.w.dim();
        let (oz, oy, ox) = self.out_spatial(zin, yin, xin);
        assert_eq!(dout.dim(), (n, f, oz, oy, ox), "conv dout shape mismatch");
        let k_len = c * kz * ky * kx;
        let p_len = oz * oy * ox;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((f, k_len))
            .expect("conv weights are contiguous");
        let mut dx = Array5::zeros(x.raw_dim());
        let mut cols = Array2::zeros((k_len, p_len));
        for s in 0..n {
            fill_cols(
                &mut cols,
                x.index_axis(Axis(0), s),
                (kz, ky, kx),
                self.pad_xy,
                (oz, oy, ox),
            );
            let dout_s = dout.index_axis(Axis(0), s);
            let d2 = dout_s
                .into_shape_with_order((f, p_len))
                .expect("dout is contiguous");
            // dW += dout · colsᵀ ; db += row sums ; dcols = Wᵀ · dout
            let dw2 = d2.dot(&cols.t());
            {
                let mut dwv = self
                    .dw
                    .view_mut()
                    .into_shape_with_order((f, k_len))
                    .expect("dw is contiguous");
                dwv += &dw2;
            }
            for ff in 0..f {
                self.db[ff] += d2.row(ff).sum();
            }
            let dcols = w2.t().dot(&d2);
            add_cols_to_input(
                &dcols,
                dx.index_axis_mut(Axis(0), s),
                (kz, ky, kx),
                self.pad_xy,
                (oz, oy, ox),
            );
        }
        dx
    }
}

/// Gathers convolution windows of one sample into `cols[k, p]` where
/// `k = ((c·kz + dz)·ky + dy)·kx + dx` and `p = (z·oy + y)·ox + x`.
/// Out-of-bounds (padded) positions are written as zero.
fn fill_cols(
    cols: &mut Array2<f64>,
    x: ArrayView4<f64>,
    (kz, ky, kx): (usize, usize, usize),
    pad: usize,
    (oz, oy, ox): (usize, usize, usize),
) {
    let (c, zin, yin, xin) = x.dim();
    let xs = x.as_slice().expect("sample view is contiguous");
    let pad = pad as isize;
    for cc in 0..c {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let k = ((cc * kz + dz) * ky + dy) * kx + dx;
                    let mut row = cols.row_mut(k);
                    let row = row.as_slice_mut().expect("cols row is contiguous");
                    let mut p = 0;
                    for z in 0..oz {
                        let sz = z + dz;
                        debug_assert!(sz < zin);
                        for y in 0..oy {
                            let sy = (y + dy) as isize - pad;
                            if sy < 0 || sy >= yin as isize {
                                row[p..p + ox].fill(0.0);
                                p += ox;
                                continue;
                            }
                            let base = ((cc * zin + sz) * yin + sy as usize) * xin;
                            for xo in 0..ox {
                                let sx = (xo + dx) as isize - pad;
                                row[p] = if sx < 0 || sx >= xin as isize {
                                    0.0
                                } else {
                                    xs[base + sx as usize]
                                };
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols`-layout gradients back onto one input sample
/// (inverse of [`fill_cols`]; padded positions are dropped).
fn add_cols_to_input(
    dcols: &Array2<f64>,
    mut dx: ndarray::ArrayViewMut4<f64>,
    (kz, ky, kx): (usize, usize, usize),
    pad: usize,
    (oz, oy, ox): (usize, usize, usize),
) {
    let (c, zin, yin, xin) = dx.dim();
    let ds = dx.as_slice_mut().expect("dx sample view is contiguous");
    let pad = pad as isize;
    for cc in 0..c {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx_k in 0..kx {
                    let k = ((cc * kz + dz) * ky + dy) * kx + dx_k;
                    let row = dcols.row(k);
                    let row = row.as_slice().expect("dcols row is contiguous");
                    let mut p = 0;
                    for z in 0..oz {
                        let sz = z + dz;
                        for y in 0..oy {
                            let sy = (y + dy) as isize - pad;
                            if sy < 0 || sy >= yin as isize {
                                p += ox;
                                continue;
                            }
                            let base = ((cc * zin + sz) * yin + sy as usize) * xin;
                            for xo in 0..ox {
                                let sx = (xo + dx_k) as isize - pad;
                                if sx >= 0 && sx < xin as isize {
                                    ds[base + sx as usize] += row[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Valid max pooling with independent kernel/stride per axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MaxPool3 {
    /// Kernel `[kz, ky, kx]`.
    pub k: [usize; 3],
    /// Stride `[sz, sy, sx]`.
    pub s: [usize; 3],
}

impl MaxPool3 {
    pub fn out_spatial(&self, zin: usize, yin: usize, xin: usize) -> (usize, usize, usize) {
        (
            (zin - self.k[0]) / self.s[0] + 1,
            (yin - self.k[1]) / self.s[1] + 1,
            (xin - self.k[2]) / self.s[2] + 1,
        )
    }

    /// Returns the pooled map and, per output element, the flat `[z, y, x]`
    /// index of its source within the same `(n, c)` slab. Ties go to the
    /// first element in z-then-y-then-x scan order.
    pub fn forward(&self, x: &Array5<f64>) -> (Array5<f64>, Array5<u32>) {
        let (n, c, zin, yin, xin) = x.dim();
        let (oz, oy, ox) = self.out_spatial(zin, yin, xin);
        let xs = x.as_slice().expect("input is contiguous");
        let mut out = Array5::zeros((n, c, oz, oy, ox));
        let mut arg = Array5::<u32>::zeros((n, c, oz, oy, ox));
        let os = out.as_slice_mut().expect("output is contiguous");
        let ags = arg.as_slice_mut().expect("argmax is contiguous");
        let slab = zin * yin * xin;
        let mut o = 0;
        for nc in 0..n * c {
            let base = nc * slab;
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let (z0, y0, x0) = (z * self.s[0], y * self.s[1], xo * self.s[2]);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0u32;
                        for dz in 0..self.k[0] {
                            for dy in 0..self.k[1] {
                                let row = ((z0 + dz) * yin + (y0 + dy)) * xin + x0;
                                for dx in 0..self.k[2] {
                                    let v = xs[base + row + dx];
                                    if v > best {
                                        best = v;
                                        best_i = (row + dx) as u32;
                                    }
                                }
                            }
                        }
                        os[o] = best;
                        ags[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn backward(
        &self,
        arg: &Array5<u32>,
        in_dim: (usize, usize, usize, usize, usize),
        dout: &Array5<f64>,
    ) -> Array5<f64> {
        let (n, c, zin, yin, xin) = in_dim;
        let mut dx = Array5::zeros(in_dim);
        let ds = dx.as_slice_mut().expect("dx is contiguous");
        let slab = zin * yin * xin;
        let douts = dout.as_slice().expect("dout is contiguous");
        let args = arg.as_slice().expect("argmax is contiguous");
        let per_nc = douts.len() / (n * c);
        for nc in 0..n * c {
            let base = nc * slab;
            let obase = nc * per_nc;
            for i in 0..per_nc {
                ds[base + args[obase + i] as usize] += douts[obase + i];
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over the `(n, z, y, x)` axes.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

/// Forward-pass byproducts needed by [`BatchNorm::backward`]. `train`
/// records which statistics were used so backward follows the same path.
#[derive(Debug)]
pub(crate) struct BnCache {
    pub xhat: Array5<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            dgamma: Array1::zeros(channels),
            dbeta: Array1::zeros(channels),
        }
    }

    /// Normalizes with batch statistics (`train`) or running statistics
    /// (inference). Running statistics are *not* updated here; call
    /// [`BatchNorm::update_running`] with the returned cache to commit them.
    pub fn forward(&self, x: &Array5<f64>, train: bool) -> (Array5<f64>, BnCache) {
        let (n, c, z, y, xd) = x.dim();
        assert_eq!(c, self.gamma.len(), "batch-norm channel mismatch");
        let m = (n * z * y * xd) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        if train {
            for cc in 0..c {
                let ch = x.index_axis(Axis(1), cc);
                let mu = ch.iter().sum::<f64>() / m;
                let v = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
                mean[cc] = mu;
                var[cc] = v;
            }
        } else {
            mean.assign(&self.running_mean);
            var.assign(&self.running_var);
        }
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        let mut out = Array5::zeros(x.raw_dim());
        for cc in 0..c {
            let (mu, is, g, b) = (mean[cc], inv_std[cc], self.gamma[cc], self.beta[cc]);
            let mut xh = xhat.index_axis_mut(Axis(1), cc);
            let mut o = out.index_axis_mut(Axis(1), cc);
            ndarray::Zip::from(&mut o).and(&mut xh).for_each(|ov, xv| {
                *xv = (*xv - mu) * is;
                *ov = g * *xv + b;
            });
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                train,
            },
        )
    }

    /// Commits the cache's batch statistics into the running averages.
    pub fn update_running(&mut self, cache: &BnCache) {
        debug_assert!(cache.train, "only training batches update running stats");
        for cc in 0..self.running_mean.len() {
            self.running_mean[cc] =
                BN_MOMENTUM * self.running_mean[cc] + (1.0 - BN_MOMENTUM) * cache.batch_mean[cc];
            self.running_var[cc] =
                BN_MOMENTUM * self.running_var[cc] + (1.0 - BN_MOMENTUM) * cache.batch_var[cc];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dout: &Array5<f64>) -> Array5<f64> {
        let c = self.gamma.len();
        let dim = dout.dim();
        let m = (dim.0 * dim.2 * dim.3 * dim.4) as f64;
        let mut dx = Array5::zeros(dout.raw_dim());
        for cc in 0..c {
            let dch = dout.index_axis(Axis(1), cc);
            let xh = cache.xhat.index_axis(Axis(1), cc);
            let mut dsum = 0.0;
            let mut dxhat_sum = 0.0;
            ndarray::Zip::from(&dch).and(&xh).for_each(|&d, &h| {
                dsum += d;
                dxhat_sum += d * h;
            });
            self.dbeta[cc] += dsum;
            self.dgamma[cc] += dxhat_sum;
            let (g, is) = (self.gamma[cc], cache.inv_std[cc]);
            let mut dxc = dx.index_axis_mut(Axis(1), cc);
            if cache.train {
                // dx = inv_std/m · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                let s1 = g * dsum;
                let s2 = g * dxhat_sum;
                ndarray::Zip::from(&mut dxc)
                    .and(&dch)
                    .and(&xh)
                    .for_each(|o, &d, &h| {
                        *o = is / m * (m * g * d - s1 - h * s2);
                    });
            } else {
                ndarray::Zip::from(&mut dxc).and(&dch).for_each(|o, &d| {
                    *o = d * g * is;
                });
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dense, ReLU, dropout, softmax
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    /// Weights `[in, out]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut w = Array2::zeros((inputs, outputs));
        for v in w.iter_mut() {
            *v = trunc_normal(rng, INIT_STD);
        }
        Dense {
            dw: Array2::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(outputs),
            db: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&mut self, x: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
        self.dw += &x.t().dot(dout);
        self.db += &dout.sum_axis(Axis(0));
        dout.dot(&self.w.t())
    }
}

/// In-place ReLU. The output doubles as the backward mask (`out > 0` iff
/// the pre-activation was positive); the subgradient at 0 is taken as 0.
pub(crate) fn relu_inplace(x: &mut Array5<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn relu_backward(out: &Array5<f64>, dout: &Array5<f64>) -> Array5<f64> {
    let mut dx = dout.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Inverted-dropout mask: entries are `1/(1−rate)` with probability
/// `1−rate`, else 0, drawn row-major. A rate of 0 yields all ones.
pub(crate) fn dropout_mask<R: Rng>(rng: &mut R, dim: (usize, usize), rate: f64) -> Array2<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut data = Vec::with_capacity(dim.0 * dim.1);
    for _ in 0..dim.0 * dim.1 {
        data.push(if rate == 0.0 || rng.gen::<f64>() < keep {
            scale
        } else {
            0.0
        });
    }
    Array2::from_shape_vec(dim, data).expect("mask shape matches data")
}

/// Row-wise softmax with max subtraction for stability.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy `−ln p[label]` over the batch.
pub(crate) fn cross_entropy_mean(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    debug_assert_eq!(probs.nrows(), labels.len());
    let mut sum = 0.0;
    for (row, &lab) in probs.rows().into_iter().zip(labels) {
        sum -= row[lab].max(1e-300).ln();
    }
    sum / labels.len() as f64
}

/// Gradient of mean cross-entropy w.r.t. the logits: `(p − onehot)/n`.
pub(crate) fn ce_softmax_grad(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut d = probs.clone();
    for (mut row, &lab) in d.rows_mut().into_iter().zip(labels) {
        row[lab] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_tensor<R: Rng>(rng: &mut R, dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        let len = dim.0 * dim.1 * dim.2 * dim.3 * dim.4;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Array5::from_shape_vec(dim, data).unwrap()
    }

    /// Direct five-loop convolution used as an oracle for the gemm path.
    fn conv_naive(conv: &Conv3, x: &Array5<f64>) -> Array5<f64> {
        let (n, c, zin, yin, xin) = x.dim();
        let (f, _, kz, ky, kx) = conv.w.dim();
        let (oz, oy, ox) = conv.out_spatial(zin, yin, xin);
        let p = conv.pad_xy as isize;
        let mut out = Array5::zeros((n, f, oz, oy, ox));
        for s in 0..n {
            for ff in 0..f {
                for z in 0..oz {
                    for y in 0..oy {
                        for xo in 0..ox {
                            let mut acc = conv.b[ff];
                            for cc in 0..c {
                                for dz in 0..kz {
                                    for dy in 0..ky {
                                        for dx in 0..kx {
                                            let sy = (y + dy) as isize - p;
                                            let sx = (xo + dx) as isize - p;
                                            if sy < 0
                                                || sy >= yin as isize
                                                || sx < 0
                                                || sx >= xin as isize
                                            {
                                                continue;
                                            }
                                            acc += conv.w[(ff, cc, dz, dy, dx)]
                                                * x[(s, cc, z + dz, sy as usize, sx as usize)];
                                        }
                                    }
                                }
                            }
                            out[(s, ff, z, y, xo)] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_gemm_matches_naive_convolution() {
        let mut r = rng(1);
        for &(kz, pad) in &[(1usize, 0usize), (2, 1), (3, 0)] {
            let mut conv = Conv3::new(4, 3, kz, 3, pad, &mut r);
            for v in conv.b.iter_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
            let x = random_tensor(&mut r, (2, 3, 4, 7, 6));
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    /// Finite-difference check of a scalar loss `0.5·Σ out²` through a layer.
    fn fd_loss_conv(conv: &Conv3, x: &Array5<f64>) -> f64 {
        conv.forward(x).iter().map(|v| 0.5 * v * v).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(2);
        let mut conv = Conv3::new(3, 2, 2, 3, 1, &mut r);
        let x = random_tensor(&mut r, (2, 2, 3, 5, 5));
        let out = conv.forward(&x);
        let dx = conv.backward(&x, &out); // d(0.5·Σout²)/dout = out
        let eps = 1e-6;

        // Weight gradient.
        let mut conv_p = conv.clone();
        for &idx in &[0usize, 7, 23, conv.w.len() - 1] {
            let ws = conv_p.w.as_slice_mut().unwrap();
            let orig = ws[idx];
            ws[idx] = orig + eps;
            let lp = fd_loss_conv(&conv_p, &x);
            conv_p.w.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = fd_loss_conv(&conv_p, &x);
            conv_p.w.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(conv.dw.as_slice().unwrap()[idx], fd, epsilon = 1e-5);
        }
        // Input gradient.
        let mut xp = x.clone();
        for &idx in &[0usize, 31, x.len() - 1] {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = fd_loss_conv(&conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = fd_loss_conv(&conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(dx.as_slice().unwrap()[idx], fd, epsilon = 1e-5);
        }
        // Bias gradient: d loss / d b_f = Σ out_f.
        let expect_db0 = out.index_axis(Axis(1), 0).sum();
        assert_abs_diff_eq!(conv.db[0], expect_db0, epsilon = 1e-9);
    }

    #[test]
    fn maxpool_forward_and_backward_route_to_argmax() {
        let pool = MaxPool3 {
            k: [1, 2, 2],
            s: [1, 2, 2],
        };
        let mut x = Array5::zeros((1, 1, 1, 4, 4));
        for y in 0..4 {
            for xx in 0..4 {
                x[(0, 0, 0, y, xx)] = (y * 4 + xx) as f64;
            }
        }
        let (out, arg) = pool.forward(&x);
        assert_eq!(out.dim(), (1, 1, 1, 2, 2));
        // Max of each 2×2 block is its bottom-right element.
        assert_eq!(out[(0, 0, 0, 0, 0)], 5.0);
        assert_eq!(out[(0, 0, 0, 1, 1)], 15.0);
        let dout = Array5::ones((1, 1, 1, 2, 2));
        let dx = pool.backward(&arg, x.dim(), &dout);
        assert_eq!(dx[(0, 0, 0, 1, 1)], 1.0);
        assert_eq!(dx[(0, 0, 0, 0, 0)], 0.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn maxpool_ties_choose_first_in_scan_order() {
        let pool = MaxPool3 {
            k: [1, 2, 2],
            s: [1, 2, 2],
        };
        let x = Array5::from_elem((1, 1, 1, 2, 2), 3.25);
        let (out, arg) = pool.forward(&x);
        assert_eq!(out[(0, 0, 0, 0, 0)], 3.25);
        assert_eq!(arg[(0, 0, 0, 0, 0)], 0);
    }

    #[test]
    fn batchnorm_train_normalizes_to_zero_mean_unit_variance() {
        let mut r = rng(3);
        let bn = BatchNorm::new(2);
        let x = random_tensor(&mut r, (4, 2, 1, 3, 3)) * 5.0 + 2.0;
        let (y, cache) = bn.forward(&x, true);
        for cc in 0..2 {
            let ch = y.index_axis(Axis(1), cc);
            let m = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / m;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            // Variance is slightly below 1 because of BN_EPS in the denominator.
            let expect = cache.batch_var[cc] / (cache.batch_var[cc] + BN_EPS);
            assert_abs_diff_eq!(var, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn batchnorm_running_update_uses_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Array5::from_elem((2, 1, 1, 2, 2), 4.0);
        let (_, cache) = bn.forward(&x, true);
        bn.update_running(&cache);
        // mean: 0.99·0 + 0.01·4; var: 0.99·1 + 0.01·0.
        assert_abs_diff_eq!(bn.running_mean[0], 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(bn.running_var[0], 0.99, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let mut r = rng(4);
        let mut bn = BatchNorm::new(2);
        for v in bn.gamma.iter_mut() {
            *v = r.gen_range(0.5..1.5);
        }
        for v in bn.beta.iter_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
        let x = random_tensor(&mut r, (3, 2, 1, 2, 2));
        let loss = |bn: &BatchNorm, x: &Array5<f64>| -> f64 {
            let (y, _) = bn.forward(x, true);
            y.iter().map(|v| 0.5 * v * v).sum()
        };
        let (y, cache) = bn.forward(&x, true);
        let dx = bn.backward(&cache, &y);
        let eps = 1e-6;
        // Input gradient.
        let mut xp = x.clone();
        for &idx in &[0usize, 5, x.len() - 1] {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&bn, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&bn, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                dx.as_slice().unwrap()[idx],
                (lp - lm) / (2.0 * eps),
                epsilon = 1e-5
            );
        }
        // Gamma/beta gradients.
        for cc in 0..2 {
            let orig = bn.gamma[cc];
            bn.gamma[cc] = orig + eps;
            let lp = loss(&bn, &x);
            bn.gamma[cc] = orig - eps;
            let lm = loss(&bn, &x);
            bn.gamma[cc] = orig;
            assert_abs_diff_eq!(bn.dgamma[cc], (lp - lm) / (2.0 * eps), epsilon = 1e-5);
        }
    }

    #[test]
    fn batchnorm_inference_uses_running_statistics() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        bn.gamma[0] = 3.0;
        bn.beta[0] = 1.0;
        let x = Array5::from_elem((1, 1, 1, 1, 1), 4.0);
        let (y, _) = bn.forward(&x, false);
        let expect = 3.0 * (4.0 - 2.0) / (4.0f64 + BN_EPS).sqrt() + 1.0;
        assert_abs_diff_eq!(y[(0, 0, 0, 0, 0)], expect, epsilon = 1e-12);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut r = rng(5);
        let mut dense = Dense::new(4, 3, &mut r);
        let x = Array2::from_shape_fn((2, 4), |_| r.gen_range(-1.0..1.0));
        let out = dense.forward(&x);
        let dx = dense.backward(&x, &out);
        let eps = 1e-6;
        let loss = |d: &Dense, x: &Array2<f64>| d.forward(x).iter().map(|v| 0.5 * v * v).sum::<f64>();
        for &(i, j) in &[(0usize, 0usize), (3, 2)] {
            let orig = dense.w[(i, j)];
            dense.w[(i, j)] = orig + eps;
            let lp = loss(&dense, &x);
            dense.w[(i, j)] = orig - eps;
            let lm = loss(&dense, &x);
            dense.w[(i, j)] = orig;
            assert_abs_diff_eq!(dense.dw[(i, j)], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
        }
        let mut xp = x.clone();
        let orig = xp[(1, 2)];
        xp[(1, 2)] = orig + eps;
        let lp = loss(&dense, &xp);
        xp[(1, 2)] = orig - eps;
        let lm = loss(&dense, &xp);
        assert_abs_diff_eq!(dx[(1, 2)], (lp - lm) / (2.0 * eps), epsilon = 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_matches_finite_differences() {
        let logits = Array2::from_shape_vec((2, 2), vec![3.0, -1.0, 0.25, 0.75]).unwrap();
        let probs = softmax_rows(&logits);
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        let labels = [0usize, 1];
        let grad = ce_softmax_grad(&probs, &labels);
        let eps = 1e-6;
        let mut lp = logits.clone();
        for i in 0..2 {
            for j in 0..2 {
                let orig = lp[(i, j)];
                lp[(i, j)] = orig + eps;
                let up = cross_entropy_mean(&softmax_rows(&lp), &labels);
                lp[(i, j)] = orig - eps;
                let dn = cross_entropy_mean(&softmax_rows(&lp), &labels);
                lp[(i, j)] = orig;
                assert_abs_diff_eq!(grad[(i, j)], (up - dn) / (2.0 * eps), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn dropout_mask_is_inverted_and_deterministic() {
        let mut r1 = rng(7);
        let mut r2 = rng(7);
        let m1 = dropout_mask(&mut r1, (50, 40), 0.4);
        let m2 = dropout_mask(&mut r2, (50, 40), 0.4);
        assert_eq!(m1, m2);
        let scale = 1.0 / 0.6;
        let mut kept = 0usize;
        for &v in m1.iter() {
            assert!(v == 0.0 || (v - scale).abs() < 1e-12);
            if v > 0.0 {
                kept += 1;
            }
        }
        let frac = kept as f64 / m1.len() as f64;
        assert!((frac - 0.6).abs() < 0.05, "keep fraction {frac} off");
        let zero_rate = dropout_mask(&mut r1, (3, 3), 0.0);
        assert!(zero_rate.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut r = rng(8);
        for _ in 0..2000 {
            let v = trunc_normal(&mut r, 0.01);
            assert!(v.abs() <= 0.02);
        }
    }
}
