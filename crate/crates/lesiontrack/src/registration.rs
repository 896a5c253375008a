//! Affine registration: point transfer, volume resampling and a
//! multi-resolution intensity optimizer.
//!
//! The transform convention is fixed throughout the crate: the *forward* map
//! takes baseline voxel coordinates into the follow-up grid,
//!
//! ```text
//! forward(x)  =  A · (x − c) + t + c
//! inverse(x)  =  A⁻¹ · (x − c − t) + c
//! ```
//!
//! with `c` the center of the baseline volume. All coordinates are voxel
//! units; spacing only matters once images are resampled onto a common grid,
//! which the pipeline does before this module runs.
//!
//! [`register_affine`] estimates the transform between two CT volumes by
//! minimizing the mean squared intensity difference over a three-level
//! image pyramid with gradient descent on the 12 affine parameters. Parameter
//! gradients are central finite differences; a shared step-scale adapts
//! (grow on accepted steps, halve and retry on rejected ones) so that the
//! metric is non-increasing across accepted steps regardless of the intensity
//! scale of the inputs.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

/// Determinant magnitude below which a matrix is treated as singular.
pub const SINGULARITY_EPS: f64 = 1e-9;

/// Global affine transform between a baseline and a follow-up voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    /// 3×3 shear/rotation/scale matrix.
    pub matrix: Matrix3<f64>,
    /// Translation in baseline voxel units.
    pub translation: Vector3<f64>,
    /// Rotation center: the center of the baseline volume.
    pub center: Vector3<f64>,
}

/// On-disk JSON shape: {"A": [[..],[..],[..]], "t": [..], "c": [..]}.
#[derive(Serialize, Deserialize)]
struct TransformJson {
    #[serde(rename = "A")]
    a: [[f64; 3]; 3],
    t: [f64; 3],
    c: [f64; 3],
}

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = &self.matrix;
        TransformJson {
            a: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            t: [self.translation.x, self.translation.y, self.translation.z],
            c: [self.center.x, self.center.y, self.center.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = TransformJson::deserialize(d)?;
        Ok(AffineTransform {
            matrix: Matrix3::new(
                j.a[0][0], j.a[0][1], j.a[0][2], j.a[1][0], j.a[1][1], j.a[1][2], j.a[2][0],
                j.a[2][1], j.a[2][2],
            ),
            translation: Vector3::new(j.t[0], j.t[1], j.t[2]),
            center: Vector3::new(j.c[0], j.c[1], j.c[2]),
        })
    }
}

impl AffineTransform {
    pub fn new(matrix: Matrix3<f64>, translation: Vector3<f64>, center: Vector3<f64>) -> Self {
        AffineTransform {
            matrix,
            translation,
            center,
        }
    }

    /// Identity transform around the given center.
    pub fn identity(center: Vector3<f64>) -> Self {
        AffineTransform::new(Matrix3::identity(), Vector3::zeros(), center)
    }

    /// Rotation center of a volume with these dims: ((nx−1)/2, (ny−1)/2, (nz−1)/2).
    pub fn center_for_dims(dims: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        )
    }

    /// Check the invertibility invariant.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.determinant().abs() <= SINGULARITY_EPS {
            return Err(Error::Numeric(format!(
                "affine matrix is singular (|det| = {:.3e})",
                self.matrix.determinant().abs()
            )));
        }
        Ok(())
    }

    /// Map a baseline point into follow-up coordinates: A·(x − c) + t + c.
    #[inline]
    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        let x = Vector3::new(p[0], p[1], p[2]);
        let y = self.matrix * (x - self.center) + self.translation + self.center;
        [y.x, y.y, y.z]
    }

    /// Map a follow-up point back into baseline coordinates:
    /// A⁻¹·(x − c − t) + c.
    pub fn inverse(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        Ok(self.inverted()?.forward(p))
    }

    /// The inverse map expressed in forward form (A⁻¹, −A⁻¹t, c), so it can
    /// be applied repeatedly without re-inverting — useful in per-voxel loops.
    pub fn inverted(&self) -> Result<AffineTransform> {
        self.validate()?;
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Numeric("affine matrix is singular".into()))?;
        Ok(AffineTransform::new(inv, -inv * self.translation, self.center))
    }

    /// Write the JSON form ({"A", "t", "c"}).
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| {
            Error::format(path, format!("transform serialization failed: {e}"))
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<AffineTransform> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: AffineTransform = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("invalid transform JSON: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}

/// Target grid for resampling.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    pub fn of(vol: &Volume) -> Self {
        GridSpec {
            dims: vol.dims(),
            spacing: vol.spacing(),
        }
    }
}

/// Trilinear sample at a fractional voxel coordinate; `None` outside the
/// valid interpolation domain [0, n−1] per axis.
fn sample_trilinear(vol: &Volume, p: [f64; 3]) -> Option<f64> {
    let dims = vol.dims();
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
            return None;
        }
    }
    let x0 = (p[0].floor() as usize).min(dims[0] - 1);
    let y0 = (p[1].floor() as usize).min(dims[1] - 1);
    let z0 = (p[2].floor() as usize).min(dims[2] - 1);
    let x1 = (x0 + 1).min(dims[0] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[2] - 1);
    let fx = p[0] - x0 as f64;
    let fy = p[1] - y0 as f64;
    let fz = p[2] - z0 as f64;

    let v = |x: usize, y: usize, z: usize| vol.get(x, y, z) as f64;
    let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
    let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
    let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
    let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

/// Nearest-neighbor sample; `None` when the rounded coordinate is outside.
fn sample_nearest(vol: &Volume, p: [f64; 3]) -> Option<f64> {
    let q = [p[0].round() as i32, p[1].round() as i32, p[2].round() as i32];
    vol.at(q).map(|v| v as f64)
}

/// Resample `moving` onto `target_grid`: output voxel x takes the value of
/// `moving` at `forward(T, x)`. CT/PET use trilinear interpolation, MASK uses
/// nearest-neighbor (so values stay in {0, 1}); out-of-bounds samples take
/// the modality's fill value.
pub fn resample(moving: &Volume, t: &AffineTransform, target_grid: GridSpec) -> Result<Volume> {
    t.validate()?;
    let fill = moving.modality().fill_value() as f64;
    let nearest = moving.modality() == Modality::Mask;
    Volume::from_fn(
        target_grid.dims,
        target_grid.spacing,
        moving.modality(),
        |x, y, z| {
            let p = t.forward([x as f64, y as f64, z as f64]);
            let s = if nearest {
                sample_nearest(moving, p)
            } else {
                sample_trilinear(moving, p)
            };
            s.unwrap_or(fill) as f32
        },
    )
}

/// Block-average downsample by an integer factor (used by the registration
/// pyramid). Edge blocks average over the in-bounds voxels only.
pub fn downsample_block(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Usage("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let out_dims = [
        dims[0].div_ceil(factor),
        dims[1].div_ceil(factor),
        dims[2].div_ceil(factor),
    ];
    let spacing = [
        vol.spacing()[0] * factor as f64,
        vol.spacing()[1] * factor as f64,
        vol.spacing()[2] * factor as f64,
    ];
    Volume::from_fn(out_dims, spacing, vol.modality(), |x, y, z| {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for dz in 0..factor {
            let sz = z * factor + dz;
            if sz >= dims[2] {
                break;
            }
            for dy in 0..factor {
                let sy = y * factor + dy;
                if sy >= dims[1] {
                    break;
                }
                for dx in 0..factor {
                    let sx = x * factor + dx;
                    if sx >= dims[0] {
                        break;
                    }
                    sum += vol.get(sx, sy, sz) as f64;
                    n += 1;
                }
            }
        }
        (sum / n as f64) as f32
    })
}

/// Multi-resolution registration settings. The defaults are the values used
/// throughout the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Gradient-descent iterations per pyramid level (coarse → fine).
    pub iterations: [usize; 3],
    /// Downsample factors per pyramid level (coarse → fine).
    pub factors: [usize; 3],
    /// Central-difference step per parameter.
    pub fd_step: f64,
    /// Base learning rate for the nine matrix entries.
    pub lr_matrix: f64,
    /// Base learning rate for the three translation components.
    pub lr_translation: f64,
    /// Metric sample cap per axis at each level (the metric grid is a
    /// centered stride over the fixed volume).
    pub metric_axis_samples: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            iterations: [200, 100, 50],
            factors: [4, 2, 1],
            fd_step: 1e-3,
            lr_matrix: 1e-6,
            lr_translation: 1e-2,
            metric_axis_samples: 16,
        }
    }
}

/// Outcome of [`register_affine`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: AffineTransform,
    /// False when optimization could not beat the identity transform (the
    /// identity is then returned).
    pub improved: bool,
    /// Finest-level metric of the identity transform.
    pub initial_metric: f64,
    /// Finest-level metric of the returned transform.
    pub final_metric: f64,
    /// Per-level metric history: level-start value followed by the value
    /// after each accepted step. Non-increasing within each level.
    pub metric_trace: Vec<Vec<f64>>,
}

/// One pyramid level: downsampled fixed/moving plus the metric sample grid
/// expressed in full-resolution fixed coordinates.
struct PyramidLevel {
    fixed: Volume,
    moving: Volume,
    factor: f64,
    /// (full-res fixed point, fixed intensity) metric samples.
    samples: Vec<([f64; 3], f64)>,
}

impl PyramidLevel {
    fn build(fixed: &Volume, moving: &Volume, factor: usize, axis_cap: usize) -> Result<Self> {
        let fixed_d = downsample_block(fixed, factor)?;
        let moving_d = downsample_block(moving, factor)?;
        let dims = fixed_d.dims();
        let f = factor as f64;
        // Centered stride grid over the downsampled fixed volume.
        let stride = [
            dims[0].div_ceil(axis_cap).max(1),
            dims[1].div_ceil(axis_cap).max(1),
            dims[2].div_ceil(axis_cap).max(1),
        ];
        // Samples sit at half-voxel offsets so that *both* volumes are
        // trilinearly interpolated at generic positions. Sampling the fixed
        // volume exactly on grid points would put every sample on an
        // interpolation kink of the moving volume when the current transform
        // is near an integer shift, creating artificial local minima at
        // integer translations (grid locking).
        let mut samples = Vec::new();
        let mut z = stride[2] / 2;
        while z + 1 < dims[2] {
            let mut y = stride[1] / 2;
            while y + 1 < dims[1] {
                let mut x = stride[0] / 2;
                while x + 1 < dims[0] {
                    let q = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if let Some(fixed_val) = sample_trilinear(&fixed_d, q) {
                        // Block center of downsampled coordinate q is
                        // f·q + (f−1)/2 in full-resolution coordinates.
                        let p = [
                            f * q[0] + (f - 1.0) / 2.0,
                            f * q[1] + (f - 1.0) / 2.0,
                            f * q[2] + (f - 1.0) / 2.0,
                        ];
                        samples.push((p, fixed_val));
                    }
                    x += stride[0];
                }
                y += stride[1];
            }
            z += stride[2];
        }
        if samples.is_empty() {
            return Err(Error::Dimension(format!(
                "volume too small for pyramid factor {factor}: fixed level dims {dims:?}"
            )));
        }
        Ok(PyramidLevel {
            fixed: fixed_d,
            moving: moving_d,
            factor: f,
            samples,
        })
    }

    /// Mean squared difference between fixed samples and the transformed
    /// moving volume; +inf when the overlap is degenerate, NaN propagates
    /// as an error upstream.
    fn metric(&self, t: &AffineTransform) -> f64 {
        if t.matrix.determinant().abs() <= SINGULARITY_EPS {
            return f64::INFINITY;
        }
        let mut sum = 0.0f64;
        let mut n = 0usize;
        let f = self.factor;
        for (p, fixed_val) in &self.samples {
            let y = t.forward(*p);
            // Full-res follow-up point → downsampled moving coordinates.
            let yd = [
                (y[0] - (f - 1.0) / 2.0) / f,
                (y[1] - (f - 1.0) / 2.0) / f,
                (y[2] - (f - 1.0) / 2.0) / f,
            ];
            if let Some(m) = sample_trilinear(&self.moving, yd) {
                let d = m - fixed_val;
                sum += d * d;
                n += 1;
            }
        }
        let min_valid = (self.samples.len() / 20).max(8).min(self.samples.len());
        if n < min_valid {
            return f64::INFINITY;
        }
        sum / n as f64
    }

    // Silence an unused-field warning: the downsampled fixed volume is kept
    // alive because `samples` was read from it and tests inspect levels.
    fn fixed_dims(&self) -> [usize; 3] {
        self.fixed.dims()
    }
}

/// 12-parameter vector view of (A, t) used by the optimizer.
fn params_of(t: &AffineTransform) -> [f64; 12] {
    let m = &t.matrix;
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
        t.translation.x,
        t.translation.y,
        t.translation.z,
    ]
}

fn transform_of(params: &[f64; 12], center: Vector3<f64>) -> AffineTransform {
    AffineTransform::new(
        Matrix3::new(
            params[0], params[1], params[2], params[3], params[4], params[5], params[6],
            params[7], params[8],
        ),
        Vector3::new(params[9], params[10], params[11]),
        center,
    )
}

/// Estimate the baseline→follow-up affine transform between two CT volumes.
///
/// Multi-resolution gradient descent on the mean squared intensity
/// difference. The returned metric values refer to the finest pyramid level;
/// when optimization fails to beat the identity, the identity transform is
/// returned with `improved = false` rather than an error.
pub fn register_affine(
    fixed: &Volume,
    moving: &Volume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if fixed.modality() != Modality::Ct || moving.modality() != Modality::Ct {
        return Err(Error::InvalidInput(
            "register_affine expects CT volumes for both inputs".into(),
        ));
    }
    if fixed.dims().iter().any(|&d| d < 8) || moving.dims().iter().any(|&d| d < 8) {
        return Err(Error::Dimension(format!(
            "registration needs dims >= 8 per axis, got fixed {:?}, moving {:?}",
            fixed.dims(),
            moving.dims()
        )));
    }

    let center = AffineTransform::center_for_dims(fixed.dims());
    let levels: Vec<PyramidLevel> = config
        .factors
        .iter()
        .map(|&f| PyramidLevel::build(fixed, moving, f.max(1), config.metric_axis_samples))
        .collect::<Result<_>>()?;

    let finest = levels.last().expect("three pyramid levels");
    let identity = AffineTransform::identity(center);
    let initial_metric = finest.metric(&identity);
    if !initial_metric.is_finite() {
        return Err(Error::Numeric(format!(
            "registration metric is non-finite at identity (value {initial_metric}); \
             check input intensities"
        )));
    }

    let mut params = params_of(&identity);
    // Steepest descent with normalized directions and an adaptive step
    // length (trust radius) per parameter class. Translation and matrix
    // parameters alternate so the ill-conditioned matrix direction cannot
    // throttle translation progress. Normalizing the gradient makes the
    // step sizes — and hence the whole optimizer path — independent of the
    // absolute intensity scale of the inputs.
    let mut radius = [config.lr_matrix, config.lr_translation];
    const MAX_RADIUS: [f64; 2] = [0.02, 4.0];
    const MIN_RADIUS: f64 = 1e-9;
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(levels.len());

    for (level, iters) in levels.iter().zip(config.iterations) {
        let mut current = level.metric(&transform_of(&params, center));
        if !current.is_finite() {
            return Err(Error::Numeric(
                "registration metric became non-finite at level start".into(),
            ));
        }
        let mut level_trace = vec![current];
        for it in 0..iters {
            // Translation on even iterations, matrix on odd ones.
            let (class, range) = if it % 2 == 0 {
                (1usize, 9..12usize)
            } else {
                (0usize, 0..9usize)
            };
            // Central-difference gradient over this class's parameters.
            let mut grad = [0.0f64; 12];
            for i in range.clone() {
                let h = config.fd_step;
                let mut plus = params;
                plus[i] += h;
                let mut minus = params;
                minus[i] -= h;
                let mp = level.metric(&transform_of(&plus, center));
                let mm = level.metric(&transform_of(&minus, center));
                if mp.is_finite() && mm.is_finite() {
                    grad[i] = (mp - mm) / (2.0 * h);
                }
                // Non-finite perturbations (left the valid overlap) are
                // treated as flat directions rather than aborting the solve.
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue; // flat along this class; nothing to propose
            }
            let mut proposal = params;
            for i in range {
                proposal[i] -= radius[class] * grad[i] / norm;
            }
            let m_new = level.metric(&transform_of(&proposal, center));
            if m_new <= current && m_new.is_finite() {
                params = proposal;
                current = m_new;
                level_trace.push(current);
                radius[class] = (radius[class] * 1.5).min(MAX_RADIUS[class]);
            } else {
                radius[class] = (radius[class] * 0.5).max(MIN_RADIUS);
            }
        }
        trace.push(level_trace);
        let _ = level.fixed_dims();
    }

    let candidate = transform_of(&params, center);
    let final_metric = finest.metric(&candidate);
    if final_metric.is_finite() && final_metric < initial_metric && candidate.validate().is_ok() {
        Ok(RegistrationResult {
            transform: candidate,
            improved: true,
            initial_metric,
            final_metric,
            metric_trace: trace,
        })
    } else {
        Ok(RegistrationResult {
            transform: identity,
            improved: false,
            initial_metric,
            final_metric: initial_metric,
            metric_trace: trace,
        })
    }
}
