//! Gaussian-cloud volume representation and its confined rasterizer.
//!
//! Each Gaussian carries a mean in continuous grid coordinates, per-axis log
//! standard deviations, a rotation (an angle in 2D, a quaternion in 3D) and a
//! scalar intensity. The rasterized value at voxel `x` is
//! `sum_i I_i * exp(-0.5 * (x - mu_i)^T Sigma_i^{-1} (x - mu_i))`.
//!
//! Rasterization only visits a shared axis-aligned box around each Gaussian
//! whose half extent is three times the cloud's median standard deviation.
//! Since the box is the same for every Gaussian, the integer offsets from the
//! box center are one constant table. Each Gaussian is anchored at
//! `floor(mu)` and the fractional part `frac = mu - floor(mu)` is subtracted
//! from the offsets, so the squared distance splits into four pieces:
//!
//! ```text
//! d^T P d  -  d^T P f  -  f^T P d  +  f^T P f      (d = offset, f = frac)
//! ```
//!
//! The first piece depends only on the offset table and the precision, the
//! last only on the Gaussian.
//!
//! Axis order follows the volume layout: `(row, col)` for single-slice clouds
//! and `(slice, row, col)` for volumetric ones.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::grid::VolumeGrid;
use crate::{math, par};

/// Smallest number of Gaussians handled by one rasterization chunk.
pub const MIN_RASTER_CHUNK: usize = 256;

/// Chunk length used to split `n` Gaussians into partial grids. Depends only
/// on `n`, never on the worker count.
pub fn raster_chunk_len(n: usize) -> usize {
    MIN_RASTER_CHUNK.max(n.div_ceil(64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    dim: usize,
    means: Vec<f64>,
    log_scales: Vec<f64>,
    rotations: Vec<f64>,
    intensities: Vec<f64>,
}

/// Number of rotation parameters per Gaussian.
pub const fn rotation_len(dim: usize) -> usize {
    if dim == 2 {
        1
    } else {
        4
    }
}

impl GaussianCloud {
    pub fn new(
        dim: usize,
        means: Vec<f64>,
        log_scales: Vec<f64>,
        rotations: Vec<f64>,
        intensities: Vec<f64>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(CoreError::InvalidCloud("dimension must be 2 or 3"));
        }
        let n = intensities.len();
        if n == 0 {
            return Err(CoreError::EmptyCloud);
        }
        if means.len() != n * dim || log_scales.len() != n * dim || rotations.len() != n * rotation_len(dim) {
            return Err(CoreError::InvalidCloud("parameter lengths disagree"));
        }
        let all = means.iter().chain(&log_scales).chain(&rotations).chain(&intensities);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidCloud("non-finite parameter"));
        }
        let mut cloud = Self {
            dim,
            means,
            log_scales,
            rotations,
            intensities,
        };
        if dim == 3 {
            for q in cloud.rotations.chunks_exact(4) {
                if q.iter().all(|&v| v == 0.0) {
                    return Err(CoreError::InvalidCloud("zero quaternion"));
                }
            }
            cloud.normalize_rotations();
        }
        Ok(cloud)
    }

    /// Identity rotations; `stds` per Gaussian per axis.
    pub fn isotropic(dim: usize, means: Vec<f64>, std: f64, intensities: Vec<f64>) -> Result<Self> {
        let n = intensities.len();
        let rotations = if dim == 2 {
            vec![0.0; n]
        } else {
            (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect()
        };
        Self::new(dim, means, vec![math::ln(std); n * dim], rotations, intensities)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_scale(&self, i: usize) -> &[f64] {
        &self.log_scales[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rotation(&self, i: usize) -> &[f64] {
        let r = rotation_len(self.dim);
        &self.rotations[i * r..(i + 1) * r]
    }

    pub fn intensity(&self, i: usize) -> f64 {
        self.intensities[i]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn log_scales(&self) -> &[f64] {
        &self.log_scales
    }

    pub fn rotations(&self) -> &[f64] {
        &self.rotations
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn intensities_mut(&mut self) -> &mut [f64] {
        &mut self.intensities
    }

    pub fn means_mut(&mut self) -> &mut [f64] {
        &mut self.means
    }

    /// Mutable views of (means, log_scales, rotations, intensities). Callers
    /// that touch 3D rotations must call [`Self::normalize_rotations`].
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.means,
            &mut self.log_scales,
            &mut self.rotations,
            &mut self.intensities,
        ]
    }

    pub fn normalize_rotations(&mut self) {
        if self.dim != 3 {
            return;
        }
        for q in self.rotations.chunks_exact_mut(4) {
            let norm = math::sqrt(q.iter().map(|v| v * v).sum());
            if norm > 0.0 {
                q.iter_mut().for_each(|v| *v /= norm);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means
            .iter()
            .chain(&self.log_scales)
            .chain(&self.rotations)
            .chain(&self.intensities)
            .all(|v| v.is_finite())
    }
}

/// Gradient of a scalar with respect to every cloud parameter, laid out like
/// the cloud itself.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradient {
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl CloudGradient {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        Self {
            means: vec![0.0; cloud.means.len()],
            log_scales: vec![0.0; cloud.log_scales.len()],
            rotations: vec![0.0; cloud.rotations.len()],
            intensities: vec![0.0; cloud.intensities.len()],
        }
    }

    pub fn groups(&self) -> [&[f64]; 4] {
        [&self.means, &self.log_scales, &self.rotations, &self.intensities]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

type Mat3 = [[f64; 3]; 3];

/// Rotation and inverse variances of one Gaussian; `Sigma^{-1} = R diag(inv_var) R^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFrame {
    pub rotation: Mat3,
    pub inv_var: [f64; 3],
    pub precision: Mat3,
}

fn rotation_2d(theta: f64) -> Mat3 {
    let (s, c) = (math::sin(theta), math::cos(theta));
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
fn rotation_quat(q: &[f64]) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Closed-form `Sigma^{-1} = R S^{-2} R^T`; no matrix inversion involved, so
/// the result is symmetric positive definite for any finite input.
pub fn precision_from_params(log_scales: &[f64], rotation: &[f64]) -> GaussianFrame {
    let dim = log_scales.len();
    let rot = if dim == 2 {
        rotation_2d(rotation[0])
    } else {
        let norm = math::sqrt(rotation.iter().map(|v| v * v).sum());
        let q = [rotation[0] / norm, rotation[1] / norm, rotation[2] / norm, rotation[3] / norm];
        rotation_quat(&q)
    };
    let mut inv_var = [0.0; 3];
    for a in 0..dim {
        inv_var[a] = math::exp(-2.0 * log_scales[a]);
    }
    let mut precision = [[0.0; 3]; 3];
    for i in 0..dim {
        for j in i..dim {
            let mut acc = 0.0;
            for a in 0..dim {
                acc += rot[i][a] * inv_var[a] * rot[j][a];
            }
            precision[i][j] = acc;
            precision[j][i] = acc;
        }
    }
    GaussianFrame {
        rotation: rot,
        inv_var,
        precision,
    }
}

/// Per-Gaussian precision matrices of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSet {
    dim: usize,
    frames: Vec<GaussianFrame>,
}

impl PrecisionSet {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let frames = (0..cloud.len())
            .map(|i| precision_from_params(cloud.log_scale(i), cloud.rotation(i)))
            .collect();
        Self { dim: cloud.dim, frames }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[GaussianFrame] {
        &self.frames
    }

    pub fn precision(&self, i: usize) -> &Mat3 {
        &self.frames[i].precision
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-axis median of the standard deviations. Even counts average the two
/// middle values.
pub fn median_std(cloud: &GaussianCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(CoreError::EmptyCloud);
    }
    let n = cloud.len();
    let mut out = Vec::with_capacity(cloud.dim);
    let mut column = Vec::with_capacity(n);
    for a in 0..cloud.dim {
        column.clear();
        column.extend((0..n).map(|i| math::exp(cloud.log_scale(i)[a])));
        column.sort_unstable_by(f64::total_cmp);
        let mid = n / 2;
        out.push(if n % 2 == 1 {
            column[mid]
        } else {
            0.5 * (column[mid - 1] + column[mid])
        });
    }
    Ok(out)
}

/// The shared integer box visited around every Gaussian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    dim: usize,
    radii: [usize; 3],
    offsets: Vec<[i64; 3]>,
}

impl NeighborhoodSpec {
    /// Box of half extents `radii` (first `radii.len()` axes), enumerated in
    /// lexicographic order.
    pub fn from_radii(radii: &[usize]) -> Self {
        let dim = radii.len();
        let mut r = [0usize; 3];
        r[..dim].copy_from_slice(radii);
        let span = |a: usize| -(r[a] as i64)..=r[a] as i64;
        let mut offsets = Vec::new();
        for a in span(0) {
            for b in span(1) {
                for c in span(2) {
                    offsets.push([a, b, c]);
                }
            }
        }
        if dim == 2 {
            // Third axis is unused in 2D; radii[2] == 0 keeps it at zero.
            debug_assert!(offsets.iter().all(|o| o[2] == 0));
        }
        Self { dim, radii: r, offsets }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radii(&self) -> &[usize] {
        &self.radii[..self.dim]
    }

    pub fn offsets(&self) -> &[[i64; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// `radius_a = clamp(ceil(3 * sigma_a), 1, extent_a)`.
pub fn neighborhood_offsets(median_sigma: &[f64], extents: &[usize]) -> NeighborhoodSpec {
    let radii: Vec<usize> = median_sigma
        .iter()
        .zip(extents)
        .map(|(&s, &ext)| {
            let r = math::ceil(3.0 * s);
            let r = if r.is_finite() && r > 0.0 { r as usize } else { 1 };
            r.clamp(1, ext.max(1))
        })
        .collect();
    NeighborhoodSpec::from_radii(&radii)
}

/// Grid extents along the cloud's axes.
pub fn axis_extents(dim: usize, dims: [usize; 3]) -> Result<[usize; 3]> {
    match dim {
        2 if dims[0] == 1 => Ok([dims[1], dims[2], 1]),
        2 => Err(CoreError::InvalidCloud("2D cloud needs a single-slice grid")),
        _ => Ok(dims),
    }
}

/// Neighborhood derived from the cloud's current median scale.
pub fn neighborhood_for(cloud: &GaussianCloud, dims: [usize; 3]) -> Result<NeighborhoodSpec> {
    let ext = axis_extents(cloud.dim, dims)?;
    let sigma = median_std(cloud)?;
    Ok(neighborhood_offsets(&sigma, &ext[..cloud.dim]))
}

/// Integer anchor `floor(mu)` and fractional part `mu - floor(mu)`.
#[inline]
pub fn split_mean(mean: &[f64]) -> ([i64; 3], [f64; 3]) {
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for (a, &m) in mean.iter().enumerate() {
        let f = math::floor(m);
        base[a] = f as i64;
        frac[a] = m - f;
    }
    (base, frac)
}

/// Per-Gaussian pieces of the four-term expansion that do not depend on the
/// offset: `P f` and `f^T P f`.
#[derive(Debug, Clone, Copy)]
pub struct AnchorTerms {
    pf: [f64; 3],
    fpf: f64,
}

impl AnchorTerms {
    #[inline]
    pub fn new(precision: &Mat3, frac: &[f64; 3], dim: usize) -> Self {
        let mut pf = [0.0; 3];
        for i in 0..dim {
            for j in 0..dim {
                pf[i] += precision[i][j] * frac[j];
            }
        }
        let mut fpf = 0.0;
        for i in 0..dim {
            fpf += frac[i] * pf[i];
        }
        Self { pf, fpf }
    }
}

/// Squared Mahalanobis distance of `offset - frac` via the four-term
/// expansion. `offset` is relative to `floor(mu)`.
#[inline]
pub fn mahalanobis_decomposed(precision: &Mat3, anchor: &AnchorTerms, offset: [f64; 3], dim: usize) -> f64 {
    let mut dpd = 0.0;
    for i in 0..dim {
        let mut row = 0.0;
        for j in 0..dim {
            row += precision[i][j] * offset[j];
        }
        dpd += offset[i] * row;
    }
    let mut dpf = 0.0;
    for i in 0..dim {
        dpf += offset[i] * anchor.pf[i];
    }
    // P is symmetric, so the two cross terms coincide.
    let fpd = dpf;
    dpd - dpf - fpd + anchor.fpf
}

/// Batched squared distances, `n x offsets` row-major.
pub fn mahalanobis_sq(spec: &NeighborhoodSpec, fracs: &[[f64; 3]], precisions: &PrecisionSet) -> Result<Vec<f64>> {
    if fracs.len() != precisions.len() || spec.dim() != precisions.dim() {
        return Err(CoreError::ShapeMismatch {
            context: "mahalanobis_sq",
            expected: [precisions.len(), precisions.dim(), 0],
            found: [fracs.len(), spec.dim(), 0],
        });
    }
    let dim = spec.dim();
    let mut out = Vec::with_capacity(fracs.len() * spec.len());
    for (frac, frame) in fracs.iter().zip(precisions.frames()) {
        let anchor = AnchorTerms::new(&frame.precision, frac, dim);
        for off in spec.offsets() {
            let o = [off[0] as f64, off[1] as f64, off[2] as f64];
            out.push(mahalanobis_decomposed(&frame.precision, &anchor, o, dim));
        }
    }
    Ok(out)
}

/// Flat voxel index of `base + offset`, or `None` outside the grid.
#[inline]
fn voxel_index(dim: usize, dims: [usize; 3], base: &[i64; 3], off: &[i64; 3]) -> Option<usize> {
    // Bases of runaway means saturate at the i64 limits.
    let (c, h, w) = if dim == 2 {
        (0, base[0].checked_add(off[0])?, base[1].checked_add(off[1])?)
    } else {
        (base[0].checked_add(off[0])?, base[1].checked_add(off[1])?, base[2].checked_add(off[2])?)
    };
    if c < 0 || h < 0 || w < 0 {
        return None;
    }
    let (c, h, w) = (c as usize, h as usize, w as usize);
    if c >= dims[0] || h >= dims[1] || w >= dims[2] {
        return None;
    }
    Some((c * dims[1] + h) * dims[2] + w)
}

fn check_dims(cloud: &GaussianCloud, dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(CoreError::InvalidGrid("every axis must be >= 1"));
    }
    axis_extents(cloud.dim, dims).map(|_| ())
}

/// Confined rasterization with the neighborhood derived from the cloud's
/// median scale.
pub fn rasterize(cloud: &GaussianCloud, dims: [usize; 3]) -> Result<VolumeGrid> {
    let spec = neighborhood_for(cloud, dims)?;
    rasterize_with(cloud, dims, &spec)
}

/// Scatter-adds `I * exp(-D^2 / 2)` of every Gaussian over its in-bounds
/// neighborhood cells.
pub fn rasterize_with(cloud: &GaussianCloud, dims: [usize; 3], spec: &NeighborhoodSpec) -> Result<VolumeGrid> {
    check_dims(cloud, dims)?;
    if spec.dim() != cloud.dim {
        return Err(CoreError::InvalidCloud("neighborhood dimension differs from cloud"));
    }
    let precisions = PrecisionSet::from_cloud(cloud);
    let n = cloud.len();
    let voxels = dims[0] * dims[1] * dims[2];
    let chunk = raster_chunk_len(n);
    let dim = cloud.dim;

    let partials = par::map_indexed(n.div_ceil(chunk), |ci| {
        let mut part = vec![0.0; voxels];
        for i in ci * chunk..((ci + 1) * chunk).min(n) {
            let intensity = cloud.intensity(i);
            let (base, frac) = split_mean(cloud.mean(i));
            let p = precisions.precision(i);
            let anchor = AnchorTerms::new(p, &frac, dim);
            for off in spec.offsets() {
                if let Some(idx) = voxel_index(dim, dims, &base, off) {
                    let o = [off[0] as f64, off[1] as f64, off[2] as f64];
                    let d2 = mahalanobis_decomposed(p, &anchor, o, dim);
                    part[idx] += math::exp(-0.5 * d2) * intensity;
                }
            }
        }
        part
    });

    let mut out = vec![0.0; voxels];
    for part in &partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    VolumeGrid::from_vec(dims, out)
}

/// Reverse-mode derivative of [`rasterize_with`] against the cotangent
/// `upstream`. The floor anchor is held fixed (gradients reach the mean
/// through its fractional part) and the neighborhood acts as a fixed mask.
pub fn rasterize_vjp(
    cloud: &GaussianCloud,
    upstream: &VolumeGrid,
    spec: &NeighborhoodSpec,
) -> Result<CloudGradient> {
    let dims = upstream.dims();
    check_dims(cloud, dims)?;
    if spec.dim() != cloud.dim {
        return Err(CoreError::InvalidCloud("neighborhood dimension differs from cloud"));
    }
    let dim = cloud.dim;
    let rlen = rotation_len(dim);
    let up = upstream.data();

    let per_gaussian = par::map_indexed(cloud.len(), |i| {
        let frame = precision_from_params(cloud.log_scale(i), cloud.rotation(i));
        let p = &frame.precision;
        let intensity = cloud.intensity(i);
        let (base, frac) = split_mean(cloud.mean(i));
        let anchor = AnchorTerms::new(p, &frac, dim);

        let mut d_intensity = 0.0;
        let mut d_frac = [0.0; 3];
        // dL/dP accumulated as a symmetric outer-product sum.
        let mut g = [[0.0; 3]; 3];
        for off in spec.offsets() {
            let Some(idx) = voxel_index(dim, dims, &base, off) else {
                continue;
            };
            let cot = up[idx];
            if cot == 0.0 {
                continue;
            }
            let o = [off[0] as f64, off[1] as f64, off[2] as f64];
            let d2 = mahalanobis_decomposed(p, &anchor, o, dim);
            let e = math::exp(-0.5 * d2);
            d_intensity += cot * e;
            // dL/dD^2
            let w = -0.5 * cot * e * intensity;
            let mut u = [0.0; 3];
            for a in 0..dim {
                u[a] = o[a] - frac[a];
            }
            for a in 0..dim {
                let mut pu = 0.0;
                for b in 0..dim {
                    pu += p[a][b] * u[b];
                }
                d_frac[a] += -2.0 * w * pu;
                for b in 0..dim {
                    g[a][b] += w * u[a] * u[b];
                }
            }
        }

        let rot = &frame.rotation;
        let mut d_log = [0.0; 3];
        for a in 0..dim {
            let mut quad = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    quad += rot[i][a] * g[i][j] * rot[j][a];
                }
            }
            d_log[a] = -2.0 * frame.inv_var[a] * quad;
        }

        // dL/dR = 2 G R diag(inv_var).
        let mut d_r = [[0.0; 3]; 3];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += g[i][k] * rot[k][j];
                }
                d_r[i][j] = 2.0 * acc * frame.inv_var[j];
            }
        }
        let mut d_rot = [0.0; 4];
        if dim == 2 {
            let theta = cloud.rotation(i)[0];
            let (s, c) = (math::sin(theta), math::cos(theta));
            let dr = [[-s, -c], [c, -s]];
            d_rot[0] = d_r[0][0] * dr[0][0] + d_r[0][1] * dr[0][1] + d_r[1][0] * dr[1][0] + d_r[1][1] * dr[1][1];
        } else {
            d_rot = quaternion_vjp(cloud.rotation(i), &d_r);
        }

        let mut out = [0.0; 11];
        out[..dim].copy_from_slice(&d_frac[..dim]);
        out[3..3 + dim].copy_from_slice(&d_log[..dim]);
        out[6..6 + rlen].copy_from_slice(&d_rot[..rlen]);
        out[10] = d_intensity;
        out
    });

    let mut grad = CloudGradient::zeros_like(cloud);
    for (i, row) in per_gaussian.iter().enumerate() {
        grad.means[i * dim..(i + 1) * dim].copy_from_slice(&row[..dim]);
        grad.log_scales[i * dim..(i + 1) * dim].copy_from_slice(&row[3..3 + dim]);
        grad.rotations[i * rlen..(i + 1) * rlen].copy_from_slice(&row[6..6 + rlen]);
        grad.intensities[i] = row[10];
    }
    Ok(grad)
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
fn quaternion_vjp(q_raw: &[f64], d_r: &Mat3) -> [f64; 4] {
    let norm = math::sqrt(q_raw.iter().map(|v| v * v).sum());
    let q = [q_raw[0] / norm, q_raw[1] / norm, q_raw[2] / norm, q_raw[3] / norm];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let partials: [Mat3; 4] = [
        [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]],
        [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]],
        [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]],
        [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]],
    ];
    let mut g_unit = [0.0; 4];
    for (k, dr) in partials.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += d_r[i][j] * dr[i][j];
            }
        }
        g_unit[k] = acc;
    }
    let radial: f64 = (0..4).map(|k| q[k] * g_unit[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (g_unit[k] - q[k] * radial) / norm;
    }
    out
}

/// Reference evaluators: every Gaussian at every voxel, no cutoff.
pub mod reference {
    use super::*;

    /// Dense evaluation of the full Gaussian sum.
    pub fn rasterize_dense_oracle(cloud: &GaussianCloud, dims: [usize; 3]) -> Result<VolumeGrid> {
        dense(cloud, dims, None)
    }

    /// Dense evaluation restricted to each Gaussian's neighborhood box. Uses
    /// the same per-term arithmetic and chunked summation order as
    /// [`rasterize_with`], so the two agree bitwise.
    pub fn rasterize_dense_masked(cloud: &GaussianCloud, dims: [usize; 3], spec: &NeighborhoodSpec) -> Result<VolumeGrid> {
        dense(cloud, dims, Some(spec))
    }

    fn dense(cloud: &GaussianCloud, dims: [usize; 3], mask: Option<&NeighborhoodSpec>) -> Result<VolumeGrid> {
        check_dims(cloud, dims)?;
        let dim = cloud.dim;
        let precisions = PrecisionSet::from_cloud(cloud);
        let n = cloud.len();
        let chunk = raster_chunk_len(n);
        let anchors: Vec<_> = (0..n)
            .map(|i| {
                let (base, frac) = split_mean(cloud.mean(i));
                (base, AnchorTerms::new(precisions.precision(i), &frac, dim))
            })
            .collect();
        let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for c in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let voxel = if dim == 2 {
                        [h as i64, w as i64, 0]
                    } else {
                        [c as i64, h as i64, w as i64]
                    };
                    let mut total = 0.0;
                    for start in (0..n).step_by(chunk) {
                        let mut partial = 0.0;
                        for i in start..(start + chunk).min(n) {
                            let (base, anchor) = &anchors[i];
                            let mut off = [0i64; 3];
                            for a in 0..dim {
                                off[a] = voxel[a].saturating_sub(base[a]);
                            }
                            if let Some(spec) = mask {
                                if (0..dim).any(|a| off[a].unsigned_abs() as usize > spec.radii()[a]) {
                                    continue;
                                }
                            }
                            let o = [off[0] as f64, off[1] as f64, off[2] as f64];
                            let d2 = mahalanobis_decomposed(precisions.precision(i), anchor, o, dim);
                            partial += math::exp(-0.5 * d2) * cloud.intensity(i);
                        }
                        total += partial;
                    }
                    out.push(total);
                }
            }
        }
        VolumeGrid::from_vec(dims, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, LN_2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_mat(got: &Mat3, want: [[f64; 2]; 2]) {
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i][j] - want[i][j]).abs() < 1e-12, "{got:?}");
            }
        }
    }

    #[test]
    fn precision_examples() {
        assert_mat(&precision_from_params(&[0.0, 0.0], &[0.0]).precision, [[1.0, 0.0], [0.0, 1.0]]);
        assert_mat(&precision_from_params(&[LN_2, 0.0], &[0.0]).precision, [[0.25, 0.0], [0.0, 1.0]]);
        assert_mat(&precision_from_params(&[LN_2, 0.0], &[FRAC_PI_2]).precision, [[1.0, 0.0], [0.0, 0.25]]);
    }

    #[test]
    fn precision_3d_identity_quaternion() {
        let f = precision_from_params(&[0.0, LN_2, -LN_2], &[2.0, 0.0, 0.0, 0.0]);
        let want = [1.0, 0.25, 4.0];
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { want[i] } else { 0.0 };
                assert!((f.precision[i][j] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precision_is_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3];
            let p = precision_from_params(&s, &q).precision;
            for i in 0..3 {
                for j in 0..3 {
                    assert!((p[i][j] - p[j][i]).abs() <= 1e-12);
                }
            }
            // Leading principal minors.
            let m1 = p[0][0];
            let m2 = p[0][0] * p[1][1] - p[0][1] * p[1][0];
            let m3 = p[0][0] * (p[1][1] * p[2][2] - p[1][2] * p[2][1]) - p[0][1] * (p[1][0] * p[2][2] - p[1][2] * p[2][0])
                + p[0][2] * (p[1][0] * p[2][1] - p[1][1] * p[2][0]);
            assert!(m1 > 0.0 && m2 > 0.0 && m3 > 0.0);
        }
    }

    fn cloud_with_stds(stds: &[f64]) -> GaussianCloud {
        let n = stds.len();
        let log: Vec<f64> = stds.iter().flat_map(|&s| [math::ln(s), math::ln(s)]).collect();
        GaussianCloud::new(2, vec![1.0; 2 * n], log, vec![0.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn median_examples() {
        let m = median_std(&cloud_with_stds(&[3.0, 1.0, 2.0])).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12 && (m[1] - 2.0).abs() < 1e-12);
        let m = median_std(&cloud_with_stds(&[0.7])).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-12);
        let m = median_std(&cloud_with_stds(&[4.0, 1.0, 3.0, 2.0])).unwrap();
        assert!((m[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_rejected() {
        assert_eq!(
            GaussianCloud::new(2, vec![], vec![], vec![], vec![]).unwrap_err(),
            CoreError::EmptyCloud
        );
    }

    #[test]
    fn neighborhood_examples() {
        let spec = neighborhood_offsets(&[1.0, 1.0], &[32, 32]);
        assert_eq!(spec.radii(), &[3, 3]);
        assert_eq!(spec.len(), 49);
        let spec = neighborhood_offsets(&[0.2, 0.2], &[32, 32]);
        assert_eq!(spec.radii(), &[1, 1]);
        assert_eq!(spec.len(), 9);
        let spec = neighborhood_offsets(&[100.0, 0.5], &[5, 32]);
        assert_eq!(spec.radii(), &[5, 2]);
        let spec = neighborhood_offsets(&[0.4, 1.2, 2.0], &[8, 8, 8]);
        assert_eq!(spec.radii(), &[2, 4, 6]);
        assert_eq!(spec.len(), 5 * 9 * 13);
        let sum = spec.offsets().iter().fold([0i64; 3], |acc, o| [acc[0] + o[0], acc[1] + o[1], acc[2] + o[2]]);
        assert_eq!(sum, [0, 0, 0]);
    }

    #[test]
    fn mahalanobis_examples() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let a = AnchorTerms::new(&id, &[0.0; 3], 2);
        assert_eq!(mahalanobis_decomposed(&id, &a, [3.0, 4.0, 0.0], 2), 25.0);
        let a = AnchorTerms::new(&id, &[0.5, 0.0, 0.0], 2);
        assert_eq!(mahalanobis_decomposed(&id, &a, [1.0, 0.0, 0.0], 2), 0.25);
    }

    #[test]
    fn single_gaussian_values() {
        let cloud = GaussianCloud::isotropic(2, vec![8.0, 8.0], 1.0, vec![5.0]).unwrap();
        let v = rasterize(&cloud, [1, 16, 16]).unwrap();
        assert_eq!(v.get(0, 8, 8), 5.0);
        assert!((v.get(0, 11, 8) - 5.0 * math::exp(-4.5)).abs() < 1e-12);
        assert!((v.get(0, 11, 8) - 0.0555).abs() < 1e-4);
        // Outside the 3-voxel box.
        assert_eq!(v.get(0, 12, 8), 0.0);
    }

    #[test]
    fn dense_oracle_basics() {
        let cloud = GaussianCloud::isotropic(2, vec![4.0, 4.0, 1.0, 2.0], 1.0, vec![0.0, 0.0]).unwrap();
        let v = reference::rasterize_dense_oracle(&cloud, [1, 9, 9]).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let cloud = GaussianCloud::isotropic(2, vec![4.0, 4.0], 1.0, vec![1.0]).unwrap();
        let v = reference::rasterize_dense_oracle(&cloud, [1, 9, 9]).unwrap();
        let (_, max) = v.min_max();
        assert_eq!(max, 1.0);
        assert_eq!(v.get(0, 4, 4), 1.0);
    }

    #[test]
    fn out_of_grid_gaussian_contributes_in_bounds_cells_only() {
        let cloud = GaussianCloud::isotropic(2, vec![-1.0, 3.0], 1.0, vec![1.0]).unwrap();
        let v = rasterize(&cloud, [1, 8, 8]).unwrap();
        assert!((v.get(0, 0, 3) - math::exp(-0.5)).abs() < 1e-15);
        assert!((v.get(0, 2, 3) - math::exp(-4.5)).abs() < 1e-15);
        assert_eq!(v.get(0, 3, 3), 0.0);
        // Nothing wraps to the bottom edge.
        assert!((0..8).all(|c| v.get(0, 7, c) == 0.0));
    }

    #[test]
    fn rasterize_3d_matches_masked_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let means: Vec<f64> = (0..n * 3).map(|_| rng.random_range(1.0..9.0)).collect();
        let logs: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-0.5..0.4)).collect();
        let rots: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ints: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let cloud = GaussianCloud::new(3, means, logs, rots, ints).unwrap();
        let dims = [10, 10, 10];
        let spec = neighborhood_for(&cloud, dims).unwrap();
        let a = rasterize_with(&cloud, dims, &spec).unwrap();
        let b = reference::rasterize_dense_masked(&cloud, dims, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let cloud = GaussianCloud::isotropic(2, vec![3.3, 4.6], 1.2, vec![2.0]).unwrap();
        let spec = neighborhood_for(&cloud, [1, 8, 8]).unwrap();
        let g = rasterize_vjp(&cloud, &VolumeGrid::zeros([1, 8, 8]).unwrap(), &spec).unwrap();
        assert!(g.groups().iter().all(|grp| grp.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn intensity_gradient_at_own_center() {
        let cloud = GaussianCloud::isotropic(2, vec![4.0, 5.0], 0.8, vec![3.0]).unwrap();
        let spec = neighborhood_for(&cloud, [1, 10, 10]).unwrap();
        let mut up = VolumeGrid::zeros([1, 10, 10]).unwrap();
        let idx = up.index(0, 4, 5);
        up.data_mut()[idx] = 1.0;
        let g = rasterize_vjp(&cloud, &up, &spec).unwrap();
        assert_eq!(g.intensities[0], 1.0);
    }
}
