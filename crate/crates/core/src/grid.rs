//! Volumes, sinograms and the parallel-beam acquisition geometry.
//!
//! Index conventions: a volume is stored row-major as `(C, H, W)` with `W`
//! fastest. Voxel centers sit on integer grid coordinates, so voxel
//! `(c, h, w)` is the point `(c, h, w)` in continuous grid space. Each slice
//! rotates about its geometric center `((H-1)/2, (W-1)/2)`; world
//! coordinates put that center at the origin with `x` along `W` and `y`
//! along `H`, in units of one voxel edge.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{CoreError, Result};
use crate::math;

/// Voxel edge length. Physical units are out of scope.
pub const VOXEL_SPACING: f64 = 1.0;

/// Detector bin pitch, in voxel edges.
pub const DETECTOR_SPACING: f64 = 1.0;

/// A discretized `C x H x W` intensity field; `C == 1` is a single slice.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl VolumeGrid {
    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(CoreError::InvalidGrid("data length does not match dims"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidGrid("non-finite voxel value"));
        }
        Ok(Self { dims, data })
    }

    /// Single slice from a closure over `(row, col)`.
    pub fn from_fn_2d(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::from_vec([1, height, width], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, c: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Clamps every voxel to `>= 0`.
    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.data)
    }

    /// Bilinear (single slice) or trilinear sample at continuous grid
    /// coordinates; samples beyond the last voxel center clamp to the edge.
    pub fn sample_clamped(&self, pos: &[f64]) -> f64 {
        let (c, h, w) = match pos.len() {
            2 => (0.0, pos[0], pos[1]),
            _ => (pos[0], pos[1], pos[2]),
        };
        let axes = [c, h, w];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let x = axes[a].clamp(0.0, max);
            let f = math::floor(x);
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            frac[a] = x - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| (corner >> (2 - a)) & 1 == 1;
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    weight *= frac[a];
                    idx[a] = hi[a];
                } else {
                    weight *= 1.0 - frac[a];
                    idx[a] = lo[a];
                }
            }
            if weight != 0.0 {
                acc += weight * self.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }
}

/// Per-slice `(views x detectors)` line integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    slices: usize,
    views: usize,
    detectors: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(slices: usize, views: usize, detectors: usize) -> Self {
        Self {
            slices,
            views,
            detectors,
            data: vec![0.0; slices * views * detectors],
        }
    }

    pub fn from_vec(slices: usize, views: usize, detectors: usize, data: Vec<f64>) -> Result<Self> {
        if slices == 0 || views == 0 || detectors == 0 {
            return Err(CoreError::InvalidGrid("sinogram dims must be >= 1"));
        }
        if data.len() != slices * views * detectors {
            return Err(CoreError::ShapeMismatch {
                context: "sinogram data",
                expected: [slices, views, detectors],
                found: [data.len(), 0, 0],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidGrid("non-finite sinogram value"));
        }
        Ok(Self {
            slices,
            views,
            detectors,
            data,
        })
    }

    /// `(slices, views, detectors)`.
    pub fn shape(&self) -> [usize; 3] {
        [self.slices, self.views, self.detectors]
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, c: usize) -> &[f64] {
        let n = self.views * self.detectors;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, view: usize) -> &[f64] {
        let start = (c * self.views + view) * self.detectors;
        &self.data[start..start + self.detectors]
    }

    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.data)
    }
}

/// Parallel-beam acquisition over `[0, pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    angles: Vec<f64>,
    detectors: usize,
    slice_dims: [usize; 2],
}

/// Even detector count covering the slice diagonal.
pub fn detector_count(height: usize, width: usize) -> usize {
    let diag = math::sqrt((height * height + width * width) as f64);
    let n = math::ceil(diag) as usize;
    n + (n & 1)
}

/// `views` angles `k * pi / views` and a detector row wide enough to cover
/// the slice diagonal at every angle.
pub fn make_geometry(views: usize, slice_dims: [usize; 2]) -> Result<ProjectionGeometry> {
    if views == 0 {
        return Err(CoreError::InvalidGeometry("views must be >= 1"));
    }
    if slice_dims[0] == 0 || slice_dims[1] == 0 {
        return Err(CoreError::InvalidGeometry("slice dims must be >= 1"));
    }
    let step = PI / views as f64;
    let angles = (0..views).map(|k| k as f64 * step).collect();
    Ok(ProjectionGeometry {
        angles,
        detectors: detector_count(slice_dims[0], slice_dims[1]),
        slice_dims,
    })
}

impl ProjectionGeometry {
    /// Builds a geometry from stored parts, checking every invariant.
    pub fn from_parts(angles: Vec<f64>, detectors: usize, slice_dims: [usize; 2]) -> Result<Self> {
        if angles.is_empty() {
            return Err(CoreError::InvalidGeometry("at least one view is required"));
        }
        if detectors == 0 {
            return Err(CoreError::InvalidGeometry("detectors must be >= 1"));
        }
        if slice_dims[0] == 0 || slice_dims[1] == 0 {
            return Err(CoreError::InvalidGeometry("slice dims must be >= 1"));
        }
        if angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return Err(CoreError::InvalidGeometry("angles must lie in [0, pi)"));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidGeometry("angles must be strictly increasing"));
        }
        Ok(Self {
            angles,
            detectors,
            slice_dims,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    /// `(H, W)`.
    pub fn slice_dims(&self) -> [usize; 2] {
        self.slice_dims
    }

    /// Rotation center in grid coordinates `(row, col)`.
    pub fn center(&self) -> [f64; 2] {
        [
            (self.slice_dims[0] as f64 - 1.0) * 0.5,
            (self.slice_dims[1] as f64 - 1.0) * 0.5,
        ]
    }

    /// Signed offset of detector bin `k` from the rotation axis.
    #[inline]
    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.detectors as f64 - 1.0) * 0.5) * DETECTOR_SPACING
    }

    /// Grid `(row, col)` to world `(x, y)`.
    #[inline]
    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let [cr, cc] = self.center();
        ((col - cc) * VOXEL_SPACING, (row - cr) * VOXEL_SPACING)
    }

    /// World `(x, y)` to grid `(row, col)`.
    #[inline]
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let [cr, cc] = self.center();
        (y / VOXEL_SPACING + cr, x / VOXEL_SPACING + cc)
    }

    /// Empty sinogram shaped for `slices` slices.
    pub fn empty_sinogram(&self, slices: usize) -> Sinogram {
        Sinogram::zeros(slices, self.views(), self.detectors)
    }

    pub fn check_grid(&self, grid: &VolumeGrid) -> Result<()> {
        let [_, h, w] = grid.dims();
        if [h, w] != self.slice_dims {
            return Err(CoreError::ShapeMismatch {
                context: "grid vs geometry",
                expected: [grid.slices(), self.slice_dims[0], self.slice_dims[1]],
                found: grid.dims(),
            });
        }
        Ok(())
    }

    pub fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.views() != self.views() || sino.detectors() != self.detectors {
            return Err(CoreError::ShapeMismatch {
                context: "sinogram vs geometry",
                expected: [sino.slices(), self.views(), self.detectors],
                found: sino.shape(),
            });
        }
        Ok(())
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(CoreError::InvalidGrid("every axis must be >= 1"));
    }
    Ok(())
}

pub(crate) fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
