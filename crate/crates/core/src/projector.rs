//! Parallel-beam Radon transform, its exact transpose, ramp filtering and
//! filtered back projection.
//!
//! The forward operator is ray driven: every detector bin casts a ray at its
//! signed offset from the rotation center, samples the slice with bilinear
//! interpolation every [`RAY_STEP`] units, and sums the samples scaled by the
//! step. Samples sit at `t = j * RAY_STEP` along the ray for integer `j`, so
//! the sample set depends only on the geometry. [`radon_adjoint`] replays the
//! same walk and scatters instead of gathering, which makes it the transpose
//! of [`radon_forward`] up to floating-point rounding.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{CoreError, Result};
use crate::fft::{fft_in_place, Complex};
use crate::grid::{ProjectionGeometry, Sinogram, VolumeGrid, DETECTOR_SPACING};
use crate::{math, par};

/// Distance between consecutive samples along a ray.
pub const RAY_STEP: f64 = 0.5;

/// Views per partial backprojection; fixed so that the merge order, and
/// hence the result, does not depend on the worker count.
const ADJOINT_VIEW_CHUNK: usize = 4;

#[derive(Clone, Copy)]
struct RayFrame {
    cos: f64,
    sin: f64,
}

#[derive(Clone, Copy)]
struct SliceFrame {
    height: usize,
    width: usize,
    center_row: f64,
    center_col: f64,
}

/// `floor(x)` for `x > -1`, where truncation differs from floor only on
/// `(-1, 0)`. Avoids a software floor call in the hot loop.
#[inline(always)]
fn floor_above_minus_one(x: f64) -> i64 {
    if x < 0.0 {
        -1
    } else {
        x as i64
    }
}

/// Bilinear taps of one ray sample.
#[derive(Clone, Copy)]
enum Taps {
    /// All four taps inside the slice, at `base`, `base + 1`, `base + width`
    /// and `base + width + 1`, with the sample's fractional row and column.
    Quad(usize, f64, f64),
    /// One in-slice tap of a sample straddling the border.
    One(usize, f64),
}

/// Bilinear weights of the four taps, scaled by the step length.
#[inline(always)]
fn quad_weights(fr: f64, fc: f64) -> [f64; 4] {
    [
        (1.0 - fr) * (1.0 - fc) * RAY_STEP,
        (1.0 - fr) * fc * RAY_STEP,
        fr * (1.0 - fc) * RAY_STEP,
        fr * fc * RAY_STEP,
    ]
}

/// Visits every bilinear tap on the ray of detector offset `s`. Weights
/// already include the step length.
#[inline(always)]
fn walk_ray(frame: &SliceFrame, ray: RayFrame, s: f64, mut visit: impl FnMut(Taps)) {
    // Ray: (x, y) = s * (cos, sin) + t * (-sin, cos); col = x + cc, row = y + cr.
    let col0 = s * ray.cos + frame.center_col;
    let row0 = s * ray.sin + frame.center_row;
    let dcol = -ray.sin;
    let drow = ray.cos;

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    // Bilinear support along an axis of length `len` is the open interval (-1, len).
    let mut clip = |p0: f64, dp: f64, len: usize| -> bool {
        let lo = -1.0;
        let hi = len as f64;
        if dp.abs() < 1e-12 {
            return p0 > lo && p0 < hi;
        }
        let (a, b) = ((lo - p0) / dp, (hi - p0) / dp);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t_lo = t_lo.max(a);
        t_hi = t_hi.min(b);
        true
    };
    if !clip(col0, dcol, frame.width) || !clip(row0, drow, frame.height) || t_lo >= t_hi {
        return;
    }

    let j_lo = math::ceil(t_lo / RAY_STEP) as i64;
    let j_hi = math::floor(t_hi / RAY_STEP) as i64;
    let (w, h) = (frame.width as i64, frame.height as i64);
    for j in j_lo..=j_hi {
        let t = j as f64 * RAY_STEP;
        let col = col0 + t * dcol;
        let row = row0 + t * drow;
        let c0 = floor_above_minus_one(col);
        let r0 = floor_above_minus_one(row);
        let fc = col - c0 as f64;
        let fr = row - r0 as f64;
        if r0 >= 0 && c0 >= 0 && r0 + 1 < h && c0 + 1 < w {
            visit(Taps::Quad((r0 * w + c0) as usize, fr, fc));
        } else {
            let [w00, w01, w10, w11] = quad_weights(fr, fc);
            let taps = [(r0, c0, w00), (r0, c0 + 1, w01), (r0 + 1, c0, w10), (r0 + 1, c0 + 1, w11)];
            for (r, c, wt) in taps {
                if r >= 0 && c >= 0 && r < h && c < w {
                    visit(Taps::One((r * w + c) as usize, wt));
                }
            }
        }
    }
}

fn frames(geom: &ProjectionGeometry) -> (SliceFrame, Vec<RayFrame>) {
    let [height, width] = geom.slice_dims();
    let [center_row, center_col] = geom.center();
    let rays = geom
        .angles()
        .iter()
        .map(|&a| RayFrame {
            cos: math::cos(a),
            sin: math::sin(a),
        })
        .collect();
    (
        SliceFrame {
            height,
            width,
            center_row,
            center_col,
        },
        rays,
    )
}

/// Line integrals of every slice of `grid` along every ray of `geom`.
pub fn radon_forward(grid: &VolumeGrid, geom: &ProjectionGeometry) -> Result<Sinogram> {
    geom.check_grid(grid)?;
    let (frame, rays) = frames(geom);
    let views = geom.views();
    let n = geom.detectors();
    let slice_len = frame.height * frame.width;
    let mut out = geom.empty_sinogram(grid.slices());
    let data = grid.data();
    par::for_each_chunk_mut(out.data_mut(), n, |row_idx, row| {
        let (c, v) = (row_idx / views, row_idx % views);
        let img = &data[c * slice_len..(c + 1) * slice_len];
        for (k, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            let w = frame.width;
            walk_ray(&frame, rays[v], geom.detector_offset(k), |taps| match taps {
                Taps::Quad(b, fr, fc) => {
                    let q = quad_weights(fr, fc);
                    acc += (q[0] * img[b] + q[1] * img[b + 1]) + (q[2] * img[b + w] + q[3] * img[b + w + 1]);
                }
                Taps::One(i, wt) => acc += wt * img[i],
            });
            *out = acc;
        }
    });
    Ok(out)
}

/// Transpose of [`radon_forward`]: scatters each sinogram bin back along its
/// ray with the forward pass's interpolation weights.
pub fn radon_adjoint(sino: &Sinogram, geom: &ProjectionGeometry) -> Result<VolumeGrid> {
    geom.check_sinogram(sino)?;
    let (frame, rays) = frames(geom);
    let slices = sino.slices();
    let views = geom.views();
    let slice_len = frame.height * frame.width;
    let chunks_per_slice = views.div_ceil(ADJOINT_VIEW_CHUNK);

    let partials = par::map_indexed(slices * chunks_per_slice, |task| {
        let (c, chunk) = (task / chunks_per_slice, task % chunks_per_slice);
        let mut part = vec![0.0; slice_len];
        let v_end = ((chunk + 1) * ADJOINT_VIEW_CHUNK).min(views);
        for v in chunk * ADJOINT_VIEW_CHUNK..v_end {
            for (k, &val) in sino.row(c, v).iter().enumerate() {
                if val != 0.0 {
                    let w = frame.width;
                    walk_ray(&frame, rays[v], geom.detector_offset(k), |taps| match taps {
                        Taps::Quad(b, fr, fc) => {
                            let q = quad_weights(fr, fc);
                            part[b] += q[0] * val;
                            part[b + 1] += q[1] * val;
                            part[b + w] += q[2] * val;
                            part[b + w + 1] += q[3] * val;
                        }
                        Taps::One(i, wt) => part[i] += wt * val,
                    });
                }
            }
        }
        part
    });

    merge_partials(partials, slices, chunks_per_slice, frame.height, frame.width)
}

#[derive(Clone, Copy)]
struct Tap {
    index: u32,
    quad: bool,
    // Fractional row and column for a quad, the weight in `a` otherwise.
    a: f64,
    b: f64,
}

/// Ray walks of one geometry recorded once and replayed by
/// [`RayTable::forward`] and [`RayTable::adjoint`].
///
/// Results are bitwise identical to [`radon_forward`] and [`radon_adjoint`];
/// the table only skips the per-sample geometry. Memory is roughly 24 bytes
/// per ray sample, see [`RayTable::size_bound`].
#[derive(Clone)]
pub struct RayTable {
    geom: ProjectionGeometry,
    width: usize,
    starts: Vec<usize>,
    taps: Vec<Tap>,
}

impl RayTable {
    pub fn new(geom: &ProjectionGeometry) -> Self {
        let (frame, rays) = frames(geom);
        let n = geom.detectors();
        let mut starts = Vec::with_capacity(geom.views() * n + 1);
        let mut taps = Vec::new();
        starts.push(0);
        for ray in &rays {
            for k in 0..n {
                walk_ray(&frame, *ray, geom.detector_offset(k), |t| {
                    taps.push(match t {
                        Taps::Quad(i, fr, fc) => Tap { index: i as u32, quad: true, a: fr, b: fc },
                        Taps::One(i, wt) => Tap { index: i as u32, quad: false, a: wt, b: 0.0 },
                    })
                });
                starts.push(taps.len());
            }
        }
        RayTable {
            geom: geom.clone(),
            width: frame.width,
            starts,
            taps,
        }
    }

    /// Upper bound in bytes on the table for `geom`, usable before building it.
    pub fn size_bound(geom: &ProjectionGeometry) -> usize {
        let n = geom.detectors();
        let per_ray = 2 * n + 8;
        geom.views() * n * per_ray * core::mem::size_of::<Tap>()
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geom
    }

    fn ray(&self, v: usize, k: usize) -> &[Tap] {
        let r = v * self.geom.detectors() + k;
        &self.taps[self.starts[r]..self.starts[r + 1]]
    }

    /// Same as [`radon_forward`] with this table's geometry.
    pub fn forward(&self, grid: &VolumeGrid) -> Result<Sinogram> {
        let geom = &self.geom;
        geom.check_grid(grid)?;
        let views = geom.views();
        let n = geom.detectors();
        let w = self.width;
        let slice_len = grid.dims()[1] * w;
        let mut out = geom.empty_sinogram(grid.slices());
        let data = grid.data();
        par::for_each_chunk_mut(out.data_mut(), n, |row_idx, row| {
            let (c, v) = (row_idx / views, row_idx % views);
            let img = &data[c * slice_len..(c + 1) * slice_len];
            for (k, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in self.ray(v, k) {
                    let i = t.index as usize;
                    if t.quad {
                        let q = quad_weights(t.a, t.b);
                        acc += (q[0] * img[i] + q[1] * img[i + 1]) + (q[2] * img[i + w] + q[3] * img[i + w + 1]);
                    } else {
                        acc += t.a * img[i];
                    }
                }
                *out = acc;
            }
        });
        Ok(out)
    }

    /// Same as [`radon_adjoint`] with this table's geometry.
    pub fn adjoint(&self, sino: &Sinogram) -> Result<VolumeGrid> {
        let geom = &self.geom;
        geom.check_sinogram(sino)?;
        let [height, width] = geom.slice_dims();
        let slices = sino.slices();
        let views = geom.views();
        let slice_len = height * width;
        let chunks_per_slice = views.div_ceil(ADJOINT_VIEW_CHUNK);

        let partials = par::map_indexed(slices * chunks_per_slice, |task| {
            let (c, chunk) = (task / chunks_per_slice, task % chunks_per_slice);
            let mut part = vec![0.0; slice_len];
            let v_end = ((chunk + 1) * ADJOINT_VIEW_CHUNK).min(views);
            for v in chunk * ADJOINT_VIEW_CHUNK..v_end {
                for (k, &val) in sino.row(c, v).iter().enumerate() {
                    if val == 0.0 {
                        continue;
                    }
                    for t in self.ray(v, k) {
                        let i = t.index as usize;
                        if t.quad {
                            let q = quad_weights(t.a, t.b);
                            part[i] += q[0] * val;
                            part[i + 1] += q[1] * val;
                            part[i + width] += q[2] * val;
                            part[i + width + 1] += q[3] * val;
                        } else {
                            part[i] += t.a * val;
                        }
                    }
                }
            }
            part
        });
        merge_partials(partials, slices, chunks_per_slice, height, width)
    }
}

fn merge_partials(
    partials: Vec<Vec<f64>>,
    slices: usize,
    chunks_per_slice: usize,
    height: usize,
    width: usize,
) -> Result<VolumeGrid> {
    let slice_len = height * width;
    let mut out = VolumeGrid::zeros([slices, height, width])?;
    let data = out.data_mut();
    for (task, part) in partials.iter().enumerate() {
        let c = task / chunks_per_slice;
        let dst = &mut data[c * slice_len..(c + 1) * slice_len];
        for (d, p) in dst.iter_mut().zip(part) {
            *d += p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterWindow {
    #[default]
    RamLak,
    Hann,
}

/// Discrete Ram-Lak kernel for unit detector spacing.
pub fn ram_lak_kernel(k: i64) -> f64 {
    let tau = DETECTOR_SPACING;
    if k == 0 {
        1.0 / (4.0 * tau * tau)
    } else if k % 2 == 0 {
        0.0
    } else {
        let kf = k as f64;
        -1.0 / (PI * PI * kf * kf * tau * tau)
    }
}

/// Frequency response of the zero-padded Ram-Lak convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RampFilter {
    length: usize,
    response: Vec<f64>,
    window: FilterWindow,
}

impl RampFilter {
    pub fn new(detectors: usize, window: FilterWindow) -> Result<Self> {
        if detectors < 2 {
            return Err(CoreError::InvalidGeometry("ramp filter needs >= 2 detectors"));
        }
        let length = (2 * detectors).next_power_of_two();
        let half = (length / 2) as i64;
        let fold = |i: usize| -> i64 {
            let i = i as i64;
            if i <= half {
                i
            } else {
                i - length as i64
            }
        };
        let mut buf: Vec<Complex> = (0..length)
            .map(|i| Complex::new(ram_lak_kernel(fold(i)), 0.0))
            .collect();
        fft_in_place(&mut buf, false);
        let response = buf
            .iter()
            .enumerate()
            .map(|(i, c)| match window {
                FilterWindow::RamLak => c.re,
                FilterWindow::Hann => {
                    let f = fold(i) as f64 / length as f64;
                    c.re * 0.5 * (1.0 + math::cos(2.0 * PI * f))
                }
            })
            .collect();
        Ok(Self {
            length,
            response,
            window,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn window(&self) -> FilterWindow {
        self.window
    }

    /// Filters one projection row in place.
    pub fn apply_row(&self, row: &mut [f64], scratch: &mut Vec<Complex>) {
        scratch.clear();
        scratch.extend(row.iter().map(|&v| Complex::new(v, 0.0)));
        scratch.resize(self.length, Complex::default());
        fft_in_place(scratch, false);
        for (c, &h) in scratch.iter_mut().zip(&self.response) {
            c.re *= h;
            c.im *= h;
        }
        fft_in_place(scratch, true);
        for (r, c) in row.iter_mut().zip(scratch.iter()) {
            *r = c.re;
        }
    }
}

/// Ram-Lak filtering of every projection row.
pub fn ramp_filter(sino: &Sinogram) -> Result<Sinogram> {
    ramp_filter_windowed(sino, FilterWindow::RamLak)
}

pub fn ramp_filter_windowed(sino: &Sinogram, window: FilterWindow) -> Result<Sinogram> {
    let filter = RampFilter::new(sino.detectors(), window)?;
    let mut out = sino.clone();
    let n = sino.detectors();
    par::for_each_chunk_mut(out.data_mut(), n, |_, row| {
        let mut scratch = Vec::with_capacity(filter.length());
        filter.apply_row(row, &mut scratch);
    });
    Ok(out)
}

/// Filtered back projection, clamped to nonnegative attenuation.
pub fn fbp(sino: &Sinogram, geom: &ProjectionGeometry) -> Result<VolumeGrid> {
    fbp_windowed(sino, geom, FilterWindow::RamLak)
}

pub fn fbp_windowed(sino: &Sinogram, geom: &ProjectionGeometry, window: FilterWindow) -> Result<VolumeGrid> {
    geom.check_sinogram(sino)?;
    let filtered = ramp_filter_windowed(sino, window)?;
    let mut out = radon_adjoint(&filtered, geom)?;
    let scale = PI / geom.views() as f64;
    for v in out.data_mut() {
        *v = (*v * scale).max(0.0);
    }
    Ok(out)
}
