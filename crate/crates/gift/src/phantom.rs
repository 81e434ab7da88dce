//! Synthetic test objects standing in for patient volumes.

use gift_core::{CoreError, VolumeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest phantom edge accepted by the generators.
pub const MIN_PHANTOM_SIZE: usize = 16;

/// One ellipse of an analytic phantom in normalized `[-1, 1]^2` coordinates
/// (`x` to the right, `y` up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle_deg: f64,
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

const fn e(cx: f64, cy: f64, a: f64, b: f64, angle_deg: f64, value: f64) -> Ellipse {
    Ellipse {
        center: (cx, cy),
        axes: (a, b),
        angle_deg,
        value,
    }
}

/// The ten-ellipse Shepp-Logan head with the higher-contrast intensities
/// commonly used for display, so values span `[0, 1]`.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    e(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    e(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    e(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    e(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    e(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    e(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    e(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    e(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    e(0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    e(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// Normalized coordinates of pixel `(row, col)` on a `size x size` grid.
pub fn pixel_coords(size: usize, row: usize, col: usize) -> (f64, f64) {
    let n = size as f64;
    ((2.0 * col as f64 + 1.0) / n - 1.0, 1.0 - (2.0 * row as f64 + 1.0) / n)
}

/// Sum of ellipse values covering `(x, y)`.
pub fn evaluate(ellipses: &[Ellipse], x: f64, y: f64) -> f64 {
    ellipses.iter().filter(|el| el.contains(x, y)).map(|el| el.value).sum()
}

fn check_size(size: usize) -> Result<(), CoreError> {
    if size < MIN_PHANTOM_SIZE {
        return Err(CoreError::InvalidGrid("phantom size must be at least 16"));
    }
    Ok(())
}

/// Subsamples per pixel axis when area-averaging a phantom.
pub const SUPERSAMPLE: usize = 4;

/// Mean of `f` over a `SUPERSAMPLE`² lattice covering pixel `(row, col)`.
pub fn pixel_average(size: usize, row: usize, col: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let n = size as f64;
    let k = SUPERSAMPLE as f64;
    let mut acc = 0.0;
    for i in 0..SUPERSAMPLE {
        for j in 0..SUPERSAMPLE {
            let x = (2.0 * (col as f64 + (j as f64 + 0.5) / k)) / n - 1.0;
            let y = 1.0 - (2.0 * (row as f64 + (i as f64 + 0.5) / k)) / n;
            acc += f(x, y);
        }
    }
    acc / (k * k)
}

pub fn shepp_logan(size: usize) -> Result<VolumeGrid, CoreError> {
    check_size(size)?;
    VolumeGrid::from_fn_2d(size, size, |r, c| {
        // Overlap sums like 1.0 - 0.8 - 0.2 can round a hair below zero.
        pixel_average(size, r, c, |x, y| evaluate(&SHEPP_LOGAN, x, y)).max(0.0)
    })
}

/// Smooth anatomy with seeded high-contrast inserts: bright specks
/// (calcification-like) and low-density patches (emphysema-like).
pub fn lesion_phantom(size: usize, seed: u64) -> Result<VolumeGrid, CoreError> {
    lesion_layers(size, seed).map(|(_, full)| full)
}

/// `(anatomy without inserts, full phantom)`.
fn lesion_layers(size: usize, seed: u64) -> Result<(VolumeGrid, VolumeGrid), CoreError> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = e(0.0, 0.0, 0.82, 0.68, 0.0, 0.3);

    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.08..0.2),
                rng.random_range(-0.06..0.08),
            )
        })
        .collect();

    let mut inserts: Vec<Ellipse> = Vec::new();
    let specks = rng.random_range(2..6);
    for _ in 0..specks {
        let r = rng.random_range(1.5..3.0) / size as f64 * 2.0;
        inserts.push(e(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.4..0.4),
            r,
            r,
            0.0,
            rng.random_range(0.4..0.7),
        ));
    }
    let patches = rng.random_range(1..4);
    for _ in 0..patches {
        inserts.push(e(
            rng.random_range(-0.45..0.45),
            rng.random_range(-0.35..0.35),
            rng.random_range(0.05..0.12),
            rng.random_range(0.04..0.1),
            rng.random_range(0.0..180.0),
            -0.25,
        ));
    }

    let anatomy = |x: f64, y: f64| {
        if !body.contains(x, y) {
            return 0.0;
        }
        let mut v = body.value;
        for &(bx, by, s, amp) in &blobs {
            let d2 = (x - bx).powi(2) + (y - by).powi(2);
            v += amp * (-d2 / (2.0 * s * s)).exp();
        }
        v
    };
    let background = VolumeGrid::from_fn_2d(size, size, |r, c| {
        let (x, y) = pixel_coords(size, r, c);
        anatomy(x, y).clamp(0.0, 1.0)
    })?;
    let full = VolumeGrid::from_fn_2d(size, size, |r, c| {
        let (x, y) = pixel_coords(size, r, c);
        let base = anatomy(x, y);
        if base == 0.0 {
            return 0.0;
        }
        (base + evaluate(&inserts, x, y)).clamp(0.0, 1.0)
    })?;
    Ok((background, full))
}
