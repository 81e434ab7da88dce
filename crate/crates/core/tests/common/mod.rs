#![allow(dead_code)]

use gift_core::GaussianCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Distance from `x` to the nearest integer.
pub fn dist_to_int(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// 2D cloud with means kept `margin` voxels from every edge, one shared
/// isotropic scale, random rotations and positive intensities. Means are
/// kept at least `min_frac_gap` away from integers so that small
/// perturbations never change their anchor voxel.
pub fn interior_cloud_2d(r: &mut ChaCha8Rng, n: usize, size: usize, sigma: f64, margin: f64, min_frac_gap: f64) -> GaussianCloud {
    let mut means = Vec::with_capacity(2 * n);
    while means.len() < 2 * n {
        let m = r.random_range(margin..size as f64 - margin);
        if dist_to_int(m) >= min_frac_gap {
            means.push(m);
        }
    }
    let ls = sigma.ln();
    let log_scales: Vec<f64> = (0..2 * n).map(|_| ls + r.random_range(-0.1..0.1)).collect();
    let rotations: Vec<f64> = (0..n).map(|_| r.random_range(0.0..std::f64::consts::PI)).collect();
    let intensities: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    GaussianCloud::new(2, means, log_scales, rotations, intensities).unwrap()
}

pub fn interior_cloud_3d(r: &mut ChaCha8Rng, n: usize, dims: [usize; 3], sigma: f64, margin: f64, min_frac_gap: f64) -> GaussianCloud {
    let mut means = Vec::with_capacity(3 * n);
    while means.len() < 3 * n {
        let axis = means.len() % 3;
        let m = r.random_range(margin..dims[axis] as f64 - margin);
        if dist_to_int(m) >= min_frac_gap {
            means.push(m);
        }
    }
    let ls = sigma.ln();
    let log_scales: Vec<f64> = (0..3 * n).map(|_| ls + r.random_range(-0.1..0.1)).collect();
    let mut rotations = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        rotations.extend_from_slice(&q);
    }
    let intensities: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    GaussianCloud::new(3, means, log_scales, rotations, intensities).unwrap()
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(floor)
}
