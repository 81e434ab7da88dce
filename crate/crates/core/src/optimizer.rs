//! Per-measurement fitting of a Gaussian cloud.
//!
//! Each iteration rasterizes the cloud, projects the volume, evaluates the
//! composite loss, pulls the sinogram cotangent back through the projector
//! transpose, pulls the volume cotangent back through the rasterizer, and
//! takes one Adam step on every cloud parameter.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{CoreError, Result};
use crate::gaussian::{self, CloudGradient, GaussianCloud};
use crate::grid::{ProjectionGeometry, Sinogram, VolumeGrid};
use crate::math;
use crate::objective::{composite_loss, LossWeights, SsimConfig};
use crate::projector::{fbp_windowed, radon_adjoint, radon_forward, FilterWindow, RayTable};

/// Largest ray table, in bytes, the fitting loop builds; larger geometries
/// walk the rays on every pass instead.
pub const RAY_TABLE_BUDGET: usize = 1 << 30;

/// Upper bound on the cloud size.
pub const MAX_GAUSSIANS: usize = 150_000;

/// One Gaussian per four voxels, capped at [`MAX_GAUSSIANS`].
pub fn default_gaussian_count(dims: [usize; 3]) -> usize {
    let voxels = dims[0] * dims[1] * dims[2];
    voxels.div_ceil(4).clamp(1, MAX_GAUSSIANS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    /// `None` picks [`default_gaussian_count`].
    pub gaussian_count: Option<usize>,
    pub lr: f64,
    pub max_iters: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Stop once the loss improved by less than `convergence_tol` (relative)
    /// over the last `convergence_window` iterations.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub eval_every: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            gaussian_count: None,
            lr: 3e-4,
            max_iters: 2000,
            weights: LossWeights::default(),
            seed: 0,
            convergence_window: 100,
            convergence_tol: 1e-5,
            eval_every: 100,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gaussian_count == Some(0) {
            return Err(CoreError::InvalidConfig("gaussian count must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(CoreError::InvalidConfig("learning rate must be positive"));
        }
        if self.max_iters == 0 {
            return Err(CoreError::InvalidConfig("max_iters must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(CoreError::InvalidConfig("eval_every must be >= 1"));
        }
        self.weights.validate()
    }
}

/// Adam moments for every cloud parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first: [Vec<f64>; 4],
    pub second: [Vec<f64>; 4],
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let zeros = |len: usize| vec![0.0; len];
        let lens = [
            cloud.means().len(),
            cloud.log_scales().len(),
            cloud.rotations().len(),
            cloud.intensities().len(),
        ];
        Self {
            first: lens.map(zeros),
            second: lens.map(zeros),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every cloud parameter.
pub fn adam_step(state: &mut OptimState, cloud: &mut GaussianCloud, grads: &CloudGradient, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(CoreError::NonFiniteGradient { iteration: state.step });
    }
    let groups = grads.groups();
    let params = cloud.params_mut();
    for (k, p) in params.into_iter().enumerate() {
        if p.len() != groups[k].len() || state.first[k].len() != p.len() {
            return Err(CoreError::ShapeMismatch {
                context: "adam_step",
                expected: [p.len(), 0, 0],
                found: [groups[k].len(), state.first[k].len(), 0],
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - math::pow(b1, t);
    let bc2 = 1.0 - math::pow(b2, t);
    for (k, p) in cloud.params_mut().into_iter().enumerate() {
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for i in 0..p.len() {
            let g = groups[k][i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
    }
    cloud.normalize_rotations();
    Ok(())
}

/// Seeds a cloud from the FBP reconstruction of `measured`.
///
/// Means sit on a jittered lattice covering the grid, scales are half the
/// lattice pitch, rotations are identity, and intensities are FBP samples at
/// the means rescaled so the rasterized cloud has the FBP volume's mass.
pub fn init_cloud(measured: &Sinogram, geom: &ProjectionGeometry, cfg: &ReconConfig) -> Result<GaussianCloud> {
    init_cloud_windowed(measured, geom, cfg, FilterWindow::RamLak)
}

/// [`init_cloud`] with the FBP ramp filter apodized by `window`.
pub fn init_cloud_windowed(
    measured: &Sinogram,
    geom: &ProjectionGeometry,
    cfg: &ReconConfig,
    window: FilterWindow,
) -> Result<GaussianCloud> {
    cfg.validate()?;
    geom.check_sinogram(measured)?;
    let reference = fbp_windowed(measured, geom, window)?;
    let dims = reference.dims();
    let dim = if dims[0] == 1 { 2 } else { 3 };
    let extents = gaussian::axis_extents(dim, dims)?;
    let extents = &extents[..dim];
    let n = cfg.gaussian_count.unwrap_or_else(|| default_gaussian_count(dims));

    let voxels: f64 = extents.iter().map(|&e| e as f64).product();
    let ratio = math::pow(n as f64 / voxels, 1.0 / dim as f64);
    let mut counts: Vec<usize> = extents
        .iter()
        .map(|&e| (math::ceil(e as f64 * ratio) as usize).max(1))
        .collect();
    while counts.iter().product::<usize>() < n {
        let a = (0..dim).min_by_key(|&a| counts[a]).unwrap_or(0);
        counts[a] += 1;
    }
    let cells: usize = counts.iter().product();
    let pitch: Vec<f64> = extents.iter().zip(&counts).map(|(&e, &c)| e as f64 / c as f64).collect();
    let mean_pitch = pitch.iter().sum::<f64>() / dim as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(n * dim);
    let mut intensities = Vec::with_capacity(n);
    for i in 0..n {
        let mut cell = (i as u128 * cells as u128 / n as u128) as usize;
        let mut idx = [0usize; 3];
        for a in (0..dim).rev() {
            idx[a] = cell % counts[a];
            cell /= counts[a];
        }
        let start = means.len();
        for a in 0..dim {
            let jitter: f64 = rng.random_range(-0.5..0.5);
            let m = (idx[a] as f64 + 0.5 + jitter) * pitch[a];
            means.push(m.clamp(0.0, extents[a] as f64 - 1e-9));
        }
        intensities.push(reference.sample_clamped(&means[start..]).max(0.0));
    }

    let mut cloud = GaussianCloud::isotropic(dim, means, 0.5 * mean_pitch, intensities)?;
    let raster_mass = gaussian::rasterize(&cloud, dims)?.sum();
    let target_mass = reference.sum();
    if raster_mass > 0.0 {
        let scale = target_mass / raster_mass;
        cloud.intensities_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(cloud)
}

/// Loss terms recorded at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
}

/// Passed to the progress hook after each loss evaluation.
#[derive(Debug)]
pub struct Progress<'a> {
    pub point: TracePoint,
    pub volume: &'a VolumeGrid,
    pub is_snapshot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIters,
    Interrupted,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// Lowest-loss volume seen, clamped to `>= 0`.
    pub volume: VolumeGrid,
    pub best_iteration: usize,
    pub cloud: GaussianCloud,
    pub trace: Vec<TracePoint>,
    pub snapshots: Vec<TracePoint>,
    pub stop: StopReason,
}

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Invalid(#[from] CoreError),
    /// The loss or a gradient became non-finite; `partial` holds the
    /// best-so-far result, if any iteration completed.
    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Option<Box<ReconOutput>>,
    },
}

/// Full reconstruction: FBP-seeded cloud, then the fitting loop.
pub fn reconstruct(
    measured: &Sinogram,
    geom: &ProjectionGeometry,
    cfg: &ReconConfig,
    hook: &mut dyn FnMut(&Progress<'_>) -> ControlFlow<()>,
) -> core::result::Result<ReconOutput, ReconError> {
    let cloud = init_cloud(measured, geom, cfg)?;
    reconstruct_from(measured, geom, cfg, cloud, hook)
}

/// The fitting loop from a given starting cloud.
pub fn reconstruct_from(
    measured: &Sinogram,
    geom: &ProjectionGeometry,
    cfg: &ReconConfig,
    mut cloud: GaussianCloud,
    hook: &mut dyn FnMut(&Progress<'_>) -> ControlFlow<()>,
) -> core::result::Result<ReconOutput, ReconError> {
    cfg.validate()?;
    geom.check_sinogram(measured)?;
    let [h, w] = geom.slice_dims();
    let dims = [measured.slices(), h, w];
    gaussian::axis_extents(cloud.dim(), dims)?;

    let (lo, hi) = measured.min_max();
    // A flat sinogram has no usable range; fall back to unit range.
    let range = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let ssim_cfg = SsimConfig::new(range);

    let table = (RayTable::size_bound(geom) <= RAY_TABLE_BUDGET).then(|| RayTable::new(geom));
    let project = |v: &VolumeGrid| match &table {
        Some(t) => t.forward(v),
        None => radon_forward(v, geom),
    };
    let back_project = |s: &Sinogram| match &table {
        Some(t) => t.adjoint(s),
        None => radon_adjoint(s, geom),
    };

    let mut state = OptimState::new(&cloud);
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut running_min: Vec<f64> = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, VolumeGrid)> = None;
    let mut stop = StopReason::MaxIters;

    let finish = |best: Option<(f64, usize, VolumeGrid)>,
                  cloud: GaussianCloud,
                  trace: Vec<TracePoint>,
                  snapshots: Vec<TracePoint>,
                  stop: StopReason|
     -> Option<ReconOutput> {
        best.map(|(_, it, mut volume)| {
            volume.clamp_nonnegative();
            ReconOutput {
                volume,
                best_iteration: it,
                cloud,
                trace,
                snapshots,
                stop,
            }
        })
    };

    for iteration in 0..cfg.max_iters {
        let spec = gaussian::neighborhood_for(&cloud, dims)?;
        let volume = gaussian::rasterize_with(&cloud, dims, &spec)?;
        let estimate = project(&volume)?;
        let loss = composite_loss(&volume, &estimate, measured, &cfg.weights, &ssim_cfg)?;
        if !loss.total.is_finite() {
            let partial = finish(best, cloud, trace, snapshots, stop).map(Box::new);
            return Err(ReconError::Diverged { iteration, partial });
        }

        let point = TracePoint {
            iteration,
            loss: loss.total,
            l1: loss.l1,
            ssim: loss.ssim,
            tv: loss.tv,
        };
        trace.push(point);
        let is_snapshot = iteration % cfg.eval_every == 0 || iteration + 1 == cfg.max_iters;
        if is_snapshot {
            snapshots.push(point);
        }
        let control = hook(&Progress {
            point,
            volume: &volume,
            is_snapshot,
        });

        let mut d_volume = back_project(&loss.d_estimate)?;
        for (d, t) in d_volume.data_mut().iter_mut().zip(loss.d_volume.data()) {
            *d += t;
        }
        if best.as_ref().is_none_or(|(l, _, _)| loss.total < *l) {
            best = Some((loss.total, iteration, volume));
        }

        if control.is_break() {
            stop = StopReason::Interrupted;
            break;
        }
        // Adam jitters the loss from step to step, so compare running minima.
        let floor = running_min.last().map_or(loss.total, |&m: &f64| m.min(loss.total));
        running_min.push(floor);
        if running_min.len() > cfg.convergence_window {
            let old = running_min[running_min.len() - 1 - cfg.convergence_window];
            let improvement = if old != 0.0 { (old - floor) / old.abs() } else { 0.0 };
            if improvement < cfg.convergence_tol {
                stop = StopReason::Converged;
                break;
            }
        }
        if loss.total == 0.0 {
            stop = StopReason::Converged;
            break;
        }

        let grads = gaussian::rasterize_vjp(&cloud, &d_volume, &spec)?;
        if let Err(CoreError::NonFiniteGradient { .. }) = adam_step(&mut state, &mut cloud, &grads, cfg.lr) {
            let partial = finish(best, cloud, trace, snapshots, stop).map(Box::new);
            return Err(ReconError::Diverged { iteration, partial });
        }
        if !cloud.is_finite() {
            let partial = finish(best, cloud, trace, snapshots, stop).map(Box::new);
            return Err(ReconError::Diverged { iteration, partial });
        }
    }

    Ok(finish(best, cloud, trace, snapshots, stop).expect("max_iters >= 1 guarantees one evaluation"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_geometry;
    use crate::projector::fbp;

    fn no_hook() -> impl FnMut(&Progress<'_>) -> ControlFlow<()> {
        |_| ControlFlow::Continue(())
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut cloud = GaussianCloud::isotropic(2, vec![1.5, 2.5], 1.0, vec![0.7]).unwrap();
        let before = cloud.clone();
        let mut state = OptimState::new(&cloud);
        let zero = CloudGradient::zeros_like(&cloud);
        adam_step(&mut state, &mut cloud, &zero, 0.1).unwrap();
        assert_eq!(cloud, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut cloud = GaussianCloud::isotropic(2, vec![1.5, 2.5], 1.0, vec![0.7]).unwrap();
        let mut grads = CloudGradient::zeros_like(&cloud);
        grads.means = vec![3.0, -0.02];
        grads.intensities = vec![1e3];
        let mut state = OptimState::new(&cloud);
        adam_step(&mut state, &mut cloud, &grads, 0.01).unwrap();
        assert!((cloud.means()[0] - (1.5 - 0.01)).abs() < 1e-9);
        assert!((cloud.means()[1] - (2.5 + 0.01)).abs() < 1e-6);
        assert!((cloud.intensities()[0] - (0.7 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_two_steps_match_scripted_reference() {
        // Scripted reference for g1 = g2 = 1, lr = 0.1, starting at p = 0.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let mut p = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }

        let mut cloud = GaussianCloud::isotropic(2, vec![0.0, 0.0], 1.0, vec![0.0]).unwrap();
        let mut grads = CloudGradient::zeros_like(&cloud);
        grads.intensities = vec![1.0];
        let mut state = OptimState::new(&cloud);
        adam_step(&mut state, &mut cloud, &grads, lr).unwrap();
        adam_step(&mut state, &mut cloud, &grads, lr).unwrap();
        assert!((cloud.intensities()[0] - p).abs() <= 1e-12);
        assert!((p + 0.2).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut cloud = GaussianCloud::isotropic(2, vec![0.0, 0.0], 1.0, vec![0.0]).unwrap();
        let mut grads = CloudGradient::zeros_like(&cloud);
        grads.log_scales[1] = f64::NAN;
        let mut state = OptimState::new(&cloud);
        state.step = 41;
        let err = adam_step(&mut state, &mut cloud, &grads, 0.1).unwrap_err();
        assert_eq!(err, CoreError::NonFiniteGradient { iteration: 41 });
    }

    #[test]
    fn adam_keeps_quaternions_unit() {
        let mut cloud = GaussianCloud::isotropic(3, vec![1.0, 1.0, 1.0], 1.0, vec![1.0]).unwrap();
        let mut grads = CloudGradient::zeros_like(&cloud);
        grads.rotations = vec![0.5, -2.0, 1.0, 0.3];
        let mut state = OptimState::new(&cloud);
        for _ in 0..5 {
            adam_step(&mut state, &mut cloud, &grads, 0.2).unwrap();
        }
        let norm: f64 = cloud.rotations().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_cloud_contract() {
        let geom = make_geometry(12, [32, 32]).unwrap();
        let grid = VolumeGrid::from_fn_2d(32, 32, |r, c| if (8..24).contains(&r) && (10..20).contains(&c) { 1.0 } else { 0.0 })
            .unwrap();
        let sino = radon_forward(&grid, &geom).unwrap();
        let cfg = ReconConfig {
            gaussian_count: Some(100),
            seed: 17,
            ..ReconConfig::default()
        };
        let a = init_cloud(&sino, &geom, &cfg).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.means().iter().all(|&m| (0.0..32.0).contains(&m)));
        let b = init_cloud(&sino, &geom, &cfg).unwrap();
        assert_eq!(a, b);

        let fbp_mass = fbp(&sino, &geom).unwrap().sum();
        let mass = gaussian::rasterize(&a, [1, 32, 32]).unwrap().sum();
        assert!((mass - fbp_mass).abs() <= 0.05 * fbp_mass);

        let zero = geom.empty_sinogram(1);
        let z = init_cloud(&zero, &geom, &cfg).unwrap();
        assert!(z.intensities().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_count_rule() {
        assert_eq!(default_gaussian_count([1, 128, 128]), 4096);
        assert_eq!(default_gaussian_count([1, 3, 3]), 3);
        assert_eq!(default_gaussian_count([64, 512, 512]), MAX_GAUSSIANS);
    }

    #[test]
    fn self_consistent_start_has_only_tv_loss() {
        let geom = make_geometry(10, [16, 16]).unwrap();
        let cloud = GaussianCloud::isotropic(2, vec![5.2, 6.1, 9.7, 10.4, 7.5, 3.3], 1.1, vec![1.0, 0.6, 0.8]).unwrap();
        let v0 = gaussian::rasterize(&cloud, [1, 16, 16]).unwrap();
        let sino = radon_forward(&v0, &geom).unwrap();
        let cfg = ReconConfig {
            max_iters: 1,
            ..ReconConfig::default()
        };
        let out = reconstruct_from(&sino, &geom, &cfg, cloud, &mut no_hook()).unwrap();
        let expected = cfg.weights.tv * crate::objective::tv(&v0).0;
        assert!((out.trace[0].loss - expected).abs() < 1e-12);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn hook_can_interrupt() {
        let geom = make_geometry(6, [12, 12]).unwrap();
        let truth = GaussianCloud::isotropic(2, vec![6.0, 6.0], 2.0, vec![1.0]).unwrap();
        let sino = radon_forward(&gaussian::rasterize(&truth, [1, 12, 12]).unwrap(), &geom).unwrap();
        let cfg = ReconConfig {
            gaussian_count: Some(16),
            max_iters: 50,
            ..ReconConfig::default()
        };
        let mut calls = 0;
        let mut hook = |p: &Progress<'_>| {
            calls += 1;
            if p.point.iteration == 4 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let out = reconstruct(&sino, &geom, &cfg, &mut hook).unwrap();
        assert_eq!(out.stop, StopReason::Interrupted);
        assert_eq!(out.trace.len(), 5);
        assert_eq!(calls, 5);
        assert!(out.volume.data().iter().all(|&v| v >= 0.0));
    }
}
