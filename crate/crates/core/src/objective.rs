//! Measurement-domain L1 + SSIM, volume-domain TV, and evaluation metrics.
//!
//! Every loss returns its value together with the cotangent of its first
//! argument so the optimizer can chain through the projector transpose and
//! the rasterizer VJP. Losses are means rather than sums, which keeps the
//! weights independent of resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::grid::{Sinogram, VolumeGrid};
use crate::math;

/// Relative weights of the L1, SSIM and TV terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.4,
            ssim: 0.1,
            tv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.l1) && ok(self.ssim) && ok(self.tv) {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig("loss weights must be finite and >= 0"))
        }
    }
}

/// Gaussian-window SSIM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimConfig {
    pub fn new(data_range: f64) -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }

    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.data_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.data_range;
        v * v
    }

    /// Normalized 1D window; the 2D window is its outer product.
    pub fn window(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let mut w: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let x = i as f64 - r;
                math::exp(-x * x / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

fn shape_err(context: &'static str, a: [usize; 3], b: [usize; 3]) -> CoreError {
    CoreError::ShapeMismatch {
        context,
        expected: b,
        found: a,
    }
}

/// Mean absolute difference and its gradient w.r.t. `estimate`.
pub fn l1_loss(estimate: &Sinogram, measured: &Sinogram) -> Result<(f64, Sinogram)> {
    if estimate.shape() != measured.shape() {
        return Err(shape_err("l1_loss", estimate.shape(), measured.shape()));
    }
    let count = estimate.len() as f64;
    let mut grad = estimate.clone();
    let mut total = 0.0;
    for (g, (&a, &b)) in grad.data_mut().iter_mut().zip(estimate.data().iter().zip(measured.data())) {
        let d = a - b;
        total += d.abs();
        *g = sign(d) / count;
    }
    Ok((total / count, grad))
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable blur with reflection padding, or its transpose.
struct Blur<'a> {
    window: &'a [f64],
    height: usize,
    width: usize,
}

impl Blur<'_> {
    fn radius(&self) -> i64 {
        (self.window.len() / 2) as i64
    }

    fn apply(&self, img: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.height, self.width, self.radius());
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            let row = &img[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &g) in self.window.iter().enumerate() {
                    acc += g * row[reflect(x as i64 + k as i64 - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for (k, &g) in self.window.iter().enumerate() {
                let src = reflect(y as i64 + k as i64 - r, h);
                let (dst, s) = (&mut out[y * w..(y + 1) * w], &tmp[src * w..(src + 1) * w]);
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += g * v;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, img: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.height, self.width, self.radius());
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for (k, &g) in self.window.iter().enumerate() {
                let dst = reflect(y as i64 + k as i64 - r, h);
                for x in 0..w {
                    tmp[dst * w + x] += g * img[y * w + x];
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (k, &g) in self.window.iter().enumerate() {
                    out[y * w + reflect(x as i64 + k as i64 - r, w)] += g * v;
                }
            }
        }
        out
    }
}

/// Partial derivatives of one SSIM value w.r.t. its local statistics.
#[inline]
fn ssim_terms(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
    let num1 = 2.0 * mu_a * mu_b + c1;
    let num2 = 2.0 * cov + c2;
    let den1 = mu_a * mu_a + mu_b * mu_b + c1;
    let den2 = var_a + var_b + c2;
    let s = num1 * num2 / (den1 * den2);
    let d_mu = 2.0 * mu_b * num2 / (den1 * den2) - s * 2.0 * mu_a / den1;
    let d_var = -s / den2;
    let d_cov = 2.0 * num1 / (den1 * den2);
    (s, d_mu, d_var, d_cov)
}

/// Mean SSIM of two `height x width` images and its gradient w.r.t. `a`.
/// Images smaller than the window in either axis use global statistics.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    if !cfg.data_range.is_finite() || cfg.data_range <= 0.0 {
        return Err(CoreError::NonPositiveRange(cfg.data_range));
    }
    let n = height * width;
    if a.len() != n || b.len() != n {
        return Err(shape_err("ssim", [a.len(), 0, 0], [n, b.len(), 0]));
    }
    let (c1, c2) = (cfg.c1(), cfg.c2());
    if height < cfg.window_size || width < cfg.window_size {
        return Ok(ssim_global(a, b, c1, c2));
    }

    let window = cfg.window();
    let blur = Blur {
        window: &window,
        height,
        width,
    };
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur.apply(a);
    let mu_b = blur.apply(b);
    let e_aa = blur.apply(&sq(a, a));
    let e_bb = blur.apply(&sq(b, b));
    let e_ab = blur.apply(&sq(a, b));

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    // Cotangents of the blurred statistics.
    let mut g_mu = vec![0.0; n];
    let mut g_aa = vec![0.0; n];
    let mut g_ab = vec![0.0; n];
    for p in 0..n {
        let var_a = e_aa[p] - mu_a[p] * mu_a[p];
        let var_b = e_bb[p] - mu_b[p] * mu_b[p];
        let cov = e_ab[p] - mu_a[p] * mu_b[p];
        let (s, d_mu, d_var, d_cov) = ssim_terms(mu_a[p], mu_b[p], var_a, var_b, cov, c1, c2);
        total += s;
        // var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b.
        g_mu[p] = (d_mu - 2.0 * mu_a[p] * d_var - mu_b[p] * d_cov) * inv_n;
        g_aa[p] = d_var * inv_n;
        g_ab[p] = d_cov * inv_n;
    }
    let t_mu = blur.apply_transpose(&g_mu);
    let t_aa = blur.apply_transpose(&g_aa);
    let t_ab = blur.apply_transpose(&g_ab);
    let grad = (0..n).map(|p| t_mu[p] + 2.0 * a[p] * t_aa[p] + b[p] * t_ab[p]).collect();
    Ok((total * inv_n, grad))
}

fn ssim_global(a: &[f64], b: &[f64], c1: f64, c2: f64) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
    let var_b = b.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(p, q)| (p - mu_a) * (q - mu_b)).sum::<f64>() / n;
    let (s, d_mu, d_var, d_cov) = ssim_terms(mu_a, mu_b, var_a, var_b, cov, c1, c2);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&p, &q)| (d_mu + d_var * 2.0 * (p - mu_a) + d_cov * (q - mu_b)) / n)
        .collect();
    (s, grad)
}

/// SSIM averaged over the per-slice `(views x detectors)` images.
pub fn ssim_sinogram(a: &Sinogram, b: &Sinogram, cfg: &SsimConfig) -> Result<(f64, Sinogram)> {
    if a.shape() != b.shape() {
        return Err(shape_err("ssim_sinogram", a.shape(), b.shape()));
    }
    let slices = a.slices();
    let mut grad = Vec::with_capacity(a.len());
    let mut total = 0.0;
    for c in 0..slices {
        let (s, g) = ssim(a.slice(c), b.slice(c), a.views(), a.detectors(), cfg)?;
        total += s;
        grad.extend(g.into_iter().map(|v| v / slices as f64));
    }
    let grad = Sinogram::from_vec(slices, a.views(), a.detectors(), grad)?;
    Ok((total / slices as f64, grad))
}

/// SSIM averaged over volume slices.
pub fn ssim_volume(a: &VolumeGrid, b: &VolumeGrid, cfg: &SsimConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err("ssim_volume", a.dims(), b.dims()));
    }
    let [c, h, w] = a.dims();
    let mut total = 0.0;
    for s in 0..c {
        total += ssim(a.slice(s), b.slice(s), h, w, cfg)?.0;
    }
    Ok(total / c as f64)
}

/// Anisotropic TV: for each axis with at least two samples, the mean of the
/// absolute forward differences; summed over axes. Slices count as an axis.
pub fn tv(volume: &VolumeGrid) -> (f64, VolumeGrid) {
    let dims = volume.dims();
    let data = volume.data();
    let mut grad = vec![0.0; data.len()];
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut total = 0.0;
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let mut count_dims = dims;
        count_dims[axis] -= 1;
        let count = (count_dims[0] * count_dims[1] * count_dims[2]) as f64;
        let stride = strides[axis];
        let mut acc = 0.0;
        for c in 0..count_dims[0] {
            for h in 0..count_dims[1] {
                for w in 0..count_dims[2] {
                    let p = c * strides[0] + h * strides[1] + w;
                    let d = data[p + stride] - data[p];
                    acc += d.abs();
                    let s = sign(d) / count;
                    grad[p + stride] += s;
                    grad[p] -= s;
                }
            }
        }
        total += acc / count;
    }
    (total, VolumeGrid::from_vec(dims, grad).expect("dims come from a valid grid"))
}

/// Value and parts of the composite objective.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub d_volume: VolumeGrid,
    pub d_estimate: Sinogram,
}

/// `w.l1 * L1(est, meas) + w.ssim * (1 - SSIM(est, meas)) + w.tv * TV(volume)`.
pub fn composite_loss(
    volume: &VolumeGrid,
    estimate: &Sinogram,
    measured: &Sinogram,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
) -> Result<CompositeLoss> {
    weights.validate()?;
    let (l1, g_l1) = l1_loss(estimate, measured)?;
    let (s, g_s) = ssim_sinogram(estimate, measured, ssim_cfg)?;
    let (t, mut g_tv) = tv(volume);

    let mut d_estimate = g_l1;
    for (d, gs) in d_estimate.data_mut().iter_mut().zip(g_s.data()) {
        *d = weights.l1 * *d - weights.ssim * gs;
    }
    g_tv.data_mut().iter_mut().for_each(|v| *v *= weights.tv);

    Ok(CompositeLoss {
        total: weights.l1 * l1 + weights.ssim * (1.0 - s) + weights.tv * t,
        l1,
        ssim: s,
        tv: t,
        d_volume: g_tv,
        d_estimate,
    })
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(shape_err("psnr", [x.len(), 0, 0], [reference.len(), 0, 0]));
    }
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(CoreError::NonPositiveRange(data_range));
    }
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(data_range * data_range / mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn l1_examples() {
        let a = Sinogram::from_vec(1, 2, 3, vec![0.5, 1.0, 2.0, 0.0, -1.0, 3.0]).unwrap();
        let (v, g) = l1_loss(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));

        let b = Sinogram::from_vec(1, 2, 3, a.data().iter().map(|v| v - 0.5).collect()).unwrap();
        let (v, g) = l1_loss(&a, &b).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(g.data().iter().all(|&x| x == 1.0 / 6.0));
    }

    #[test]
    fn l1_gradient_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Sinogram::from_vec(1, 8, 8, rand_vec(&mut rng, 64)).unwrap();
        let b = Sinogram::from_vec(1, 8, 8, rand_vec(&mut rng, 64)).unwrap();
        let (_, g) = l1_loss(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..64 {
            if (a.data()[i] - b.data()[i]).abs() < 10.0 * h {
                continue;
            }
            let mut p = a.clone();
            p.data_mut()[i] += h;
            let mut m = a.clone();
            m.data_mut()[i] -= h;
            let fd = (l1_loss(&p, &b).unwrap().0 - l1_loss(&m, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-4 * g.data()[i].abs());
        }
    }

    #[test]
    fn ssim_identity_and_constant_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 20 * 24);
        let cfg = SsimConfig::new(1.0);
        let (s, _) = ssim(&x, &x, 20, 24, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        let zeros = vec![0.0; 16 * 16];
        let ones = vec![1.0; 16 * 16];
        let (s, _) = ssim(&zeros, &ones, 16, 16, &cfg).unwrap();
        let c1 = cfg.c1();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!((s - 9.999e-5).abs() < 1e-7);

        assert!(ssim(&zeros, &ones, 16, 16, &SsimConfig::new(0.0)).is_err());
    }

    /// Direct per-pixel windowed statistics with explicit 2D weights.
    fn ssim_brute(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
        let win = cfg.window();
        let r = (win.len() / 2) as i64;
        let mut total = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wt = win[(dy + r) as usize] * win[(dx + r) as usize];
                        let i = reflect(y + dy, h) * w + reflect(x + dx, w);
                        ma += wt * a[i];
                        mb += wt * b[i];
                        aa += wt * a[i] * a[i];
                        bb += wt * b[i] * b[i];
                        ab += wt * a[i] * b[i];
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + cfg.c1()) * (2.0 * cov + cfg.c2()))
                    / ((ma * ma + mb * mb + cfg.c1()) * (va + vb + cfg.c2()));
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn ssim_matches_brute_force_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (32, 32);
        let a = rand_vec(&mut rng, h * w);
        let b = rand_vec(&mut rng, h * w);
        let cfg = SsimConfig::new(1.0);
        let (s, g) = ssim(&a, &b, h, w, &cfg).unwrap();
        assert!((s - ssim_brute(&a, &b, h, w, &cfg)).abs() <= 1e-8);

        let step = 1e-5;
        for &i in &[0usize, 1, 31, 33, 500, 777, 1023] {
            let mut p = a.clone();
            p[i] += step;
            let mut m = a.clone();
            m[i] -= step;
            let fd = (ssim(&p, &b, h, w, &cfg).unwrap().0 - ssim(&m, &b, h, w, &cfg).unwrap().0) / (2.0 * step);
            assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-8), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ssim_global_fallback_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (h, w) = (6, 9);
        let a = rand_vec(&mut rng, h * w);
        let b = rand_vec(&mut rng, h * w);
        let cfg = SsimConfig::new(1.0);
        let (_, g) = ssim(&a, &b, h, w, &cfg).unwrap();
        let step = 1e-6;
        for i in 0..h * w {
            let mut p = a.clone();
            p[i] += step;
            let mut m = a.clone();
            m[i] -= step;
            let fd = (ssim(&p, &b, h, w, &cfg).unwrap().0 - ssim(&m, &b, h, w, &cfg).unwrap().0) / (2.0 * step);
            assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-8));
        }
    }

    #[test]
    fn ssim_value_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_vec(&mut rng, 15 * 13);
        let b = rand_vec(&mut rng, 15 * 13);
        let cfg = SsimConfig::new(1.0);
        let ab = ssim(&a, &b, 15, 13, &cfg).unwrap().0;
        let ba = ssim(&b, &a, 15, 13, &cfg).unwrap().0;
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn tv_examples() {
        let v = VolumeGrid::from_vec([1, 4, 4], vec![0.3; 16]).unwrap();
        assert_eq!(tv(&v).0, 0.0);
        let v = VolumeGrid::from_vec([1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tv(&v).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_matches_double_loop_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = VolumeGrid::from_vec([1, 8, 8], rand_vec(&mut rng, 64)).unwrap();
        let (val, g) = tv(&v);
        let mut horiz = 0.0;
        let mut vert = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                if c + 1 < 8 {
                    horiz += (v.get(0, r, c + 1) - v.get(0, r, c)).abs();
                }
                if r + 1 < 8 {
                    vert += (v.get(0, r + 1, c) - v.get(0, r, c)).abs();
                }
            }
        }
        assert!((val - (horiz / 56.0 + vert / 56.0)).abs() <= 1e-10);

        let step = 1e-7;
        for i in 0..64 {
            let mut p = v.clone();
            p.data_mut()[i] += step;
            let mut m = v.clone();
            m.data_mut()[i] -= step;
            let fd = (tv(&p).0 - tv(&m).0) / (2.0 * step);
            assert!((fd - g.data()[i]).abs() <= 1e-4 * g.data()[i].abs() + 1e-8);
        }
    }

    #[test]
    fn tv_couples_slices() {
        let v = VolumeGrid::from_vec([2, 1, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(tv(&v).0, 2.0);
    }

    #[test]
    fn composite_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = Sinogram::from_vec(1, 12, 14, rand_vec(&mut rng, 168)).unwrap();
        let cfg = SsimConfig::new(1.0);
        let w = LossWeights::default();
        let flat = VolumeGrid::from_vec([1, 5, 5], vec![0.2; 25]).unwrap();
        let loss = composite_loss(&flat, &m, &m, &w, &cfg).unwrap();
        assert!(loss.total.abs() < 1e-12);

        let v = VolumeGrid::from_vec([1, 5, 5], rand_vec(&mut rng, 25)).unwrap();
        let loss = composite_loss(&v, &m, &m, &w, &cfg).unwrap();
        assert!((loss.total - w.tv * tv(&v).0).abs() < 1e-12);

        let doubled = LossWeights { tv: 2.0 * w.tv, ..w };
        let loss2 = composite_loss(&v, &m, &m, &doubled, &cfg).unwrap();
        assert!((loss2.total - 2.0 * loss.total).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let r = vec![0.2, 0.4, 0.9];
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
        let x: Vec<f64> = r.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &r, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let x: Vec<f64> = r.iter().map(|v| v + 2.5).collect();
        assert!(psnr(&x, &r, 2.5).unwrap().abs() < 1e-9);
        assert!(psnr(&x, &r[..2], 1.0).is_err());
    }
}
