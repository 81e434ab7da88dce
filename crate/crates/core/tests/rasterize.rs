mod common;

use common::{interior_cloud_2d, interior_cloud_3d, rng};
use gift_core::gaussian::reference::{rasterize_dense_masked, rasterize_dense_oracle};
use gift_core::gaussian::{
    mahalanobis_decomposed, neighborhood_for, precision_from_params, rasterize, rasterize_with, AnchorTerms,
    NeighborhoodSpec,
};
use gift_core::GaussianCloud;
use proptest::prelude::*;
use rand::Rng;

fn rel_l1(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    let den: f64 = b.iter().map(|y| y.abs()).sum();
    num / den
}

#[test]
fn confined_matches_masked_oracle_and_dense_2d() {
    let mut r = rng(1);
    for _ in 0..20 {
        let sigma = r.random_range(0.5..3.0);
        let n = r.random_range(1..12);
        let cloud = interior_cloud_2d(&mut r, n, 32, sigma, 10.0, 0.0);
        let dims = [1, 32, 32];
        let spec = neighborhood_for(&cloud, dims).unwrap();
        let fast = rasterize_with(&cloud, dims, &spec).unwrap();
        let masked = rasterize_dense_masked(&cloud, dims, &spec).unwrap();
        assert_eq!(fast.data(), masked.data());
        let dense = rasterize_dense_oracle(&cloud, dims).unwrap();
        let gap = rel_l1(fast.data(), dense.data());
        assert!(gap <= 0.01, "sigma {sigma}: gap {gap}");
    }
}

#[test]
fn confined_matches_masked_oracle_and_dense_3d() {
    let mut r = rng(2);
    for _ in 0..5 {
        let sigma = r.random_range(0.5..1.5);
        let n = r.random_range(1..6);
        let dims = [14, 14, 14];
        let cloud = interior_cloud_3d(&mut r, n, dims, sigma, 5.0, 0.0);
        let spec = neighborhood_for(&cloud, dims).unwrap();
        let fast = rasterize_with(&cloud, dims, &spec).unwrap();
        let masked = rasterize_dense_masked(&cloud, dims, &spec).unwrap();
        assert_eq!(fast.data(), masked.data());
        let dense = rasterize_dense_oracle(&cloud, dims).unwrap();
        let gap = rel_l1(fast.data(), dense.data());
        assert!(gap <= 0.016, "sigma {sigma}: gap {gap}");
    }
}

#[test]
fn many_gaussians_cross_chunk_boundaries() {
    // Enough Gaussians for several summation chunks.
    let mut r = rng(3);
    let cloud = interior_cloud_2d(&mut r, 700, 40, 0.8, 3.0, 0.0);
    let dims = [1, 40, 40];
    let spec = neighborhood_for(&cloud, dims).unwrap();
    let fast = rasterize_with(&cloud, dims, &spec).unwrap();
    let masked = rasterize_dense_masked(&cloud, dims, &spec).unwrap();
    assert_eq!(fast.data(), masked.data());
}

#[test]
fn decomposed_distance_equals_direct_quadratic_form() {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let dim = if trial % 2 == 0 { 2 } else { 3 };
        let log_scales: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.5)).collect();
        let rotation: Vec<f64> = if dim == 2 {
            vec![r.random_range(-3.2..3.2)]
        } else {
            (0..4).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let frame = precision_from_params(&log_scales, &rotation);
        let p = frame.precision;
        let mean: Vec<f64> = (0..dim).map(|_| r.random_range(0.0..30.0)).collect();
        let mut frac = [0.0; 3];
        for a in 0..dim {
            frac[a] = mean[a] - mean[a].floor();
        }
        let anchor = AnchorTerms::new(&p, &frac, dim);
        for _ in 0..5 {
            let mut off = [0.0; 3];
            for a in 0..dim {
                off[a] = r.random_range(-6i64..=6) as f64;
            }
            // Direct form on the voxel-minus-mean displacement.
            let mut d = [0.0; 3];
            for a in 0..dim {
                d[a] = (mean[a].floor() + off[a]) - mean[a];
            }
            let mut direct = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    direct += d[i] * p[i][j] * d[j];
                }
            }
            let got = mahalanobis_decomposed(&p, &anchor, off, dim);
            worst = worst.max((got - direct).abs());
        }
    }
    assert!(worst <= 1e-10, "max abs diff {worst}");
}

#[test]
fn integer_translation_shifts_output_exactly() {
    let mut r = rng(5);
    let cloud = interior_cloud_2d(&mut r, 6, 24, 1.0, 6.0, 0.0);
    // Dyadic means keep `mu - floor(mu)` exact under integer shifts.
    let dyadic: Vec<f64> = cloud.means().iter().map(|m| (m * 64.0).round() / 64.0).collect();
    let cloud = GaussianCloud::new(
        2,
        dyadic,
        cloud.log_scales().to_vec(),
        cloud.rotations().to_vec(),
        cloud.intensities().to_vec(),
    )
    .unwrap();
    let dims = [1, 40, 40];
    let spec = neighborhood_for(&cloud, dims).unwrap();
    let base = rasterize_with(&cloud, dims, &spec).unwrap();
    let (dr, dc) = (7usize, 11usize);
    let mut means = cloud.means().to_vec();
    for m in means.chunks_mut(2) {
        m[0] += dr as f64;
        m[1] += dc as f64;
    }
    let shifted_cloud = GaussianCloud::new(
        2,
        means,
        cloud.log_scales().to_vec(),
        cloud.rotations().to_vec(),
        cloud.intensities().to_vec(),
    )
    .unwrap();
    let shifted = rasterize_with(&shifted_cloud, dims, &spec).unwrap();
    for h in 0..40 - dr {
        for w in 0..40 - dc {
            assert_eq!(base.get(0, h, w), shifted.get(0, h + dr, w + dc));
        }
    }
}

#[test]
fn captured_mass_near_three_sigma_bound() {
    // Isotropic, unit intensity: the dense lattice sum approximates 2 pi s^2.
    for &sigma in &[0.6, 1.0, 2.0, 2.9] {
        let cloud = GaussianCloud::isotropic(2, vec![31.3, 32.6], sigma, vec![1.0]).unwrap();
        let dims = [1, 64, 64];
        let conf = rasterize(&cloud, dims).unwrap().sum();
        let dense = rasterize_dense_oracle(&cloud, dims).unwrap().sum();
        assert!((dense - conf) / dense <= 0.01, "2d sigma {sigma}");
    }
    for &sigma in &[0.6, 1.2] {
        let cloud = GaussianCloud::isotropic(3, vec![8.4, 9.1, 7.7], sigma, vec![1.0]).unwrap();
        let dims = [18, 18, 18];
        let conf = rasterize(&cloud, dims).unwrap().sum();
        let dense = rasterize_dense_oracle(&cloud, dims).unwrap().sum();
        assert!((dense - conf) / dense <= 0.016, "3d sigma {sigma}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn offsets_cover_box_and_cancel(rh in 1usize..6, rw in 1usize..6, rc in 1usize..4) {
        let spec2 = NeighborhoodSpec::from_radii(&[rh, rw]);
        prop_assert_eq!(spec2.len(), (2 * rh + 1) * (2 * rw + 1));
        let spec3 = NeighborhoodSpec::from_radii(&[rc, rh, rw]);
        prop_assert_eq!(spec3.len(), (2 * rc + 1) * (2 * rh + 1) * (2 * rw + 1));
        for spec in [&spec2, &spec3] {
            let mut sum = [0i64; 3];
            for o in spec.offsets() {
                for a in 0..3 {
                    sum[a] += o[a];
                }
                for (a, &rad) in spec.radii().iter().enumerate() {
                    prop_assert!(o[a].unsigned_abs() as usize <= rad);
                }
            }
            prop_assert_eq!(sum, [0, 0, 0]);
        }
    }

    #[test]
    fn precision_is_symmetric_positive_definite(
        s0 in -2.0f64..2.0, s1 in -2.0f64..2.0, s2 in -2.0f64..2.0,
        q in proptest::array::uniform4(-1.0f64..1.0),
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let f = precision_from_params(&[s0, s1, s2], &q);
        let p = f.precision;
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((p[i][j] - p[j][i]).abs() <= 1e-12 * (1.0 + p[i][j].abs()));
            }
        }
        let m1 = p[0][0];
        let m2 = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        let det = p[0][0] * (p[1][1] * p[2][2] - p[1][2] * p[2][1])
            - p[0][1] * (p[1][0] * p[2][2] - p[1][2] * p[2][0])
            + p[0][2] * (p[1][0] * p[2][1] - p[1][1] * p[2][0]);
        prop_assert!(m1 > 0.0 && m2 > 0.0 && det > 0.0);
    }

    #[test]
    fn rasterize_is_linear_in_intensities(seed in 0u64..1000, a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let cloud = interior_cloud_2d(&mut r, 5, 20, 1.0, 3.0, 0.0);
        let dims = [1, 20, 20];
        let spec = neighborhood_for(&cloud, dims).unwrap();
        let base = rasterize_with(&cloud, dims, &spec).unwrap();
        let mut scaled = cloud.clone();
        scaled.intensities_mut().iter_mut().for_each(|v| *v *= a);
        let out = rasterize_with(&scaled, dims, &spec).unwrap();
        for (x, y) in base.data().iter().zip(out.data()) {
            prop_assert!((x * a - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn nonnegative_intensities_rasterize_nonnegative(seed in 0u64..1000) {
        let mut r = rng(seed);
        let cloud = interior_cloud_2d(&mut r, 8, 16, 1.5, 0.0, 0.0);
        let v = rasterize(&cloud, [1, 16, 16]).unwrap();
        prop_assert!(v.data().iter().all(|&x| x >= 0.0));
    }
}
