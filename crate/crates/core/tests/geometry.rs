use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uasmpc::geometry::{
    chi2_quantile_2dof, constraint_value, dist_to_zonotope, inv_sqrt, overlap_rect, signed_dist_to_zonotope,
    Covariance2, KeepOut, Mat2, OverlapRect, Vec2, Zonotope2,
};

fn cov_from(l1: f64, l2: f64, th: f64) -> Covariance2 {
    let (s, c) = th.sin_cos();
    let r = Mat2::new(c, -s, s, c);
    let m = r * Mat2::new(l1, 0.0, 0.0, l2) * r.transpose();
    Covariance2::new(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]).unwrap()
}

/// Point-to-segment distance by ternary search on the segment parameter.
fn segment_distance(z: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let f = |t: f64| (z - (a + (b - a) * t)).norm();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
}

/// Distance to a convex quadrilateral given by its corners in order.
fn polygon_distance(z: &Vec2, corners: &[Vec2; 4]) -> f64 {
    let cross = |a: &Vec2, b: &Vec2| a.x * b.y - a.y * b.x;
    let signs: Vec<f64> = (0..4)
        .map(|i| cross(&(corners[(i + 1) % 4] - corners[i]), &(z - corners[i])))
        .collect();
    if signs.iter().all(|s| *s >= 0.0) || signs.iter().all(|s| *s <= 0.0) {
        return 0.0;
    }
    (0..4)
        .map(|i| segment_distance(z, &corners[i], &corners[(i + 1) % 4]))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn chi_square_levels() {
    assert_relative_eq!(chi2_quantile_2dof(0.9).unwrap(), 4.605170185988091, epsilon = 1e-12);
    assert_relative_eq!(chi2_quantile_2dof(0.95).unwrap(), 5.991464547107979, epsilon = 1e-12);
    assert!(chi2_quantile_2dof(1.0).is_err());
    assert!(chi2_quantile_2dof(0.0).is_err());
}

#[test]
fn closed_form_distance_matches_polygon_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let cov = cov_from(
            rng.random_range(0.05..4.0),
            rng.random_range(0.05..4.0),
            rng.random_range(0.0..3.2),
        );
        let rect = OverlapRect::new(rng.random_range(0.5..6.0), rng.random_range(0.3..3.0)).unwrap();
        let b = Zonotope2::from_rect(&rect, &inv_sqrt(&cov).unwrap()).unwrap();
        let z = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let c = b.corners();
        let want = polygon_distance(&z, &[c[0], c[1], c[2], c[3]]);
        assert!((dist_to_zonotope(&z, &b).distance - want).abs() <= 1e-9, "z {z:?}");
    }
}

#[test]
fn keep_out_centre_is_minus_radius() {
    let beta = chi2_quantile_2dof(0.9).unwrap();
    let rect = overlap_rect([2.5, 1.0], [2.5, 1.0]).unwrap();
    let g = constraint_value(
        &Vec2::new(3.0, -1.0),
        &Vec2::new(3.0, -1.0),
        &Covariance2::identity(),
        &rect,
        beta,
    )
    .unwrap();
    assert_relative_eq!(g, -beta.sqrt(), epsilon = 1e-15);
}

#[test]
fn identity_covariance_distance() {
    // With Sigma = I the keep-out is the rectangle grown by sqrt(beta).
    let beta = chi2_quantile_2dof(0.9).unwrap();
    let rect = OverlapRect::new(5.0, 2.0).unwrap();
    let g = constraint_value(
        &Vec2::new(10.0, 0.0),
        &Vec2::zeros(),
        &Covariance2::identity(),
        &rect,
        beta,
    )
    .unwrap();
    assert_relative_eq!(g, 5.0 - beta.sqrt(), epsilon = 1e-12);
    let g = constraint_value(
        &Vec2::new(8.0, 6.0),
        &Vec2::zeros(),
        &Covariance2::identity(),
        &rect,
        beta,
    )
    .unwrap();
    assert_relative_eq!(g, 5.0 - beta.sqrt(), epsilon = 1e-12);
}

#[test]
fn zero_margin_points_keep_collision_rate_below_one_minus_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let cov = cov_from(
            rng.random_range(0.05..4.0),
            rng.random_range(0.05..4.0),
            rng.random_range(0.0..3.2),
        );
        let rect = OverlapRect::new(rng.random_range(0.5..6.0), rng.random_range(0.3..3.0)).unwrap();
        for p in [0.8, 0.9, 0.95] {
            let beta = chi2_quantile_2dof(p).unwrap();
            let ko = KeepOut::new(Vec2::zeros(), &cov, rect, beta).unwrap();
            // Walk out along a random whitened ray until the margin reaches zero.
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = cov.sqrt() * Vec2::new(th.cos(), th.sin());
            let (mut lo, mut hi) = (0.0, 100.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if ko.margin(&(dir * mid)) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = dir * hi;
            let n = 20_000;
            let l = cov.sqrt();
            let hits = (0..n)
                .filter(|_| {
                    let o = l * Vec2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                    rect.contains(&(x - o))
                })
                .count();
            let freq = hits as f64 / n as f64;
            let bound = (1.0 - p) + 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!(freq <= bound, "p {p}: frequency {freq} > {bound}");
        }
    }
}

fn arb_cov() -> impl Strategy<Value = Covariance2> {
    (0.01f64..9.0, 0.01f64..9.0, 0.0f64..3.2).prop_map(|(a, b, t)| cov_from(a, b, t))
}

proptest! {
    #[test]
    fn whitening_inverts_covariance(cov in arb_cov()) {
        let w = inv_sqrt(&cov).unwrap();
        let e = w * cov.matrix() * w;
        prop_assert!((e - Mat2::identity()).abs().max() < 1e-8);
    }

    #[test]
    fn margin_shrinks_with_scale(
        cov in arb_cov(),
        rl in 0.5f64..6.0, rw in 0.3f64..3.0,
        x in -20.0f64..20.0, y in -20.0f64..20.0,
        a1 in 0.1f64..5.0, a2 in 0.1f64..5.0,
    ) {
        let (small, large) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let rect = OverlapRect::new(rl, rw).unwrap();
        let beta = chi2_quantile_2dof(0.9).unwrap();
        let p = Vec2::new(x, y);
        let gs = constraint_value(&p, &Vec2::zeros(), &cov.scaled(small).unwrap(), &rect, beta).unwrap();
        let gl = constraint_value(&p, &Vec2::zeros(), &cov.scaled(large).unwrap(), &rect, beta).unwrap();
        prop_assert!(gs >= gl - 1e-9);
        if gl >= 0.0 {
            prop_assert!(gs >= 0.0);
        }
    }

    #[test]
    fn signed_distance_agrees_outside_and_is_negative_inside(
        cov in arb_cov(), rl in 0.5f64..6.0, rw in 0.3f64..3.0, x in -20.0f64..20.0, y in -20.0f64..20.0,
    ) {
        let b = Zonotope2::from_rect(&OverlapRect::new(rl, rw).unwrap(), &inv_sqrt(&cov).unwrap()).unwrap();
        let z = Vec2::new(x, y);
        let d = dist_to_zonotope(&z, &b).distance;
        let s = signed_dist_to_zonotope(&z, &b).distance;
        if b.contains(&z) {
            prop_assert_eq!(d, 0.0);
            prop_assert!(s <= 0.0);
        } else {
            prop_assert_eq!(d, s);
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn overlap_rect_is_symmetric(a in 0.1f64..5.0, b in 0.1f64..5.0, c in 0.1f64..5.0, d in 0.1f64..5.0) {
        prop_assert_eq!(overlap_rect([a, b], [c, d]).unwrap(), overlap_rect([c, d], [a, b]).unwrap());
    }
}
