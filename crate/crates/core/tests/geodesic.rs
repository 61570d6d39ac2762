mod common;

use std::f64::consts::PI;

use chrono_lens_core::geodesic::{
    diamond_escape, exp_map, in_diamond, integrate_geodesic, jacobi_first_conjugate, null_cut_parameter, CutKind,
    CutOptions, Termination,
};
use chrono_lens_core::metric::{bilinear, point, Family, Metric, MetricSpec};
use chrono_lens_core::Error;
use proptest::prelude::*;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn norm_is_conserved(
        which in 0usize..13,
        u in prop::array::uniform4(0.0f64..1.0),
        dir in prop::array::uniform4(-1.0f64..1.0),
        null in any::<bool>(),
    ) {
        let m = &catalog()[which];
        let n = m.dim();
        let x = interior(m, &u);
        let mut xi = [0.0; 4];
        xi[..n].copy_from_slice(&dir[..n]);
        if null {
            xi[0] = 1.0;
            xi = m.future_null(&x, &xi);
        }
        prop_assume!(xi.iter().any(|c| c.abs() > 1e-3));
        let seg = integrate_geodesic(m, &x, &xi, 1.0, 1e-9).unwrap();
        let xi_plus = bilinear(n, &m.companion_at(&x), &xi, &xi);
        let norm0 = m.norm_sq(&x, &xi);
        for w in seg.samples.windows(2) {
            prop_assert!(w[1].s > w[0].s);
        }
        for smp in &seg.samples {
            prop_assert!((smp.norm - norm0).abs() < 1e-8 * (1.0 + xi_plus), "{} vs {}", smp.norm, norm0);
        }
    }

    #[test]
    fn integration_is_reversible(
        which in 0usize..13,
        u in prop::array::uniform4(0.0f64..1.0),
        dir in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let m = &catalog()[which];
        let n = m.dim();
        let x = interior(m, &u);
        let mut xi = [0.0; 4];
        xi[..n].copy_from_slice(&dir[..n]);
        prop_assume!(xi.iter().any(|c| c.abs() > 1e-3));
        let fwd = integrate_geodesic(m, &x, &xi, 0.8, 1e-10).unwrap();
        prop_assume!(fwd.termination == Termination::ReachedParam);
        let end = fwd.end();
        let back = integrate_geodesic(m, &end.x, &end.v.map(|c| -c), 0.8, 1e-10).unwrap();
        prop_assume!(back.termination == Termination::ReachedParam);
        let mut d = m.chart_difference(&back.end().x, &x);
        d[n..].iter_mut().for_each(|c| *c = 0.0);
        let dist = bilinear(n, &m.companion_at(&x), &d, &d).sqrt();
        prop_assert!(dist < 1e-6, "return error {}", dist);
    }
}

#[test]
fn cylinder_geodesic_winds() {
    let m = cylinder(2, 1.0);
    let seg = integrate_geodesic(&m, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0], 9.0, 1e-10).unwrap();
    for smp in &seg.samples {
        let mut x = smp.x;
        m.wrap(&mut x);
        assert!((x[0] - smp.s).abs() < 1e-9);
        let want = smp.s.rem_euclid(2.0 * PI);
        let diff = (x[1] - want).abs();
        assert!(diff < 1e-9 || (diff - 2.0 * PI).abs() < 1e-9);
    }
    // exp_map wraps the angle modulo 2π
    let e = exp_map(&m, &[0.0; 4], &[7.0, 7.0, 0.0, 0.0]).unwrap();
    let mut e = e;
    m.wrap(&mut e);
    assert!((e[1] - (7.0 - 2.0 * PI)).abs() < 1e-9);
}

#[test]
fn photon_sphere_orbit_stays_circular() {
    let mass = 1.0;
    let m = Metric::new(
        MetricSpec::new(Family::SchwarzschildLike, 4, vec![[-10.0, 60.0], [2.5, 10.0], [0.5, PI - 0.5], [-1.0, 8.0]])
            .with_param("mass", mass),
    )
    .unwrap();
    let r = 3.0 * mass;
    // t' = 1, φ' from g(ẋ, ẋ) = 0: (1 − 2m/r) = r² φ'²
    let phi_dot = (1.0 - 2.0 * mass / r).sqrt() / r;
    let x = point(&[0.0, r, PI / 2.0, 0.0]);
    let xi = [1.0, 0.0, 0.0, phi_dot];
    let s_orbit = 2.0 * PI / phi_dot;
    let seg = integrate_geodesic(&m, &x, &xi, s_orbit, 1e-11).unwrap();
    assert_eq!(seg.termination, Termination::ReachedParam);
    for smp in &seg.samples {
        assert!((smp.x[1] - r).abs() < 1e-4, "r drifted to {}", smp.x[1]);
    }
    assert!((seg.end().x[3] - 2.0 * PI).abs() < 1e-4);
}

#[test]
fn unit_sphere_conjugate_point_at_pi() {
    let m = cylinder(3, 1.0);
    // equatorial null geodesic with unit spatial speed
    let x = point(&[0.0, PI / 2.0, 0.5]);
    let seg = integrate_geodesic(&m, &x, &[1.0, 0.0, 1.0, 0.0], 5.0, 1e-11).unwrap();
    let rep = jacobi_first_conjugate(&m, &seg).unwrap();
    assert!((rep.parameter - PI).abs() < 1e-3, "conjugate at {}", rep.parameter);
    // non-equatorial direction: the conjugate point is still at spatial arc π
    let x = point(&[0.0, 1.2, 0.5]);
    let xi = [1.0, 0.6, 0.8 / 1.2f64.sin(), 0.0];
    let seg = integrate_geodesic(&m, &x, &xi, 5.0, 1e-11).unwrap();
    let rep = jacobi_first_conjugate(&m, &seg).unwrap();
    assert!((rep.parameter - PI).abs() < 1e-3, "conjugate at {}", rep.parameter);
}

#[test]
fn flat_families_have_no_conjugate_points() {
    for m in [minkowski(3), cylinder(2, 1.0)] {
        let mut xi = [1.0, 0.7, 0.3, 0.0];
        xi = m.future_null(&[0.0; 4], &xi);
        let seg = integrate_geodesic(&m, &[0.0, 0.3, 0.3, 0.0], &xi, 4.0, 1e-9).unwrap();
        assert!(jacobi_first_conjugate(&m, &seg).unwrap().parameter.is_infinite());
    }
}

#[test]
fn cylinder_cut_at_antipode() {
    let m = cylinder(2, 1.0);
    let cfg = CutOptions { s_max: 6.0, ..CutOptions::default() };
    let rep = null_cut_parameter(&m, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0], &cfg).unwrap();
    assert_eq!(rep.kind, CutKind::Cut);
    assert!((rep.rho - PI).abs() < 1e-3, "ρ = {}", rep.rho);
    // ρ(x, cξ) = ρ(x, ξ)/c
    for c in [0.5, 2.0] {
        let cfg = CutOptions { s_max: 6.0 / c, ..CutOptions::default() };
        let scaled = null_cut_parameter(&m, &[0.0; 4], &[c, c, 0.0, 0.0], &cfg).unwrap();
        assert!((scaled.rho - rep.rho / c).abs() < 1e-3, "c={c}: {}", scaled.rho);
    }
}

#[test]
fn unit_sphere_cut_is_conjugate_value() {
    let m = cylinder(3, 1.0);
    let cfg = CutOptions { s_max: 5.0, ..CutOptions::default() };
    let rep = null_cut_parameter(&m, &point(&[0.0, PI / 2.0, 0.5]), &[1.0, 0.0, 1.0, 0.0], &cfg).unwrap();
    assert!((rep.rho - PI).abs() < 1e-3, "ρ = {} ({:?})", rep.rho, rep.kind);
}

#[test]
fn minkowski_has_no_cut() {
    let m = minkowski(4);
    let cfg = CutOptions { s_max: 10.0, ..CutOptions::default() };
    let rep = null_cut_parameter(&m, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0], &cfg).unwrap();
    assert_eq!(rep.kind, CutKind::LowerBound);
    assert!((rep.rho - 3.0).abs() < 1e-9);
}

#[test]
fn minkowski_diamond_exit() {
    let m = Metric::new(MetricSpec::minkowski(4, 5.0)).unwrap();
    let (pm, pp) = ([0.0; 4], point(&[4.0, 0.0, 0.0, 0.0]));
    let seg = integrate_geodesic(&m, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0], 4.0, 1e-10).unwrap();
    let s = diamond_escape(&m, &seg, &pm, &pp).unwrap();
    assert!((s - 2.0).abs() < 1e-6, "exit at {s}");
    let outside = integrate_geodesic(&m, &point(&[0.0, 3.0, 0.0, 0.0]), &[1.0, 1.0, 0.0, 0.0], 1.0, 1e-10).unwrap();
    assert!(matches!(diamond_escape(&m, &outside, &pm, &pp), Err(Error::NeverInside)));
}

#[test]
fn bump_diamond_exit_matches_dense_scan() {
    let m = bump(3, 0.4);
    let (pm, pp) = (point(&[-1.0, 0.0, 0.0]), point(&[2.0, 0.0, 0.0]));
    let x = point(&[-0.5, 0.1, 0.0]);
    let xi = m.future_null(&x, &[1.0, 0.6, 0.8, 0.0]);
    let seg = integrate_geodesic(&m, &x, &xi, 3.0, 1e-10).unwrap();
    let s = diamond_escape(&m, &seg, &pm, &pp).unwrap();
    let steps = 3000;
    let mut last = 0.0;
    for i in 0..=steps {
        let si = seg.s_end() * i as f64 / steps as f64;
        let (y, _) = seg.state_at(&m, si).unwrap();
        if in_diamond(&m, &y, &pm, &pp).unwrap() {
            last = si;
        }
    }
    assert!((s - last).abs() < 1e-3, "bisected {s} vs scan {last}");
}
