mod common;

use chrono_lens_core::causal::{
    causal_relation, check_schedule, earliest_obs_time, fermi_chart, fermi_map, observer_congruence, time_separation,
    CausalRelation, CongruenceOptions, ObserverSpec, Observers, Schedule, Sign, TauOptions, Worldline,
};
use chrono_lens_core::geodesic::integrate_geodesic;
use chrono_lens_core::metric::{point, Metric, Vec4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn static_observer(m: &Metric, z: &[f64]) -> Worldline {
    let mut eta = [0.0; 4];
    eta[0] = 1.0;
    let spec = ObserverSpec::new(m, 0, point(z), eta, [-1.0, 2.5]).unwrap();
    Worldline::new(m, &spec).unwrap()
}

/// Random future-directed causal vector with time component in `[0, dt]`.
fn causal_step(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec4 {
    let mut v = [0.0; 4];
    v[0] = rng.random_range(0.0..dt);
    let mut dir: Vec<f64> = (1..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
    let frac = rng.random_range(0.0..1.0f64);
    dir.iter_mut().for_each(|c| *c *= frac * v[0] / norm);
    v[1..n].copy_from_slice(&dir);
    v
}

#[test]
fn reverse_triangle_inequality() {
    let opts = TauOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases: [(Metric, usize); 3] = [(minkowski(4), 500), (cylinder(3, 1.0), 500), (bump(3, 0.4), 60)];
    for (m, count) in cases {
        let n = m.dim();
        for _ in 0..count {
            let mut x = [0.0; 4];
            for a in 0..n {
                x[a] = rng.random_range(-0.5..0.5);
            }
            if m.periodic_axis().is_some() && n == 3 {
                x[1] = rng.random_range(1.0..2.0);
            }
            let step1 = causal_step(&mut rng, n, 0.8);
            let step2 = causal_step(&mut rng, n, 0.8);
            let y: Vec4 = std::array::from_fn(|i| x[i] + step1[i]);
            let z: Vec4 = std::array::from_fn(|i| y[i] + step2[i]);
            let xy = time_separation(&m, &x, &y, &opts).unwrap().tau;
            let yz = time_separation(&m, &y, &z, &opts).unwrap().tau;
            let xz = time_separation(&m, &x, &z, &opts).unwrap().tau;
            assert!(xy + yz <= xz + 1e-6, "{:?}: {xy} + {yz} > {xz}", m.family());
            if xy > 1e-6 {
                assert_eq!(time_separation(&m, &y, &x, &opts).unwrap().tau, 0.0);
            }
        }
    }
}

#[test]
fn relation_examples() {
    let m = minkowski(4);
    let opts = TauOptions::default();
    let t = time_separation(&m, &[0.0; 4], &point(&[2.0, 1.0, 0.0, 0.0]), &opts).unwrap();
    assert!((t.tau - 3f64.sqrt()).abs() < 1e-14);
    assert_eq!(time_separation(&m, &[0.0; 4], &point(&[0.5, 1.0, 0.0, 0.0]), &opts).unwrap().tau, 0.0);
    assert_eq!(causal_relation(&m, &[0.0; 4], &point(&[1.0, 1.0, 0.0, 0.0]), &opts).unwrap(), CausalRelation::Horismos);
    assert_eq!(
        causal_relation(&m, &[0.0; 4], &point(&[2.0, 1.0, 0.0, 0.0]), &opts).unwrap(),
        CausalRelation::Chronological
    );
}

#[test]
fn earliest_time_examples() {
    let m = minkowski(4);
    let w = static_observer(&m, &[0.0, 0.0, 0.0, 0.0]);
    let opts = TauOptions::earliest();
    let f = earliest_obs_time(&m, &w, &point(&[0.0, 0.5, 0.0, 0.0]), Sign::Plus, &opts).unwrap();
    assert!((f.s - 0.5).abs() < 1e-7, "f⁺ = {}", f.s);
    assert!(!f.boundary);
    let f = earliest_obs_time(&m, &w, &point(&[0.3, 0.0, 0.0, 0.0]), Sign::Plus, &opts).unwrap();
    assert!((f.s - 0.3).abs() < 1e-7, "f⁺ = {}", f.s);
    let f = earliest_obs_time(&m, &w, &point(&[0.0, 0.5, 0.0, 0.0]), Sign::Minus, &opts).unwrap();
    assert!((f.s + 0.5).abs() < 1e-7, "f⁻ = {}", f.s);
}

/// Earliest arrival by sweeping null directions from `q` and locating the closest
/// approach of each ray to the worldline.
fn sweep_first_arrival(m: &Metric, w: &Worldline, q: &Vec4, dirs: usize) -> f64 {
    let miss = |seg: &chrono_lens_core::geodesic::GeodesicSegment, s: f64| -> (f64, f64) {
        let (x, _) = seg.state_at(m, s).unwrap();
        let Some(sw) = w.s_at_time(x[0]) else { return (f64::INFINITY, 0.0) };
        let p = w.position(sw);
        (((x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2)).sqrt(), sw)
    };
    let mut best = (f64::INFINITY, f64::NAN);
    for k in 0..dirs {
        let th = 2.0 * std::f64::consts::PI * k as f64 / dirs as f64;
        let xi = m.future_null(q, &[1.0, th.cos(), th.sin(), 0.0]);
        let seg = integrate_geodesic(m, q, &xi, 1.5, 1e-11).unwrap();
        let steps = 150;
        let h = seg.s_end() / steps as f64;
        let mut i_min = 0;
        let mut d_min = f64::INFINITY;
        for i in 0..=steps {
            let d = miss(&seg, i as f64 * h).0;
            if d < d_min {
                d_min = d;
                i_min = i;
            }
        }
        if d_min > 0.05 {
            continue;
        }
        // golden-section refinement of the closest approach
        let (mut a, mut b) = ((i_min as f64 - 1.0).max(0.0) * h, ((i_min + 1) as f64 * h).min(seg.s_end()));
        let r = 0.5 * (5f64.sqrt() - 1.0);
        while b - a > 1e-10 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if miss(&seg, c).0 < miss(&seg, d).0 {
                b = d;
            } else {
                a = c;
            }
        }
        let (d, sw) = miss(&seg, 0.5 * (a + b));
        if d < best.0 {
            best = (d, sw);
        }
    }
    best.1
}

#[test]
fn bump_earliest_time_matches_direction_sweep() {
    let m = bump(3, 0.4);
    let w = static_observer(&m, &[0.0, 0.0, 0.0]);
    let q = point(&[0.0, 0.5, 0.0]);
    let f = earliest_obs_time(&m, &w, &q, Sign::Plus, &TauOptions::earliest()).unwrap();
    let oracle = sweep_first_arrival(&m, &w, &q, 10_000);
    assert!((f.s - oracle).abs() < 1e-4, "bisection {} vs sweep {oracle}", f.s);
}

#[test]
fn earliest_time_is_monotone_and_lipschitz() {
    let m = bump(3, 0.4);
    let w = static_observer(&m, &[0.0, 0.0, 0.0]);
    let opts = TauOptions::earliest();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = |q: &Vec4| earliest_obs_time(&m, &w, q, Sign::Plus, &opts).unwrap().s;
    for _ in 0..30 {
        let q = point(&[rng.random_range(-0.3..0.0), rng.random_range(0.2..0.6), rng.random_range(-0.4..0.4)]);
        let step = causal_step(&mut rng, 3, 0.3);
        let q2: Vec4 = std::array::from_fn(|i| q[i] + step[i]);
        assert!(f(&q2) >= f(&q) - 1e-6);
    }
    // empirical Lipschitz constant on a grid (|∂f⁺| ≤ 2 for a static observer in a mild bump)
    let h = 0.05;
    let mut lip = 0.0f64;
    for i in 0..6 {
        for j in 0..6 {
            let q = point(&[-0.2, 0.2 + h * i as f64, -0.15 + h * j as f64]);
            let f0 = f(&q);
            for a in 0..3 {
                let mut q2 = q;
                q2[a] += h;
                lip = lip.max((f(&q2) - f0).abs() / h);
            }
        }
    }
    eprintln!("empirical Lipschitz constant of f⁺: {lip:.4}");
    assert!(lip.is_finite() && lip < 2.0);
}

#[test]
fn fermi_chart_round_trip() {
    for m in [minkowski(4), bump(3, 0.4), bump(4, 0.3)] {
        let n = m.dim();
        let mut eta = [0.0; 4];
        eta[0] = 1.0;
        eta[1] = 0.2;
        let spec = ObserverSpec::new(&m, 0, point(&vec![0.0; n]), eta, [-1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut t = [0.0; 4];
            t[0] = rng.random_range(-0.5..0.5);
            for a in 1..n {
                t[a] = rng.random_range(-0.3..0.3);
            }
            let e = fermi_map(&m, &spec, &t).unwrap();
            let back = fermi_chart(&m, &spec, &e).unwrap();
            let err = (0..n).map(|a| (back[a] - t[a]).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{:?}: round trip error {err:e}", m.family());
        }
    }
    let m = minkowski(4);
    let spec = ObserverSpec::new(&m, 0, [0.0; 4], point(&[1.0, 0.0, 0.0, 0.0]), [-1.0, 1.0]).unwrap();
    let e = fermi_chart(&m, &spec, &point(&[0.2, 0.1, 0.0, 0.0])).unwrap();
    assert!((e[0] - 0.2).abs() < 1e-12 && (e[1] - 0.1).abs() < 1e-12);
    let e = fermi_chart(&m, &spec, &point(&[0.4, 0.0, 0.0, 0.0])).unwrap();
    assert!((e[0] - 0.4).abs() < 1e-12 && e[1..].iter().all(|c| c.abs() < 1e-12));
}

fn congruence(m: &Metric, h_hat: f64, count: usize) -> Observers {
    let opts = CongruenceOptions { count, s_range: [-2.5, 2.5], velocity_scale: 0.0 };
    let grid = observer_congruence(m, &[0.0; 4], &point(&[1.0, 0.0, 0.0, 0.0]), h_hat, &opts).unwrap();
    Observers::new(m, grid).unwrap()
}

#[test]
fn congruence_examples() {
    let m = minkowski(4);
    assert_eq!(congruence(&m, 0.0, 16).worldlines.len(), 1);
    let obs = congruence(&m, 0.1, 16);
    assert_eq!(obs.worldlines.len(), 16);
    for w in &obs.worldlines {
        // parallel lines inside the ĥ-ball
        let (x0, v0) = w.at(0.0);
        let (x1, _) = w.at(1.5);
        assert!((v0[0] - 1.0).abs() < 1e-12 && v0[1..].iter().all(|c| c.abs() < 1e-12));
        assert!((x1[0] - x0[0] - 1.5).abs() < 1e-10);
        assert!((1..4).all(|a| (x1[a] - x0[a]).abs() < 1e-10));
        assert!(x0[1..].iter().map(|c| c * c).sum::<f64>().sqrt() <= 0.1 + 1e-12);
    }
    // analytic tube distance from (0.5, 0.05, 0, 0): nearest parallel line
    let q = point(&[0.5, 0.05, 0.0, 0.0]);
    let analytic = obs
        .grid
        .members
        .iter()
        .map(|s| ((q[1] - s.z[1]).powi(2) + (q[2] - s.z[2]).powi(2) + (q[3] - s.z[3]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    assert!((obs.tube_distance(&m, &q) - analytic).abs() < 1e-10);
    assert!(obs.in_tube(&m, &q));
}

#[test]
fn schedule_check() {
    let m = minkowski(4);
    let obs = congruence(&m, 0.1, 16);
    let good = Schedule { s_minus2: -2.0, s_minus1: -0.5, s_plus1: 1.0, s_plus2: 2.2 };
    check_schedule(&m, &obs, &good).unwrap();
    // s₋₂ too close to s₋₁: off-center members cannot reach p⁻ in time
    let bad = Schedule { s_minus2: -0.52, s_minus1: -0.5, s_plus1: 1.0, s_plus2: 2.2 };
    assert!(check_schedule(&m, &obs, &bad).is_err());
}
