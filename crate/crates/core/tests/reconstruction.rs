mod common;

use chrono_lens_core::causal::{
    earliest_obs_time, observer_congruence, CongruenceOptions, Observers, Sign, TauOptions, Worldline,
};
use chrono_lens_core::metric::{bump_profile, point, Metric, Vec4};
use chrono_lens_core::observation::{
    assemble_dataset, observe_detailed, points_on_ray, DatasetView, ForwardConfig, ObservationDataset, Source,
};
use chrono_lens_core::reconstruction::{
    build_null_traces, chart_form, chart_gradient_row, conformal_class_distance, conformal_factor_ode, fit_null_cone,
    observation_time_chart, reconstruct_region, EarliestTable, ReconstructionConfig, TargetStatus, VacuumRegion,
};
use chrono_lens_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const OFFSETS: [f64; 4] = [-0.02, -0.01, 0.01, 0.02];

fn congruence(m: &Metric, h_hat: f64, count: usize, s_range: [f64; 2]) -> Observers {
    let n = m.dim();
    let mut eta = [0.0; 4];
    eta[0] = 1.0;
    let mut z = [0.0; 4];
    if m.periodic_axis().is_some() && n == 3 {
        z[1] = std::f64::consts::FRAC_PI_2;
    }
    let opts = CongruenceOptions { count, s_range, velocity_scale: 0.0 };
    Observers::new(m, observer_congruence(m, &z, &eta, h_hat, &opts).unwrap()).unwrap()
}

struct Built {
    ds: ObservationDataset,
    /// Per target: chart-Jacobian rows for every observer.
    rows: Vec<Vec<Option<Vec<f64>>>>,
    /// Per target: (observer, launch direction, ids of the sources seeded on that ray).
    rays: Vec<Vec<(usize, Vec4, Vec<usize>)>>,
}

/// Targets first, then sources on every earliest ray of every target, then fill sources.
fn build(m: &Metric, obs: &Observers, targets: &[Vec4], fill: &[Vec4], pm: &Vec4, pp: &Vec4, cfg: &ForwardConfig) -> Built {
    let n = m.dim();
    let mut sources: Vec<Source> = targets.iter().enumerate().map(|(i, x)| Source::new(i, &x[..n])).collect();
    let mut rows = Vec::new();
    let mut rays = Vec::new();
    for x in targets {
        let mut row = vec![None; obs.worldlines.len()];
        let mut target_rays = Vec::new();
        for d in observe_detailed(m, obs, usize::MAX, x, cfg).unwrap() {
            let r = &d.record;
            if !r.earliest_flag || r.on_worldline || row[r.observer_id].is_some() {
                continue;
            }
            let (x_arr, mu_dot) = obs.worldlines[r.observer_id].at(r.s);
            row[r.observer_id] = Some(chart_gradient_row(m, x, &d.launch, &x_arr, &d.v_arrival, &mu_dot));
            let mut ids = Vec::new();
            if let Ok(pts) = points_on_ray(m, x, &d.launch, &OFFSETS, cfg.refine_tol) {
                for p in pts {
                    ids.push(sources.len());
                    sources.push(Source::new(sources.len(), &p[..n]));
                }
            }
            target_rays.push((r.observer_id, d.launch, ids));
        }
        rows.push(row);
        rays.push(target_rays);
    }
    for x in fill {
        sources.push(Source::new(sources.len(), &x[..n]));
    }
    let ds = assemble_dataset(m, obs, &sources, pm, pp, cfg).unwrap();
    Built { ds, rows, rays }
}

fn uniform(rng: &mut ChaCha8Rng, region: &[[f64; 2]]) -> Vec4 {
    let mut x = [0.0; 4];
    for (i, iv) in region.iter().enumerate() {
        x[i] = rng.random_range(iv[0]..iv[1]);
    }
    x
}

fn flat_scenario(m: &Metric, targets: usize, seed: u64) -> (Built, Observers) {
    scenario_with(m, targets, seed, &ForwardConfig::for_dim(m.dim()))
}

fn scenario_with(m: &Metric, targets: usize, seed: u64, cfg: &ForwardConfig) -> (Built, Observers) {
    let obs = congruence(m, 1.0, 16, [-2.5, 2.5]);
    let region = [[-0.2, 0.2], [-0.4, 0.4], [-0.4, 0.4]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tx: Vec<Vec4> = (0..targets).map(|_| uniform(&mut rng, &region)).collect();
    let fx: Vec<Vec4> = (0..10).map(|_| uniform(&mut rng, &region)).collect();
    let built = build(m, &obs, &tx, &fx, &point(&[-0.5]), &point(&[1.5]), cfg);
    (built, obs)
}

fn target_cfg(count: usize) -> ReconstructionConfig {
    ReconstructionConfig { targets: (0..count).collect(), ..ReconstructionConfig::default() }
}

fn angle_mod_sign(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|c| c * c).sum::<f64>().sqrt();
    let nb = b.iter().map(|c| c * c).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    dot.abs().min(1.0).acos()
}

#[test]
fn minkowski_round_trip() {
    let m = minkowski(3);
    let (built, _) = flat_scenario(&m, 4, 7);
    let report = reconstruct_region(&built.ds.view(), &target_cfg(4));
    assert_eq!(report.ok, 4, "{:?}", report.targets.iter().map(|t| &t.reason).collect::<Vec<_>>());
    for t in &report.targets {
        let est = t.estimate.as_ref().unwrap();
        let worst = est.residuals.iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(worst < 1e-6, "target {}: residual {worst:e}", t.target);
        let chart = t.chart.as_ref().unwrap();
        let rows = &built.rows[t.target];
        let dy = DMatrix::from_fn(3, 3, |i, k| rows[chart.tuple[i]].as_ref().unwrap()[k]);
        let q = point(&built.ds.truth[t.target].x);
        let d = conformal_class_distance(&est.matrix(), &chart_form(&m, &q, &dy).unwrap());
        assert!(d < 1e-2, "target {}: distance {d:e}", t.target);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn doubling_direction_count_does_not_worsen_residuals() {
    let m = bump(3, 0.4);
    let mut medians = Vec::new();
    for dir_count in [256, 512] {
        let cfg = ForwardConfig { dir_count, ..ForwardConfig::for_dim(3) };
        let (built, _) = scenario_with(&m, 3, 21, &cfg);
        let report = reconstruct_region(&built.ds.view(), &target_cfg(3));
        let res: Vec<f64> = report
            .targets
            .iter()
            .filter_map(|t| t.estimate.as_ref())
            .map(|e| e.residuals.iter().fold(0.0f64, |a, b| a.max(*b)))
            .collect();
        assert_eq!(res.len(), 3);
        medians.push(median(res));
    }
    eprintln!("median max-residual: {:.3e} (256 directions), {:.3e} (512 directions)", medians[0], medians[1]);
    assert!(medians[1] <= 2.0 * medians[0] + 1e-9);
}

#[test]
fn traces_recover_seeded_sources() {
    let m = bump(3, 0.4);
    let (built, _) = flat_scenario(&m, 2, 3);
    let view = built.ds.view();
    let table = EarliestTable::new(&view);
    let cfg = ReconstructionConfig::default();
    for target in 0..2 {
        let chart = observation_time_chart(&table, 3, target, &cfg).unwrap();
        let (traces, _) = build_null_traces(&view, &table, &chart, &cfg);
        let dy = DMatrix::from_fn(3, 3, |i, k| built.rows[target][chart.tuple[i]].as_ref().unwrap()[k]);
        let mut checked = 0;
        for (obs_id, launch, ids) in &built.rays[target] {
            let Some(tr) = traces.iter().find(|t| t.observer_id == *obs_id) else { continue };
            for id in ids {
                assert!(tr.source_ids.contains(id), "observer {obs_id}: seeded source {id} missing");
            }
            let push = &dy * DVector::from_iterator(3, launch[..3].iter().copied());
            let angle = angle_mod_sign(&tr.tangent, push.as_slice());
            assert!(angle < 1e-2, "observer {obs_id}: tangent off by {angle}");
            // Y^j is constant along the ray that reaches observer j
            if let Some(pos) = chart.tuple.iter().position(|j| j == obs_id) {
                for y in &tr.y_points {
                    assert!((y[pos] - chart.y[pos]).abs() < 1e-7);
                }
            }
            checked += 1;
        }
        assert!(checked >= 5, "only {checked} traces checked");
    }
}

#[test]
fn zero_match_tolerance_leaves_no_traces() {
    let m = minkowski(3);
    let (built, _) = flat_scenario(&m, 1, 11);
    let view = built.ds.view();
    let table = EarliestTable::new(&view);
    let cfg = ReconstructionConfig { match_tol: 0.0, ..ReconstructionConfig::default() };
    let chart = observation_time_chart(&table, 3, 0, &cfg).unwrap();
    let (traces, log) = build_null_traces(&view, &table, &chart, &cfg);
    let anchors = view.records.iter().filter(|r| r.source_id == 0 && r.earliest_flag && !r.on_worldline).count();
    assert!(traces.is_empty());
    assert_eq!(log.too_few_matches, anchors);
}

#[test]
fn chart_rank_and_degenerate_tuple() {
    let m = minkowski(3);
    let (built, _) = flat_scenario(&m, 1, 13);
    let view = built.ds.view();
    let table = EarliestTable::new(&view);
    let chart = observation_time_chart(&table, 3, 0, &ReconstructionConfig::default()).unwrap();
    assert!(chart.valid && chart.condition < 1e4);
    let dup = ReconstructionConfig { candidate_tuples: vec![vec![1, 1, 2]], ..ReconstructionConfig::default() };
    assert!(matches!(observation_time_chart(&table, 3, 0, &dup), Err(Error::NoValidTuple { .. })));

    // finite-difference rank of Y over a source grid
    let obs = congruence(&m, 1.0, 16, [-2.5, 2.5]);
    let w: Vec<&Worldline> = chart.tuple.iter().map(|&j| &obs.worldlines[j]).collect();
    let opts = TauOptions::earliest();
    let h = 1e-3;
    for q in [point(&[0.0, 0.1, 0.1]), point(&[-0.1, -0.3, 0.2]), point(&[0.1, 0.2, -0.3])] {
        let y = |p: &Vec4| -> Vec<f64> { w.iter().map(|wl| earliest_obs_time(&m, wl, p, Sign::Plus, &opts).unwrap().s).collect() };
        let jac = DMatrix::from_fn(3, 3, |i, k| {
            let (mut a, mut b) = (q, q);
            a[k] += h;
            b[k] -= h;
            (y(&a)[i] - y(&b)[i]) / (2.0 * h)
        });
        assert!(jac.singular_values().min() > 1e-2, "rank-deficient Y at {q:?}");
    }
}

#[test]
fn first_variation_identity() {
    // along a source curve z(σ) = q + σ w, dT/dσ = g(ż, ζ)/g(θ, μ̇)
    let m = bump(3, 0.4);
    let obs = congruence(&m, 1.0, 8, [-2.5, 2.5]);
    let cfg = ForwardConfig::for_dim(3);
    let q = point(&[0.0, 0.2, -0.1]);
    let w = point(&[0.3, 0.5, -0.4]);
    let h = 1e-3;
    let opts = TauOptions::earliest();
    let mut checked = 0;
    for d in observe_detailed(&m, &obs, 0, &q, &cfg).unwrap() {
        let r = &d.record;
        if !r.earliest_flag || r.on_worldline {
            continue;
        }
        let wl = &obs.worldlines[r.observer_id];
        let (x_arr, mu_dot) = wl.at(r.s);
        let row = chart_gradient_row(&m, &q, &d.launch, &x_arr, &d.v_arrival, &mu_dot);
        let predicted: f64 = (0..3).map(|k| row[k] * w[k]).sum();
        let t = |sg: f64| {
            let p: Vec4 = std::array::from_fn(|i| q[i] + sg * w[i]);
            earliest_obs_time(&m, wl, &p, Sign::Plus, &opts).unwrap().s
        };
        let fd = (t(h) - t(-h)) / (2.0 * h);
        assert!((fd - predicted).abs() < 1e-3, "observer {}: {fd} vs {predicted}", r.observer_id);
        checked += 1;
    }
    assert!(checked >= 6);
}

#[test]
fn cone_fit_examples() {
    let r = 0.5f64.sqrt();
    let dirs = vec![
        vec![1.0, 1.0, 0.0],
        vec![1.0, -1.0, 0.0],
        vec![1.0, 0.0, 1.0],
        vec![1.0, 0.0, -1.0],
        vec![1.0, r, r],
    ];
    let est = fit_null_cone(0, &dirs).unwrap();
    let eta = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0, 1.0]));
    assert!(conformal_class_distance(&est.matrix(), &eta) < 1e-12);
    assert!(matches!(fit_null_cone(0, &vec![vec![1.0, 0.0, 1.0]; 8]), Err(Error::DegenerateSpan { .. })));
    assert_eq!(conformal_class_distance(&eta, &eta), 0.0);
    assert!(conformal_class_distance(&(&eta * 2.0), &eta) < 1e-15);
    // fixed value by direct evaluation of the normalized difference
    let b = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0, 1.0]));
    let (na, nb) = (3f64.sqrt(), 6f64.sqrt());
    let direct = ((1.0 / nb - 1.0 / na).powi(2) + (2.0 / nb - 1.0 / na).powi(2) + (1.0 / nb - 1.0 / na).powi(2)).sqrt();
    assert!((conformal_class_distance(&eta, &b) - direct).abs() < 1e-15);
}

#[test]
fn empty_dataset_gives_empty_report() {
    let m = minkowski(3);
    let obs = congruence(&m, 1.0, 4, [-2.5, 2.5]);
    let ds = assemble_dataset(&m, &obs, &[], &point(&[-0.5]), &point(&[1.5]), &ForwardConfig::for_dim(3)).unwrap();
    let view: DatasetView = ds.view();
    let report = reconstruct_region(&view, &ReconstructionConfig::default());
    assert!(report.targets.is_empty());
    assert_eq!((report.ok, report.skipped, report.failed), (0, 0, 0));
}

#[test]
fn targets_past_the_cut_are_skipped() {
    // unit-radius R×S²: rays winding past the antipode arrive after the null cut
    let m = cylinder(3, 1.0);
    let obs = congruence(&m, 0.3, 4, [-1.0, 6.0]);
    let sources = vec![Source::new(0, &[0.0, 1.4, 0.4]), Source::new(1, &[0.0, 1.7, -0.3])];
    let pm = point(&[-0.5, std::f64::consts::FRAC_PI_2, 0.0]);
    let pp = point(&[5.5, std::f64::consts::FRAC_PI_2, 0.0]);
    let ds = assemble_dataset(&m, &obs, &sources, &pm, &pp, &ForwardConfig::for_dim(3)).unwrap();
    assert!(ds.failures.is_empty(), "{:?}", ds.failures);
    let report = reconstruct_region(&ds.view(), &ReconstructionConfig::default());
    assert_eq!(report.targets.len(), 2);
    for t in &report.targets {
        let late = ds.records.iter().any(|r| r.source_id == t.target && !r.earliest_flag);
        assert!(late, "source {} has no arrival past the cut", t.target);
        assert_eq!(t.status, TargetStatus::Skipped);
    }
}

fn bump_factor(m_amp: f64, dim: usize, x: &Vec4) -> (f64, Vec4) {
    let mut widths = [0.8; 4];
    widths[0] = 1.5;
    let mut center = [0.0; 4];
    center[1] = 0.1;
    let (phi, dphi, _) = bump_profile(x, dim, m_amp, &widths, &center);
    (-phi, dphi.map(|c| -c))
}

/// Max error of the recovered factor along 10 null geodesics of `e^{−2f₀}η`.
fn factor_error(dim: usize, tol: f64) -> f64 {
    let amp = -0.3;
    let m = bump(dim, amp);
    let region = VacuumRegion { lo: [-2.9; 4], hi: [2.9; 4] };
    let mut worst = 0.0f64;
    for k in 0..10 {
        let y = -0.5 + 0.1 * k as f64;
        let x0 = point(&vec![-1.5, -1.4, y, 0.05][..dim]);
        let mut dir = [0.0; 4];
        dir[0] = 1.0;
        dir[1] = 1.0;
        dir[2] = 0.1 * (k as f64 - 4.5) / 4.5;
        let v0 = m.future_null(&x0, &dir);
        let (f0, df0) = bump_factor(amp, dim, &x0);
        let samples = conformal_factor_ode(&m, &x0, &v0, f0, &df0, 2.6, &region, tol).unwrap();
        for s in &samples {
            worst = worst.max((s.f - bump_factor(amp, dim, &s.x).0).abs());
        }
    }
    worst
}

#[test]
fn conformal_factor_recovery() {
    for dim in [3, 4] {
        let err = factor_error(dim, 1e-10);
        assert!(err < 1e-3, "dim {dim}: error {err:e}");
        let coarse = factor_error(dim, 1e-6);
        let mid = factor_error(dim, 1e-8);
        eprintln!("dim {dim}: factor error {coarse:.3e} (tol 1e-6), {mid:.3e} (1e-8), {err:.3e} (1e-10)");
        assert!(mid < 0.1 * coarse && err < 0.1 * mid, "error does not track the tolerance");
    }
}

#[test]
fn conformal_factor_trivial_cases() {
    let m = minkowski(4);
    let region = VacuumRegion { lo: [-2.9; 4], hi: [2.9; 4] };
    let x0 = [0.0; 4];
    let v0 = point(&[1.0, 0.6, 0.8, 0.0]);
    for c in [0.0, 0.7] {
        let samples = conformal_factor_ode(&m, &x0, &v0, c, &[0.0; 4], 2.0, &region, 1e-10).unwrap();
        assert!(samples.iter().all(|s| s.f == c && s.df == [0.0; 4]));
    }
    assert!(matches!(
        conformal_factor_ode(&m, &x0, &v0, 0.0, &[0.0; 4], 5.0, &region, 1e-10),
        Err(Error::LeftVacuumRegion { .. })
    ));
    let m2 = minkowski(2);
    assert!(matches!(
        conformal_factor_ode(&m2, &x0, &point(&[1.0, 1.0]), 0.0, &[0.0; 4], 1.0, &region, 1e-10),
        Err(Error::InvalidSpec(_))
    ));
}
