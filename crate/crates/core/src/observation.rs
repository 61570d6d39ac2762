//! Forward model: light observation sets of point sources, earliest observations,
//! and dataset assembly.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{causal_relation, chronological, CausalRelation, ObserverGrid, Observers, TauOptions, Worldline};
use crate::error::{Error, Result};
use crate::geodesic::{jacobi_first_conjugate, trace_geodesic, GeodesicOptions, Termination};
use crate::metric::{bilinear, point, Metric, Vec4, MAX_DIM};
use crate::ode::Control;

/// A point source with its (withheld) chart position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub id: usize,
    pub x: Vec<f64>,
}

impl Source {
    pub fn new(id: usize, x: &[f64]) -> Self {
        Self { id, x: x.to_vec() }
    }
}

/// One light signal from a source registered on an observer worldline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub source_id: usize,
    pub observer_id: usize,
    /// Observer proper time of arrival.
    pub s: f64,
    pub x: Vec<f64>,
    /// Arrival tangent of the light ray, unit length in g⁺.
    pub xi: Vec<f64>,
    /// Affine length from the source, in the parametrization with unit g⁺ arrival speed.
    pub affine_length: f64,
    pub earliest_flag: bool,
    /// The source lies on this worldline; direction data are degenerate.
    #[serde(default)]
    pub on_worldline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub dir_count: usize,
    /// Integrator tolerance of the coarse direction sweep.
    pub sweep_tol: f64,
    /// Largest affine step in the sweep.
    pub sweep_h_max: f64,
    /// Integrator tolerance of the arrival refinement.
    pub refine_tol: f64,
    /// Accepted worldline-hit residual.
    pub residual_tol: f64,
    /// τ threshold for deciding that an arrival lies past the null cut.
    pub cut_tau_tol: f64,
    pub match_tol: f64,
    pub dir_tol: f64,
}

impl ForwardConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            dir_count: if dim >= 4 { 2048 } else { 512 },
            sweep_tol: 1e-7,
            sweep_h_max: 0.2,
            refine_tol: 1e-12,
            residual_tol: 1e-9,
            cut_tau_tol: 1e-3,
            match_tol: 3e-8,
            dir_tol: 2e-2,
        }
    }
}

/// Unit directions in `R^{n−1}`: the two signs for n=2, a uniform circle for n=3,
/// a Fibonacci sphere for n=4.
pub fn sweep_directions(dim: usize, count: usize) -> Vec<Vec4> {
    match dim {
        2 => vec![point(&[1.0]), point(&[-1.0])],
        3 => (0..count)
            .map(|i| {
                let a = 2.0 * PI * (i as f64 + 0.5) / count as f64;
                point(&[a.cos(), a.sin()])
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * i as f64;
                    point(&[r * a.cos(), r * a.sin(), z])
                })
                .collect()
        }
    }
}

/// Angular resolution of a sweep.
fn sweep_spacing(dim: usize, count: usize) -> f64 {
    match dim {
        2 => PI,
        3 => 2.0 * PI / count as f64,
        _ => (4.0 * PI / count as f64).sqrt(),
    }
}

/// Future null launch vector `e₀ + Σ d_a e_a` in the frame at the source.
fn launch(frame: &[Vec4; MAX_DIM], n: usize, d: &Vec4) -> Vec4 {
    let mut v = frame[0];
    for a in 1..n {
        for k in 0..n {
            v[k] += d[a - 1] * frame[a][k];
        }
    }
    v
}

/// Orthonormal complement of a unit vector in `R^m` (Gram–Schmidt on the axes).
fn tangent_basis(d: &Vec4, m: usize) -> Vec<Vec4> {
    let mut basis: Vec<Vec4> = Vec::new();
    for axis in 0..m {
        if basis.len() + 1 == m {
            break;
        }
        let mut t = [0.0; MAX_DIM];
        t[axis] = 1.0;
        let proj: f64 = (0..m).map(|i| t[i] * d[i]).sum();
        for i in 0..m {
            t[i] -= proj * d[i];
        }
        for b in &basis {
            let p: f64 = (0..m).map(|i| t[i] * b[i]).sum();
            for i in 0..m {
                t[i] -= p * b[i];
            }
        }
        let nrm = (0..m).map(|i| t[i] * t[i]).sum::<f64>().sqrt();
        if nrm > 0.3 {
            basis.push(t.map(|c| c / nrm));
        }
    }
    basis
}

fn perturbed_direction(d: &Vec4, basis: &[Vec4], alpha: &[f64], m: usize) -> Vec4 {
    let mut out = *d;
    for (b, a) in basis.iter().zip(alpha) {
        for i in 0..m {
            out[i] += a * b[i];
        }
    }
    let nrm = (0..m).map(|i| out[i] * out[i]).sum::<f64>().sqrt();
    out.map(|c| c / nrm)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    observer: usize,
    dir: usize,
    r: f64,
    t: f64,
    dist: f64,
}

/// A refined arrival: launch vector, ray parameter and observer time.
#[derive(Debug, Clone, Copy)]
struct Arrival {
    observer: usize,
    v: Vec4,
    r: f64,
    s: f64,
    x_ray: Vec4,
    v_ray: Vec4,
}

fn ray_state(metric: &Metric, q: &Vec4, v: &Vec4, r: f64, tol: f64) -> Option<(Vec4, Vec4)> {
    let opts = GeodesicOptions { tol, ..GeodesicOptions::default() };
    let seg = trace_geodesic(metric, q, v, r, &opts, |_| Control::Continue).ok()?;
    if seg.termination != Termination::ReachedParam {
        return None;
    }
    let e = seg.end();
    Some((e.x, e.v))
}

/// Newton solve of `γ_{q,v(α)}(r) = μ(s)` for `(α, r, s)`.
fn refine_arrival(
    metric: &Metric,
    q: &Vec4,
    frame: &[Vec4; MAX_DIM],
    d_seed: &Vec4,
    w: &Worldline,
    r0: f64,
    s0: f64,
    cfg: &ForwardConfig,
) -> Option<Arrival> {
    let n = metric.dim();
    let m = n - 1;
    let basis = tangent_basis(d_seed, m);
    let k = basis.len();
    let mut u = vec![0.0; k + 2];
    u[k] = r0;
    u[k + 1] = s0;
    let [sa, sb] = w.s_range();
    let eval = |u: &[f64]| -> Option<(Vec4, Vec4, Vec4, Vec4, Vec<f64>)> {
        let d = perturbed_direction(d_seed, &basis, &u[..k], m);
        let v = launch(frame, n, &d);
        let s = u[k + 1].clamp(sa, sb);
        let (xr, vr) = ray_state(metric, q, &v, u[k], cfg.refine_tol)?;
        let (xm, _) = w.at(s);
        let res = metric.chart_difference(&xm, &xr);
        Some((v, xr, vr, xm, res[..n].to_vec()))
    };
    let norm = |r: &[f64]| r.iter().map(|c| c * c).sum::<f64>().sqrt();
    let (mut v, mut xr, mut vr, _, mut res) = eval(&u)?;
    let mut rn = norm(&res);
    for _ in 0..40 {
        if rn < 1e-13 {
            break;
        }
        let mut jac = DMatrix::zeros(n, k + 2);
        for j in 0..k {
            let h = 1e-7;
            let mut up = u.clone();
            up[j] += h;
            let (_, _, _, _, rp) = eval(&up)?;
            for i in 0..n {
                jac[(i, j)] = (rp[i] - res[i]) / h;
            }
        }
        let (_, mu_dot) = w.at(u[k + 1]);
        for i in 0..n {
            jac[(i, k)] = vr[i];
            jac[(i, k + 1)] = -mu_dot[i];
        }
        let rhs = DVector::from_iterator(n, res.iter().map(|c| -c));
        let du = jac.lu().solve(&rhs)?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..10 {
            let trial: Vec<f64> = u.iter().zip(du.iter()).map(|(a, d)| a + alpha * d).collect();
            if trial[k] > 0.0 && trial[k + 1] >= sa && trial[k + 1] <= sb {
                if let Some((vt, xt, vtr, _, rt)) = eval(&trial) {
                    let nt = norm(&rt);
                    if nt < rn {
                        u = trial;
                        v = vt;
                        xr = xt;
                        vr = vtr;
                        res = rt;
                        rn = nt;
                        improved = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if rn > cfg.residual_tol {
        return None;
    }
    Some(Arrival { observer: w.spec.id, v, r: u[k], s: u[k + 1], x_ray: xr, v_ray: vr })
}

/// Coarse sweep: closest approaches of each swept ray to each worldline.
fn sweep(metric: &Metric, observers: &Observers, q: &Vec4, skip: &BTreeSet<usize>, cfg: &ForwardConfig) -> Vec<(Vec4, Candidate)> {
    let n = metric.dim();
    let frame = metric.orthonormal_frame(q);
    let dirs = sweep_directions(n, cfg.dir_count);
    let spacing = sweep_spacing(n, dirs.len());
    let t_stop = observers.worldlines.iter().map(|w| w.time_span()[1]).fold(f64::NEG_INFINITY, f64::max);
    let s_max = 4.0 * (metric.upper()[0] - metric.lower()[0]);
    let opts = GeodesicOptions { tol: cfg.sweep_tol, h_max: cfg.sweep_h_max, ..GeodesicOptions::default() };
    let mut out = Vec::new();
    for (di, d) in dirs.iter().enumerate() {
        let v = launch(&frame, n, d);
        let _ = trace_geodesic(metric, q, &v, s_max, &opts, |step| {
            let y0 = &step.y0;
            let y1 = &step.y1;
            let a0 = point(&y0[..4]);
            let a1 = point(&y1[..4]);
            let gp = metric.companion_at(&a1);
            for (j, w) in observers.worldlines.iter().enumerate() {
                if skip.contains(&j) {
                    continue;
                }
                let (Some(p0), Some(p1)) = (w.coarse_position_at_time(a0[0]), w.coarse_position_at_time(a1[0])) else {
                    continue;
                };
                let w0 = metric.chart_difference(&p0, &a0);
                let w1 = metric.chart_difference(&p1, &a1);
                // minimize |w0 + u (w1 − w0)|² over u ∈ [0,1] in the spatial g⁺ weights
                let mut aa = 0.0;
                let mut ab = 0.0;
                let mut bb = 0.0;
                for i in 1..n {
                    let c = gp[i][i];
                    let dw = w1[i] - w0[i];
                    aa += c * dw * dw;
                    ab += c * w0[i] * dw;
                    bb += c * w0[i] * w0[i];
                }
                let u = if aa > 0.0 { (-ab / aa).clamp(0.0, 1.0) } else { 0.0 };
                let dist = (bb + 2.0 * u * ab + u * u * aa).max(0.0).sqrt();
                let t = a0[0] + u * (a1[0] - a0[0]);
                let cap = 2.0 * spacing * (t - q[0]).abs() + 0.02;
                if dist < cap {
                    let r = step.t0 + u * (step.t1 - step.t0);
                    out.push((*d, Candidate { observer: j, dir: di, r, t, dist }));
                }
            }
            if a1[0] > t_stop {
                Control::Stop
            } else {
                Control::Continue
            }
        });
    }
    out
}

fn angle_between(a: &Vec4, b: &Vec4, m: usize) -> f64 {
    let dot: f64 = (0..m).map(|i| a[i] * b[i]).sum();
    dot.clamp(-1.0, 1.0).acos()
}

/// An arrival together with the ray's launch vector at the source and its tangent
/// at the observer, in the same affine parametrization.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalDetail {
    pub record: ArrivalRecord,
    pub launch: Vec4,
    pub v_arrival: Vec4,
}

/// Light observation set of the source `q`: every arrival on every observer worldline.
pub fn light_observation_set(
    metric: &Metric,
    observers: &Observers,
    source_id: usize,
    q: &Vec4,
    cfg: &ForwardConfig,
) -> Result<Vec<ArrivalRecord>> {
    Ok(observe_detailed(metric, observers, source_id, q, cfg)?.into_iter().map(|d| d.record).collect())
}

/// [`light_observation_set`] keeping the ray data of each arrival.
pub fn observe_detailed(
    metric: &Metric,
    observers: &Observers,
    source_id: usize,
    q: &Vec4,
    cfg: &ForwardConfig,
) -> Result<Vec<ArrivalDetail>> {
    if !metric.contains(q) {
        return Err(Error::OutOfDomain { x: q[..metric.dim()].to_vec() });
    }
    let n = metric.dim();
    let m = n - 1;
    let mut records = Vec::new();
    // sources sitting on a worldline produce the degenerate record only
    let mut on_line = BTreeSet::new();
    for (j, w) in observers.worldlines.iter().enumerate() {
        if let Some(s) = w.s_at_time(q[0]) {
            let p = w.position(s);
            let d = metric.chart_difference(&p, q);
            let gp = metric.companion_at(q);
            if bilinear(n, &gp, &d, &d).sqrt() < 1e-9 {
                on_line.insert(j);
                records.push(ArrivalDetail { launch: [0.0; MAX_DIM], v_arrival: [0.0; MAX_DIM], record: ArrivalRecord {
                    source_id,
                    observer_id: w.spec.id,
                    s,
                    x: p[..n].to_vec(),
                    xi: vec![0.0; n],
                    affine_length: 0.0,
                    earliest_flag: true,
                    on_worldline: true,
                } });
            }
        }
    }
    let mut cands = sweep(metric, observers, q, &on_line, cfg);
    cands.sort_by(|a, b| a.1.dist.total_cmp(&b.1.dist).then(a.1.dir.cmp(&b.1.dir)));
    let spacing = sweep_spacing(n, sweep_directions(n, cfg.dir_count).len());
    let mut seeds: Vec<(Vec4, Candidate)> = Vec::new();
    for (d, c) in cands {
        let dup = seeds.iter().any(|(d2, c2)| {
            c2.observer == c.observer && (c2.t - c.t).abs() < 0.05 && angle_between(&d, d2, m) < 4.0 * spacing + 0.05
        });
        if !dup {
            seeds.push((d, c));
        }
    }
    seeds.sort_by(|a, b| a.1.observer.cmp(&b.1.observer).then(a.1.t.total_cmp(&b.1.t)));
    let frame = metric.orthonormal_frame(q);
    let mut arrivals: Vec<Arrival> = Vec::new();
    for (d, c) in &seeds {
        let w = &observers.worldlines[c.observer];
        let Some(s0) = w.s_at_time(c.t) else { continue };
        if let Some(a) = refine_arrival(metric, q, &frame, d, w, c.r, s0, cfg) {
            let dup = arrivals.iter().any(|b| b.observer == a.observer && (b.s - a.s).abs() < 1e-7);
            if !dup {
                arrivals.push(a);
            }
        }
    }
    let tau_opts = TauOptions::default();
    for a in arrivals {
        let w = &observers.worldlines[a.observer];
        let x_arr = w.position(a.s);
        let gp = metric.companion_at(&a.x_ray);
        let speed = bilinear(n, &gp, &a.v_ray, &a.v_ray).sqrt();
        let xi: Vec<f64> = a.v_ray[..n].iter().map(|c| c / speed).collect();
        let earliest = earliest_flag(metric, q, &a, &x_arr, &tau_opts, cfg)?;
        let record = ArrivalRecord {
            source_id,
            observer_id: w.spec.id,
            s: a.s,
            x: x_arr[..n].to_vec(),
            xi,
            affine_length: a.r * speed,
            earliest_flag: earliest,
            on_worldline: false,
        };
        records.push(ArrivalDetail { record, launch: a.v, v_arrival: a.v_ray });
    }
    records.sort_by(|a, b| a.record.observer_id.cmp(&b.record.observer_id).then(a.record.s.total_cmp(&b.record.s)));
    Ok(records)
}

/// `r ≤ ρ(q, v)`: no conjugate point before the arrival and τ(q, γ(r)) still zero
/// (τ vanishes on `[0, ρ]` and is positive past it).
fn earliest_flag(metric: &Metric, q: &Vec4, a: &Arrival, x_arr: &Vec4, tau: &TauOptions, cfg: &ForwardConfig) -> Result<bool> {
    let opts = TauOptions { pos_tol: cfg.cut_tau_tol, ..*tau };
    if chronological(metric, q, x_arr, &opts)? {
        return Ok(false);
    }
    if metric.is_conformally_flat() {
        return Ok(true);
    }
    let seg = trace_geodesic(metric, q, &a.v, a.r, &GeodesicOptions::with_tol(cfg.refine_tol.max(1e-10)), |_| Control::Continue)?;
    let conj = jacobi_first_conjugate(metric, &seg)?;
    Ok(!(conj.parameter < a.r * (1.0 - 1e-9)))
}

/// Points `γ_{q,v}(λ)` on the null geodesic through `q` for the given affine offsets;
/// `v` is rescaled to unit g⁺ length at `q`.
pub fn points_on_ray(metric: &Metric, q: &Vec4, v: &Vec4, offsets: &[f64], tol: f64) -> Result<Vec<Vec4>> {
    let n = metric.dim();
    let speed = bilinear(n, &metric.companion_at(q), v, v).sqrt();
    let mut out = Vec::with_capacity(offsets.len());
    for &lam in offsets {
        if lam == 0.0 {
            out.push(*q);
            continue;
        }
        let mut dir = [0.0; MAX_DIM];
        for i in 0..n {
            dir[i] = v[i] / speed * lam.signum();
        }
        let opts = GeodesicOptions { tol, ..GeodesicOptions::default() };
        let seg = trace_geodesic(metric, q, &dir, lam.abs(), &opts, |_| Control::Continue)?;
        if seg.termination != Termination::ReachedParam {
            return Err(Error::OutOfDomain { x: seg.end().x[..n].to_vec() });
        }
        out.push(seg.end().x);
    }
    Ok(out)
}

/// Records of one source whose arrival precedes the null cut.
pub fn earliest_observation_set(records: &[ArrivalRecord]) -> Vec<ArrivalRecord> {
    records.iter().filter(|r| r.earliest_flag).cloned().collect()
}

/// Tie tolerance in observer time.
pub const TIE_TOL: f64 = 1e-9;

/// Earliest record of one source on one observer; returns the full tie set on ties.
pub fn earliest_point_on_observer(records: &[ArrivalRecord], observer_id: usize) -> Vec<ArrivalRecord> {
    let mine: Vec<&ArrivalRecord> = records.iter().filter(|r| r.observer_id == observer_id).collect();
    let Some(min_s) = mine.iter().map(|r| r.s).min_by(f64::total_cmp) else {
        return Vec::new();
    };
    mine.into_iter().filter(|r| r.s - min_s < TIE_TOL).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Hash of the generating configuration (filled in by the caller).
    pub config_hash: String,
    pub dim: usize,
    pub grid: ObserverGrid,
    pub p_minus: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub forward: ForwardConfig,
    pub source_count: usize,
    pub truth_withheld: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationDataset {
    pub meta: DatasetMeta,
    pub records: Vec<ArrivalRecord>,
    /// Source positions; kept apart from [`DatasetView`].
    pub truth: Vec<Source>,
    pub failures: Vec<SourceFailure>,
}

/// What reconstruction is allowed to see: metadata and records, no source positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub meta: DatasetMeta,
    pub records: Vec<ArrivalRecord>,
}

impl ObservationDataset {
    pub fn view(&self) -> DatasetView {
        DatasetView { meta: self.meta.clone(), records: self.records.clone() }
    }
}

/// Checks the source-region hypothesis `q ∈ I⁻(p⁺) ∖ J⁻(p⁻)`.
pub fn in_source_region(metric: &Metric, q: &Vec4, p_minus: &Vec4, p_plus: &Vec4) -> Result<bool> {
    let opts = TauOptions::default();
    Ok(chronological(metric, q, p_plus, &opts)? && causal_relation(metric, q, p_minus, &opts)? == CausalRelation::None)
}

/// Runs the forward model for every source and assembles the sorted dataset.
pub fn assemble_dataset(
    metric: &Metric,
    observers: &Observers,
    sources: &[Source],
    p_minus: &Vec4,
    p_plus: &Vec4,
    cfg: &ForwardConfig,
) -> Result<ObservationDataset> {
    let n = metric.dim();
    let mut seen = BTreeSet::new();
    for s in sources {
        if !seen.insert(s.id) {
            return Err(Error::DuplicateSource(s.id));
        }
        if s.x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.x.len() });
        }
    }
    let results: Vec<(usize, Result<Vec<ArrivalRecord>>)> = sources
        .par_iter()
        .map(|s| {
            let q = point(&s.x);
            let r = match in_source_region(metric, &q, p_minus, p_plus) {
                Ok(true) => light_observation_set(metric, observers, s.id, &q, cfg),
                Ok(false) => Err(Error::SourceOutsideRegion(s.id)),
                Err(e) => Err(e),
            };
            (s.id, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => failures.push(SourceFailure { source_id: id, error: e.to_string() }),
        }
    }
    records.sort_by(|a, b| {
        a.source_id.cmp(&b.source_id).then(a.observer_id.cmp(&b.observer_id)).then(a.s.total_cmp(&b.s))
    });
    let meta = DatasetMeta {
        config_hash: String::new(),
        dim: n,
        grid: observers.grid.clone(),
        p_minus: p_minus[..n].to_vec(),
        p_plus: p_plus[..n].to_vec(),
        forward: *cfg,
        source_count: sources.len(),
        truth_withheld: false,
    };
    Ok(ObservationDataset { meta, records, truth: sources.to_vec(), failures })
}
