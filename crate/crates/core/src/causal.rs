//! Time separation, causal relations, observer worldlines and congruences,
//! earliest-observation functions and Fermi-type charts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{geodesic_rhs, pack, unpack};
use crate::metric::{bilinear, Family, Metric, Vec4, MAX_DIM};
use crate::ode::{self, Control, OdeOptions, OdeStatus};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauOptions {
    /// τ above this counts as "positive".
    pub pos_tol: f64,
    /// Residual bound for a null connector.
    pub null_tol: f64,
    /// Extra shooting starts besides the chord seed.
    pub seeds: usize,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub ode_tol: f64,
}

impl Default for TauOptions {
    fn default() -> Self {
        Self { pos_tol: 1e-6, null_tol: 1e-6, seeds: 8, newton_tol: 1e-10, max_iter: 40, ode_tol: 1e-11 }
    }
}

impl TauOptions {
    /// Threshold used when bisecting the earliest-observation predicate. On the
    /// worldline itself τ grows linearly in `s`, so the positivity threshold
    /// must sit well below the bisection tolerance.
    pub fn earliest() -> Self {
        Self { pos_tol: 1e-12, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub tau: f64,
    /// True when no shooting start converged and `tau` is only a lower bound.
    pub approximate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalRelation {
    Chronological,
    Horismos,
    None,
}

// ---- spatial distances with closed forms -------------------------------

fn sphere_embed(dim: usize, x: &Vec4) -> [f64; 4] {
    match dim {
        3 => {
            let (th, ph) = (x[1], x[2]);
            [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos(), 0.0]
        }
        4 => {
            let (ch, th, ph) = (x[1], x[2], x[3]);
            [ch.cos(), ch.sin() * th.cos(), ch.sin() * th.sin() * ph.cos(), ch.sin() * th.sin() * ph.sin()]
        }
        _ => unreachable!("sphere embedding only for dim 3, 4"),
    }
}

/// Spatial distance for the families whose τ has a closed form, `None` otherwise.
fn closed_form_distance(metric: &Metric, x: &Vec4, y: &Vec4) -> Option<f64> {
    let n = metric.dim();
    match metric.family() {
        Family::Minkowski => Some((1..n).map(|a| (y[a] - x[a]).powi(2)).sum::<f64>().sqrt()),
        Family::EinsteinCylinder => {
            let r = metric.spec().params.get("radius").copied().unwrap_or(1.0);
            if n == 2 {
                Some(r * crate::metric::wrap_angle(y[1] - x[1]).abs())
            } else {
                let a = sphere_embed(n, x);
                let b = sphere_embed(n, y);
                let chord = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
                Some(r * 2.0 * (0.5 * chord).min(1.0).asin())
            }
        }
        _ => None,
    }
}

fn tau_from_distance(dt: f64, d: f64) -> f64 {
    if dt > d {
        ((dt - d) * (dt + d)).sqrt()
    } else {
        0.0
    }
}

// ---- shooting ----------------------------------------------------------

/// `exp_x(v)` or `None` when the geodesic leaves the domain or the step fails.
pub(crate) fn endpoint(metric: &Metric, x: &Vec4, v: &Vec4, tol: f64) -> Option<Vec4> {
    let mut left = false;
    let r = ode::integrate(
        |_, y| geodesic_rhs(metric, y),
        0.0,
        pack(x, v),
        1.0,
        &OdeOptions::with_tol(tol),
        |_, y| {
            let (xn, _) = unpack(y);
            if metric.contains(&xn) {
                Control::Continue
            } else {
                left = true;
                Control::Stop
            }
        },
    );
    if left || r.status != OdeStatus::Finished {
        return None;
    }
    Some(unpack(&r.y).0)
}

/// Damped Gauss–Newton with a forward-difference Jacobian.
/// Returns the best iterate and its residual norm.
pub(crate) fn gauss_newton<F>(f: F, mut u: Vec<f64>, tol: f64, max_iter: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let norm = |r: &[f64]| r.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut r = f(&u)?;
    let mut rn = norm(&r);
    let m = r.len();
    let k = u.len();
    for _ in 0..max_iter {
        if rn < tol {
            break;
        }
        let mut jac = DMatrix::zeros(m, k);
        for j in 0..k {
            let h = 1e-7 * (1.0 + u[j].abs());
            let mut up = u.clone();
            up[j] += h;
            let rp = f(&up)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rhs = DVector::from_iterator(m, r.iter().map(|c| -c));
        let du = jac.svd(true, true).solve(&rhs, 1e-14).ok()?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let trial: Vec<f64> = u.iter().zip(du.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(rt) = f(&trial) {
                let nt = norm(&rt);
                if nt < rn {
                    u = trial;
                    r = rt;
                    rn = nt;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some((u, rn))
}

fn seed_perturbations(n: usize, chord: &Vec4, count: usize) -> Vec<Vec4> {
    let scale = (1..n).map(|a| chord[a] * chord[a]).sum::<f64>().sqrt().max(0.1 * chord[0].abs()).max(1e-3);
    let mut seeds = vec![*chord];
    for i in 0..count {
        let mut s = *chord;
        let axis = 1 + i % (n - 1);
        let sign = if (i / (n - 1)) % 2 == 0 { 1.0 } else { -1.0 };
        let mag = 0.25 * (1.0 + (i / (2 * (n - 1))) as f64);
        s[axis] += sign * mag * scale;
        seeds.push(s);
    }
    seeds
}

/// Timelike geodesic connectors from `x` to `y`; returns the largest proper time found.
fn shoot_timelike(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> Option<f64> {
    let n = metric.dim();
    let chord = metric.chart_difference(x, y);
    let mut best: Option<f64> = None;
    let residual = |u: &[f64]| {
        let v = crate::metric::point(u);
        let e = endpoint(metric, x, &v, opts.ode_tol)?;
        let d = metric.chart_difference(y, &e);
        Some(d[..n].to_vec())
    };
    for seed in seed_perturbations(n, &chord, opts.seeds) {
        if let Some((u, rn)) = gauss_newton(residual, seed[..n].to_vec(), opts.newton_tol, opts.max_iter) {
            if rn < 1e3 * opts.newton_tol {
                let v = crate::metric::point(&u);
                let gv = metric.norm_sq(x, &v);
                if gv < 0.0 && v[0] > 0.0 {
                    let tau = (-gv).sqrt();
                    best = Some(best.map_or(tau, |b: f64| b.max(tau)));
                }
            }
        }
    }
    best
}

/// Smallest residual of a future null connector from `x` to `y`.
fn shoot_null(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> f64 {
    let n = metric.dim();
    let chord = metric.chart_difference(x, y);
    let residual = |u: &[f64]| {
        let mut v = [0.0; MAX_DIM];
        v[1..n].copy_from_slice(u);
        let v = metric.future_null(x, &v);
        let e = endpoint(metric, x, &v, opts.ode_tol)?;
        Some(metric.chart_difference(y, &e)[..n].to_vec())
    };
    let mut best = f64::INFINITY;
    for seed in seed_perturbations(n, &chord, opts.seeds) {
        if let Some((_, rn)) = gauss_newton(residual, seed[1..n].to_vec(), 1e-12, opts.max_iter) {
            best = best.min(rn);
            if best < 1e-3 * opts.null_tol {
                break;
            }
        }
    }
    best
}

/// Riemannian distance in the spatial slice of a product metric, by geodesic shooting.
/// Falls back to the length of the coordinate chord (an upper bound) when no start converges.
pub fn spatial_distance(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> (f64, bool) {
    let n = metric.dim();
    let base = *x;
    let chord = metric.chart_difference(x, y);
    let residual = |u: &[f64]| {
        let mut v = [0.0; MAX_DIM];
        v[1..n].copy_from_slice(u);
        let e = endpoint(metric, &base, &v, opts.ode_tol)?;
        let d = metric.chart_difference(y, &e);
        Some(d[1..n].to_vec())
    };
    let mut best: Option<f64> = None;
    let mut seed_chord = chord;
    seed_chord[0] = 0.0;
    if (1..n).all(|a| chord[a] == 0.0) {
        return (0.0, false);
    }
    for seed in seed_perturbations(n, &seed_chord, opts.seeds) {
        if let Some((u, rn)) = gauss_newton(residual, seed[1..n].to_vec(), opts.newton_tol, opts.max_iter) {
            if rn < 1e3 * opts.newton_tol {
                let mut v = [0.0; MAX_DIM];
                v[1..n].copy_from_slice(&u);
                let d = metric.norm_sq(&base, &v).max(0.0).sqrt();
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
    }
    match best {
        Some(d) => (d, false),
        None => {
            // chord length by composite Simpson
            let m = 64;
            let mut len = 0.0;
            for i in 0..=m {
                let t = i as f64 / m as f64;
                let mut p = *x;
                for a in 1..n {
                    p[a] = x[a] + t * chord[a];
                }
                let mut w = [0.0; MAX_DIM];
                w[1..n].copy_from_slice(&chord[1..n]);
                let f = metric.norm_sq(&p, &w).max(0.0).sqrt();
                let c = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                len += c * f;
            }
            (len / (3.0 * m as f64), true)
        }
    }
}

fn check_domain(metric: &Metric, x: &Vec4) -> Result<()> {
    if metric.contains(x) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { x: x[..metric.dim()].to_vec() })
    }
}

/// Lorentzian time separation `τ(x, y)`.
pub fn time_separation(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> Result<TauResult> {
    check_domain(metric, x)?;
    check_domain(metric, y)?;
    let dt = y[0] - x[0];
    if dt <= 0.0 {
        return Ok(TauResult { tau: 0.0, approximate: false });
    }
    if let Some(d) = closed_form_distance(metric, x, y) {
        return Ok(TauResult { tau: tau_from_distance(dt, d), approximate: false });
    }
    match metric.family() {
        Family::ProductSpatial => {
            let (d, approx) = spatial_distance(metric, x, y, opts);
            Ok(TauResult { tau: tau_from_distance(dt, d), approximate: approx })
        }
        Family::ConformalBump if metric.is_flat() => {
            let d = (1..metric.dim()).map(|a| (y[a] - x[a]).powi(2)).sum::<f64>().sqrt();
            Ok(TauResult { tau: tau_from_distance(dt, d), approximate: false })
        }
        _ => {
            if metric.family() == Family::ConformalBump && !flat_relation_chronological(metric, x, y, 0.0) {
                return Ok(TauResult { tau: 0.0, approximate: false });
            }
            match shoot_timelike(metric, x, y, opts) {
                Some(tau) => Ok(TauResult { tau, approximate: false }),
                None => Ok(TauResult { tau: 0.0, approximate: true }),
            }
        }
    }
}

fn flat_gap(metric: &Metric, x: &Vec4, y: &Vec4) -> (f64, f64) {
    let dt = y[0] - x[0];
    let d = (1..metric.dim()).map(|a| (y[a] - x[a]).powi(2)).sum::<f64>().sqrt();
    (dt, d)
}

fn flat_relation_chronological(metric: &Metric, x: &Vec4, y: &Vec4, tol: f64) -> bool {
    let (dt, d) = flat_gap(metric, x, y);
    tau_from_distance(dt, d) > tol
}

/// Classifies the pair `(x, y)`; conformally flat metrics use the flat light cone,
/// which they share exactly.
pub fn causal_relation(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> Result<CausalRelation> {
    check_domain(metric, x)?;
    check_domain(metric, y)?;
    let classify = |dt: f64, d: f64| {
        if tau_from_distance(dt, d) > opts.pos_tol {
            CausalRelation::Chronological
        } else if dt >= 0.0 && (dt - d).abs() <= opts.null_tol {
            CausalRelation::Horismos
        } else {
            CausalRelation::None
        }
    };
    if let Some(d) = closed_form_distance(metric, x, y) {
        return Ok(classify(y[0] - x[0], d));
    }
    match metric.family() {
        Family::ConformalBump => {
            let (dt, d) = flat_gap(metric, x, y);
            Ok(classify(dt, d))
        }
        Family::ProductSpatial => {
            let dt = y[0] - x[0];
            if dt < 0.0 {
                return Ok(CausalRelation::None);
            }
            let (d, approx) = spatial_distance(metric, x, y, opts);
            if approx && dt <= d {
                return Err(Error::IndeterminateRelation("spatial distance solver did not converge".into()));
            }
            Ok(classify(dt, d))
        }
        _ => {
            if y[0] - x[0] <= 0.0 {
                return Ok(CausalRelation::None);
            }
            let tau = time_separation(metric, x, y, opts)?;
            if tau.tau > opts.pos_tol {
                return Ok(CausalRelation::Chronological);
            }
            if shoot_null(metric, x, y, opts) < opts.null_tol {
                return Ok(CausalRelation::Horismos);
            }
            let chord = metric.chart_difference(x, y);
            if tau.approximate && metric.norm_sq(x, &chord) < 0.0 {
                return Err(Error::IndeterminateRelation("no connector found for a timelike chord".into()));
            }
            Ok(CausalRelation::None)
        }
    }
}

/// `τ(x, y) > pos_tol`, using the cheapest exact route available.
pub fn chronological(metric: &Metric, x: &Vec4, y: &Vec4, opts: &TauOptions) -> Result<bool> {
    check_domain(metric, x)?;
    check_domain(metric, y)?;
    if let Some(d) = closed_form_distance(metric, x, y) {
        return Ok(tau_from_distance(y[0] - x[0], d) > opts.pos_tol);
    }
    match metric.family() {
        Family::ConformalBump => Ok(flat_relation_chronological(metric, x, y, opts.pos_tol)),
        _ => Ok(time_separation(metric, x, y, opts)?.tau > opts.pos_tol),
    }
}

// ---- observers ---------------------------------------------------------

/// A freely falling observer `s ↦ μ(s) = exp_z(sη)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverSpec {
    pub id: usize,
    pub z: Vec4,
    pub eta: Vec4,
    pub s_range: [f64; 2],
}

impl ObserverSpec {
    pub fn new(metric: &Metric, id: usize, z: Vec4, eta: Vec4, s_range: [f64; 2]) -> Result<Self> {
        check_domain(metric, &z)?;
        let gv = metric.norm_sq(&z, &eta);
        if !(gv < 0.0) || eta[0] <= 0.0 {
            return Err(Error::InvalidObserver(format!("observer {id}: η must be future timelike")));
        }
        if s_range[0] > 0.0 || s_range[1] < 0.0 || s_range[0] >= s_range[1] {
            return Err(Error::InvalidObserver(format!("observer {id}: s-range must contain 0")));
        }
        let f = 1.0 / (-gv).sqrt();
        Ok(Self { id, z, eta: eta.map(|c| c * f), s_range })
    }
}

/// Observer worldline tabulated on a uniform grid, evaluated by cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct Worldline {
    pub spec: ObserverSpec,
    dim: usize,
    s0: f64,
    ds: f64,
    x: Vec<Vec4>,
    v: Vec<Vec4>,
    a: Vec<Vec4>,
}

/// Grid spacing of worldline tables.
const WORLDLINE_DS: f64 = 5e-3;

impl Worldline {
    pub fn new(metric: &Metric, spec: &ObserverSpec) -> Result<Self> {
        let [sa, sb] = spec.s_range;
        let count = ((sb - sa) / WORLDLINE_DS).ceil().max(8.0) as usize;
        let ds = (sb - sa) / count as f64;
        let i0 = ((0.0 - sa) / ds).round() as usize;
        let s0 = -(i0 as f64) * ds;
        let mut xs = vec![[0.0; MAX_DIM]; count + 1];
        let mut vs = vec![[0.0; MAX_DIM]; count + 1];
        let start = pack(&spec.z, &spec.eta);
        let opts = OdeOptions { h_max: ds, ..OdeOptions::with_tol(1e-12) };
        let last_s = s0 + count as f64 * ds;
        for (dir, end) in [(1.0, last_s), (-1.0, s0)] {
            let mut left = false;
            let mut idx = i0 as isize;
            let res = ode::integrate(
                |_, y| geodesic_rhs(metric, y),
                0.0,
                start,
                end,
                &opts,
                |step, y| {
                    let (xn, _) = unpack(y);
                    if !metric.contains(&xn) {
                        left = true;
                        return Control::Stop;
                    }
                    while idx >= 0 && idx <= count as isize {
                        let s = s0 + idx as f64 * ds;
                        let inside = if dir > 0.0 { s <= step.t1 + 1e-14 } else { s >= step.t1 - 1e-14 };
                        if !inside {
                            break;
                        }
                        let (xx, vv) = unpack(&step.at(s));
                        xs[idx as usize] = xx;
                        vs[idx as usize] = vv;
                        idx += if dir > 0.0 { 1 } else { -1 };
                    }
                    Control::Continue
                },
            );
            if left {
                return Err(Error::DomainEscape { members: vec![spec.id] });
            }
            if res.status != OdeStatus::Finished {
                let (x, v) = unpack(&res.y);
                return Err(Error::StepFailure { s: res.t, x, v });
            }
        }
        xs[i0] = spec.z;
        vs[i0] = spec.eta;
        let a = xs.iter().zip(&vs).map(|(x, v)| metric.accel(x, v)).collect();
        Ok(Self { spec: spec.clone(), dim: metric.dim(), s0, ds, x: xs, v: vs, a })
    }

    pub fn s_range(&self) -> [f64; 2] {
        self.spec.s_range
    }

    /// Position and velocity at `s` (clamped to the tabulated range).
    pub fn at(&self, s: f64) -> (Vec4, Vec4) {
        let last = self.x.len() - 1;
        let u = ((s - self.s0) / self.ds).clamp(0.0, last as f64);
        let i = (u.floor() as usize).min(last - 1);
        let t = u - i as f64;
        let h = self.ds;
        let (h00, h10, h01, h11) = (
            2.0 * t.powi(3) - 3.0 * t * t + 1.0,
            t.powi(3) - 2.0 * t * t + t,
            -2.0 * t.powi(3) + 3.0 * t * t,
            t.powi(3) - t * t,
        );
        let mut x = [0.0; MAX_DIM];
        let mut v = [0.0; MAX_DIM];
        for k in 0..self.dim {
            x[k] = h00 * self.x[i][k] + h10 * h * self.v[i][k] + h01 * self.x[i + 1][k] + h11 * h * self.v[i + 1][k];
            v[k] = h00 * self.v[i][k] + h10 * h * self.a[i][k] + h01 * self.v[i + 1][k] + h11 * h * self.a[i + 1][k];
        }
        (x, v)
    }

    pub fn position(&self, s: f64) -> Vec4 {
        self.at(s).0
    }

    /// Position at coordinate time `t` by linear interpolation of the table (sweep accuracy only).
    pub fn coarse_position_at_time(&self, t: f64) -> Option<Vec4> {
        let last = self.x.len() - 1;
        if t < self.x[0][0] || t > self.x[last][0] {
            return None;
        }
        let i = self.x.partition_point(|p| p[0] <= t).saturating_sub(1).min(last - 1);
        let (a, b) = (&self.x[i], &self.x[i + 1]);
        let w = (t - a[0]) / (b[0] - a[0]).max(1e-300);
        let mut out = [0.0; MAX_DIM];
        for k in 0..self.dim {
            out[k] = a[k] + w * (b[k] - a[k]);
        }
        Some(out)
    }

    /// Coordinate-time span covered by the table.
    pub fn time_span(&self) -> [f64; 2] {
        [self.x[0][0], self.x[self.x.len() - 1][0]]
    }

    /// Parameter at which the worldline reaches coordinate time `t`, if inside the range.
    pub fn s_at_time(&self, t: f64) -> Option<f64> {
        let first = self.x[0][0];
        let last = self.x[self.x.len() - 1][0];
        if t < first || t > last {
            return None;
        }
        let i = self.x.partition_point(|p| p[0] <= t).saturating_sub(1).min(self.x.len() - 2);
        let mut a = self.s0 + i as f64 * self.ds;
        let mut b = a + self.ds;
        let mut s = a + self.ds * (t - self.x[i][0]) / (self.x[i + 1][0] - self.x[i][0]).max(1e-300);
        for _ in 0..60 {
            let (x, v) = self.at(s);
            let f = x[0] - t;
            if f.abs() < 1e-15 * (1.0 + t.abs()) {
                break;
            }
            if f > 0.0 {
                b = s;
            } else {
                a = s;
            }
            let mut next = s - f / v[0];
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            s = next;
        }
        Some(s)
    }
}

/// Sampled observer family around a central observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGrid {
    pub center_z: Vec4,
    pub center_eta: Vec4,
    pub h_hat: f64,
    pub members: Vec<ObserverSpec>,
    /// Half the widest nearest-neighbor gap among the members.
    pub tube_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongruenceOptions {
    pub count: usize,
    pub s_range: [f64; 2],
    /// Fraction of `ĥ` allotted to velocity perturbations; 0 gives parallel initial velocities.
    pub velocity_scale: f64,
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 6] = [2, 3, 5, 7, 11, 13];

/// Halton point `i` mapped into the unit ball of dimension `d` (radial stretch of the cube).
fn halton_ball(i: usize, d: usize) -> Vec<f64> {
    let cube: Vec<f64> = (0..d).map(|k| 2.0 * radical_inverse(i, PRIMES[k]) - 1.0).collect();
    let linf = cube.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let l2 = cube.iter().map(|c| c * c).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return cube;
    }
    cube.iter().map(|c| c * linf / l2).collect()
}

/// g-orthonormal frame whose first vector is `eta`.
pub fn frame_with_timelike(metric: &Metric, x: &Vec4, eta: &Vec4) -> [Vec4; MAX_DIM] {
    let n = metric.dim();
    let g = metric.g(x);
    let mut frame = [[0.0; MAX_DIM]; MAX_DIM];
    let e0n = (-bilinear(n, &g, eta, eta)).sqrt();
    frame[0] = eta.map(|c| c / e0n);
    for a in 1..n {
        let mut v = [0.0; MAX_DIM];
        v[a] = 1.0;
        for b in 0..a {
            let eb = frame[b];
            let sign = if b == 0 { -1.0 } else { 1.0 };
            let proj = bilinear(n, &g, &v, &eb) * sign;
            for i in 0..n {
                v[i] -= proj * eb[i];
            }
        }
        let nrm = bilinear(n, &g, &v, &v).abs().sqrt();
        frame[a] = v.map(|c| c / nrm);
    }
    frame
}

/// Deterministic observer family in the ball of radius `ĥ` around `(z₀, η₀)`.
pub fn observer_congruence(
    metric: &Metric,
    z0: &Vec4,
    eta0: &Vec4,
    h_hat: f64,
    opts: &CongruenceOptions,
) -> Result<ObserverGrid> {
    let n = metric.dim();
    let center = ObserverSpec::new(metric, 0, *z0, *eta0, opts.s_range)?;
    let mut members = vec![center.clone()];
    if h_hat > 0.0 {
        let frame = frame_with_timelike(metric, z0, &center.eta);
        let vel = opts.velocity_scale > 0.0;
        let d = if vel { 2 * (n - 1) } else { n - 1 };
        let mut i = 1;
        while members.len() < opts.count.max(1) {
            let p = halton_ball(i, d);
            i += 1;
            let mut z = *z0;
            let mut eta = center.eta;
            for a in 1..n {
                for k in 0..n {
                    z[k] += h_hat * p[a - 1] * frame[a][k];
                    if vel {
                        eta[k] += h_hat * opts.velocity_scale * p[n - 2 + a] * frame[a][k];
                    }
                }
            }
            metric.wrap(&mut z);
            let id = members.len();
            members.push(ObserverSpec::new(metric, id, z, eta, opts.s_range)?);
        }
    }
    let mut escaped = Vec::new();
    for m in &members {
        if let Err(Error::DomainEscape { .. }) = Worldline::new(metric, m) {
            escaped.push(m.id);
        }
    }
    if !escaped.is_empty() {
        return Err(Error::DomainEscape { members: escaped });
    }
    let tube_tol = tube_tolerance(metric, &members);
    Ok(ObserverGrid { center_z: *z0, center_eta: center.eta, h_hat, members, tube_tol })
}

fn tube_tolerance(metric: &Metric, members: &[ObserverSpec]) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let mut widest = 0.0f64;
    for a in members {
        let gp = metric.companion_at(&a.z);
        let nearest = members
            .iter()
            .filter(|b| b.id != a.id)
            .map(|b| {
                let d = metric.chart_difference(&a.z, &b.z);
                bilinear(metric.dim(), &gp, &d, &d).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        widest = widest.max(nearest);
    }
    0.5 * widest
}

/// Runtime view of a congruence: the grid plus tabulated worldlines.
#[derive(Debug, Clone)]
pub struct Observers {
    pub grid: ObserverGrid,
    pub worldlines: Vec<Worldline>,
}

impl Observers {
    pub fn new(metric: &Metric, grid: ObserverGrid) -> Result<Self> {
        let worldlines = grid.members.iter().map(|m| Worldline::new(metric, m)).collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, worldlines })
    }

    /// g⁺ distance from `x` to the nearest worldline at equal coordinate time.
    pub fn tube_distance(&self, metric: &Metric, x: &Vec4) -> f64 {
        let gp = metric.companion_at(x);
        self.worldlines
            .iter()
            .filter_map(|w| w.s_at_time(x[0]).map(|s| w.position(s)))
            .map(|p| {
                let d = metric.chart_difference(&p, x);
                bilinear(metric.dim(), &gp, &d, &d).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Membership in the observation tube `U_g`.
    pub fn in_tube(&self, metric: &Metric, x: &Vec4) -> bool {
        let tol = if self.worldlines.len() < 2 { 1e-9 } else { self.grid.tube_tol };
        self.tube_distance(metric, x) < tol
    }
}

/// Observer-time schedule `s₋₂ < s₋₁ < s₊₁ < s₊₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub s_minus2: f64,
    pub s_minus1: f64,
    pub s_plus1: f64,
    pub s_plus2: f64,
}

impl Schedule {
    pub fn is_ordered(&self) -> bool {
        self.s_minus2 < self.s_minus1 && self.s_minus1 < self.s_plus1 && self.s_plus1 < self.s_plus2
    }

    /// Diamond endpoints `(p⁻, p⁺) = (μ₀(s₋₁), μ₀(s₊₁))`.
    pub fn diamond(&self, center: &Worldline) -> (Vec4, Vec4) {
        (center.position(self.s_minus1), center.position(self.s_plus1))
    }
}

/// Checks `μ(s₋₂) ≪ μ₀(s₋₁)` and `μ₀(s₊₁) ≪ μ(s₊₂)` for every member.
pub fn check_schedule(metric: &Metric, obs: &Observers, sched: &Schedule) -> Result<()> {
    if !sched.is_ordered() {
        return Err(Error::InvalidObserver("schedule must satisfy s₋₂ < s₋₁ < s₊₁ < s₊₂".into()));
    }
    let center = &obs.worldlines[0];
    let (pm, pp) = sched.diamond(center);
    let opts = TauOptions::default();
    let mut bad = Vec::new();
    for w in &obs.worldlines {
        let [sa, sb] = w.s_range();
        if sched.s_minus2 < sa || sched.s_plus2 > sb {
            bad.push(w.spec.id);
            continue;
        }
        let early = w.position(sched.s_minus2);
        let late = w.position(sched.s_plus2);
        if !chronological(metric, &early, &pm, &opts)? || !chronological(metric, &pp, &late, &opts)? {
            bad.push(w.spec.id);
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidObserver(format!("schedule conditions fail for members {bad:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarliestObs {
    pub s: f64,
    pub x: Vec4,
    /// The predicate did not switch inside the interval; `s` is the boundary value.
    pub boundary: bool,
}

/// Bisection tolerance in `s` for the earliest-observation functions.
pub const F_PLUS_TOL: f64 = 1e-8;

/// `f⁺_μ(q) = inf{s : τ(q, μ(s)) > 0}` (or `f⁻_μ(q) = sup{s : τ(μ(s), q) > 0}`).
pub fn earliest_obs_time(metric: &Metric, mu: &Worldline, q: &Vec4, sign: Sign, opts: &TauOptions) -> Result<EarliestObs> {
    let [sa, sb] = mu.s_range();
    let pred = |s: f64| -> Result<bool> {
        let p = mu.position(s);
        match sign {
            Sign::Plus => chronological(metric, q, &p, opts),
            Sign::Minus => chronological(metric, &p, q, opts),
        }
    };
    // orient so that the predicate is false at `a`, true at `b`
    let (a0, b0) = match sign {
        Sign::Plus => (sa, sb),
        Sign::Minus => (sb, sa),
    };
    if pred(a0)? {
        return Ok(EarliestObs { s: a0, x: mu.position(a0), boundary: true });
    }
    if !pred(b0)? {
        return Err(Error::NotObserved { observer: mu.spec.id });
    }
    let (mut a, mut b) = (a0, b0);
    while (b - a).abs() > F_PLUS_TOL {
        let m = 0.5 * (a + b);
        if pred(m)? {
            b = m;
        } else {
            a = m;
        }
    }
    let s = 0.5 * (a + b);
    Ok(EarliestObs { s, x: mu.position(s), boundary: false })
}

// ---- Fermi-type charts -------------------------------------------------

const FN: usize = 8 + MAX_DIM * (MAX_DIM - 1);

fn transport_rhs(metric: &Metric, y: &[f64; FN]) -> [f64; FN] {
    let n = metric.dim();
    let (x, v) = unpack(y);
    let gam = metric.christoffel_at(&x);
    let mut out = [0.0; FN];
    out[..4].copy_from_slice(&v);
    out[4..8].copy_from_slice(&metric.accel(&x, &v));
    for j in 0..n - 1 {
        let off = 8 + j * MAX_DIM;
        for k in 0..n {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += gam[k][a][b] * v[a] * y[off + b];
                }
            }
            out[off + k] = -s;
        }
    }
    out
}

/// Parallel-transported frame `(μ(s); μ̇, Z₂, …, Z_n)` at parameter `s`.
pub fn parallel_frame(metric: &Metric, mu: &ObserverSpec, s: f64) -> Result<(Vec4, [Vec4; MAX_DIM])> {
    let n = metric.dim();
    let frame0 = frame_with_timelike(metric, &mu.z, &mu.eta);
    let mut y0 = [0.0; FN];
    y0[..4].copy_from_slice(&mu.z);
    y0[4..8].copy_from_slice(&mu.eta);
    for j in 0..n - 1 {
        y0[8 + j * MAX_DIM..8 + (j + 1) * MAX_DIM].copy_from_slice(&frame0[j + 1]);
    }
    let r = ode::solve(|_, y| transport_rhs(metric, y), 0.0, y0, s, &OdeOptions::with_tol(1e-12));
    if r.status != OdeStatus::Finished {
        let (x, v) = unpack(&r.y);
        return Err(Error::StepFailure { s: r.t, x, v });
    }
    let (x, v) = unpack(&r.y);
    let mut frame = [[0.0; MAX_DIM]; MAX_DIM];
    frame[0] = v;
    for j in 0..n - 1 {
        frame[j + 1].copy_from_slice(&r.y[8 + j * MAX_DIM..8 + (j + 1) * MAX_DIM]);
    }
    Ok((x, frame))
}

/// `Φ(t₁, …, t_n) = exp_{μ(t₁)}(Σ_{j≥2} t_j Z_j(t₁))`.
pub fn fermi_map(metric: &Metric, mu: &ObserverSpec, t: &Vec4) -> Result<Vec4> {
    let n = metric.dim();
    let (base, frame) = parallel_frame(metric, mu, t[0])?;
    let mut v = [0.0; MAX_DIM];
    for j in 1..n {
        for k in 0..n {
            v[k] += t[j] * frame[j][k];
        }
    }
    if v.iter().all(|c| *c == 0.0) {
        return Ok(base);
    }
    endpoint(metric, &base, &v, 1e-12).ok_or_else(|| Error::OutOfDomain { x: base[..n].to_vec() })
}

/// Inverts the Fermi map at `e` by Newton iteration seeded from the flat chart.
pub fn fermi_chart(metric: &Metric, mu: &ObserverSpec, e: &Vec4) -> Result<Vec4> {
    check_domain(metric, e)?;
    let n = metric.dim();
    let frame = frame_with_timelike(metric, &mu.z, &mu.eta);
    let g = metric.g(&mu.z);
    let d = metric.chart_difference(&mu.z, e);
    let mut seed = vec![0.0; n];
    seed[0] = -bilinear(n, &g, &d, &frame[0]);
    for j in 1..n {
        seed[j] = bilinear(n, &g, &d, &frame[j]);
    }
    let residual = |u: &[f64]| {
        let t = crate::metric::point(u);
        let p = fermi_map(metric, mu, &t).ok()?;
        Some(metric.chart_difference(e, &p)[..n].to_vec())
    };
    let (u, rn) = gauss_newton(residual, seed, 1e-12, 50)
        .ok_or_else(|| Error::OutOfChart("Fermi map undefined at the seed".into()))?;
    if rn > 1e-9 {
        return Err(Error::OutOfChart(format!("Newton residual {rn:.3e} after 50 iterations")));
    }
    Ok(crate::metric::point(&u))
}
