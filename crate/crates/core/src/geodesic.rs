//! Geodesic and Jacobi-field integration, first conjugate points, the modified
//! null cut parameter and escape from causal diamonds.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::causal::{causal_relation, CausalRelation, TauOptions};
use crate::error::{Error, Result};
use crate::metric::{CausalCharacter, Metric, Vec4, MAX_DIM};
use crate::ode::{self, Control, OdeOptions, OdeStatus, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ReachedParam,
    LeftDomain,
    LeftDiamond,
    /// Halted early by a caller-supplied step observer.
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSample {
    pub s: f64,
    pub x: Vec4,
    pub v: Vec4,
    /// `g(ẋ, ẋ)` at this sample.
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicOptions {
    pub tol: f64,
    /// Accepted steps between projections back onto the initial norm shell.
    pub renorm_every: usize,
    pub max_steps: usize,
    pub h_max: f64,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        Self { tol: 1e-9, renorm_every: 50, max_steps: 200_000, h_max: f64::INFINITY }
    }
}

impl GeodesicOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }

    fn ode(&self) -> OdeOptions {
        OdeOptions { max_steps: self.max_steps, h_max: self.h_max, ..OdeOptions::with_tol(self.tol) }
    }
}

/// An integrated geodesic `s ↦ exp_x(sξ)`. Samples are ordered along the
/// direction of integration (increasing `s` when `s_max > 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSegment {
    pub dim: usize,
    pub x0: Vec4,
    pub xi0: Vec4,
    pub character: CausalCharacter,
    pub samples: Vec<GeodesicSample>,
    pub termination: Termination,
    pub tol: f64,
}

pub(crate) fn pack(x: &Vec4, v: &Vec4) -> [f64; 8] {
    let mut y = [0.0; 8];
    y[..4].copy_from_slice(x);
    y[4..].copy_from_slice(v);
    y
}

pub(crate) fn unpack(y: &[f64]) -> (Vec4, Vec4) {
    let mut x = [0.0; MAX_DIM];
    let mut v = [0.0; MAX_DIM];
    x.copy_from_slice(&y[..4]);
    v.copy_from_slice(&y[4..8]);
    (x, v)
}

pub(crate) fn geodesic_rhs(metric: &Metric, y: &[f64; 8]) -> [f64; 8] {
    let (x, v) = unpack(y);
    let a = metric.accel(&x, &v);
    let mut out = [0.0; 8];
    out[..4].copy_from_slice(&v);
    out[4..].copy_from_slice(&a);
    out
}

/// Pulls the velocity back onto the shell `g(v,v) = target`.
pub(crate) fn renormalize(metric: &Metric, character: CausalCharacter, target: f64, x: &Vec4, v: &mut Vec4) {
    match character {
        CausalCharacter::Null => {
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            let flipped = v.map(|c| sign * c);
            let fixed = metric.future_null(x, &flipped);
            *v = fixed.map(|c| sign * c);
        }
        _ => {
            let cur = metric.norm_sq(x, v);
            if cur != 0.0 && cur.signum() == target.signum() {
                let f = (target / cur).sqrt();
                for c in v.iter_mut() {
                    *c *= f;
                }
            }
        }
    }
}

/// Integrates a geodesic with a per-step observer that may stop early.
pub fn trace_geodesic<C>(
    metric: &Metric,
    x: &Vec4,
    xi: &Vec4,
    s_max: f64,
    opts: &GeodesicOptions,
    mut on_step: C,
) -> Result<GeodesicSegment>
where
    C: FnMut(&Step<8>) -> Control,
{
    if !metric.contains(x) {
        return Err(Error::OutOfDomain { x: x[..metric.dim()].to_vec() });
    }
    let (character, norm0) = metric.classify(x, xi);
    let mut samples = vec![GeodesicSample { s: 0.0, x: *x, v: *xi, norm: norm0 }];
    let mut termination = Termination::ReachedParam;
    let mut count = 0usize;
    let res = ode::integrate(
        |_, y| geodesic_rhs(metric, y),
        0.0,
        pack(x, xi),
        s_max,
        &opts.ode(),
        |step, ynew| {
            let (xn, _) = unpack(ynew);
            if !metric.contains(&xn) {
                let s_exit = exit_param(step, metric);
                let y = step.at(s_exit);
                *ynew = y;
                termination = Termination::LeftDomain;
                let (xe, ve) = unpack(&y);
                samples.push(GeodesicSample { s: s_exit, x: xe, v: ve, norm: metric.norm_sq(&xe, &ve) });
                return Control::Stop;
            }
            count += 1;
            if opts.renorm_every > 0 && count % opts.renorm_every == 0 {
                let (xn, mut vn) = unpack(ynew);
                renormalize(metric, character, norm0, &xn, &mut vn);
                *ynew = pack(&xn, &vn);
            }
            let (xn, vn) = unpack(ynew);
            samples.push(GeodesicSample { s: step.t1, x: xn, v: vn, norm: metric.norm_sq(&xn, &vn) });
            let ctl = on_step(step);
            if ctl == Control::Stop {
                termination = Termination::Stopped;
            }
            ctl
        },
    );
    match res.status {
        OdeStatus::StepUnderflow | OdeStatus::MaxSteps => {
            let (xl, vl) = unpack(&res.y);
            return Err(Error::StepFailure { s: res.t, x: xl, v: vl });
        }
        _ => {}
    }
    Ok(GeodesicSegment { dim: metric.dim(), x0: *x, xi0: *xi, character, samples, termination, tol: opts.tol })
}

/// Locates the domain exit inside one step by bisection on the dense output.
fn exit_param(step: &Step<8>, metric: &Metric) -> f64 {
    let (mut a, mut b) = (step.t0, step.t1);
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let (x, _) = unpack(&step.at(m));
        if metric.contains(&x) {
            a = m;
        } else {
            b = m;
        }
        if (b - a).abs() < 1e-13 * (1.0 + a.abs()) {
            break;
        }
    }
    a
}

/// Integrates `ẍ^k + Γ^k_{ij}ẋ^iẋ^j = 0` from `(x, ξ)` up to `s_max` or domain exit.
pub fn integrate_geodesic(metric: &Metric, x: &Vec4, xi: &Vec4, s_max: f64, tol: f64) -> Result<GeodesicSegment> {
    trace_geodesic(metric, x, xi, s_max, &GeodesicOptions::with_tol(tol), |_| Control::Continue)
}

/// `exp_x(ξ)`.
pub fn exp_map(metric: &Metric, x: &Vec4, xi: &Vec4) -> Result<Vec4> {
    if xi.iter().all(|c| *c == 0.0) {
        if !metric.contains(x) {
            return Err(Error::OutOfDomain { x: x[..metric.dim()].to_vec() });
        }
        return Ok(*x);
    }
    let seg = integrate_geodesic(metric, x, xi, 1.0, 1e-10)?;
    let end = seg.end();
    if seg.termination == Termination::LeftDomain {
        return Err(Error::OutOfDomain { x: end.x[..metric.dim()].to_vec() });
    }
    Ok(end.x)
}

impl GeodesicSegment {
    pub fn end(&self) -> &GeodesicSample {
        self.samples.last().expect("segment has at least the initial sample")
    }

    pub fn s_end(&self) -> f64 {
        self.end().s
    }

    fn direction(&self) -> f64 {
        if self.s_end() >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Largest `|g(ẋ,ẋ) − g(ξ,ξ)|` over the samples.
    pub fn norm_drift(&self) -> f64 {
        let n0 = self.samples[0].norm;
        self.samples.iter().map(|s| (s.norm - n0).abs()).fold(0.0, f64::max)
    }

    /// Position and velocity at parameter `s`, re-integrated from the nearest
    /// preceding sample.
    pub fn state_at(&self, metric: &Metric, s: f64) -> Result<(Vec4, Vec4)> {
        let dir = self.direction();
        let idx = self.samples.partition_point(|p| (p.s - s) * dir <= 0.0);
        let base = &self.samples[idx.saturating_sub(1)];
        if base.s == s {
            return Ok((base.x, base.v));
        }
        let opts = OdeOptions::with_tol(self.tol);
        let r = ode::solve(|_, y| geodesic_rhs(metric, y), base.s, pack(&base.x, &base.v), s, &opts);
        if !matches!(r.status, OdeStatus::Finished) {
            let (x, v) = unpack(&r.y);
            return Err(Error::StepFailure { s: r.t, x, v });
        }
        Ok(unpack(&r.y))
    }

    /// Writes one JSON object per sample: `{"s", "x", "v", "g_vv"}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.samples {
            let line = serde_json::json!({
                "s": p.s,
                "x": &p.x[..self.dim],
                "v": &p.v[..self.dim],
                "g_vv": p.norm,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

// ---- Jacobi fields ------------------------------------------------------

const JN: usize = 8 + 2 * MAX_DIM * MAX_DIM;

/// Geodesic state plus the derivative `J = ∂γ/∂ξ` of the exponential map and `J'`.
fn jacobi_rhs(metric: &Metric, y: &[f64; JN]) -> [f64; JN] {
    let n = metric.dim();
    let (x, v) = unpack(y);
    let mut out = [0.0; JN];
    let a = metric.accel(&x, &v);
    out[..4].copy_from_slice(&v);
    out[4..8].copy_from_slice(&a);
    let gam = metric.christoffel_at(&x);
    let dgam = metric.christoffel_partials(&x);
    // A^k_l = ∂_l Γ^k_{ij} v^i v^j,  B^k_j = 2 Γ^k_{ij} v^i
    let mut amat = [[0.0; MAX_DIM]; MAX_DIM];
    let mut bmat = [[0.0; MAX_DIM]; MAX_DIM];
    for k in 0..n {
        for l in 0..n {
            let mut s = 0.0;
            let mut b = 0.0;
            for i in 0..n {
                b += 2.0 * gam[k][i][l] * v[i];
                for j in 0..n {
                    s += dgam[l][k][i][j] * v[i] * v[j];
                }
            }
            amat[k][l] = s;
            bmat[k][l] = b;
        }
    }
    let jo = 8;
    let dj = 8 + MAX_DIM * MAX_DIM;
    for k in 0..n {
        for c in 0..n {
            out[jo + k * MAX_DIM + c] = y[dj + k * MAX_DIM + c];
            let mut acc = 0.0;
            for l in 0..n {
                acc -= amat[k][l] * y[jo + l * MAX_DIM + c] + bmat[k][l] * y[dj + l * MAX_DIM + c];
            }
            out[dj + k * MAX_DIM + c] = acc;
        }
    }
    out
}

fn jacobi_matrix(n: usize, y: &[f64; JN]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, c| y[8 + k * MAX_DIM + c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateReport {
    /// First conjugate parameter, `+∞` when none occurs before the segment ends.
    pub parameter: f64,
    /// `(s, det J(s))` at each accepted step.
    pub trace: Vec<(f64, f64)>,
    /// True when found as a zero touch of the smallest singular value rather than a sign change.
    pub even_multiplicity: bool,
}

impl ConjugateReport {
    pub fn found(&self) -> bool {
        self.parameter.is_finite()
    }
}

/// Relative singular-value threshold for the even-multiplicity fallback.
const SIGMA_TOUCH: f64 = 1e-3;

/// First parameter where `d exp_x` along γ becomes singular.
pub fn jacobi_first_conjugate(metric: &Metric, gamma: &GeodesicSegment) -> Result<ConjugateReport> {
    let n = metric.dim();
    let s_end = gamma.s_end();
    let mut y0 = [0.0; JN];
    y0[..4].copy_from_slice(&gamma.x0);
    y0[4..8].copy_from_slice(&gamma.xi0);
    for k in 0..n {
        y0[8 + MAX_DIM * MAX_DIM + k * MAX_DIM + k] = 1.0;
    }
    if metric.is_flat() {
        return Ok(ConjugateReport { parameter: f64::INFINITY, trace: vec![(0.0, 0.0)], even_multiplicity: false });
    }
    let scale = s_end.abs().max(1e-12);
    let mut trace = vec![(0.0, 0.0)];
    let mut found: Option<(f64, bool)> = None;
    let mut hist: Vec<(f64, f64)> = Vec::new();
    let opts = OdeOptions { h_max: scale / 64.0, ..OdeOptions::with_tol(gamma.tol.max(1e-10)) };
    let res = ode::integrate(
        |_, y| jacobi_rhs(metric, y),
        0.0,
        y0,
        s_end,
        &opts,
        |step, _| {
            let j1 = jacobi_matrix(n, &step.y1);
            let d1 = j1.determinant();
            let d0 = trace.last().map(|t| t.1).unwrap_or(0.0);
            trace.push((step.t1, d1));
            if step.t0 != 0.0 && d0 != 0.0 && d0.signum() != d1.signum() {
                let root = bisect(step.t0, step.t1, 1e-10, |s| jacobi_matrix(n, &step.at(s)).determinant() * d0 > 0.0);
                found = Some((root, false));
                return Control::Stop;
            }
            let sv = j1.singular_values();
            let ratio = sv.min() / sv.max().max(1e-300);
            hist.push((step.t1, ratio));
            let m = hist.len();
            if m >= 3 {
                let (_, r0) = hist[m - 3];
                let (_, r1) = hist[m - 2];
                let (_, r2) = hist[m - 1];
                if r1 < r0 && r1 <= r2 && r1 < 0.05 {
                    let sa = hist[m - 3].0;
                    let sc = hist[m - 1].0;
                    if let Some(s) = refine_touch(metric, n, gamma, sa, sc) {
                        found = Some((s, true));
                        return Control::Stop;
                    }
                }
            }
            Control::Continue
        },
    );
    if let Some((s, even)) = found {
        return Ok(ConjugateReport { parameter: s, trace, even_multiplicity: even });
    }
    if matches!(res.status, OdeStatus::StepUnderflow | OdeStatus::MaxSteps) {
        let (x, v) = unpack(&res.y);
        return Err(Error::StepFailure { s: res.t, x, v });
    }
    Ok(ConjugateReport { parameter: f64::INFINITY, trace, even_multiplicity: false })
}

fn jacobi_state(metric: &Metric, gamma: &GeodesicSegment, s: f64) -> [f64; JN] {
    let n = metric.dim();
    let mut y0 = [0.0; JN];
    y0[..4].copy_from_slice(&gamma.x0);
    y0[4..8].copy_from_slice(&gamma.xi0);
    for k in 0..n {
        y0[8 + MAX_DIM * MAX_DIM + k * MAX_DIM + k] = 1.0;
    }
    let opts = OdeOptions::with_tol(gamma.tol.max(1e-10));
    ode::solve(|_, y| jacobi_rhs(metric, y), 0.0, y0, s, &opts).y
}

/// Golden-section minimization of `σ_min/σ_max` on `[a, b]`; accepts only a genuine touch.
fn refine_touch(metric: &Metric, n: usize, gamma: &GeodesicSegment, a: f64, b: f64) -> Option<f64> {
    let ratio = |s: f64| {
        let sv = jacobi_matrix(n, &jacobi_state(metric, gamma, s)).singular_values();
        sv.min() / sv.max().max(1e-300)
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (a, b);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (ratio(c), ratio(d));
    while (hi - lo).abs() > 1e-9 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = ratio(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = ratio(d);
        }
    }
    let s = 0.5 * (lo + hi);
    (ratio(s) < SIGMA_TOUCH).then_some(s)
}

/// Bisection for the switch point of a predicate true at `a` and false at `b`.
pub(crate) fn bisect<P: FnMut(f64) -> bool>(mut a: f64, mut b: f64, tol: f64, mut pred: P) -> f64 {
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        if pred(m) {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

// ---- cut parameter and diamonds -----------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutKind {
    /// τ became positive before any conjugate point.
    Cut,
    /// The first conjugate point came first.
    Conjugate,
    /// No cut before the geodesic left the domain; `rho` is a lower bound.
    LowerBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutReport {
    pub rho: f64,
    pub kind: CutKind,
    pub conjugate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutOptions {
    pub s_max: f64,
    pub tau_tol: f64,
    pub ds_tol: f64,
    pub tol: f64,
}

impl Default for CutOptions {
    fn default() -> Self {
        Self { s_max: 1e3, tau_tol: 1e-6, ds_tol: 1e-4, tol: 1e-9 }
    }
}

/// `ρ(x, ξ) = sup{s : τ(x, γ_{x,ξ}(s)) = 0}`, capped by the first conjugate point.
pub fn null_cut_parameter(metric: &Metric, x: &Vec4, xi: &Vec4, cfg: &CutOptions) -> Result<CutReport> {
    let seg = integrate_geodesic(metric, x, xi, cfg.s_max, cfg.tol)?;
    let conj = jacobi_first_conjugate(metric, &seg)?.parameter;
    let s_end = seg.s_end();
    let tau_opts = TauOptions { pos_tol: cfg.tau_tol, ..TauOptions::default() };
    let positive = |s: f64| -> Result<bool> {
        let (y, _) = seg.state_at(metric, s)?;
        Ok(crate::causal::chronological(metric, x, &y, &tau_opts)?)
    };
    let cut = if positive(s_end)? {
        // scan for the first positive sample so the bisection bracket is monotone
        let grid = 64;
        let mut a = 0.0;
        let mut b = s_end;
        for i in 1..=grid {
            let s = s_end * i as f64 / grid as f64;
            if positive(s)? {
                b = s;
                break;
            }
            a = s;
        }
        while (b - a) > cfg.ds_tol {
            let m = 0.5 * (a + b);
            if positive(m)? {
                b = m;
            } else {
                a = m;
            }
        }
        Some(0.5 * (a + b))
    } else {
        None
    };
    Ok(match cut {
        Some(c) if c <= conj => CutReport { rho: c, kind: CutKind::Cut, conjugate: conj },
        _ if conj.is_finite() => CutReport { rho: conj, kind: CutKind::Conjugate, conjugate: conj },
        _ => CutReport { rho: s_end, kind: CutKind::LowerBound, conjugate: conj },
    })
}

/// Membership in `J(p⁻, p⁺) = J⁺(p⁻) ∩ J⁻(p⁺)`.
pub fn in_diamond(metric: &Metric, y: &Vec4, p_minus: &Vec4, p_plus: &Vec4) -> Result<bool> {
    let opts = TauOptions::default();
    let causal = |r: CausalRelation| !matches!(r, CausalRelation::None);
    Ok(causal(causal_relation(metric, p_minus, y, &opts)?) && causal(causal_relation(metric, y, p_plus, &opts)?))
}

/// Last affine parameter at which γ still lies in the diamond `J(p⁻, p⁺)`.
pub fn diamond_escape(metric: &Metric, gamma: &GeodesicSegment, p_minus: &Vec4, p_plus: &Vec4) -> Result<f64> {
    let s_end = gamma.s_end();
    let grid = 256;
    let mut inside_at: Option<f64> = None;
    let mut exit: Option<(f64, f64)> = None;
    for i in 0..=grid {
        let s = s_end * i as f64 / grid as f64;
        let (y, _) = gamma.state_at(metric, s)?;
        let inside = in_diamond(metric, &y, p_minus, p_plus)?;
        match (inside_at, inside) {
            (None, true) => inside_at = Some(s),
            (Some(prev), false) => {
                exit = Some((prev, s));
                break;
            }
            (Some(_), true) => inside_at = Some(s),
            _ => {}
        }
    }
    let Some(last_in) = inside_at else {
        return Err(Error::NeverInside);
    };
    let Some((a, b)) = exit else {
        return Ok(last_in);
    };
    let mut err = None;
    let s = bisect(a, b, 1e-9 * (1.0 + s_end.abs()), |m| match gamma
        .state_at(metric, m)
        .and_then(|(y, _)| in_diamond(metric, &y, p_minus, p_plus))
    {
        Ok(v) => v,
        Err(e) => {
            err = Some(e);
            false
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(s),
    }
}
