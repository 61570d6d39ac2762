//! Inverse side: observation-time charts, null traces, light-cone fitting and the
//! conformal-factor ODE in Ricci-flat regions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::unpack;
use crate::metric::{bilinear, lower, Mat4, Metric, Vec4, MAX_DIM};
use crate::observation::{ArrivalRecord, DatasetView, TIE_TOL};
use crate::ode::{self, Control, OdeOptions, OdeStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub kappa_max: f64,
    /// Sources used for the local tangent-space estimate of a chart.
    pub k_neighbors: usize,
    pub match_tol: f64,
    pub dir_tol: f64,
    /// Largest accepted residual of the cubic trace fit.
    pub fit_residual_max: f64,
    /// Observers whose ray from the target is shorter than this (affine length) are
    /// left out of the chart: near a worldline `f⁺` bends sharply.
    #[serde(default = "default_min_affine")]
    pub min_affine_length: f64,
    /// Target source ids; empty means every source.
    #[serde(default)]
    pub targets: Vec<usize>,
    /// Candidate observer tuples; empty means all n-subsets.
    #[serde(default)]
    pub candidate_tuples: Vec<Vec<usize>>,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            kappa_max: 1e4,
            k_neighbors: 24,
            match_tol: 3e-8,
            dir_tol: 2e-2,
            fit_residual_max: 1e-4,
            min_affine_length: default_min_affine(),
            targets: Vec::new(),
            candidate_tuples: Vec::new(),
        }
    }
}

fn default_min_affine() -> f64 {
    0.3
}

/// Earliest, untied, non-degenerate arrival times per source and observer.
#[derive(Debug, Clone)]
pub struct EarliestTable {
    pub observers: usize,
    pub rows: BTreeMap<usize, Vec<Option<f64>>>,
    /// Affine length of the ray behind each entry of `rows`.
    pub lengths: BTreeMap<usize, Vec<f64>>,
    /// Sources with at least one arrival past the null cut.
    pub past_cut: Vec<usize>,
}

impl EarliestTable {
    pub fn new(view: &DatasetView) -> Self {
        let observers = view.meta.grid.members.len();
        let mut groups: BTreeMap<usize, Vec<&ArrivalRecord>> = BTreeMap::new();
        for r in &view.records {
            groups.entry(r.source_id).or_default().push(r);
        }
        let mut rows = BTreeMap::new();
        let mut lengths = BTreeMap::new();
        let mut past_cut = Vec::new();
        for (id, recs) in groups {
            if recs.iter().any(|r| !r.earliest_flag) {
                past_cut.push(id);
            }
            let mut row = vec![None; observers];
            let mut len = vec![0.0; observers];
            for j in 0..observers {
                let mut ss: Vec<(f64, f64)> = recs
                    .iter()
                    .filter(|r| r.observer_id == j && r.earliest_flag && !r.on_worldline)
                    .map(|r| (r.s, r.affine_length))
                    .collect();
                ss.sort_by(|a, b| a.0.total_cmp(&b.0));
                let tied = ss.len() > 1 && ss[1].0 - ss[0].0 < TIE_TOL;
                if !ss.is_empty() && !tied {
                    row[j] = Some(ss[0].0);
                    len[j] = ss[0].1;
                }
            }
            rows.insert(id, row);
            lengths.insert(id, len);
        }
        Self { observers, rows, lengths, past_cut }
    }

    pub fn y(&self, source: usize, tuple: &[usize]) -> Option<Vec<f64>> {
        let row = self.rows.get(&source)?;
        tuple.iter().map(|&j| row.get(j).copied().flatten()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalChart {
    pub source_id: usize,
    pub tuple: Vec<usize>,
    pub y: Vec<f64>,
    pub condition: f64,
    pub valid: bool,
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    rec(0, m, k, &mut cur, &mut out);
    out
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}

/// Observation-time chart `Y = (f⁺_{μ_j})_{j ∈ tuple}` for one source, choosing the
/// tuple with the best-conditioned restriction of the local tangent space.
pub fn observation_time_chart(
    table: &EarliestTable,
    dim: usize,
    target: usize,
    cfg: &ReconstructionConfig,
) -> Result<ArrivalChart> {
    let row = table.rows.get(&target).ok_or(Error::NoValidTuple { kappa_max: cfg.kappa_max })?;
    let lengths = &table.lengths[&target];
    let avail: Vec<usize> = (0..table.observers).filter(|&j| row[j].is_some()).collect();
    let center: Vec<f64> = avail.iter().map(|&j| row[j].unwrap()).collect();
    let mut neigh: Vec<(f64, Vec<f64>)> = table
        .rows
        .iter()
        .filter(|(id, _)| **id != target)
        .filter_map(|(_, r)| {
            let v: Option<Vec<f64>> = avail.iter().map(|&j| r[j]).collect();
            v.map(|v| {
                let d: Vec<f64> = v.iter().zip(&center).map(|(a, b)| a - b).collect();
                (d.iter().map(|c| c * c).sum::<f64>(), d)
            })
        })
        .collect();
    neigh.sort_by(|a, b| a.0.total_cmp(&b.0));
    neigh.truncate(cfg.k_neighbors.max(dim + 1));
    let basis = if neigh.len() >= dim {
        let mat = DMatrix::from_fn(neigh.len(), avail.len(), |i, j| neigh[i].1[j]);
        let svd = mat.svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        Some(DMatrix::from_fn(avail.len(), dim, |j, c| vt[(order[c], j)]))
    } else {
        None
    };
    let tuples = if cfg.candidate_tuples.is_empty() { combinations(avail.len(), dim) } else { Vec::new() };
    let mut candidates: Vec<Vec<usize>> = tuples.into_iter().map(|t| t.into_iter().map(|i| avail[i]).collect()).collect();
    for t in &cfg.candidate_tuples {
        candidates.push(t.clone());
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for tup in candidates {
        if tup.len() != dim || tup.iter().any(|j| row.get(*j).copied().flatten().is_none()) {
            continue;
        }
        if tup.iter().any(|&j| lengths[j] < cfg.min_affine_length) {
            continue;
        }
        let mut distinct = tup.clone();
        distinct.sort();
        distinct.dedup();
        let cond = if distinct.len() < dim {
            f64::INFINITY
        } else if let Some(b) = &basis {
            let idx: Vec<usize> = tup.iter().map(|j| avail.iter().position(|a| a == j).unwrap()).collect();
            condition_number(&DMatrix::from_fn(dim, dim, |r, c| b[(idx[r], c)]))
        } else {
            f64::INFINITY
        };
        if best.as_ref().is_none_or(|(c, _)| cond < *c) {
            best = Some((cond, tup));
        }
    }
    let Some((cond, tuple)) = best else {
        return Err(Error::NoValidTuple { kappa_max: cfg.kappa_max });
    };
    if !(cond < cfg.kappa_max) {
        return Err(Error::NoValidTuple { kappa_max: cfg.kappa_max });
    }
    let y = table.y(target, &tuple).expect("tuple entries checked");
    Ok(ArrivalChart { source_id: target, tuple, y, condition: cond, valid: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullTrace {
    pub observer_id: usize,
    pub s: f64,
    /// Sources on the trace ordered by affine length (target included).
    pub source_ids: Vec<usize>,
    pub y_points: Vec<Vec<f64>>,
    /// Unit tangent of the fitted curve at the target's chart point.
    pub tangent: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub too_few_matches: usize,
    pub fit_rejected: usize,
}

fn unit_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|c| c * c).sum::<f64>().sqrt();
    let nb = b.iter().map(|c| c * c).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    dot.clamp(-1.0, 1.0).acos()
}

/// Least-squares cubic through chart points, parametrized by projection on the
/// principal chord direction; returns the unit tangent at `center` and the max residual.
pub fn fit_trace_tangent(points: &[Vec<f64>], center: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = points.len();
    let n = center.len();
    if m < 4 {
        return None;
    }
    let mean: Vec<f64> = (0..n).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / m as f64).collect();
    let cen = DMatrix::from_fn(m, n, |i, k| points[i][k] - mean[k]);
    let svd = cen.svd(false, true);
    let vt = svd.v_t?;
    let imax = svd.singular_values.imax();
    let e: Vec<f64> = (0..n).map(|k| vt[(imax, k)]).collect();
    let u: Vec<f64> = points.iter().map(|p| (0..n).map(|k| (p[k] - center[k]) * e[k]).sum()).collect();
    let scale = u.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    let vand = DMatrix::from_fn(m, 4, |i, c| (u[i] / scale).powi(c as i32));
    let svd = vand.clone().svd(true, true);
    let mut tangent = vec![0.0; n];
    let mut resid: f64 = 0.0;
    for k in 0..n {
        let rhs = DVector::from_iterator(m, points.iter().map(|p| p[k] - center[k]));
        let coef = svd.solve(&rhs, 1e-14).ok()?;
        tangent[k] = coef[1] / scale;
        let fitted = &vand * &coef;
        for i in 0..m {
            resid = resid.max((fitted[i] - rhs[i]).abs());
        }
    }
    let nrm = tangent.iter().map(|c| c * c).sum::<f64>().sqrt();
    if nrm == 0.0 || !nrm.is_finite() {
        return None;
    }
    Some((tangent.iter().map(|c| c / nrm).collect(), resid))
}

/// Null traces through the target: sources sharing an arrival (same observer,
/// same time, same direction) with one of the target's earliest records.
pub fn build_null_traces(
    view: &DatasetView,
    table: &EarliestTable,
    chart: &ArrivalChart,
    cfg: &ReconstructionConfig,
) -> (Vec<NullTrace>, TraceLog) {
    let mut by_observer: BTreeMap<usize, Vec<&ArrivalRecord>> = BTreeMap::new();
    for r in &view.records {
        if r.earliest_flag && !r.on_worldline {
            by_observer.entry(r.observer_id).or_default().push(r);
        }
    }
    for v in by_observer.values_mut() {
        v.sort_by(|a, b| a.s.total_cmp(&b.s));
    }
    let mut traces = Vec::new();
    let mut log = TraceLog::default();
    let anchors: Vec<&ArrivalRecord> = view
        .records
        .iter()
        .filter(|r| r.source_id == chart.source_id && r.earliest_flag && !r.on_worldline)
        .collect();
    for anchor in anchors {
        let list = &by_observer[&anchor.observer_id];
        let lo = list.partition_point(|r| r.s < anchor.s - cfg.match_tol);
        let mut members: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        for r in &list[lo..] {
            if r.s > anchor.s + cfg.match_tol {
                break;
            }
            if (r.s - anchor.s).abs() >= cfg.match_tol || unit_angle(&r.xi, &anchor.xi) >= cfg.dir_tol {
                continue;
            }
            if let Some(y) = table.y(r.source_id, &chart.tuple) {
                members.push((r.affine_length, r.source_id, y));
            }
        }
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        members.dedup_by_key(|m| m.1);
        if members.len() < 4 {
            log.too_few_matches += 1;
            continue;
        }
        let points: Vec<Vec<f64>> = members.iter().map(|m| m.2.clone()).collect();
        match fit_trace_tangent(&points, &chart.y) {
            Some((tangent, residual)) if residual <= cfg.fit_residual_max => traces.push(NullTrace {
                observer_id: anchor.observer_id,
                s: anchor.s,
                source_ids: members.iter().map(|m| m.1).collect(),
                y_points: points,
                tangent,
                residual,
            }),
            _ => log.fit_rejected += 1,
        }
    }
    (traces, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalEstimate {
    pub target: usize,
    /// Symmetric form with unit Frobenius norm and one negative eigenvalue; `C₀₀ < 0`
    /// whenever the first chart axis is timelike.
    pub c: Vec<Vec<f64>>,
    pub normalization: String,
    /// Smallest over second-smallest singular value of the design matrix.
    pub sigma_ratio: f64,
    pub residuals: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

impl ConformalEstimate {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.c.len();
        DMatrix::from_fn(n, n, |i, j| self.c[i][j])
    }
}

/// Total-least-squares fit of the quadratic form vanishing on the given null directions.
pub fn fit_null_cone(target: usize, directions: &[Vec<f64>]) -> Result<ConformalEstimate> {
    let Some(n) = directions.first().map(|d| d.len()) else {
        return Err(Error::DegenerateSpan { rank: 0, needed: 1 });
    };
    let p = n * (n + 1) / 2;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let rows = directions.len().max(p);
    let mut design = DMatrix::zeros(rows, p);
    for (r, d) in directions.iter().enumerate() {
        let nrm = d.iter().map(|c| c * c).sum::<f64>().sqrt();
        for (c, &(i, j)) in pairs.iter().enumerate() {
            let w = if i == j { 1.0 } else { 2f64.sqrt() };
            design[(r, c)] = w * d[i] * d[j] / (nrm * nrm);
        }
    }
    let svd = design.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-10 * smax).count();
    if directions.len() < p - 1 || rank < p - 1 {
        return Err(Error::DegenerateSpan { rank, needed: p - 1 });
    }
    let best = order[0];
    let mut c = DMatrix::zeros(n, n);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let val = vt[(best, k)] * if i == j { 1.0 } else { 1.0 / 2f64.sqrt() };
        c[(i, j)] = val;
        c[(j, i)] = val;
    }
    let mut c = normalize_form(&c);
    // the cone fixes C only up to sign; pick the (−,+,…,+) representative, since in
    // observation-time coordinates the first axis need not be timelike
    let mut evals: Vec<f64> = SymmetricEigen::new(c.clone()).eigenvalues.iter().copied().collect();
    evals.sort_by(f64::total_cmp);
    let negatives = evals.iter().filter(|e| **e < 0.0).count();
    if negatives == n - 1 && n > 2 {
        c = -c;
        evals = evals.iter().rev().map(|e| -e).collect();
    } else if negatives != 1 {
        return Err(Error::NonLorentzianFit { eigenvalues: evals });
    }
    let residuals = directions
        .iter()
        .map(|d| {
            let nrm2: f64 = d.iter().map(|x| x * x).sum();
            let v = DVector::from_column_slice(d);
            (v.transpose() * &c * &v)[(0, 0)].abs() / nrm2
        })
        .collect();
    let sigma_ratio = if sv[order[1]] > 0.0 { sv[order[0]] / sv[order[1]] } else { f64::INFINITY };
    Ok(ConformalEstimate {
        target,
        c: (0..n).map(|i| (0..n).map(|j| c[(i, j)]).collect()).collect(),
        normalization: "unit_frobenius_one_negative_eigenvalue".into(),
        sigma_ratio,
        residuals,
        eigenvalues: evals,
    })
}

/// Scales to unit Frobenius norm with `C₀₀ < 0` (or the first nonzero diagonal entry negative).
pub fn normalize_form(c: &DMatrix<f64>) -> DMatrix<f64> {
    let nrm = c.norm();
    if nrm == 0.0 {
        return c.clone();
    }
    let mut out = c / nrm;
    let lead = (0..out.nrows()).map(|i| out[(i, i)]).find(|v| v.abs() > 1e-300).unwrap_or(0.0);
    if lead > 0.0 {
        out = -out;
    }
    out
}

/// Frobenius distance between the normalized forms, minimized over the residual sign.
pub fn conformal_class_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let a = normalize_form(a);
    let b = normalize_form(b);
    (&a - &b).norm().min((&a + &b).norm())
}

/// Pull-back of `g(q)` to the observation-time chart: `DY^{-T} g DY^{-1}`.
pub fn chart_form(metric: &Metric, q: &Vec4, dy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = metric.dim();
    let g = crate::metric::to_dmatrix(n, &metric.g(q));
    let inv = dy.clone().try_inverse().ok_or_else(|| Error::IllConditioned("singular chart Jacobian".into()))?;
    Ok(inv.transpose() * g * inv)
}

/// Row `dY^j = g(ϑ, ·) / g(θ, μ̇)` of the chart Jacobian, from the launch vector `ϑ`
/// at the source and the arrival tangent `θ` against the observer velocity `μ̇`.
pub fn chart_gradient_row(metric: &Metric, q: &Vec4, launch: &Vec4, x_arr: &Vec4, theta: &Vec4, mu_dot: &Vec4) -> Vec<f64> {
    let n = metric.dim();
    let g = metric.g(q);
    let low = lower(n, &g, launch);
    let denom = metric.inner(x_arr, theta, mu_dot);
    low[..n].iter().map(|c| c / denom).collect()
}

// ---- per-target pipeline ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: usize,
    pub status: TargetStatus,
    pub reason: Option<String>,
    pub chart: Option<ArrivalChart>,
    pub trace_count: usize,
    pub traces: Vec<NullTrace>,
    pub trace_log: TraceLog,
    pub estimate: Option<ConformalEstimate>,
    /// Filled by evaluation against the truth, when available.
    #[serde(default)]
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub targets: Vec<TargetReport>,
    pub ok: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn reconstruct_target(view: &DatasetView, table: &EarliestTable, target: usize, cfg: &ReconstructionConfig) -> TargetReport {
    let n = view.meta.dim;
    let mut rep = TargetReport {
        target,
        status: TargetStatus::Ok,
        reason: None,
        chart: None,
        trace_count: 0,
        traces: Vec::new(),
        trace_log: TraceLog::default(),
        estimate: None,
        distance: None,
    };
    if table.past_cut.contains(&target) {
        rep.status = TargetStatus::Skipped;
        rep.reason = Some("arrivals past the null cut".into());
        return rep;
    }
    let chart = match observation_time_chart(table, n, target, cfg) {
        Ok(c) => c,
        Err(e) => {
            rep.status = TargetStatus::Skipped;
            rep.reason = Some(e.to_string());
            return rep;
        }
    };
    let (traces, log) = build_null_traces(view, table, &chart, cfg);
    rep.chart = Some(chart);
    rep.trace_count = traces.len();
    rep.trace_log = log;
    let dirs: Vec<Vec<f64>> = traces.iter().map(|t| t.tangent.clone()).collect();
    rep.traces = traces;
    match fit_null_cone(target, &dirs) {
        Ok(est) => rep.estimate = Some(est),
        Err(e) => {
            rep.status = TargetStatus::Failed;
            rep.reason = Some(e.to_string());
        }
    }
    rep
}

/// Chart → traces → cone fit for every target of the dataset.
pub fn reconstruct_region(view: &DatasetView, cfg: &ReconstructionConfig) -> ReconstructionReport {
    let table = EarliestTable::new(view);
    let targets: Vec<usize> = if cfg.targets.is_empty() { table.rows.keys().copied().collect() } else { cfg.targets.clone() };
    let reports: Vec<TargetReport> = targets.par_iter().map(|&t| reconstruct_target(view, &table, t, cfg)).collect();
    let count = |s: TargetStatus| reports.iter().filter(|r| r.status == s).count();
    ReconstructionReport {
        ok: count(TargetStatus::Ok),
        skipped: count(TargetStatus::Skipped),
        failed: count(TargetStatus::Failed),
        targets: reports,
    }
}

impl ReconstructionReport {
    /// `target,status,distance,max_residual,trace_count,sigma_ratio`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,status,distance,max_residual,trace_count,sigma_ratio\n");
        for t in &self.targets {
            let status = match t.status {
                TargetStatus::Ok => "ok",
                TargetStatus::Skipped => "skipped",
                TargetStatus::Failed => "failed",
            };
            let (res, ratio) = t.estimate.as_ref().map_or((String::new(), String::new()), |e| {
                (format!("{:e}", e.residuals.iter().fold(0.0f64, |a, b| a.max(*b))), format!("{:e}", e.sigma_ratio))
            });
            let dist = t.distance.map_or(String::new(), |d| format!("{d:e}"));
            out.push_str(&format!("{},{status},{dist},{res},{},{ratio}\n", t.target, t.trace_count));
        }
        out
    }

    pub fn distances(&self) -> Vec<f64> {
        self.targets.iter().filter_map(|t| t.distance).collect()
    }
}

// ---- conformal factor -------------------------------------------------------

/// Coordinate box in which `e^{2f} g` is declared Ricci-flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VacuumRegion {
    pub lo: Vec4,
    pub hi: Vec4,
}

impl VacuumRegion {
    pub fn contains(&self, dim: usize, x: &Vec4) -> bool {
        (0..dim).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSample {
    pub t: f64,
    pub x: Vec4,
    pub f: f64,
    pub df: Vec4,
}

const CN: usize = 13;

fn factor_rhs(metric: &Metric, y: &[f64; CN]) -> [f64; CN] {
    let n = metric.dim();
    let (x, v) = unpack(&y[..8]);
    let mut p = [0.0; MAX_DIM];
    p.copy_from_slice(&y[9..13]);
    let g: Mat4 = metric.g(&x);
    let (ginv, _) = crate::metric::invert(n, &g).expect("Lorentzian metric is invertible");
    let gam = metric.christoffel_at(&x);
    let ric = metric.ricci_at(&x);
    let r_scalar: f64 = (0..n).map(|i| (0..n).map(|j| ginv[i][j] * ric[i][j]).sum::<f64>()).sum();
    let vlow = lower(n, &g, &v);
    let vp: f64 = (0..n).map(|k| v[k] * p[k]).sum();
    let p2 = bilinear(n, &ginv, &p, &p);
    let nf = n as f64;
    let mut out = [0.0; CN];
    out[..4].copy_from_slice(&v);
    out[4..8].copy_from_slice(&metric.accel(&x, &v));
    out[8] = vp;
    for k in 0..n {
        let ric_v: f64 = (0..n).map(|j| ric[j][k] * v[j]).sum();
        let hess_v = vp * p[k] - 0.5 * p2 * vlow[k] + (ric_v - r_scalar / (2.0 * (nf - 1.0)) * vlow[k]) / (nf - 2.0);
        let conn: f64 = (0..n).map(|j| (0..n).map(|l| gam[l][j][k] * v[j] * p[l]).sum::<f64>()).sum();
        out[9 + k] = hess_v + conn;
    }
    out
}

/// Integrates `f` and `∇f` along the null geodesic `(x0, v0)` of `g`, where
/// `e^{2f} g` is Ricci-flat inside `region`.
pub fn conformal_factor_ode(
    metric: &Metric,
    x0: &Vec4,
    v0: &Vec4,
    f0: f64,
    df0: &Vec4,
    t_end: f64,
    region: &VacuumRegion,
    tol: f64,
) -> Result<Vec<FactorSample>> {
    let n = metric.dim();
    if n < 3 {
        return Err(Error::InvalidSpec("the conformal factor equation needs dimension ≥ 3".into()));
    }
    if !region.contains(n, x0) {
        return Err(Error::LeftVacuumRegion { t: 0.0 });
    }
    let mut y0 = [0.0; CN];
    y0[..4].copy_from_slice(x0);
    y0[4..8].copy_from_slice(v0);
    y0[8] = f0;
    y0[9..13].copy_from_slice(df0);
    let mut samples = vec![FactorSample { t: 0.0, x: *x0, f: f0, df: *df0 }];
    let mut left: Option<f64> = None;
    let res = ode::integrate(|_, y| factor_rhs(metric, y), 0.0, y0, t_end, &OdeOptions::with_tol(tol), |step, y| {
        let (x, _) = unpack(&y[..8]);
        if !region.contains(n, &x) || !metric.contains(&x) {
            left = Some(step.t1);
            return Control::Stop;
        }
        let mut df = [0.0; MAX_DIM];
        df.copy_from_slice(&y[9..13]);
        samples.push(FactorSample { t: step.t1, x, f: y[8], df });
        Control::Continue
    });
    if let Some(t) = left {
        return Err(Error::LeftVacuumRegion { t });
    }
    if res.status != OdeStatus::Finished {
        let (x, v) = unpack(&res.y[..8]);
        return Err(Error::StepFailure { s: res.t, x, v });
    }
    Ok(samples)
}
