//! Causal inverse, semilinear solves and the ε-expansion, all marched in lockstep.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::grid::{GridField, Lattice};
use crate::source::{Coupling, CouplingCache, Forcing};

/// Which time levels a solve keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Record {
    Final,
    Levels(Vec<usize>),
    /// Every level, i.e. the whole time slab.
    All,
}

impl Record {
    fn keeps(&self, n: usize, last: usize) -> bool {
        match self {
            Record::Final => n == last,
            Record::Levels(v) => v.contains(&n),
            Record::All => true,
        }
    }
}

/// Several fields advanced together; the forcing of field `j` at level `n` may read
/// level `n` of every field, including itself.
pub struct Lockstep<'a, F> {
    lat: &'a Lattice,
    prev: Vec<Vec<f64>>,
    cur: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    g: Vec<f64>,
    level: usize,
    forcing: F,
}

impl<'a, F> Lockstep<'a, F>
where
    F: FnMut(usize, usize, &[Vec<f64>], &mut [f64]),
{
    /// Zero data on levels 0 and 1.
    pub fn new(lat: &'a Lattice, fields: usize, forcing: F) -> Self {
        let zero = vec![vec![0.0; lat.nodes()]; fields];
        Self { lat, prev: zero.clone(), cur: zero.clone(), next: zero, g: vec![0.0; lat.nodes()], level: 1, forcing }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn current(&self) -> &[Vec<f64>] {
        &self.cur
    }

    pub fn previous(&self) -> &[Vec<f64>] {
        &self.prev
    }

    pub fn advance(&mut self) -> Result<()> {
        let n = self.level;
        for j in 0..self.cur.len() {
            self.g.iter_mut().for_each(|v| *v = 0.0);
            (self.forcing)(n, j, &self.cur, &mut self.g);
            self.lat.step(&self.prev[j], &self.cur[j], &self.g, &mut self.next[j]);
            if self.next[j].iter().any(|v| !v.is_finite()) {
                return Err(WaveError::NonFinite { step: n + 1 });
            }
        }
        std::mem::swap(&mut self.prev, &mut self.cur);
        std::mem::swap(&mut self.cur, &mut self.next);
        self.level += 1;
        Ok(())
    }

    fn snapshot(&self, j: usize, level: usize) -> GridField {
        let values = if level == self.level { self.cur[j].clone() } else { self.prev[j].clone() };
        GridField { step: level, time: self.lat.time(level), shape: self.lat.shape, values }
    }

    /// Marches to the last level and returns, per field, the recorded levels.
    pub fn run(mut self, record: &Record) -> Result<Vec<Vec<GridField>>> {
        let last = self.lat.spec.steps;
        let fields = self.cur.len();
        let mut out = vec![Vec::new(); fields];
        for level in 0..=1 {
            if record.keeps(level, last) {
                for (j, o) in out.iter_mut().enumerate() {
                    o.push(self.snapshot(j, 1).with_level(level, self.lat));
                }
            }
        }
        while self.level < last {
            self.advance()?;
            if record.keeps(self.level, last) {
                for (j, o) in out.iter_mut().enumerate() {
                    o.push(self.snapshot(j, self.level));
                }
            }
        }
        Ok(out)
    }
}

impl GridField {
    fn with_level(mut self, level: usize, lat: &Lattice) -> Self {
        self.step = level;
        self.time = lat.time(level);
        self
    }
}

/// `u = Q f`: the solution of `□u = f` with zero data before the support of `f`.
pub fn causal_solve(lat: &Lattice, f: &Forcing, record: &Record) -> Result<Vec<GridField>> {
    f.validate(lat)?;
    let run = Lockstep::new(lat, 1, |n, _, _, g: &mut [f64]| f.add_level(lat, n, 1.0, g)).run(record)?;
    Ok(run.into_iter().next().expect("one field"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum Route {
    Direct,
    Picard { tol: f64, max_iter: usize },
}

impl Route {
    pub fn picard() -> Self {
        Route::Picard { tol: 1e-10, max_iter: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSolution {
    /// `u_ε` on the recorded levels.
    pub fields: Vec<GridField>,
    /// Relative slab updates of the Picard iterates (empty for the direct route).
    pub history: Vec<f64>,
}

/// Solves `□u + a u² = εf` through the scaled unknown `v = u/ε`, which satisfies
/// `□v + εa v² = f`; with `a ≡ 0` this reproduces `ε·Qf` exactly.
pub fn nonlinear_solve(
    lat: &Lattice,
    a: &Coupling,
    f: &Forcing,
    eps: f64,
    route: Route,
    record: &Record,
) -> Result<NonlinearSolution> {
    f.validate(lat)?;
    a.validate(lat)?;
    let scale = |mut fields: Vec<GridField>| {
        for fl in &mut fields {
            fl.values.iter_mut().for_each(|v| *v *= eps);
        }
        fields
    };
    match route {
        Route::Direct => {
            let quad = !a.is_zero() && eps != 0.0;
            let mut cache = CouplingCache::new(a, lat.nodes());
            let run = Lockstep::new(lat, 1, |n, _, cur: &[Vec<f64>], g: &mut [f64]| {
                f.add_level(lat, n, 1.0, g);
                if quad {
                    let a = cache.at(lat, n);
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi -= eps * a[i] * cur[0][i] * cur[0][i];
                    }
                }
            })
            .run(record)?;
            Ok(NonlinearSolution { fields: scale(run.into_iter().next().expect("one field")), history: Vec::new() })
        }
        Route::Picard { tol, max_iter } => {
            let mut history = Vec::new();
            let mut iterate: Option<Vec<GridField>> = None;
            for _ in 0..max_iter {
                let prior = iterate.as_ref();
                let mut cache = CouplingCache::new(a, lat.nodes());
                let run = Lockstep::new(lat, 1, |n, _, _, g: &mut [f64]| {
                    f.add_level(lat, n, 1.0, g);
                    if let Some(p) = prior {
                        let a = cache.at(lat, n);
                        let v = &p[n].values;
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi -= eps * a[i] * v[i] * v[i];
                        }
                    }
                })
                .run(&Record::All)?;
                let slab = run.into_iter().next().expect("one field");
                let update = match prior {
                    None => 1.0,
                    Some(p) => slab_relative(&slab, p),
                };
                history.push(update);
                iterate = Some(slab);
                if update < tol {
                    let all = iterate.expect("iterate exists");
                    let kept = all.into_iter().filter(|fl| record.keeps(fl.step, lat.spec.steps)).collect();
                    return Ok(NonlinearSolution { fields: scale(kept), history });
                }
                let h = &history;
                if h.len() >= 4 && h[h.len() - 1] > h[h.len() - 2] && h[h.len() - 2] > h[h.len() - 3] {
                    break;
                }
                if !update.is_finite() {
                    break;
                }
            }
            Err(WaveError::PicardDiverged { history })
        }
    }
}

fn slab_relative(a: &[GridField], b: &[GridField]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.values.iter().zip(&y.values) {
            num += (p - q) * (p - q);
            den += p * p;
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// The four expansion terms on the recorded levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerms {
    pub w: [Vec<GridField>; 4],
}

/// `w₁ = Qf`, `w₂ = −Q(a w₁²)`, `w₃ = 2Q(a w₁ Q(a w₁²))`,
/// `w₄ = −Q(a Q(a w₁²)²) − 4Q(a w₁ Q(a w₁ Q(a w₁²)))`.
pub fn expansion_terms(lat: &Lattice, a: &Coupling, f: &Forcing, record: &Record) -> Result<ExpansionTerms> {
    f.validate(lat)?;
    a.validate(lat)?;
    let mut cache = CouplingCache::new(a, lat.nodes());
    // Fields: w₁, A = Q(a w₁²), B = Q(a w₁ A), C = Q(a A²), D = Q(a w₁ B).
    let run = Lockstep::new(lat, 5, |n, j, cur: &[Vec<f64>], g: &mut [f64]| {
        if j == 0 {
            f.add_level(lat, n, 1.0, g);
            return;
        }
        let a = cache.at(lat, n);
        let (w1, pa, pb) = (&cur[0], &cur[1], &cur[2]);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = a[i]
                * match j {
                    1 => w1[i] * w1[i],
                    2 => w1[i] * pa[i],
                    3 => pa[i] * pa[i],
                    _ => w1[i] * pb[i],
                };
        }
    })
    .run(record)?;
    let mut it = run.into_iter();
    let (w1, pa, pb, pc, pd) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let map = |src: &[GridField], op: &dyn Fn(usize, usize) -> f64| -> Vec<GridField> {
        src.iter()
            .enumerate()
            .map(|(l, fl)| GridField { values: (0..fl.values.len()).map(|i| op(l, i)).collect(), ..fl.clone() })
            .collect()
    };
    let w2 = map(&pa, &|l, i| -pa[l].values[i]);
    let w3 = map(&pb, &|l, i| 2.0 * pb[l].values[i]);
    let w4 = map(&pc, &|l, i| -pc[l].values[i] - 4.0 * pd[l].values[i]);
    Ok(ExpansionTerms { w: [w1, w2, w3, w4] })
}

/// One row of an expansion study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub eps: f64,
    pub remainder: f64,
}

/// `‖u_ε − Σ_{j≤4} ε^j w_j‖_{L²}` on the final level for each `ε`, with the fitted
/// log-log slope.
pub fn expansion_study(lat: &Lattice, a: &Coupling, f: &Forcing, eps: &[f64]) -> Result<(Vec<RemainderRow>, f64)> {
    let terms = expansion_terms(lat, a, f, &Record::Final)?;
    let w: Vec<&[f64]> = terms.w.iter().map(|t| t[0].values.as_slice()).collect();
    let dims = lat.dims();
    let rows: Vec<RemainderRow> = eps
        .iter()
        .map(|&e| {
            let sol = nonlinear_solve(lat, a, f, e, Route::Direct, &Record::Final)?;
            let u = &sol.fields[0].values;
            let (e2, e3) = (e * e, e * e * e);
            let sq: f64 = (0..u.len())
                .map(|i| (u[i] - e * w[0][i] - e2 * w[1][i] - e3 * w[2][i] - e3 * e * w[3][i]).powi(2))
                .sum();
            Ok(RemainderRow { eps: e, remainder: (sq * lat.spec.h.powi(dims as i32)).sqrt() })
        })
        .collect::<Result<_>>()?;
    let slope = loglog_slope(&rows);
    Ok((rows, slope))
}

/// Least-squares slope of `log remainder` against `log ε`.
pub fn loglog_slope(rows: &[RemainderRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.eps.ln(), r.remainder.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
