//! Fourth-order interaction field, by nested causal solves and by mixed differences,
//! and the light-cone scan of its singular part.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::grid::{Background, GridField, GridSpec, Lattice};
use crate::solve::{nonlinear_solve, Lockstep, Record, Route};
use crate::source::{check_causal_independence, Coupling, CouplingCache, Forcing, SourceProfile};

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn pair_index(k: usize, l: usize) -> usize {
    let (k, l) = (k.min(l), k.max(l));
    PAIRS.iter().position(|&p| p == (k, l)).expect("distinct indices")
}

/// `M⁽⁴⁾ = −Σ_{σ∈Σ(4)} [Q(a Q(a u_σ1 u_σ2) Q(a u_σ3 u_σ4)) + 4Q(a u_σ1 Q(a u_σ2 Q(a u_σ3 u_σ4)))]`
/// with `u_j = Q f_j`. Equal terms of the permutation sum are grouped: the first part is
/// 8 times the sum over the three pair partitions, the second 8 times the sum over ordered
/// pairs `σ1 ≠ σ2`. All 23 causal solves advance in lockstep.
pub fn fourth_interaction_formula(
    lat: &Lattice,
    a: &Coupling,
    sources: &[SourceProfile; 4],
    record: &Record,
) -> Result<Vec<GridField>> {
    check_causal_independence(sources, lat.c_max.max(1.0))?;
    let forcings: Vec<Forcing> = sources.iter().cloned().map(Forcing::single).collect();
    for f in &forcings {
        f.validate(lat)?;
    }
    a.validate(lat)?;
    let mut cache = CouplingCache::new(a, lat.nodes());
    // Field layout: u_0..u_3, P_pair (6), T_{j,pair} for j ∉ pair (12), M.
    let mut triples = Vec::new();
    for j in 0..4 {
        for (p, &(k, l)) in PAIRS.iter().enumerate() {
            if j != k && j != l {
                triples.push((j, p));
            }
        }
    }
    let t_index = |j: usize, p: usize| 10 + triples.iter().position(|&t| t == (j, p)).expect("valid triple");
    let m_field = 10 + triples.len();
    let partitions: Vec<(usize, usize)> =
        [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)].iter().map(|&(a, b, c, d)| (4 + pair_index(a, b), 4 + pair_index(c, d))).collect();
    let mut chains = Vec::new();
    for s1 in 0..4 {
        for s2 in (0..4).filter(|&s2| s2 != s1) {
            let rest: Vec<usize> = (0..4).filter(|&x| x != s1 && x != s2).collect();
            chains.push((s1, t_index(s2, pair_index(rest[0], rest[1]))));
        }
    }
    let run = Lockstep::new(lat, m_field + 1, |n, f, cur: &[Vec<f64>], g: &mut [f64]| {
        if f < 4 {
            forcings[f].add_level(lat, n, 1.0, g);
            return;
        }
        let a = cache.at(lat, n);
        if f < 10 {
            let (k, l) = PAIRS[f - 4];
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = a[i] * cur[k][i] * cur[l][i];
            }
        } else if f < m_field {
            let (j, p) = triples[f - 10];
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = a[i] * cur[j][i] * cur[4 + p][i];
            }
        } else {
            for (i, gi) in g.iter_mut().enumerate() {
                if a[i] == 0.0 {
                    continue;
                }
                let pairs: f64 = partitions.iter().map(|&(x, y)| cur[x][i] * cur[y][i]).sum();
                let chain: f64 = chains.iter().map(|&(x, y)| cur[x][i] * cur[y][i]).sum();
                *gi = -a[i] * 8.0 * (pairs + chain);
            }
        }
    })
    .run(record)?;
    Ok(run.into_iter().nth(m_field).expect("interaction field"))
}

/// `(1/(16δ⁴)) Σ_{σ∈{±1}⁴} (Πσ_i) u_{σδ}`, each corner a semilinear solve with
/// source `Σ σ_i δ f_i`. Corners run in parallel.
pub fn fourth_interaction_finite_difference(
    lat: &Lattice,
    a: &Coupling,
    sources: &[SourceProfile; 4],
    delta: f64,
    record: &Record,
) -> Result<Vec<GridField>> {
    let corners: Vec<[f64; 4]> = (0..16)
        .map(|m| std::array::from_fn(|i| if m >> i & 1 == 1 { -1.0 } else { 1.0 }))
        .collect();
    let solves: Vec<(f64, Vec<GridField>)> = corners
        .par_iter()
        .map(|sigma| {
            let f = Forcing::combination(sigma, sources);
            let sol = nonlinear_solve(lat, a, &f, delta, Route::Direct, record)?;
            Ok((sigma.iter().product::<f64>(), sol.fields))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / (16.0 * delta.powi(4));
    let mut out = solves[0].1.clone();
    for (l, fl) in out.iter_mut().enumerate() {
        for (i, v) in fl.values.iter_mut().enumerate() {
            let s: f64 = solves.iter().map(|(sign, f)| sign * f[l].values[i]).sum();
            *v = s * scale;
        }
    }
    Ok(out)
}

/// Common event of the plane-wave fronts `b_j·(x − anchor_j) = 0`, by least squares on
/// unit-normalized covectors; fails with the residual when the fronts do not share a point.
pub fn wavefront_intersection(sources: &[SourceProfile], tol: f64) -> Result<Vec<f64>> {
    let (q, residual) = least_squares_intersection(sources)?;
    if residual > tol {
        return Err(WaveError::NoIntersection { residual });
    }
    Ok(q)
}

/// Least-squares event and the largest distance from it to any front plane.
pub fn least_squares_intersection(sources: &[SourceProfile]) -> Result<(Vec<f64>, f64)> {
    let mut rows = Vec::new();
    for s in sources {
        let SourceProfile::MollifiedPlaneWave { covector, anchor, .. } = s else {
            return Err(WaveError::InvalidSource("intersection needs plane-wave sources".into()));
        };
        let norm = covector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b: Vec<f64> = covector.iter().map(|v| v / norm).collect();
        let rhs: f64 = b.iter().zip(anchor).map(|(x, y)| x * y).sum();
        rows.push((b, rhs));
    }
    let n = rows.first().map_or(0, |r| r.0.len());
    if rows.len() < n || n == 0 {
        return Err(WaveError::NoIntersection { residual: f64::INFINITY });
    }
    // Normal equations on at most a 3×3 system.
    let mut m = vec![vec![0.0; n + 1]; n];
    for (b, r) in &rows {
        for i in 0..n {
            for j in 0..n {
                m[i][j] += b[i] * b[j];
            }
            m[i][n] += b[i] * r;
        }
    }
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).expect("rows");
        if m[piv][c].abs() < 1e-12 {
            return Err(WaveError::NoIntersection { residual: f64::INFINITY });
        }
        m.swap(c, piv);
        for r in 0..n {
            if r != c {
                let factor = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= factor * m[c][k];
                }
            }
        }
    }
    let q: Vec<f64> = (0..n).map(|i| m[i][n] / m[i][i]).collect();
    let residual = rows
        .iter()
        .map(|(b, r)| (b.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>() - r).abs())
        .fold(0.0, f64::max);
    Ok((q, residual))
}

/// Four thin null pulses in 1+2 aimed at `event`: pulse `j` travels along `n_j`, its box
/// sits `lead_time` before the event and its front passes `delays[j]` behind the event's
/// spatial position. Zero delays make all fronts meet at `event`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseFamily {
    pub event: Vec<f64>,
    pub lead_time: f64,
    pub directions_deg: Vec<f64>,
    #[serde(default)]
    pub delays: Vec<f64>,
    pub box_half_widths: Vec<f64>,
    pub thickness: f64,
    #[serde(default = "default_width_cells")]
    pub width_cells: f64,
    #[serde(default = "default_power")]
    pub power: u32,
    pub amplitude: f64,
}

fn default_width_cells() -> f64 {
    2.0
}
fn default_power() -> u32 {
    2
}

impl PulseFamily {
    pub fn sources(&self) -> Result<Vec<SourceProfile>> {
        if self.event.len() != 3 || self.box_half_widths.len() != 3 {
            return Err(WaveError::InvalidSource("pulse families live in 1+2".into()));
        }
        let delays = if self.delays.is_empty() { vec![0.0; self.directions_deg.len()] } else { self.delays.clone() };
        if delays.len() != self.directions_deg.len() {
            return Err(WaveError::InvalidSource("one delay per direction".into()));
        }
        let q = &self.event;
        Ok(self
            .directions_deg
            .iter()
            .zip(&delays)
            .map(|(deg, d)| {
                let (sn, cs) = deg.to_radians().sin_cos();
                let back = self.lead_time + d;
                SourceProfile::MollifiedPlaneWave {
                    covector: vec![1.0, -cs, -sn],
                    anchor: vec![q[0], q[1] - d * cs, q[2] - d * sn],
                    power: self.power,
                    width_cells: self.width_cells,
                    amplitude: self.amplitude,
                    center: vec![q[0] - self.lead_time, q[1] - back * cs, q[2] - back * sn],
                    half_widths: self.box_half_widths.clone(),
                    thickness: Some(self.thickness),
                }
            })
            .collect())
    }
}

/// Square flat 1+2 grid from `t0` to `q_t + radius`, wide enough that nothing reflected
/// from the boundary reaches the scanned annulus.
pub fn cone_lattice(q: &[f64], radius: f64, h: f64, cfl: f64, t0: f64) -> Result<Lattice> {
    let t_end = q[0] + radius;
    let reach = radius + 14.0 * h + 2.0 * (t_end - t0) + q[1].abs().max(q[2].abs());
    let l = (reach / h).ceil() * h;
    Lattice::new(GridSpec::flat(&[-l, -l], &[l, l], h, cfl, t0, t_end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(default = "default_rays")]
    pub rays: usize,
    /// Half-width of the on-cone band, in cells.
    #[serde(default = "default_band")]
    pub band_cells: f64,
    /// Off-cone band `[off_inner, off_outer]` cells from the cone, on both sides.
    #[serde(default = "default_off_inner")]
    pub off_inner_cells: f64,
    #[serde(default = "default_off_outer")]
    pub off_outer_cells: f64,
    /// Ray directions (radians) to skip, with the half-width of each skipped sector.
    #[serde(default)]
    pub excluded_directions: Vec<f64>,
    #[serde(default)]
    pub excluded_half_width: f64,
    /// Radial samples per cell.
    #[serde(default = "default_per_cell")]
    pub samples_per_cell: usize,
}

fn default_rays() -> usize {
    360
}
fn default_band() -> f64 {
    3.0
}
fn default_off_inner() -> f64 {
    6.0
}
fn default_off_outer() -> f64 {
    12.0
}
fn default_per_cell() -> usize {
    4
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            rays: default_rays(),
            band_cells: default_band(),
            off_inner_cells: default_off_inner(),
            off_outer_cells: default_off_outer(),
            excluded_directions: Vec::new(),
            excluded_half_width: 0.0,
            samples_per_cell: default_per_cell(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub angle: f64,
    /// Offset from the cone of the largest `|∇M|` along the ray, in cells.
    pub peak_offset_cells: f64,
    pub on_energy: f64,
    pub off_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    /// Cone radius at the snapshot time.
    pub radius: f64,
    /// Offsets (cells) and ray-averaged `|∇M|²`: the cone-aligned profile.
    pub profile: Vec<(f64, f64)>,
    /// Offsets (cells) and ray-averaged `|M|`.
    pub amplitude_profile: Vec<(f64, f64)>,
    /// Offset of the maximum of the cone-aligned profile, in cells.
    pub peak_offset_cells: f64,
    pub median_ray_peak_offset_cells: f64,
    /// Mean `|∇M|²` on the band over the mean on the off-cone bands; `None` when `M ≡ 0`.
    pub on_off_ratio: Option<f64>,
    pub rows: Vec<ScanRow>,
}

/// Samples `|∇M|` (central differences, bilinear interpolation) along rays from the
/// spatial position of `q` over `|r − R| ≤ off_outer` cells, `R = t − t_q`.
pub fn singularity_scan(lat: &Lattice, field: &GridField, q: &[f64], cfg: &ScanConfig) -> Result<ScanReport> {
    if lat.dims() != 2 {
        return Err(WaveError::InvalidGrid("the scan needs two spatial dimensions".into()));
    }
    if lat.spec.background != Background::Flat {
        return Err(WaveError::UnsupportedBackground("the scan uses the flat light cone".into()));
    }
    let h = lat.spec.h;
    let radius = field.time - q[0];
    if radius <= cfg.off_outer_cells * h {
        return Err(WaveError::InvalidGrid(format!("cone radius {radius:.4} is inside the scan window")));
    }
    let reach = radius + cfg.off_outer_cells * h + 2.0 * h;
    for a in 0..2 {
        if q[a + 1] - reach < lat.spec.lo[a] || q[a + 1] + reach > lat.spec.hi[a] {
            return Err(WaveError::ProbeOutsideGrid(format!("scan disk leaves the grid along axis {a}")));
        }
    }
    let [nx, ny] = lat.shape;
    let u = &field.values;
    let mut grad = vec![0.0; nx * ny];
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let n = j * nx + i;
            let gx = (u[n + 1] - u[n - 1]) / (2.0 * h);
            let gy = (u[n + nx] - u[n - nx]) / (2.0 * h);
            grad[n] = (gx * gx + gy * gy).sqrt();
        }
    }
    let interp = |data: &[f64], x: f64, y: f64| {
        let fx = (x - lat.spec.lo[0]) / h;
        let fy = (y - lat.spec.lo[1]) / h;
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let at = |i: usize, j: usize| data[j * nx + i];
        (1.0 - ty) * ((1.0 - tx) * at(i, j) + tx * at(i + 1, j)) + ty * ((1.0 - tx) * at(i, j + 1) + tx * at(i + 1, j + 1))
    };
    let per = cfg.samples_per_cell.max(1);
    let half = (cfg.off_outer_cells * per as f64).round() as i64;
    let offsets: Vec<f64> = (-half..=half).map(|m| m as f64 / per as f64).collect();
    let excluded = |ang: f64| {
        cfg.excluded_directions.iter().any(|d| {
            let diff = (ang - d).rem_euclid(std::f64::consts::TAU);
            diff.min(std::f64::consts::TAU - diff) <= cfg.excluded_half_width
        })
    };
    let mut rows = Vec::new();
    let mut prof = vec![0.0; offsets.len()];
    let mut amp = vec![0.0; offsets.len()];
    let (mut on_sum, mut on_n, mut off_sum, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for r in 0..cfg.rays {
        let ang = r as f64 * std::f64::consts::TAU / cfg.rays as f64;
        if excluded(ang) {
            continue;
        }
        let (c, s) = (ang.cos(), ang.sin());
        let (mut best, mut best_off) = (-1.0, 0.0);
        let (mut on_e, mut off_e) = (0.0, 0.0);
        for (m, &o) in offsets.iter().enumerate() {
            let rr = radius + o * h;
            let (x, y) = (q[1] + rr * c, q[2] + rr * s);
            let gm = interp(&grad, x, y);
            let e = gm * gm;
            prof[m] += e;
            amp[m] += interp(u, x, y).abs();
            if gm > best {
                best = gm;
                best_off = o;
            }
            if o.abs() <= cfg.band_cells {
                on_e += e;
                on_n += 1;
            } else if o.abs() >= cfg.off_inner_cells {
                off_e += e;
                off_n += 1;
            }
        }
        on_sum += on_e;
        off_sum += off_e;
        rows.push(ScanRow { angle: ang, peak_offset_cells: best_off, on_energy: on_e, off_energy: off_e });
    }
    if rows.is_empty() {
        return Err(WaveError::InvalidGrid("every ray direction is excluded".into()));
    }
    let count = rows.len() as f64;
    let profile: Vec<(f64, f64)> = offsets.iter().zip(&prof).map(|(o, e)| (*o, e / count)).collect();
    let amplitude_profile: Vec<(f64, f64)> = offsets.iter().zip(&amp).map(|(o, e)| (*o, e / count)).collect();
    let peak_offset_cells = profile.iter().fold((0.0, -1.0), |b, &(o, e)| if e > b.1 { (o, e) } else { b }).0;
    let mut peaks: Vec<f64> = rows.iter().map(|r| r.peak_offset_cells).collect();
    peaks.sort_by(f64::total_cmp);
    let median_ray_peak_offset_cells = peaks[peaks.len() / 2];
    let on_mean = on_sum / on_n as f64;
    let off_mean = off_sum / off_n as f64;
    let on_off_ratio = if off_mean > 0.0 { Some(on_mean / off_mean) } else { None };
    Ok(ScanReport {
        radius,
        profile,
        amplitude_profile,
        peak_offset_cells,
        median_ray_peak_offset_cells,
        on_off_ratio,
        rows,
    })
}
