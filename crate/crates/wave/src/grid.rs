//! Lattices, frozen-coefficient backgrounds and the leapfrog step.

use chrono_lens_core::metric::{Metric, MetricSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};

/// Background metric: flat, or a static product `−dt² + h(y)` sampled once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    #[default]
    Flat,
    Frozen {
        metric: MetricSpec,
        /// Time slice at which the coefficients are sampled.
        #[serde(default)]
        time: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Number of spatial dimensions (1 or 2).
    pub spatial_dims: usize,
    pub h: f64,
    pub k: f64,
    /// Spatial box; both corners are Dirichlet boundary nodes.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t0: f64,
    pub steps: usize,
    #[serde(default)]
    pub background: Background,
}

impl GridSpec {
    /// Flat grid with `k = cfl·h`, covering `[t0, t1]`.
    pub fn flat(lo: &[f64], hi: &[f64], h: f64, cfl: f64, t0: f64, t1: f64) -> Self {
        let k = cfl * h;
        Self {
            spatial_dims: lo.len(),
            h,
            k,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            t0,
            steps: ((t1 - t0) / k).round() as usize,
            background: Background::Flat,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.steps as f64 * self.k
    }

    /// Nodes per axis (the second entry is 1 in 1+1).
    pub fn shape(&self) -> Result<[usize; 2]> {
        let mut shape = [1, 1];
        for a in 0..self.spatial_dims {
            let cells = (self.hi[a] - self.lo[a]) / self.h;
            if !(cells >= 2.0) || (cells - cells.round()).abs() > 1e-6 {
                return Err(WaveError::InvalidGrid(format!("axis {a}: extent is not a multiple of h")));
            }
            shape[a] = cells.round() as usize + 1;
        }
        Ok(shape)
    }
}

/// Values of one field on one time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub step: usize,
    pub time: f64,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl GridField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.shape[0] + i]
    }

    pub fn l2(&self, h: f64, dims: usize) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * h.powi(dims as i32)).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Relative L² distance `‖a − b‖/‖b‖`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// A validated grid with sampled coefficients of `w·u_tt = ∂_i(A_i ∂_i u) + w·g`,
/// `w = √det h`, `A_i = √det h · h^{ii}`, i.e. `□u = g` with `□ = ∂_t² − Δ_h`.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub spec: GridSpec,
    pub shape: [usize; 2],
    pub(crate) weight: Vec<f64>,
    /// Face coefficients between node `(i, j)` and `(i+1, j)`.
    pub(crate) ax: Vec<f64>,
    /// Face coefficients between node `(i, j)` and `(i, j+1)`.
    pub(crate) ay: Vec<f64>,
    /// Largest coordinate wave speed.
    pub c_max: f64,
}

impl Lattice {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let d = spec.spatial_dims;
        if !(d == 1 || d == 2) || spec.lo.len() != d || spec.hi.len() != d {
            return Err(WaveError::InvalidGrid("need 1 or 2 spatial dimensions with matching extents".into()));
        }
        if !(spec.h > 0.0 && spec.k > 0.0) || spec.steps < 2 {
            return Err(WaveError::InvalidGrid("h, k must be positive and steps ≥ 2".into()));
        }
        let shape = spec.shape()?;
        let nodes = shape[0] * shape[1];
        let mut weight = vec![1.0; nodes];
        let mut cx = vec![1.0; nodes];
        let mut cy = vec![if d == 2 { 1.0 } else { 0.0 }; nodes];
        if let Background::Frozen { metric, time } = &spec.background {
            let m = Metric::new(metric.clone()).map_err(|e| WaveError::UnsupportedBackground(e.to_string()))?;
            if m.dim() != d + 1 {
                return Err(WaveError::UnsupportedBackground(format!("metric dimension {} ≠ {}", m.dim(), d + 1)));
            }
            for j in 0..shape[1] {
                for i in 0..shape[0] {
                    let mut x = [0.0; 4];
                    x[0] = *time;
                    x[1] = spec.lo[0] + i as f64 * spec.h;
                    if d == 2 {
                        x[2] = spec.lo[1] + j as f64 * spec.h;
                    }
                    if !m.contains(&x) {
                        return Err(WaveError::UnsupportedBackground(format!("node {:?} outside the metric domain", &x[..=d])));
                    }
                    let g = m.g(&x);
                    let off = (0..=d).flat_map(|a| (0..=d).filter(move |&b| b != a).map(move |b| (a, b)));
                    if (g[0][0] + 1.0).abs() > 1e-12 || off.clone().any(|(a, b)| g[a][b].abs() > 1e-12) {
                        return Err(WaveError::UnsupportedBackground("need g = −dt² + diagonal h(y)".into()));
                    }
                    let det: f64 = (1..=d).map(|a| g[a][a]).product();
                    let n = j * shape[0] + i;
                    weight[n] = det.sqrt();
                    cx[n] = det.sqrt() / g[1][1];
                    if d == 2 {
                        cy[n] = det.sqrt() / g[2][2];
                    }
                }
            }
        }
        let mut c_max: f64 = 0.0;
        for n in 0..nodes {
            c_max = c_max.max((cx[n] / weight[n]).sqrt()).max((cy[n] / weight[n]).sqrt());
        }
        let ratio = spec.k * c_max.max(1.0) / spec.h;
        if ratio > 0.5 + 1e-12 {
            return Err(WaveError::CflViolation { ratio });
        }
        let face = |c: &[f64], a: usize, b: usize| 0.5 * (c[a] + c[b]);
        let mut ax = vec![0.0; nodes];
        let mut ay = vec![0.0; nodes];
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let n = j * shape[0] + i;
                if i + 1 < shape[0] {
                    ax[n] = face(&cx, n, n + 1);
                }
                if d == 2 && j + 1 < shape[1] {
                    ay[n] = face(&cy, n, n + shape[0]);
                }
            }
        }
        Ok(Self { spec, shape, weight, ax, ay, c_max })
    }

    pub fn nodes(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn dims(&self) -> usize {
        self.spec.spatial_dims
    }

    pub fn time(&self, step: usize) -> f64 {
        self.spec.t0 + step as f64 * self.spec.k
    }

    /// Spatial coordinates of node `(i, j)`.
    pub fn coords(&self, i: usize, j: usize) -> [f64; 2] {
        let x = self.spec.lo[0] + i as f64 * self.spec.h;
        let y = if self.dims() == 2 { self.spec.lo[1] + j as f64 * self.spec.h } else { 0.0 };
        [x, y]
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.shape[0] + i
    }

    /// `next = 2cur − prev + k²(∂(A∂cur)/w + g)`; boundary nodes stay zero.
    pub fn step(&self, prev: &[f64], cur: &[f64], g: &[f64], next: &mut [f64]) {
        let (nx, ny) = (self.shape[0], self.shape[1]);
        let k2 = self.spec.k * self.spec.k;
        let ih2 = 1.0 / (self.spec.h * self.spec.h);
        let two_d = self.dims() == 2;
        next.iter_mut().for_each(|v| *v = 0.0);
        let (j_lo, j_hi) = if two_d { (1, ny - 1) } else { (0, 1) };
        for j in j_lo..j_hi {
            for i in 1..nx - 1 {
                let n = j * nx + i;
                let u = cur[n];
                let mut flux = self.ax[n] * (cur[n + 1] - u) - self.ax[n - 1] * (u - cur[n - 1]);
                if two_d {
                    flux += self.ay[n] * (cur[n + nx] - u) - self.ay[n - nx] * (u - cur[n - nx]);
                }
                next[n] = 2.0 * u - prev[n] + k2 * (flux * ih2 / self.weight[n] + g[n]);
            }
        }
    }

    /// Bilinear form `Σ_faces A (Du)(Dv)/h²` times the cell volume.
    fn stiffness(&self, u: &[f64], v: &[f64]) -> f64 {
        let nx = self.shape[0];
        let mut s = 0.0;
        for n in 0..self.nodes() {
            let i = n % nx;
            if i + 1 < nx {
                s += self.ax[n] * (u[n + 1] - u[n]) * (v[n + 1] - v[n]);
            }
            if self.dims() == 2 && n + nx < self.nodes() {
                s += self.ay[n] * (u[n + nx] - u[n]) * (v[n + nx] - v[n]);
            }
        }
        s / (self.spec.h * self.spec.h) * self.spec.h.powi(self.dims() as i32)
    }

    /// Discrete energy between two consecutive levels; exactly conserved by the
    /// source-free leapfrog step.
    pub fn energy(&self, cur: &[f64], next: &[f64]) -> f64 {
        let k = self.spec.k;
        let kinetic: f64 = (0..self.nodes()).map(|n| self.weight[n] * ((next[n] - cur[n]) / k).powi(2)).sum();
        0.5 * kinetic * self.spec.h.powi(self.dims() as i32) + 0.5 * self.stiffness(next, cur)
    }

    /// Checks that the numerical domain of dependence of the probe region
    /// (center, radius, up to time `t`) stays clear of the boundary nodes.
    pub fn check_probe(&self, center: &[f64], radius: f64, t: f64) -> Result<()> {
        let reach = radius + (t - self.spec.t0) * self.spec.h / self.spec.k;
        for a in 0..self.dims() {
            let lo = self.spec.lo[a] + self.spec.h;
            let hi = self.spec.hi[a] - self.spec.h;
            if center[a] - reach < lo || center[a] + reach > hi {
                return Err(WaveError::ProbeOutsideGrid(format!(
                    "axis {a}: [{:.3}, {:.3}] exceeds [{lo:.3}, {hi:.3}]",
                    center[a] - reach,
                    center[a] + reach
                )));
            }
        }
        Ok(())
    }

    /// Marks in `mask` the nodes reachable from `mask` in one step of the stencil.
    pub fn dilate(&self, mask: &[bool]) -> Vec<bool> {
        let nx = self.shape[0];
        let mut out = mask.to_vec();
        for n in 0..self.nodes() {
            if !mask[n] {
                continue;
            }
            let i = n % nx;
            if i > 0 {
                out[n - 1] = true;
            }
            if i + 1 < nx {
                out[n + 1] = true;
            }
            if self.dims() == 2 {
                if n >= nx {
                    out[n - nx] = true;
                }
                if n + nx < self.nodes() {
                    out[n + nx] = true;
                }
            }
        }
        out
    }
}
