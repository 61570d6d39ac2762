//! Catalog of analytic Lorentzian metrics on a single coordinate box.
//!
//! Every family is written in a chart where `x⁰` is a time function and the
//! signature is `(−,+,…,+)`. Points and vectors are stored in fixed `[f64; 4]`
//! arrays; components past the spacetime dimension are kept at zero.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;
pub type Vec4 = [f64; MAX_DIM];
pub type Mat4 = [[f64; MAX_DIM]; MAX_DIM];
/// `gamma[k][i][j] = Γ^k_{ij}`.
pub type ChristoffelTable = [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM];

/// Pads a coordinate slice into a `Vec4`.
pub fn point(c: &[f64]) -> Vec4 {
    let mut p = [0.0; MAX_DIM];
    p[..c.len().min(MAX_DIM)].copy_from_slice(&c[..c.len().min(MAX_DIM)]);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Minkowski,
    ConformalBump,
    ProductSpatial,
    EinsteinCylinder,
    SchwarzschildLike,
}

impl Family {
    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            Family::Minkowski => &[],
            Family::ConformalBump => &[
                "amplitude", "width", "width_t", "center_0", "center_1", "center_2", "center_3",
            ],
            Family::ProductSpatial => &["amplitude", "width", "center_1", "center_2", "center_3"],
            Family::EinsteinCylinder => &["radius"],
            Family::SchwarzschildLike => &["mass"],
        }
    }
}

/// Serializable description of a catalog spacetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub family: Family,
    pub dim: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub domain: Vec<[f64; 2]>,
}

impl MetricSpec {
    pub fn new(family: Family, dim: usize, domain: Vec<[f64; 2]>) -> Self {
        Self { family, dim, params: BTreeMap::new(), domain }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    /// Minkowski space on the cube `[-half, half]^dim`.
    pub fn minkowski(dim: usize, half: f64) -> Self {
        Self::new(Family::Minkowski, dim, vec![[-half, half]; dim])
    }

    fn param(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalCharacter {
    Timelike,
    Null,
    Spacelike,
}

/// A vector attached to an event, classified against the metric at its base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector {
    pub base: Vec4,
    pub xi: Vec4,
    pub character: CausalCharacter,
}

/// Pointwise metric data: components, inverse, determinant and optional partials.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEval {
    pub dim: usize,
    pub g: Mat4,
    pub g_inv: Mat4,
    pub det_g: f64,
    /// `partials[k][i][j] = ∂_k g_{ij}`.
    pub partials: Option<[Mat4; MAX_DIM]>,
}

/// Relative tolerance for classifying a vector as null.
pub const NULL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Model {
    Minkowski,
    ConformalBump { amp: f64, widths: Vec4, center: Vec4 },
    ProductSpatial { amp: f64, width: f64, center: Vec4 },
    EinsteinCylinder { radius: f64 },
    Schwarzschild { mass: f64 },
}

/// A validated catalog metric ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    spec: MetricSpec,
    dim: usize,
    lo: Vec4,
    hi: Vec4,
    model: Model,
}

/// Value, gradient and Hessian of the compactly supported bump
/// `A·exp(1 − 1/(1 − ρ))`, `ρ = Σ ((x_i − c_i)/w_i)²`, which vanishes for `ρ ≥ 1`.
pub fn bump_profile(x: &Vec4, dim: usize, amp: f64, widths: &Vec4, center: &Vec4) -> (f64, Vec4, Mat4) {
    let mut rho = 0.0;
    let mut drho = [0.0; MAX_DIM];
    for i in 0..dim {
        let d = (x[i] - center[i]) / widths[i];
        rho += d * d;
        drho[i] = 2.0 * d / widths[i];
    }
    let mut grad = [0.0; MAX_DIM];
    let mut hess = [[0.0; MAX_DIM]; MAX_DIM];
    if rho >= 1.0 || amp == 0.0 {
        return (0.0, grad, hess);
    }
    let om = 1.0 - rho;
    let phi = amp * (1.0 - 1.0 / om).exp();
    let d1 = -phi / (om * om);
    let d2 = phi / om.powi(4) - 2.0 * phi / om.powi(3);
    for i in 0..dim {
        grad[i] = d1 * drho[i];
        for j in 0..dim {
            hess[i][j] = d2 * drho[i] * drho[j];
        }
        hess[i][i] += d1 * 2.0 / (widths[i] * widths[i]);
    }
    (phi, grad, hess)
}

/// Spatial Gaussian `A·exp(−|y − c|²/(2w²))` over coordinates `1..dim`, with gradient.
fn spatial_gaussian(x: &Vec4, dim: usize, amp: f64, width: f64, center: &Vec4) -> (f64, Vec4) {
    let mut r2 = 0.0;
    for a in 1..dim {
        r2 += (x[a] - center[a]).powi(2);
    }
    let psi = amp * (-r2 / (2.0 * width * width)).exp();
    let mut grad = [0.0; MAX_DIM];
    for a in 1..dim {
        grad[a] = -psi * (x[a] - center[a]) / (width * width);
    }
    (psi, grad)
}

impl Metric {
    pub fn new(spec: MetricSpec) -> Result<Self> {
        let dim = spec.dim;
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidSpec(format!("dimension {dim} not in 2..=4")));
        }
        if spec.domain.len() != dim {
            return Err(Error::InvalidSpec(format!(
                "domain has {} intervals for dimension {dim}",
                spec.domain.len()
            )));
        }
        let allowed = spec.family.allowed_params();
        for name in spec.params.keys() {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::InvalidSpec(format!("unknown parameter `{name}` for {:?}", spec.family)));
            }
        }
        for (name, v) in &spec.params {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!("parameter `{name}` is not finite")));
            }
        }
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        for (i, [a, b]) in spec.domain.iter().enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidSpec(format!("domain interval {i} is empty or unbounded")));
            }
            lo[i] = *a;
            hi[i] = *b;
        }
        let model = match spec.family {
            Family::Minkowski => Model::Minkowski,
            Family::ConformalBump => {
                let width = spec.param("width", 1.0);
                let width_t = spec.param("width_t", width);
                if width <= 0.0 || width_t <= 0.0 {
                    return Err(Error::InvalidSpec("bump widths must be positive".into()));
                }
                let mut widths = [width; MAX_DIM];
                widths[0] = width_t;
                let mut center = [0.0; MAX_DIM];
                for (i, c) in center.iter_mut().enumerate().take(dim) {
                    *c = spec.param(&format!("center_{i}"), 0.0);
                }
                Model::ConformalBump { amp: spec.param("amplitude", 0.0), widths, center }
            }
            Family::ProductSpatial => {
                let width = spec.param("width", 1.0);
                if width <= 0.0 {
                    return Err(Error::InvalidSpec("profile width must be positive".into()));
                }
                let mut center = [0.0; MAX_DIM];
                for (i, c) in center.iter_mut().enumerate().take(dim).skip(1) {
                    *c = spec.param(&format!("center_{i}"), 0.0);
                }
                Model::ProductSpatial { amp: spec.param("amplitude", 0.0), width, center }
            }
            Family::EinsteinCylinder => {
                let radius = spec.param("radius", 1.0);
                if radius <= 0.0 {
                    return Err(Error::InvalidSpec("cylinder radius must be positive".into()));
                }
                // polar angles must stay away from the coordinate poles
                for axis in 1..dim.saturating_sub(1) {
                    if lo[axis] <= 0.0 || hi[axis] >= PI {
                        return Err(Error::InvalidSpec(format!(
                            "polar coordinate {axis} must lie strictly inside (0, π)"
                        )));
                    }
                }
                Model::EinsteinCylinder { radius }
            }
            Family::SchwarzschildLike => {
                if dim != 4 {
                    return Err(Error::InvalidSpec("schwarzschild_like requires dim = 4".into()));
                }
                let mass = spec.param("mass", 1.0);
                if mass <= 0.0 {
                    return Err(Error::InvalidSpec("mass must be positive".into()));
                }
                if lo[1] <= 2.0 * mass {
                    return Err(Error::InvalidSpec("radial domain must stay outside r = 2m".into()));
                }
                if lo[2] <= 0.0 || hi[2] >= PI {
                    return Err(Error::InvalidSpec("θ must lie strictly inside (0, π)".into()));
                }
                Model::Schwarzschild { mass }
            }
        };
        Ok(Self { spec, dim, lo, hi, model })
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn lower(&self) -> Vec4 {
        self.lo
    }

    pub fn upper(&self) -> Vec4 {
        self.hi
    }

    /// True for families whose curvature vanishes identically.
    pub fn is_flat(&self) -> bool {
        match self.model {
            Model::Minkowski => true,
            Model::ConformalBump { amp, .. } | Model::ProductSpatial { amp, .. } => amp == 0.0,
            Model::EinsteinCylinder { .. } => self.dim == 2,
            Model::Schwarzschild { .. } => false,
        }
    }

    /// True for families conformal to a flat metric; null conjugate points are then absent.
    pub fn is_conformally_flat(&self) -> bool {
        match self.model {
            Model::Minkowski | Model::ConformalBump { .. } => true,
            _ => self.is_flat(),
        }
    }

    /// The azimuthal coordinate that is identified modulo 2π, if any.
    pub fn periodic_axis(&self) -> Option<usize> {
        match self.model {
            Model::EinsteinCylinder { .. } => Some(self.dim - 1),
            _ => None,
        }
    }

    /// Coordinate difference `b − a`, with the periodic axis reduced to (−π, π].
    pub fn chart_difference(&self, a: &Vec4, b: &Vec4) -> Vec4 {
        let mut d = [0.0; MAX_DIM];
        for i in 0..self.dim {
            d[i] = b[i] - a[i];
        }
        if let Some(p) = self.periodic_axis() {
            d[p] = wrap_angle(d[p]);
        }
        d
    }

    /// Reduces the periodic coordinate into `[lo, lo + 2π)`.
    pub fn wrap(&self, x: &mut Vec4) {
        if let Some(p) = self.periodic_axis() {
            let lo = self.lo[p];
            x[p] = lo + (x[p] - lo).rem_euclid(2.0 * PI);
        }
    }

    pub fn contains(&self, x: &Vec4) -> bool {
        let per = self.periodic_axis();
        (0..self.dim).all(|i| Some(i) == per || (x[i] >= self.lo[i] && x[i] <= self.hi[i]))
    }

    /// True when `x` is at least `margin` (per axis, scaled by `1+|x|`) inside the box.
    pub fn contains_with_margin(&self, x: &Vec4, rel_margin: f64) -> bool {
        let per = self.periodic_axis();
        (0..self.dim).all(|i| {
            let m = rel_margin * (1.0 + x[i].abs());
            Some(i) == per || (x[i] - m >= self.lo[i] && x[i] + m <= self.hi[i])
        })
    }

    fn check(&self, x: &Vec4) -> Result<()> {
        if self.contains(x) && x.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { x: x[..self.dim].to_vec() })
        }
    }

    /// Metric components at `x` (no domain check).
    pub fn g(&self, x: &Vec4) -> Mat4 {
        let n = self.dim;
        let mut g = [[0.0; MAX_DIM]; MAX_DIM];
        match self.model {
            Model::Minkowski => {
                g[0][0] = -1.0;
                for a in 1..n {
                    g[a][a] = 1.0;
                }
            }
            Model::ConformalBump { amp, widths, center } => {
                let (phi, _, _) = bump_profile(x, n, amp, &widths, &center);
                let e = (2.0 * phi).exp();
                g[0][0] = -e;
                for a in 1..n {
                    g[a][a] = e;
                }
            }
            Model::ProductSpatial { amp, width, center } => {
                let (psi, _) = spatial_gaussian(x, n, amp, width, &center);
                let e = (2.0 * psi).exp();
                g[0][0] = -1.0;
                for a in 1..n {
                    g[a][a] = e;
                }
            }
            Model::EinsteinCylinder { radius } => {
                g[0][0] = -1.0;
                let r2 = radius * radius;
                let mut w = r2;
                for a in 1..n {
                    g[a][a] = w;
                    if a < n - 1 {
                        w *= x[a].sin().powi(2);
                    }
                }
            }
            Model::Schwarzschild { mass } => {
                let r = x[1];
                let f = 1.0 - 2.0 * mass / r;
                g[0][0] = -f;
                g[1][1] = 1.0 / f;
                g[2][2] = r * r;
                g[3][3] = r * r * x[2].sin().powi(2);
            }
        }
        g
    }

    /// Metric components and analytic first partials `dg[k][i][j] = ∂_k g_{ij}`.
    pub fn g_and_partials(&self, x: &Vec4) -> (Mat4, [Mat4; MAX_DIM]) {
        let n = self.dim;
        let g = self.g(x);
        let mut dg = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        match self.model {
            Model::Minkowski => {}
            Model::ConformalBump { amp, widths, center } => {
                let (_, grad, _) = bump_profile(x, n, amp, &widths, &center);
                for k in 0..n {
                    for i in 0..n {
                        dg[k][i][i] = 2.0 * grad[k] * g[i][i];
                    }
                }
            }
            Model::ProductSpatial { amp, width, center } => {
                let (_, grad) = spatial_gaussian(x, n, amp, width, &center);
                for k in 1..n {
                    for a in 1..n {
                        dg[k][a][a] = 2.0 * grad[k] * g[a][a];
                    }
                }
            }
            Model::EinsteinCylinder { radius } => {
                // g_aa = R² Π_{b<a, b≥1} sin² x_b
                let r2 = radius * radius;
                for a in 2..n {
                    for k in 1..a {
                        let mut prod = r2;
                        for b in 1..a {
                            let s = x[b].sin();
                            prod *= if b == k { 2.0 * s * x[b].cos() } else { s * s };
                        }
                        dg[k][a][a] = prod;
                    }
                }
            }
            Model::Schwarzschild { mass } => {
                let r = x[1];
                let f = 1.0 - 2.0 * mass / r;
                let df = 2.0 * mass / (r * r);
                let s = x[2].sin();
                dg[1][0][0] = -df;
                dg[1][1][1] = -df / (f * f);
                dg[1][2][2] = 2.0 * r;
                dg[1][3][3] = 2.0 * r * s * s;
                dg[2][3][3] = 2.0 * r * r * s * x[2].cos();
            }
        }
        (g, dg)
    }

    /// Christoffel symbols from analytic partials (no domain check).
    pub fn christoffel_at(&self, x: &Vec4) -> ChristoffelTable {
        let (g, dg) = self.g_and_partials(x);
        christoffel_from(self.dim, &g, &dg)
    }

    /// Geodesic acceleration `−Γ^k_{ij} v^i v^j`.
    pub fn accel(&self, x: &Vec4, v: &Vec4) -> Vec4 {
        let n = self.dim;
        let mut a = [0.0; MAX_DIM];
        match self.model {
            Model::Minkowski => {}
            Model::ConformalBump { amp, widths, center } => {
                let (_, grad, _) = bump_profile(x, n, amp, &widths, &center);
                let vdphi: f64 = (0..n).map(|i| v[i] * grad[i]).sum();
                let vv = minkowski_dot(n, v, v);
                // η^{kl}∂_lφ
                a[0] = -2.0 * v[0] * vdphi - vv * grad[0];
                for k in 1..n {
                    a[k] = -2.0 * v[k] * vdphi + vv * grad[k];
                }
            }
            Model::ProductSpatial { amp, width, center } => {
                let (_, grad) = spatial_gaussian(x, n, amp, width, &center);
                let vdpsi: f64 = (1..n).map(|i| v[i] * grad[i]).sum();
                let vv: f64 = (1..n).map(|i| v[i] * v[i]).sum();
                for k in 1..n {
                    a[k] = -2.0 * v[k] * vdpsi + vv * grad[k];
                }
            }
            _ => {
                let gam = self.christoffel_at(x);
                for k in 0..n {
                    let mut s = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            s += gam[k][i][j] * v[i] * v[j];
                        }
                    }
                    a[k] = -s;
                }
            }
        }
        a
    }

    pub fn inner(&self, x: &Vec4, a: &Vec4, b: &Vec4) -> f64 {
        bilinear(self.dim, &self.g(x), a, b)
    }

    pub fn norm_sq(&self, x: &Vec4, v: &Vec4) -> f64 {
        self.inner(x, v, v)
    }

    /// Riemannian companion `g⁺` (no domain check).
    pub fn companion_at(&self, x: &Vec4) -> Mat4 {
        companion_of(self.dim, &self.g(x))
    }

    pub fn companion_norm(&self, x: &Vec4, v: &Vec4) -> f64 {
        bilinear(self.dim, &self.companion_at(x), v, v).max(0.0).sqrt()
    }

    /// Completes spatial components into the future-pointing null vector.
    pub fn future_null(&self, x: &Vec4, v: &Vec4) -> Vec4 {
        let n = self.dim;
        let g = self.g(x);
        let a = g[0][0];
        let mut b = 0.0;
        let mut c = 0.0;
        for i in 1..n {
            b += 2.0 * g[0][i] * v[i];
            for j in 1..n {
                c += g[i][j] * v[i] * v[j];
            }
        }
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let mut out = *v;
        out[0] = (-b - disc.sqrt()) / (2.0 * a);
        out
    }

    /// A g-orthonormal frame at `x`; `frame[0]` is future timelike.
    pub fn orthonormal_frame(&self, x: &Vec4) -> [Vec4; MAX_DIM] {
        let n = self.dim;
        let g = self.g(x);
        let mut frame = [[0.0; MAX_DIM]; MAX_DIM];
        for a in 0..n {
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
            for i in 0..n {
                v[i] /= nrm;
            }
            frame[a] = v;
        }
        frame
    }

    /// Classifies `xi` at `x` using the relative null tolerance.
    pub fn classify(&self, x: &Vec4, xi: &Vec4) -> (CausalCharacter, f64) {
        let gv = self.norm_sq(x, xi);
        let plus = bilinear(self.dim, &self.companion_at(x), xi, xi);
        let ch = if gv.abs() <= NULL_TOL * plus {
            CausalCharacter::Null
        } else if gv < 0.0 {
            CausalCharacter::Timelike
        } else {
            CausalCharacter::Spacelike
        };
        (ch, gv)
    }

    pub fn tangent(&self, base: &Vec4, xi: &Vec4) -> TangentVector {
        TangentVector { base: *base, xi: *xi, character: self.classify(base, xi).0 }
    }

    // ---- checked public operations -------------------------------------

    pub fn eval_metric(&self, e: &Vec4, with_partials: bool) -> Result<MetricEval> {
        self.check(e)?;
        let (g, dg) = self.g_and_partials(e);
        let (g_inv, det_g) = invert(self.dim, &g)
            .ok_or_else(|| Error::IllConditioned("singular metric".into()))?;
        Ok(MetricEval {
            dim: self.dim,
            g,
            g_inv,
            det_g,
            partials: with_partials.then_some(dg),
        })
    }

    pub fn christoffel(&self, e: &Vec4) -> Result<ChristoffelTable> {
        self.check(e)?;
        Ok(self.christoffel_at(e))
    }

    /// Christoffel symbols from 4th-order central differences of the metric.
    pub fn christoffel_fd(&self, e: &Vec4) -> Result<ChristoffelTable> {
        self.check(e)?;
        if !self.contains_with_margin(e, 2.0 * FD_REL_STEP) {
            return Err(Error::IllConditioned("finite-difference stencil leaves the domain".into()));
        }
        let n = self.dim;
        let g = self.g(e);
        let mut dg = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for k in 0..n {
            let d = central_diff(e, k, |y| self.g(y));
            dg[k] = d;
        }
        Ok(christoffel_from(n, &g, &dg))
    }

    /// `dgamma[l][k][i][j] = ∂_l Γ^k_{ij}` by 4th-order central differences.
    pub fn christoffel_partials(&self, x: &Vec4) -> [ChristoffelTable; MAX_DIM] {
        let mut out = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];
        if matches!(self.model, Model::Minkowski) {
            return out;
        }
        for l in 0..self.dim {
            out[l] = central_diff(x, l, |y| self.christoffel_at(y));
        }
        out
    }

    /// Ricci tensor `R_{jk} = ∂_iΓ^i_{jk} − ∂_kΓ^i_{ij} + Γ^i_{ip}Γ^p_{jk} − Γ^i_{kp}Γ^p_{ij}`.
    pub fn ricci(&self, e: &Vec4) -> Result<Mat4> {
        self.check(e)?;
        if !self.contains_with_margin(e, 2.0 * FD_REL_STEP) {
            return Err(Error::IllConditioned("finite-difference stencil leaves the domain".into()));
        }
        Ok(self.ricci_at(e))
    }

    /// Unchecked Ricci tensor.
    pub fn ricci_at(&self, e: &Vec4) -> Mat4 {
        let n = self.dim;
        let mut ric = [[0.0; MAX_DIM]; MAX_DIM];
        if matches!(self.model, Model::Minkowski) {
            return ric;
        }
        let gam = self.christoffel_at(e);
        let dgam = self.christoffel_partials(e);
        for j in 0..n {
            for k in j..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += dgam[i][i][j][k] - dgam[k][i][i][j];
                    for p in 0..n {
                        s += gam[i][i][p] * gam[p][j][k] - gam[i][k][p] * gam[p][i][j];
                    }
                }
                ric[j][k] = s;
                ric[k][j] = s;
            }
        }
        ric
    }

    pub fn riemannian_companion(&self, e: &Vec4) -> Result<Mat4> {
        self.check(e)?;
        Ok(self.companion_at(e))
    }

    pub fn causal_character(&self, v: &TangentVector) -> (CausalCharacter, f64) {
        self.classify(&v.base, &v.xi)
    }
}

/// Relative step for metric finite differences.
pub const FD_REL_STEP: f64 = 1e-5;

fn central_diff<T, F>(x: &Vec4, axis: usize, f: F) -> T
where
    T: FdArray,
    F: Fn(&Vec4) -> T,
{
    let h = FD_REL_STEP * (1.0 + x[axis].abs());
    let at = |m: f64| {
        let mut y = *x;
        y[axis] += m * h;
        f(&y)
    };
    let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
    T::combine(&[(&p2, -1.0), (&p1, 8.0), (&m1, -8.0), (&m2, 1.0)], 1.0 / (12.0 * h))
}

trait FdArray: Sized {
    fn combine(terms: &[(&Self, f64)], scale: f64) -> Self;
}

impl FdArray for Mat4 {
    fn combine(terms: &[(&Self, f64)], scale: f64) -> Self {
        let mut out = [[0.0; MAX_DIM]; MAX_DIM];
        for (t, w) in terms {
            for i in 0..MAX_DIM {
                for j in 0..MAX_DIM {
                    out[i][j] += w * t[i][j];
                }
            }
        }
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        out
    }
}

impl FdArray for ChristoffelTable {
    fn combine(terms: &[(&Self, f64)], scale: f64) -> Self {
        let mut out = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for (t, w) in terms {
            for k in 0..MAX_DIM {
                for i in 0..MAX_DIM {
                    for j in 0..MAX_DIM {
                        out[k][i][j] += w * t[k][i][j];
                    }
                }
            }
        }
        for a in out.iter_mut() {
            for b in a.iter_mut() {
                for v in b.iter_mut() {
                    *v *= scale;
                }
            }
        }
        out
    }
}

pub fn christoffel_from(n: usize, g: &Mat4, dg: &[Mat4; MAX_DIM]) -> ChristoffelTable {
    let mut gam = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
    let Some((ginv, _)) = invert(n, g) else {
        return gam;
    };
    for k in 0..n {
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for l in 0..n {
                    if ginv[k][l] != 0.0 {
                        s += ginv[k][l] * (dg[i][j][l] + dg[j][i][l] - dg[l][i][j]);
                    }
                }
                gam[k][i][j] = 0.5 * s;
                gam[k][j][i] = 0.5 * s;
            }
        }
    }
    gam
}

pub fn bilinear(n: usize, m: &Mat4, a: &Vec4, b: &Vec4) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += m[i][j] * a[i] * b[j];
        }
    }
    s
}

pub fn minkowski_dot(n: usize, a: &Vec4, b: &Vec4) -> f64 {
    let mut s = -a[0] * b[0];
    for i in 1..n {
        s += a[i] * b[i];
    }
    s
}

/// Lowers an index: `(g v)_i`.
pub fn lower(n: usize, g: &Mat4, v: &Vec4) -> Vec4 {
    let mut out = [0.0; MAX_DIM];
    for i in 0..n {
        for j in 0..n {
            out[i] += g[i][j] * v[j];
        }
    }
    out
}

pub fn to_dmatrix(n: usize, m: &Mat4) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| m[i][j])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Mat4 {
    let mut out = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..m.nrows().min(MAX_DIM) {
        for j in 0..m.ncols().min(MAX_DIM) {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

/// Inverse and determinant of the leading `n×n` block.
pub fn invert(n: usize, m: &Mat4) -> Option<(Mat4, f64)> {
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || m[i][j] == 0.0));
    if diagonal {
        let mut inv = [[0.0; MAX_DIM]; MAX_DIM];
        let mut det = 1.0;
        for i in 0..n {
            if m[i][i] == 0.0 {
                return None;
            }
            inv[i][i] = 1.0 / m[i][i];
            det *= m[i][i];
        }
        return Some((inv, det));
    }
    let dm = to_dmatrix(n, m);
    let det = dm.determinant();
    let inv = dm.try_inverse()?;
    Some((from_dmatrix(&inv), det))
}

/// Same eigenvectors as `g`, absolute eigenvalues.
pub fn companion_of(n: usize, g: &Mat4) -> Mat4 {
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || g[i][j] == 0.0));
    if diagonal {
        let mut out = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..n {
            out[i][i] = g[i][i].abs();
        }
        return out;
    }
    let eig = SymmetricEigen::new(to_dmatrix(n, g));
    let abs = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::abs));
    let plus = &eig.eigenvectors * abs * eig.eigenvectors.transpose();
    from_dmatrix(&plus)
}

/// Wraps an angle difference into (−π, π].
pub fn wrap_angle(d: f64) -> f64 {
    let r = (d + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}
