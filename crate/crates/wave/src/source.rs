//! Compactly supported spacetime sources and their evaluation on a lattice.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::grid::{Background, Lattice};
use chrono_lens_core::metric::{point, Metric};

/// C^∞ step from 0 at `x ≤ 0` to 1 at `x ≥ 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Window equal to 1 on the inner half of `[c − r, c + r]`, tapering smoothly to 0 at the ends.
fn window(x: f64, c: f64, r: f64) -> f64 {
    let u = (x - c).abs() / r;
    if u >= 1.0 {
        0.0
    } else {
        1.0 - smooth_step(2.0 * u - 1.0)
    }
}

/// Gaussian mollification of `s₊^a` with standard deviation `eps`, from partial
/// Gaussian moments `I_k(s) = ∫_{−∞}^s z^k φ_ε(z) dz`.
pub fn mollified_power(s: f64, a: u32, eps: f64) -> f64 {
    let phi = (-0.5 * (s / eps).powi(2)).exp() / (eps * (2.0 * std::f64::consts::PI).sqrt());
    let e2 = eps * eps;
    let mut moments = Vec::with_capacity(a as usize + 1);
    moments.push(0.5 * libm::erfc(-s / (eps * std::f64::consts::SQRT_2)));
    if a >= 1 {
        moments.push(-e2 * phi);
    }
    for k in 2..=a as usize {
        let next = -e2 * s.powi(k as i32 - 1) * phi + (k as f64 - 1.0) * e2 * moments[k - 2];
        moments.push(next);
    }
    let mut binom = 1.0;
    let mut sum = 0.0;
    for (k, ik) in moments.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += binom * s.powi((a as usize - k) as i32) * sign * ik;
        binom = binom * (a as f64 - k as f64) / (k as f64 + 1.0);
    }
    sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceProfile {
    /// `A·exp(−½Σ((x_i − c_i)/w_i)²)`, truncated to `|x_i − c_i| ≤ cutoff·w_i`.
    GaussianBump {
        center: Vec<f64>,
        widths: Vec<f64>,
        amplitude: f64,
        #[serde(default = "default_cutoff")]
        cutoff: f64,
    },
    /// `A·M_a(b·(x − anchor))` in a smoothly tapered spacetime box, where `M_a` is
    /// `s₊^a` mollified by a Gaussian whose two-standard-deviation width is
    /// `width_cells` grid cells. An optional `thickness`
    /// tapers the profile off behind the front, for `s ∈ [thickness/2, thickness]`.
    MollifiedPlaneWave {
        covector: Vec<f64>,
        anchor: Vec<f64>,
        power: u32,
        #[serde(default = "default_width_cells")]
        width_cells: f64,
        amplitude: f64,
        center: Vec<f64>,
        half_widths: Vec<f64>,
        #[serde(default)]
        thickness: Option<f64>,
    },
}

fn default_cutoff() -> f64 {
    6.0
}

fn default_width_cells() -> f64 {
    4.0
}

impl SourceProfile {
    /// Closed support box as `(lo, hi)` spacetime corners.
    pub fn support(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::GaussianBump { center, widths, cutoff, .. } => (
                center.iter().zip(widths).map(|(c, w)| c - cutoff * w).collect(),
                center.iter().zip(widths).map(|(c, w)| c + cutoff * w).collect(),
            ),
            Self::MollifiedPlaneWave { center, half_widths, .. } => (
                center.iter().zip(half_widths).map(|(c, r)| c - r).collect(),
                center.iter().zip(half_widths).map(|(c, r)| c + r).collect(),
            ),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianBump { center, .. } | Self::MollifiedPlaneWave { center, .. } => center.len(),
        }
    }

    /// Value at spacetime event `x`; `h` sets the mollification width of plane waves.
    pub fn eval(&self, x: &[f64], h: f64) -> f64 {
        match self {
            Self::GaussianBump { center, widths, amplitude, cutoff } => {
                let mut q = 0.0;
                for ((xi, c), w) in x.iter().zip(center).zip(widths) {
                    let z = (xi - c) / w;
                    if z.abs() > *cutoff {
                        return 0.0;
                    }
                    q += z * z;
                }
                amplitude * (-0.5 * q).exp()
            }
            Self::MollifiedPlaneWave { covector, anchor, power, width_cells, amplitude, center, half_widths, thickness } => {
                let mut chi = 1.0;
                for ((xi, c), r) in x.iter().zip(center).zip(half_widths) {
                    chi *= window(*xi, *c, *r);
                    if chi == 0.0 {
                        return 0.0;
                    }
                }
                let s: f64 = covector.iter().zip(x.iter().zip(anchor)).map(|(b, (xi, a))| b * (xi - a)).sum();
                let tail = match thickness {
                    Some(t) => 1.0 - smooth_step(2.0 * s / t - 1.0),
                    None => 1.0,
                };
                if tail == 0.0 {
                    return 0.0;
                }
                amplitude * chi * tail * mollified_power(s, *power, 0.5 * width_cells * h)
            }
        }
    }

    /// Structural checks plus, on the lattice, support inside the grid after the
    /// first two levels and nullity of plane-wave covectors.
    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        let n = lat.dims() + 1;
        let bad = |m: String| Err(WaveError::InvalidSource(m));
        match self {
            Self::GaussianBump { center, widths, cutoff, .. } => {
                if center.len() != n || widths.len() != n {
                    return bad(format!("gaussian bump needs {n} center and width components"));
                }
                if widths.iter().any(|w| !(*w > 0.0)) || !(*cutoff > 0.0) {
                    return bad("widths and cutoff must be positive".into());
                }
            }
            Self::MollifiedPlaneWave { covector, anchor, power, width_cells, center, half_widths, thickness, .. } => {
                if [covector.len(), anchor.len(), center.len(), half_widths.len()].iter().any(|&l| l != n) {
                    return bad(format!("plane wave needs {n}-component covector, anchor, center, half_widths"));
                }
                if *power < 2 {
                    return bad("power must be at least 2".into());
                }
                if !(*width_cells > 0.0) || half_widths.iter().any(|r| !(*r > 0.0)) || thickness.is_some_and(|t| !(t > 0.0)) {
                    return bad("widths must be positive".into());
                }
                let defect = null_defect(lat, covector, anchor)?;
                if defect > 1e-9 {
                    return bad(format!("covector is not null (relative defect {defect:.3e})"));
                }
            }
        }
        let (lo, hi) = self.support();
        let t_min = lat.time(1);
        if lo[0] <= t_min {
            return bad(format!("support starts at t = {:.4} before the first free level t = {t_min:.4}", lo[0]));
        }
        for a in 0..lat.dims() {
            if lo[a + 1] <= lat.spec.lo[a] || hi[a + 1] >= lat.spec.hi[a] {
                return bad(format!("support leaves the grid along axis {a}"));
            }
        }
        Ok(())
    }
}

/// `|g^{ab} b_a b_b| / |b|²` at the anchor.
fn null_defect(lat: &Lattice, b: &[f64], anchor: &[f64]) -> Result<f64> {
    let inv_diag: Vec<f64> = match &lat.spec.background {
        Background::Flat => std::iter::once(-1.0).chain(std::iter::repeat_n(1.0, lat.dims())).collect(),
        Background::Frozen { metric, time } => {
            let m = Metric::new(metric.clone()).map_err(|e| WaveError::UnsupportedBackground(e.to_string()))?;
            let mut x = anchor.to_vec();
            x[0] = *time;
            let g = m.g(&point(&x));
            (0..=lat.dims()).map(|i| 1.0 / g[i][i]).collect()
        }
    };
    let q: f64 = b.iter().zip(&inv_diag).map(|(bi, gi)| gi * bi * bi).sum();
    let norm: f64 = b.iter().map(|v| v * v).sum();
    Ok(q.abs() / norm)
}

/// Boxes `j` and `k` are causally independent when neither meets the causal future
/// of the other, using the largest coordinate wave speed.
pub fn check_causal_independence(sources: &[SourceProfile], c_max: f64) -> Result<()> {
    let boxes: Vec<_> = sources.iter().map(|s| s.support()).collect();
    for (j, (lo_j, hi_j)) in boxes.iter().enumerate() {
        for (k, (lo_k, hi_k)) in boxes.iter().enumerate() {
            if j == k {
                continue;
            }
            let dt = hi_k[0] - lo_j[0];
            if dt < 0.0 {
                continue;
            }
            let gap: f64 = (1..lo_j.len())
                .map(|a| (lo_k[a] - hi_j[a]).max(lo_j[a] - hi_k[a]).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            if dt * c_max >= gap {
                return Err(WaveError::SupportOverlap { earlier: j, later: k });
            }
        }
    }
    Ok(())
}

/// Linear combination `Σ c_i f_i` of sources.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub terms: Vec<(f64, SourceProfile)>,
}

impl Forcing {
    pub fn single(src: SourceProfile) -> Self {
        Self { terms: vec![(1.0, src)] }
    }

    pub fn combination(coeffs: &[f64], sources: &[SourceProfile]) -> Self {
        Self { terms: coeffs.iter().copied().zip(sources.iter().cloned()).collect() }
    }

    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        self.terms.iter().try_for_each(|(_, s)| s.validate(lat))
    }

    /// Adds `scale·Σ c_i f_i` at level `n` to `out`, touching only nodes in the support boxes.
    pub fn add_level(&self, lat: &Lattice, n: usize, scale: f64, out: &mut [f64]) {
        let t = lat.time(n);
        let h = lat.spec.h;
        for (c, src) in &self.terms {
            let coeff = scale * c;
            if coeff == 0.0 {
                continue;
            }
            let (lo, hi) = src.support();
            if t < lo[0] || t > hi[0] {
                continue;
            }
            let range = |a: usize| {
                let first = ((lo[a + 1] - lat.spec.lo[a]) / h).ceil().max(0.0) as usize;
                let last = (((hi[a + 1] - lat.spec.lo[a]) / h).floor() as usize).min(lat.shape[a] - 1);
                first..=last
            };
            let (ri, rj) = (range(0), if lat.dims() == 2 { range(1) } else { 0..=0 });
            for j in rj {
                for i in ri.clone() {
                    let [x, y] = lat.coords(i, j);
                    let ev = [t, x, y];
                    out[lat.index(i, j)] += coeff * src.eval(&ev[..=lat.dims()], h);
                }
            }
        }
    }
}

/// Spacetime coupling `a(x)` of the quadratic term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    Constant { value: f64 },
    /// Spatially constant, `A` times a smooth window on `[center − half_width, center + half_width]` in time.
    TimeWindow { center: f64, half_width: f64, amplitude: f64 },
    /// `A` times a smooth window on the spacetime box `center ± half_widths`.
    Bump { center: Vec<f64>, half_widths: Vec<f64>, amplitude: f64 },
}

impl Coupling {
    pub fn constant(value: f64) -> Self {
        Coupling::Constant { value }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coupling::Constant { value } => *value == 0.0,
            Coupling::TimeWindow { amplitude, .. } => *amplitude == 0.0,
            Coupling::Bump { amplitude, .. } => *amplitude == 0.0,
        }
    }

    /// Values on level `n`.
    pub fn fill_level(&self, lat: &Lattice, n: usize, out: &mut [f64]) {
        match self {
            Coupling::Constant { value } => out.iter_mut().for_each(|v| *v = *value),
            Coupling::TimeWindow { center, half_width, amplitude } => {
                let v = amplitude * window(lat.time(n), *center, *half_width);
                out.iter_mut().for_each(|x| *x = v);
            }
            Coupling::Bump { center, half_widths, amplitude } => {
                let t = lat.time(n);
                let wt = window(t, center[0], half_widths[0]);
                for j in 0..lat.shape[1] {
                    for i in 0..lat.shape[0] {
                        let [x, y] = lat.coords(i, j);
                        let mut w = wt;
                        for (a, c) in [x, y].iter().take(lat.dims()).enumerate() {
                            if w == 0.0 {
                                break;
                            }
                            w *= window(*c, center[a + 1], half_widths[a + 1]);
                        }
                        out[lat.index(i, j)] = amplitude * w;
                    }
                }
            }
        }
    }

    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        if let Coupling::TimeWindow { half_width, .. } = self {
            if !(*half_width > 0.0) {
                return Err(WaveError::InvalidSource("coupling window needs a positive half-width".into()));
            }
        }
        if let Coupling::Bump { center, half_widths, .. } = self {
            let n = lat.dims() + 1;
            if center.len() != n || half_widths.len() != n || half_widths.iter().any(|r| !(*r > 0.0)) {
                return Err(WaveError::InvalidSource(format!("coupling bump needs {n} centers and positive half-widths")));
            }
        }
        Ok(())
    }
}

/// Per-level cache of a coupling.
pub(crate) struct CouplingCache<'a> {
    coupling: &'a Coupling,
    level: Option<usize>,
    pub values: Vec<f64>,
}

impl<'a> CouplingCache<'a> {
    pub fn new(coupling: &'a Coupling, nodes: usize) -> Self {
        Self { coupling, level: None, values: vec![0.0; nodes] }
    }

    pub fn at(&mut self, lat: &Lattice, n: usize) -> &[f64] {
        if self.level != Some(n) {
            self.coupling.fill_level(lat, n, &mut self.values);
            self.level = Some(n);
        }
        &self.values
    }
}
