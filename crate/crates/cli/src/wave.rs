//! Wave experiment configuration and pipeline: expansion study, dual-route interaction
//! field and the cone scan with its control.

use std::path::Path;

use chrono_lens_wave::io::{row_csv, write_field};
use chrono_lens_wave::{
    causal_solve, cone_lattice, expansion_study, fourth_interaction_finite_difference, fourth_interaction_formula,
    least_squares_intersection, nonlinear_solve, singularity_scan, Coupling, Forcing, GridField, GridSpec, Lattice,
    PulseFamily, Record, Route, ScanConfig, ScanReport, SourceProfile, WaveError,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    pub grid: GridSpec,
    pub source: SourceProfile,
    pub eps: Vec<f64>,
    /// Step size at which the direct and Picard routes are compared.
    #[serde(default = "default_route_eps")]
    pub route_eps: f64,
}

fn default_route_eps() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub grid: GridSpec,
    pub sources: [SourceProfile; 4],
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeScanConfig {
    pub pulses: PulseFamily,
    /// Delays of the control run, whose fronts share no event.
    pub control_delays: Vec<f64>,
    pub radius: f64,
    pub h: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    pub t0: f64,
    /// Coupling of the scan runs; the experiment-wide coupling when absent.
    #[serde(default)]
    pub coupling: Option<Coupling>,
    #[serde(default)]
    pub scan: ScanConfig,
}

fn default_cfl() -> f64 {
    0.5
}

/// Thresholds checked after a wave run; `null` disables one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveGates {
    #[serde(default = "gate_slope")]
    pub slope_min: Option<f64>,
    #[serde(default = "gate_routes")]
    pub route_agreement_max: Option<f64>,
    #[serde(default = "gate_m4")]
    pub m4_agreement_max: Option<f64>,
    #[serde(default = "gate_peak")]
    pub peak_offset_max: Option<f64>,
    #[serde(default = "gate_ratio")]
    pub on_off_min: Option<f64>,
    #[serde(default = "gate_control")]
    pub control_range: Option<[f64; 2]>,
}

fn gate_slope() -> Option<f64> {
    Some(4.5)
}
fn gate_routes() -> Option<f64> {
    Some(1e-8)
}
fn gate_m4() -> Option<f64> {
    Some(0.02)
}
fn gate_peak() -> Option<f64> {
    Some(3.0)
}
fn gate_ratio() -> Option<f64> {
    Some(5.0)
}
fn gate_control() -> Option<[f64; 2]> {
    Some([0.5, 2.0])
}

impl Default for WaveGates {
    fn default() -> Self {
        Self {
            slope_min: gate_slope(),
            route_agreement_max: gate_routes(),
            m4_agreement_max: gate_m4(),
            peak_offset_max: gate_peak(),
            on_off_min: gate_ratio(),
            control_range: gate_control(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub coupling: Coupling,
    #[serde(default)]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default)]
    pub interaction: Option<InteractionConfig>,
    #[serde(default)]
    pub cone: Option<ConeScanConfig>,
    #[serde(default)]
    pub gates: WaveGates,
    /// Write final-level field snapshots (binary plus a CSV row).
    #[serde(default = "default_true")]
    pub snapshots: bool,
}

fn default_true() -> bool {
    true
}

impl WaveConfig {
    pub fn normalize(&mut self) {
        if let Some(c) = &mut self.cone {
            if c.coupling.is_none() {
                c.coupling = Some(self.coupling.clone());
            }
        }
    }

    /// Grid and source checks that need no solve; errors carry a pointer below `/wave`.
    pub fn check(&self) -> Result<(), (String, String)> {
        let at = |p: &str, e: WaveError| (p.to_string(), e.to_string());
        if let Some(e) = &self.expansion {
            let lat = Lattice::new(e.grid.clone()).map_err(|x| at("/expansion/grid", x))?;
            Forcing::single(e.source.clone()).validate(&lat).map_err(|x| at("/expansion/source", x))?;
            self.coupling.validate(&lat).map_err(|x| at("/coupling", x))?;
            if e.eps.len() < 4 {
                return Err(("/expansion/eps".into(), "the slope fit needs at least 4 values".into()));
            }
            if e.eps.iter().any(|v| !(*v > 0.0)) {
                return Err(("/expansion/eps".into(), "values must be positive".into()));
            }
            let (lo, hi) = e.eps.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
            if hi / lo < 10.0 * (1.0 - 1e-9) {
                return Err(("/expansion/eps".into(), "values must span at least one decade".into()));
            }
        }
        if let Some(i) = &self.interaction {
            let lat = Lattice::new(i.grid.clone()).map_err(|x| at("/interaction/grid", x))?;
            for (j, s) in i.sources.iter().enumerate() {
                s.validate(&lat).map_err(|x| at(&format!("/interaction/sources/{j}"), x))?;
            }
            if !(i.delta > 0.0) {
                return Err(("/interaction/delta".into(), "must be positive".into()));
            }
        }
        if let Some(c) = &self.cone {
            c.pulses.sources().map_err(|x| at("/cone/pulses", x))?;
            if c.control_delays.len() != c.pulses.directions_deg.len() {
                return Err(("/cone/control_delays".into(), "one delay per direction".into()));
            }
            if !(c.radius > 0.0 && c.h > 0.0 && c.cfl > 0.0) {
                return Err(("/cone".into(), "radius, h and cfl must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionResult {
    pub eps: Vec<f64>,
    pub remainders: Vec<f64>,
    /// `None` when every remainder vanishes.
    pub slope: Option<f64>,
    pub route_eps: f64,
    pub route_agreement: f64,
    pub picard_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionResult {
    pub delta: f64,
    pub max_abs: f64,
    pub difference_max_abs: f64,
    /// Relative L² distance of the mixed difference from the formula; `None` when the
    /// formula field vanishes.
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeResult {
    pub event: Vec<f64>,
    pub intersecting: ScanReport,
    pub control_event: Vec<f64>,
    pub control_residual: f64,
    pub control: ScanReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub name: String,
    pub value: Option<f64>,
    pub pass: bool,
}

/// Everything a wave run measured, with gate outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub config_hash: String,
    pub expansion: Option<ExpansionResult>,
    pub interaction: Option<InteractionResult>,
    pub cone: Option<ConeResult>,
    pub gates: Vec<GateOutcome>,
}

impl ExpansionReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }
}

/// Relative L² distance of `a` from `b`; `None` when `b` vanishes.
fn agreement(a: &[f64], b: &[f64]) -> Option<f64> {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den > 0.0 {
        Some((num / den).sqrt())
    } else if num == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

fn snapshot(dir: &Path, name: &str, grid: &GridSpec, field: &GridField) -> Result<Vec<String>, WaveError> {
    std::fs::create_dir_all(dir)?;
    let bin = format!("{name}.bin");
    let csv = format!("{name}.csv");
    write_field(&dir.join(&bin), grid, field)?;
    std::fs::write(dir.join(&csv), row_csv(grid, field, field.shape[1] / 2))?;
    Ok(vec![bin, csv])
}

fn last(mut fields: Vec<GridField>) -> GridField {
    fields.pop().expect("final level recorded")
}

/// Runs the configured wave experiments; snapshots go to `fields_dir`. Returns the report
/// and the snapshot file names written.
pub fn run_wave(cfg: &WaveConfig, hash: &str, fields_dir: &Path) -> Result<(ExpansionReport, Vec<String>), WaveError> {
    let mut files = Vec::new();
    let a = &cfg.coupling;
    let expansion = match &cfg.expansion {
        None => None,
        Some(e) => {
            let lat = Lattice::new(e.grid.clone())?;
            let f = Forcing::single(e.source.clone());
            let (rows, slope) = expansion_study(&lat, a, &f, &e.eps)?;
            let direct = nonlinear_solve(&lat, a, &f, e.route_eps, Route::Direct, &Record::Final)?;
            let picard = nonlinear_solve(&lat, a, &f, e.route_eps, Route::picard(), &Record::Final)?;
            let (d, p) = (last(direct.fields), last(picard.fields));
            if cfg.snapshots {
                files.extend(snapshot(fields_dir, "expansion_w1", &e.grid, &last(causal_solve(&lat, &f, &Record::Final)?))?);
                files.extend(snapshot(fields_dir, "expansion_u", &e.grid, &d)?);
            }
            Some(ExpansionResult {
                eps: rows.iter().map(|r| r.eps).collect(),
                remainders: rows.iter().map(|r| r.remainder).collect(),
                slope: slope.is_finite().then_some(slope),
                route_eps: e.route_eps,
                route_agreement: agreement(&p.values, &d.values).unwrap_or(f64::INFINITY),
                picard_iterations: picard.history.len(),
            })
        }
    };
    let interaction = match &cfg.interaction {
        None => None,
        Some(i) => {
            let lat = Lattice::new(i.grid.clone())?;
            let m = last(fourth_interaction_formula(&lat, a, &i.sources, &Record::Final)?);
            let fd = last(fourth_interaction_finite_difference(&lat, a, &i.sources, i.delta, &Record::Final)?);
            if cfg.snapshots {
                files.extend(snapshot(fields_dir, "m4_formula", &i.grid, &m)?);
                files.extend(snapshot(fields_dir, "m4_difference", &i.grid, &fd)?);
            }
            Some(InteractionResult {
                delta: i.delta,
                max_abs: m.max_abs(),
                difference_max_abs: fd.max_abs(),
                agreement: agreement(&fd.values, &m.values),
            })
        }
    };
    let cone = match &cfg.cone {
        None => None,
        Some(c) => {
            let coupling = c.coupling.as_ref().unwrap_or(a);
            let mut run = |delays: Vec<f64>, name: &str| -> Result<(Vec<f64>, f64, ScanReport), WaveError> {
                let family = PulseFamily { delays, ..c.pulses.clone() };
                let src = family.sources()?;
                let (q, residual) = least_squares_intersection(&src)?;
                let lat = cone_lattice(&q, c.radius, c.h, c.cfl, c.t0)?;
                let s: [SourceProfile; 4] = src
                    .try_into()
                    .map_err(|_| WaveError::InvalidSource("the cone scan needs exactly four pulses".into()))?;
                let m = last(fourth_interaction_formula(&lat, coupling, &s, &Record::Final)?);
                if cfg.snapshots {
                    files.extend(snapshot(fields_dir, name, &lat.spec, &m)?);
                }
                let scan = singularity_scan(&lat, &m, &q, &c.scan)?;
                Ok((q, residual, scan))
            };
            let (event, _, intersecting) = run(c.pulses.delays.clone(), "m4_cone")?;
            let (control_event, control_residual, control) = run(c.control_delays.clone(), "m4_control")?;
            Some(ConeResult { event, intersecting, control_event, control_residual, control })
        }
    };
    let mut report = ExpansionReport { config_hash: hash.to_string(), expansion, interaction, cone, gates: Vec::new() };
    report.gates = evaluate_gates(&report, &cfg.gates);
    Ok((report, files))
}

fn evaluate_gates(r: &ExpansionReport, g: &WaveGates) -> Vec<GateOutcome> {
    let mut out = Vec::new();
    let mut push = |name: &str, value: Option<f64>, pass: bool| out.push(GateOutcome { name: name.into(), value, pass });
    if let Some(e) = &r.expansion {
        if let Some(min) = g.slope_min {
            push("expansion_slope", e.slope, e.slope.is_some_and(|s| s >= min));
        }
        if let Some(max) = g.route_agreement_max {
            push("direct_vs_picard", Some(e.route_agreement), e.route_agreement < max);
        }
    }
    if let Some(i) = &r.interaction {
        if let Some(max) = g.m4_agreement_max {
            push("m4_dual_route", i.agreement, i.agreement.is_some_and(|v| v < max));
        }
    }
    if let Some(c) = &r.cone {
        if let Some(max) = g.peak_offset_max {
            let p = c.intersecting.peak_offset_cells;
            push("cone_peak_offset_cells", Some(p), p.abs() <= max);
        }
        if let Some(min) = g.on_off_min {
            let v = c.intersecting.on_off_ratio;
            push("cone_on_off_ratio", v, v.is_some_and(|v| v > min));
        }
        if let Some([lo, hi]) = g.control_range {
            let v = c.control.on_off_ratio;
            push("control_on_off_ratio", v, v.is_some_and(|v| (lo..=hi).contains(&v)));
        }
    }
    out
}
