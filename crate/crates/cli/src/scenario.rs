//! Scenario assembly: observers, diamond, seeded sources and truth bookkeeping.

use chrono_lens_core::causal::{check_schedule, observer_congruence, CongruenceOptions, Observers};
use chrono_lens_core::metric::{point, Metric, Vec4};
use chrono_lens_core::observation::{
    assemble_dataset, in_source_region, observe_detailed, points_on_ray, ObservationDataset, Source,
};
use chrono_lens_core::reconstruction::{chart_form, chart_gradient_row, conformal_class_distance, ReconstructionReport};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ScenarioConfig};

pub struct Scenario {
    pub metric: Metric,
    pub observers: Observers,
    pub p_minus: Vec4,
    pub p_plus: Vec4,
}

impl Scenario {
    /// Builds the geometry and verifies the schedule and source-region hypotheses.
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        let err = |p: &str, e: chrono_lens_core::Error| ConfigError::Invalid { pointer: p.into(), message: e.to_string() };
        let metric = Metric::new(cfg.metric.clone()).map_err(|e| err("/metric", e))?;
        let o = &cfg.observers;
        let opts = CongruenceOptions { count: o.count, s_range: o.s_range, velocity_scale: o.velocity_scale };
        let grid = observer_congruence(&metric, &point(&o.center), &point(&o.velocity), o.h_hat, &opts)
            .map_err(|e| err("/observers", e))?;
        let observers = Observers::new(&metric, grid).map_err(|e| err("/observers", e))?;
        check_schedule(&metric, &observers, &cfg.schedule).map_err(|e| err("/schedule", e))?;
        let (p_minus, p_plus) = cfg.schedule.diamond(&observers.worldlines[0]);
        let sc = Self { metric, observers, p_minus, p_plus };
        sc.check_region(cfg)?;
        Ok(sc)
    }

    fn check_region(&self, cfg: &ScenarioConfig) -> Result<(), ConfigError> {
        let n = self.metric.dim();
        let k = cfg.sources.region_check;
        let region = &cfg.sources.region;
        let total = k.pow(n as u32);
        for idx in 0..total {
            let mut x = [0.0; 4];
            let mut rem = idx;
            for (i, iv) in region.iter().enumerate() {
                let j = rem % k;
                rem /= k;
                x[i] = iv[0] + (iv[1] - iv[0]) * j as f64 / (k - 1) as f64;
            }
            let ok = in_source_region(&self.metric, &x, &self.p_minus, &self.p_plus)
                .map_err(|e| ConfigError::Invalid { pointer: "/sources/region".into(), message: e.to_string() })?;
            if !ok {
                return Err(ConfigError::Invalid {
                    pointer: "/sources/region".into(),
                    message: format!("point {:?} lies outside I⁻(p⁺) ∖ J⁻(p⁻)", &x[..n]),
                });
            }
        }
        Ok(())
    }
}

/// Ground truth kept out of the dataset: source events and, per target, the rows
/// `dY^j` of the observation-time chart Jacobian for every observer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config_hash: String,
    pub sources: Vec<Source>,
    pub targets: Vec<TargetTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub id: usize,
    pub x: Vec<f64>,
    pub gradient_rows: Vec<Option<Vec<f64>>>,
}

struct TargetPlan {
    x: Vec4,
    rows: Vec<Option<Vec<f64>>>,
    trace_points: Vec<Vec4>,
}

fn plan_target(sc: &Scenario, cfg: &ScenarioConfig, x: Vec4) -> TargetPlan {
    let fwd = cfg.forward();
    let mut rows = vec![None; sc.observers.worldlines.len()];
    let mut trace_points = Vec::new();
    let Ok(details) = observe_detailed(&sc.metric, &sc.observers, usize::MAX, &x, &fwd) else {
        return TargetPlan { x, rows, trace_points };
    };
    for d in details {
        let r = &d.record;
        if !r.earliest_flag || r.on_worldline || rows[r.observer_id].is_some() {
            continue;
        }
        let w = &sc.observers.worldlines[r.observer_id];
        let (x_arr, mu_dot) = w.at(r.s);
        rows[r.observer_id] = Some(chart_gradient_row(&sc.metric, &x, &d.launch, &x_arr, &d.v_arrival, &mu_dot));
        if let Ok(pts) = points_on_ray(&sc.metric, &x, &d.launch, &cfg.sources.trace_offsets, fwd.refine_tol) {
            trace_points.extend(pts);
        }
    }
    TargetPlan { x, rows, trace_points }
}

/// Seeded sources: targets, the trace sources on their observed rays, fill sources
/// and explicit events, with consecutive ids in that order.
pub fn generate_sources(sc: &Scenario, cfg: &ScenarioConfig) -> (Vec<Source>, Vec<TargetTruth>) {
    let n = sc.metric.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let region = &cfg.sources.region;
    let draw = |rng: &mut ChaCha8Rng| {
        let mut x = [0.0; 4];
        for (i, iv) in region.iter().enumerate() {
            x[i] = if iv[1] > iv[0] { rng.random_range(iv[0]..iv[1]) } else { iv[0] };
        }
        x
    };
    let target_x: Vec<Vec4> = (0..cfg.sources.targets).map(|_| draw(&mut rng)).collect();
    let fill_x: Vec<Vec4> = (0..cfg.sources.fill).map(|_| draw(&mut rng)).collect();
    let plans: Vec<TargetPlan> = target_x.into_par_iter().map(|x| plan_target(sc, cfg, x)).collect();
    let mut sources = Vec::new();
    let mut truths = Vec::new();
    for p in &plans {
        let id = sources.len();
        sources.push(Source::new(id, &p.x[..n]));
        truths.push(TargetTruth { id, x: p.x[..n].to_vec(), gradient_rows: p.rows.clone() });
    }
    for p in &plans {
        for x in &p.trace_points {
            let id = sources.len();
            sources.push(Source::new(id, &x[..n]));
        }
    }
    for x in fill_x.iter().map(|x| x[..n].to_vec()).chain(cfg.sources.explicit.iter().cloned()) {
        let id = sources.len();
        sources.push(Source::new(id, &x));
    }
    (sources, truths)
}

/// Runs the forward model for the scenario; the dataset meta carries the config hash.
pub fn run_forward(sc: &Scenario, cfg: &ScenarioConfig) -> chrono_lens_core::Result<(ObservationDataset, Truth)> {
    let (sources, targets) = generate_sources(sc, cfg);
    let mut ds = assemble_dataset(&sc.metric, &sc.observers, &sources, &sc.p_minus, &sc.p_plus, &cfg.forward())?;
    ds.meta.config_hash = cfg.hash();
    ds.meta.truth_withheld = true;
    let truth = Truth { config_hash: cfg.hash(), sources: ds.truth.clone(), targets };
    Ok((ds, truth))
}

/// Target ids a reconstruction should process: the generated targets, or all sources.
pub fn target_ids(cfg: &ScenarioConfig) -> Vec<usize> {
    if !cfg.reconstruction.targets.is_empty() {
        cfg.reconstruction.targets.clone()
    } else {
        (0..cfg.sources.targets).collect()
    }
}

/// Fills in the distance between every estimate and the chart pull-back of the true metric.
pub fn evaluate(metric: &Metric, report: &mut ReconstructionReport, truth: &Truth) {
    for t in &mut report.targets {
        let (Some(est), Some(chart)) = (&t.estimate, &t.chart) else { continue };
        let Some(tt) = truth.targets.iter().find(|x| x.id == t.target) else { continue };
        let rows: Option<Vec<&Vec<f64>>> = chart.tuple.iter().map(|&j| tt.gradient_rows.get(j).and_then(|r| r.as_ref())).collect();
        let Some(rows) = rows else { continue };
        let n = rows.len();
        let dy = DMatrix::from_fn(n, n, |i, k| rows[i][k]);
        if let Ok(form) = chart_form(metric, &point(&tt.x), &dy) {
            t.distance = Some(conformal_class_distance(&est.matrix(), &form));
        }
    }
}
