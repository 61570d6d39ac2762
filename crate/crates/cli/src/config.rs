//! Scenario configuration: parsing, defaults and load-time validation.

use std::path::Path;

use chrono_lens_core::causal::Schedule;
use chrono_lens_core::metric::{Metric, MetricSpec};
use chrono_lens_core::observation::ForwardConfig;
use chrono_lens_core::reconstruction::ReconstructionConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wave::WaveConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{pointer}: {message}")]
    Invalid { pointer: String, message: String },
}

fn invalid(pointer: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { pointer: pointer.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    pub center: Vec<f64>,
    pub velocity: Vec<f64>,
    pub h_hat: f64,
    pub count: usize,
    pub s_range: [f64; 2],
    #[serde(default)]
    pub velocity_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Coordinate box of the source region.
    pub region: Vec<[f64; 2]>,
    /// Reconstruction targets drawn uniformly from the region.
    #[serde(default)]
    pub targets: usize,
    /// Additional uniformly drawn sources.
    #[serde(default)]
    pub fill: usize,
    /// Affine offsets (unit g⁺ launch speed) of the sources placed on each null ray
    /// from a target to an observer.
    #[serde(default = "default_offsets")]
    pub trace_offsets: Vec<f64>,
    /// Explicit source events, appended after the generated ones.
    #[serde(default)]
    pub explicit: Vec<Vec<f64>>,
    /// Samples per axis for the region hypothesis check.
    #[serde(default = "default_region_check")]
    pub region_check: usize,
}

fn default_offsets() -> Vec<f64> {
    vec![-0.02, -0.01, 0.01, 0.02]
}

fn default_region_check() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    pub median_max: f64,
    pub max_max: f64,
    #[serde(default)]
    pub min_targets: usize,
}

impl Default for Gates {
    fn default() -> Self {
        Self { median_max: 1e-2, max_max: 5e-2, min_targets: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub metric: MetricSpec,
    pub observers: ObserverConfig,
    pub schedule: Schedule,
    pub sources: SourceConfig,
    #[serde(default)]
    pub forward: Option<ForwardConfig>,
    #[serde(default)]
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub gates: Gates,
    #[serde(default)]
    pub wave: Option<WaveConfig>,
}

/// A partial `forward` object keeps the dimension-dependent defaults for the keys it omits.
fn fill_forward_defaults(raw: &mut serde_json::Value) {
    let Some(dim) = raw.pointer("/metric/dim").and_then(|d| d.as_u64()) else { return };
    let Some(serde_json::Value::Object(given)) = raw.get_mut("forward") else { return };
    let serde_json::Value::Object(defaults) =
        serde_json::to_value(ForwardConfig::for_dim(dim as usize)).expect("defaults serialize")
    else {
        unreachable!()
    };
    for (k, v) in defaults {
        given.entry(k).or_insert(v);
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid("", e.to_string()))?;
        fill_forward_defaults(&mut raw);
        let mut cfg: Self = serde_path_to_error::deserialize(raw).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." { String::new() } else { format!("/{}", path.replace('.', "/")) };
            invalid(&pointer, e.inner().to_string())
        })?;
        cfg.normalize();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    fn normalize(&mut self) {
        if self.forward.is_none() {
            self.forward = Some(ForwardConfig::for_dim(self.metric.dim));
        }
        if let Some(w) = &mut self.wave {
            w.normalize();
        }
    }

    pub fn forward(&self) -> ForwardConfig {
        self.forward.unwrap_or_else(|| ForwardConfig::for_dim(self.metric.dim))
    }

    /// Normalized form with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the normalized configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Structural checks that need no geometry.
    fn check(&self) -> Result<(), ConfigError> {
        let n = self.metric.dim;
        Metric::new(self.metric.clone()).map_err(|e| invalid("/metric", e.to_string()))?;
        let o = &self.observers;
        if o.center.len() != n {
            return Err(invalid("/observers/center", format!("expected {n} components")));
        }
        if o.velocity.len() != n {
            return Err(invalid("/observers/velocity", format!("expected {n} components")));
        }
        if !(o.h_hat >= 0.0) {
            return Err(invalid("/observers/h_hat", "must be non-negative"));
        }
        if o.count == 0 {
            return Err(invalid("/observers/count", "must be positive"));
        }
        if !self.schedule.is_ordered() {
            return Err(invalid("/schedule", "must satisfy s_minus2 < s_minus1 < s_plus1 < s_plus2"));
        }
        let s = &self.sources;
        if s.region.len() != n {
            return Err(invalid("/sources/region", format!("expected {n} intervals")));
        }
        for (i, iv) in s.region.iter().enumerate() {
            if !(iv[0] <= iv[1]) {
                return Err(invalid(&format!("/sources/region/{i}"), "empty interval"));
            }
        }
        for (i, x) in s.explicit.iter().enumerate() {
            if x.len() != n {
                return Err(invalid(&format!("/sources/explicit/{i}"), format!("expected {n} components")));
            }
        }
        if s.region_check < 2 {
            return Err(invalid("/sources/region_check", "needs at least 2 samples per axis"));
        }
        let f = self.forward();
        let tols = [
            ("sweep_tol", f.sweep_tol),
            ("sweep_h_max", f.sweep_h_max),
            ("refine_tol", f.refine_tol),
            ("residual_tol", f.residual_tol),
            ("cut_tau_tol", f.cut_tau_tol),
            ("match_tol", f.match_tol),
            ("dir_tol", f.dir_tol),
        ];
        for (name, v) in tols {
            if !(v > 0.0) {
                return Err(invalid(&format!("/forward/{name}"), "must be positive"));
            }
        }
        if f.dir_count == 0 {
            return Err(invalid("/forward/dir_count", "must be positive"));
        }
        let r = &self.reconstruction;
        for (name, v) in [
            ("kappa_max", r.kappa_max),
            ("match_tol", r.match_tol),
            ("dir_tol", r.dir_tol),
            ("fit_residual_max", r.fit_residual_max),
        ] {
            if !(v > 0.0) {
                return Err(invalid(&format!("/reconstruction/{name}"), "must be positive"));
            }
        }
        if let Some(w) = &self.wave {
            w.check().map_err(|(p, m)| invalid(&format!("/wave{p}"), m))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "m",
        "metric": {"family": "minkowski", "dim": 3, "domain": [[-4,4],[-3,3],[-3,3]]},
        "observers": {"center": [0,0,0], "velocity": [1,0,0], "h_hat": 1.0, "count": 4, "s_range": [-3,3]},
        "schedule": {"s_minus2": -2, "s_minus1": -0.5, "s_plus1": 1.5, "s_plus2": 2.6},
        "sources": {"region": [[-0.1,0.1],[-0.2,0.2],[-0.2,0.2]]}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ScenarioConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.forward.unwrap().dir_count, 512);
        assert_eq!(cfg.reconstruction.kappa_max, 1e4);
        assert_eq!(cfg.sources.trace_offsets.len(), 4);
        let again = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_family_is_rejected_with_pointer() {
        let text = MINIMAL.replace("\"minkowski\"", "\"kerr\"");
        match ScenarioConfig::from_json(&text) {
            Err(ConfigError::Invalid { pointer, .. }) => assert_eq!(pointer, "/metric/family"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_schedule_is_rejected() {
        let text = MINIMAL.replace("\"s_plus1\": 1.5", "\"s_plus1\": -1.5");
        assert!(matches!(ScenarioConfig::from_json(&text), Err(ConfigError::Invalid { .. })));
    }
}
