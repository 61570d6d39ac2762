//! Stage drivers and on-disk artifacts: dataset, truth, reports, manifest and plot data.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono_lens_core::observation::{ArrivalRecord, DatasetMeta, DatasetView, ObservationDataset, SourceFailure};
use chrono_lens_core::reconstruction::{reconstruct_region, ReconstructionConfig, ReconstructionReport, TargetStatus};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Gates, ScenarioConfig};
use crate::scenario::{evaluate, run_forward, target_ids, Scenario, Truth};
use crate::wave::{run_wave, ExpansionReport, GateOutcome};

pub const DATASET: &str = "dataset.jsonl";
pub const TRUTH: &str = "truth.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const WAVE_REPORT: &str = "wave_report.json";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const FIELDS_DIR: &str = "fields";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset was produced by config {found}, current config is {expected} (use --force to override)")]
    HashMismatch { expected: String, found: String },
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] chrono_lens_core::Error),
    #[error(transparent)]
    Wave(#[from] chrono_lens_wave::WaveError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit code: 3 for configuration problems, 4 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::HashMismatch { .. } => 3,
            PipelineError::Wave(chrono_lens_wave::WaveError::CflViolation { .. }) => 3,
            _ => 4,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf()));
    }
    std::fs::read(path).map_err(io_err(path))
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), message: e.to_string() })
}

// ---- manifest ---------------------------------------------------------------

/// Content hashes of every artifact in the output directory, keyed by relative path.
/// Carries no timestamps so reruns stay byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Records `files` (relative to `out`) in the manifest, replacing it if it belongs to another config.
pub fn update_manifest(out: &Path, hash: &str, files: &[String]) -> Result<()> {
    let path = out.join(MANIFEST);
    let mut m: Manifest = match std::fs::read(&path) {
        Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    if m.config_hash != hash {
        m = Manifest { config_hash: hash.to_string(), ..Manifest::default() };
    }
    m.versions.insert("chrono-lens".into(), env!("CARGO_PKG_VERSION").into());
    m.versions.insert("format".into(), "1".into());
    for f in files {
        let bytes = read(&out.join(f))?;
        m.files.insert(f.clone(), sha256(&bytes));
    }
    write(&path, &json(&m))
}

// ---- dataset file -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DatasetLine {
    Meta(DatasetMeta),
    Record(ArrivalRecord),
    Failure(SourceFailure),
}

/// One JSON object per line: the metadata, then records, then per-source failures.
/// Source positions never enter this file.
pub fn dataset_jsonl(ds: &ObservationDataset) -> Vec<u8> {
    let mut out = Vec::new();
    let mut line = |l: DatasetLine| {
        serde_json::to_writer(&mut out, &l).expect("dataset serializes");
        out.push(b'\n');
    };
    line(DatasetLine::Meta(ds.meta.clone()));
    for r in &ds.records {
        line(DatasetLine::Record(r.clone()));
    }
    for f in &ds.failures {
        line(DatasetLine::Failure(f.clone()));
    }
    out
}

pub struct LoadedDataset {
    pub view: DatasetView,
    pub failures: Vec<SourceFailure>,
}

pub fn read_dataset(path: &Path) -> Result<LoadedDataset> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let bad = |message: String| PipelineError::Malformed { path: path.to_path_buf(), message };
    let mut meta = None;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))? {
            DatasetLine::Meta(m) if meta.is_none() => meta = Some(m),
            DatasetLine::Meta(_) => return Err(bad(format!("line {}: second meta line", i + 1))),
            DatasetLine::Record(r) => records.push(r),
            DatasetLine::Failure(f) => failures.push(f),
        }
    }
    let meta = meta.ok_or_else(|| bad("no meta line".into()))?;
    Ok(LoadedDataset { view: DatasetView { meta, records }, failures })
}

// ---- stages ---------------------------------------------------------------------

/// Forward model: writes the dataset, the withheld truth and the normalized config.
pub fn forward(cfg: &ScenarioConfig, out: &Path) -> Result<ObservationDataset> {
    let sc = Scenario::build(cfg)?;
    let (ds, truth) = run_forward(&sc, cfg)?;
    write(&out.join(CONFIG_ECHO), format!("{}\n", cfg.to_json()).as_bytes())?;
    write(&out.join(DATASET), &dataset_jsonl(&ds))?;
    write(&out.join(TRUTH), &json(&truth))?;
    update_manifest(out, &cfg.hash(), &[CONFIG_ECHO.into(), DATASET.into(), TRUTH.into()])?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub targets: usize,
    pub ok: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Targets with a distance to the true conformal class.
    pub evaluated: usize,
    pub median_distance: Option<f64>,
    pub max_distance: Option<f64>,
    pub truth_available: bool,
    pub forward_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub summary: Summary,
    pub gates: Vec<GateOutcome>,
    pub reconstruction: ReconstructionReport,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn reconstruction_gates(s: &Summary, g: &Gates) -> Vec<GateOutcome> {
    let mut out = vec![GateOutcome {
        name: "min_targets".into(),
        value: Some(if s.truth_available { s.evaluated } else { s.ok } as f64),
        pass: (if s.truth_available { s.evaluated } else { s.ok }) >= g.min_targets,
    }];
    if s.truth_available {
        out.push(GateOutcome {
            name: "median_distance".into(),
            value: s.median_distance,
            pass: s.median_distance.is_some_and(|d| d < g.median_max),
        });
        out.push(GateOutcome {
            name: "max_distance".into(),
            value: s.max_distance,
            pass: s.max_distance.is_some_and(|d| d < g.max_max),
        });
    }
    out
}

/// Reconstruction from the dataset alone; the truth file, when present, is read only
/// afterwards to score the estimates.
pub fn reconstruct(cfg: &ScenarioConfig, out: &Path, dataset: Option<&Path>, force: bool) -> Result<RunReport> {
    let ds_path = dataset.map_or_else(|| out.join(DATASET), Path::to_path_buf);
    let loaded = read_dataset(&ds_path)?;
    let hash = cfg.hash();
    if loaded.view.meta.config_hash != hash && !force {
        return Err(PipelineError::HashMismatch { expected: hash, found: loaded.view.meta.config_hash.clone() });
    }
    let rcfg = ReconstructionConfig { targets: target_ids(cfg), ..cfg.reconstruction.clone() };
    let mut rep = reconstruct_region(&loaded.view, &rcfg);
    let truth_path = ds_path.with_file_name(TRUTH);
    let truth: Option<Truth> = if truth_path.exists() { Some(parse(&truth_path, &read(&truth_path)?)?) } else { None };
    if let Some(t) = &truth {
        let metric = chrono_lens_core::metric::Metric::new(cfg.metric.clone())?;
        evaluate(&metric, &mut rep, t);
    }
    let d = rep.distances();
    let summary = Summary {
        targets: rep.targets.len(),
        ok: rep.ok,
        skipped: rep.skipped,
        failed: rep.failed,
        evaluated: d.len(),
        median_distance: median(&d),
        max_distance: d.iter().copied().reduce(f64::max),
        truth_available: truth.is_some(),
        forward_failures: loaded.failures.len(),
    };
    let report = RunReport { config_hash: hash.clone(), gates: reconstruction_gates(&summary, &cfg.gates), summary, reconstruction: rep };
    write(&out.join(REPORT_JSON), &json(&report))?;
    write(&out.join(REPORT_CSV), report.reconstruction.to_csv().as_bytes())?;
    update_manifest(out, &hash, &[REPORT_JSON.into(), REPORT_CSV.into()])?;
    Ok(report)
}

/// Wave experiments; `None` when the config has no wave section.
pub fn wave(cfg: &ScenarioConfig, out: &Path) -> Result<Option<ExpansionReport>> {
    let Some(w) = &cfg.wave else { return Ok(None) };
    let hash = cfg.hash();
    let (report, fields) = run_wave(w, &hash, &out.join(FIELDS_DIR))?;
    write(&out.join(WAVE_REPORT), &json(&report))?;
    let mut files: Vec<String> = fields.iter().map(|f| format!("{FIELDS_DIR}/{f}")).collect();
    files.push(WAVE_REPORT.into());
    update_manifest(out, &hash, &files)?;
    Ok(Some(report))
}

// ---- plot data ------------------------------------------------------------------

/// CSV plot-data bundle from whatever artifacts exist in `out`; at least one of the
/// dataset, reconstruction report or wave report is required. Returns the files written.
pub fn plots(out: &Path) -> Result<Vec<String>> {
    let ds_path = out.join(DATASET);
    let rep_path = out.join(REPORT_JSON);
    let wave_path = out.join(WAVE_REPORT);
    if !ds_path.exists() && !rep_path.exists() && !wave_path.exists() {
        return Err(PipelineError::MissingInput(out.join(REPORT_JSON)));
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let rel = format!("{PLOTS_DIR}/{name}");
        write(&out.join(&rel), body.as_bytes())?;
        written.push(rel);
        Ok(())
    };
    let mut hash = None;
    if ds_path.exists() {
        let ds = read_dataset(&ds_path)?;
        hash = Some(ds.view.meta.config_hash.clone());
        emit("arrival_surface.csv", arrival_surface(&ds.view))?;
    }
    if rep_path.exists() {
        let rep: RunReport = parse(&rep_path, &read(&rep_path)?)?;
        hash = Some(rep.config_hash.clone());
        emit("cone_sections.csv", cone_sections(&rep.reconstruction))?;
        emit("residual_histogram.csv", residual_histogram(&rep.reconstruction))?;
    }
    if wave_path.exists() {
        let w: ExpansionReport = parse(&wave_path, &read(&wave_path)?)?;
        hash = Some(w.config_hash.clone());
        emit("wave_remainders.csv", wave_remainders(&w))?;
        emit("wave_cone_profile.csv", wave_profile(&w))?;
    }
    if let Some(h) = hash {
        update_manifest(out, &h, &written)?;
    }
    Ok(written)
}

/// Earliest arrival times `source,observer,s`: over a static flat congruence each
/// source traces a cone in (observer position, s).
fn arrival_surface(view: &DatasetView) -> String {
    let mut s = String::from("source,observer,s\n");
    for r in view.records.iter().filter(|r| r.earliest_flag) {
        s.push_str(&format!("{},{},{:e}\n", r.source_id, r.observer_id, r.s));
    }
    s
}

/// Fitted trace directions with the value of the fitted form on each.
fn cone_sections(rep: &ReconstructionReport) -> String {
    let mut s = String::from("target,trace,form_value,direction\n");
    for t in rep.targets.iter().filter(|t| t.status == TargetStatus::Ok) {
        let Some(est) = &t.estimate else { continue };
        let c = est.matrix();
        for (k, tr) in t.traces.iter().enumerate() {
            let v = nalgebra::DVector::from_column_slice(&tr.tangent);
            let q = (v.transpose() * &c * &v)[(0, 0)];
            let dir: Vec<String> = tr.tangent.iter().map(|x| format!("{x:e}")).collect();
            s.push_str(&format!("{},{k},{q:e},{}\n", t.target, dir.join(" ")));
        }
    }
    s
}

/// Counts of per-target largest fit residuals in decades `[10^k, 10^{k+1})`.
fn residual_histogram(rep: &ReconstructionReport) -> String {
    let mut bins: BTreeMap<i32, usize> = BTreeMap::new();
    for t in &rep.targets {
        let Some(est) = &t.estimate else { continue };
        let worst = est.residuals.iter().fold(0.0f64, |a, b| a.max(*b));
        let k = if worst > 0.0 { worst.log10().floor() as i32 } else { -300 };
        *bins.entry(k).or_default() += 1;
    }
    let mut s = String::from("log10_lo,log10_hi,count\n");
    for (k, c) in bins {
        s.push_str(&format!("{k},{},{c}\n", k + 1));
    }
    s
}

fn wave_remainders(w: &ExpansionReport) -> String {
    let mut s = String::from("eps,remainder\n");
    if let Some(e) = &w.expansion {
        for (x, r) in e.eps.iter().zip(&e.remainders) {
            s.push_str(&format!("{x:e},{r:e}\n"));
        }
    }
    s
}

/// Ray-averaged `|∇M|²` against offset from the cone, intersecting and control runs.
fn wave_profile(w: &ExpansionReport) -> String {
    let mut s = String::from("offset_cells,intersecting,control\n");
    if let Some(c) = &w.cone {
        for ((o, a), (_, b)) in c.intersecting.profile.iter().zip(&c.control.profile) {
            s.push_str(&format!("{o},{a:e},{b:e}\n"));
        }
    }
    s
}
