use thiserror::Error;

use crate::metric::Vec4;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by the geometry, forward-model and reconstruction layers.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid metric definition: {0}")]
    InvalidSpec(String),
    #[error("event {x:?} lies outside the chart domain")]
    OutOfDomain { x: Vec<f64> },
    #[error("ill-conditioned evaluation: {0}")]
    IllConditioned(String),
    #[error("integrator step underflow at s = {s} (last good state {x:?})")]
    StepFailure { s: f64, x: Vec4, v: Vec4 },
    #[error("geodesic never enters the causal diamond")]
    NeverInside,
    #[error("boundary-value solver did not converge: {0}")]
    SolverNoConverge(String),
    #[error("causal relation could not be decided: {0}")]
    IndeterminateRelation(String),
    #[error("source is not observed by observer {observer} inside its parameter interval")]
    NotObserved { observer: usize },
    #[error("observers leave the chart domain: {members:?}")]
    DomainEscape { members: Vec<usize> },
    #[error("Fermi chart inversion failed: {0}")]
    OutOfChart(String),
    #[error("invalid observer configuration: {0}")]
    InvalidObserver(String),
    #[error("source {0} violates the source-region hypothesis")]
    SourceOutsideRegion(usize),
    #[error("duplicate source id {0}")]
    DuplicateSource(usize),
    #[error("no observer tuple with condition number below {kappa_max}")]
    NoValidTuple { kappa_max: f64 },
    #[error("null directions do not span the space of quadratic forms (rank {rank}, need {needed})")]
    DegenerateSpan { rank: usize, needed: usize },
    #[error("fitted cone form is not Lorentzian (eigenvalues {eigenvalues:?})")]
    NonLorentzianFit { eigenvalues: Vec<f64> },
    #[error("null geodesic left the declared vacuum region at t = {t}")]
    LeftVacuumRegion { t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}
