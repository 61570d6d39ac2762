//! Causal finite-difference solver for `□_g u + a u² = f` on 1+1 and 1+2 lattices,
//! with the ε-expansion terms, the fourth-order interaction field and a light-cone scan.

pub mod error;
pub mod grid;
pub mod interaction;
pub mod io;
pub mod solve;
pub mod source;

pub use error::{Result, WaveError};
pub use grid::{relative_l2, Background, GridField, GridSpec, Lattice};
pub use interaction::{
    cone_lattice, fourth_interaction_finite_difference, fourth_interaction_formula, least_squares_intersection, singularity_scan,
    wavefront_intersection, PulseFamily, ScanConfig, ScanReport, ScanRow,
};
pub use solve::{
    causal_solve, expansion_study, expansion_terms, loglog_slope, nonlinear_solve, ExpansionTerms, Lockstep,
    NonlinearSolution, Record, RemainderRow, Route,
};
pub use source::{check_causal_independence, mollified_power, smooth_step, Coupling, Forcing, SourceProfile};
