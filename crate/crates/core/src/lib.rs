//! Lorentzian geometry toolkit: catalog metrics, geodesics, causal structure,
//! the light-observation forward model and conformal reconstruction.

pub mod causal;
pub mod error;
pub mod geodesic;
pub mod metric;
pub mod observation;
pub mod reconstruction;
pub mod ode;

pub use error::{Error, Result};
