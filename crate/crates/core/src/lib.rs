//! Conformal prediction sets for classifiers under distribution shift.
//!
//! Four calibrators share one interface ([`calibrator::Calibrator`]):
//!
//! - **naive**: split conformal prediction with one global threshold,
//! - **covariate**: weighted conformal prediction with density-ratio weights,
//! - **kmeans**: per-cluster thresholds in embedding space,
//! - **ncp**: neighborhood conformal prediction, a weighted quantile over the
//!   scores of each query's nearest calibration neighbors.
//!
//! Around them sit the pieces needed to run and check experiments: a
//! logistic-regression stand-in classifier ([`model`]), synthetic scenarios
//! with oracle conditionals and density ratios ([`synth`]), coverage and
//! coverage-error decomposition evaluation ([`eval`]) and a reproducible
//! file-based pipeline ([`pipeline`]) driven by the `conformal-kit` binary.

pub mod calibrator;
pub mod clustering;
pub mod config;
pub mod density;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod neighbors;
pub mod pipeline;
pub mod points;
pub mod quantile;
pub mod record;
pub mod score;
pub mod synth;

pub use calibrator::{Calibrator, CalibratorKind};
pub use error::{Error, Result};
pub use points::Points;
pub use record::{Dataset, Record, Split};
pub use score::{PredictionSet, Threshold};
