//! Sequential tests for treatment-effect heterogeneity with bootstrap or
//! null-sampling calibration.

// `!(x > 0.0)` is used on purpose so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod data;
pub mod error;
pub mod interaction;
pub mod ks;
pub(crate) mod linalg;
pub mod nuisance;
pub mod recipe;
pub mod rng;
pub mod sequential;
pub mod simgen;

pub use nalgebra;
pub use calibration::{BootstrapPlan, CalibrationResult, Method, PretestCount};
pub use data::{Dataset, Residualized, ResidualSource, StepContext};
pub use error::{Error, ErrorKind, Result};
pub use recipe::{Recipe, RecipeKind};
pub use sequential::{run_sequence, run_sequence_exploratory, SequenceConfig, SequenceResult, StopReason};
