//! Penalized-spline marginal regression for longitudinal and clustered data.
//!
//! The crate fits models of the form `y_ij = x_ij0 β₀ + Σ_k f_k(x_ijk) + ε_ij`
//! by penalized weighted least squares with a block-diagonal working
//! correlation, and chooses the penalty parameters by leave-subject-out
//! cross-validation. The exact criterion is evaluated with a per-subject
//! shortcut; its first-order approximation is minimized over `log λ` by a
//! Newton iteration with analytic derivatives.
//!
//! Module map:
//!
//! * [`basis`]: B-splines, derivative penalties and design assembly.
//! * [`correlation`]: working correlation blocks and the exponential-with-nugget fit.
//! * [`data`]: the [`LongitudinalDataset`] container and CSV ingestion.
//! * [`estimator`]: the penalized fit, hat blocks, leverage and the cluster bootstrap.
//! * [`criteria`]: LsoCV (shortcut and brute force), LsoCV*, V* and oracle losses.
//! * [`optimizer`]: Newton minimization of LsoCV* and grid search.
//! * [`selection`]: choosing the working correlation structure.
//! * [`simulation`]: synthetic data and the Monte Carlo experiments.
//! * [`cli`]: the command-line front end used by the `lsocv` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod correlation;
pub mod criteria;
pub mod data;
mod error;
pub mod estimator;
pub mod optimizer;
pub mod selection;
pub mod simulation;

pub use basis::{BasisSpec, DesignAssembly, ModelSpec, TermKind, TermSpec};
pub use correlation::{CorrelationModel, WorkingBlock};
pub use criteria::CriterionReport;
pub use data::{LongitudinalDataset, Subject};
pub use error::{Error, Result};
pub use estimator::{fit, FitResult, LeverageReport};
pub use optimizer::{optimize_lambda, OptimizerConfig, OptimizerTrace};
pub use selection::{select_correlation, SelectionReport};
