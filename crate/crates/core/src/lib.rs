//! Estimation and model selection for marginal structural models.
//!
//! Provides inverse-probability-weighted and doubly robust estimation of
//! linear potential-outcome models, Cp-type selection criteria for the
//! weighted and unweighted squared-error risks (with plug-in penalties for
//! known propensity scores, maximum-likelihood scores, and doubly robust
//! estimation), a missing-data specialization, and a reproducible Monte
//! Carlo study harness.

pub mod criteria;
pub mod design;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod missing_data;
pub mod outcome;
pub mod propensity;
pub mod study;

pub use criteria::{Criterion, CriterionReport, PenaltyPlugins, Regime};
pub use design::{build_orthonormal_design, map_coefficients, Dataset, DesignSet, TrueParams};
pub use error::{Error, Result};
pub use estimators::{dr_fit, ipw_fit, EstimatorFit, EstimatorKind};
pub use outcome::{fit_outcome, OutcomeFeatures, OutcomeFit};
pub use propensity::{evaluate_scores, fit_mle, PropensityFit, PropensityModel, ScoreMode};
pub use study::{run_study, StudyConfig, StudyTables};
