//! The inverse-probability-weighted and doubly robust estimators, with the
//! weighted and masked residual sums the criteria are built from.

use ndarray::{Array1, Array2};

use crate::design::{Dataset, DesignSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::outcome::OutcomeFit;
use crate::propensity::{PropensityFit, ScoreMode};

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    IpwKnown,
    IpwEstimated,
    Dr,
}

/// A fitted coefficient vector plus the residual aggregates reused by every
/// criterion (computed here once so the criteria cannot drift from the fit).
#[derive(Debug, Clone)]
pub struct EstimatorFit {
    pub kind: EstimatorKind,
    pub propensity_mode: ScoreMode,
    pub beta_hat: Array1<f64>,
    /// Σ_h (ỹ − X̃β̂)ᵀ W^(h) (ỹ − X̃β̂) at the fit's own scores.
    pub weighted_rss: f64,
    /// Σ_h (ỹ − X̃β̂)ᵀ T^(h) (ỹ − X̃β̂).
    pub masked_rss: f64,
}

fn check_shapes(dataset: &Dataset, design: &DesignSet, propensity: &PropensityFit) -> Result<()> {
    if design.n_arms() != dataset.n_treatments() {
        return Err(Error::DimensionMismatch {
            context: "design arms",
            expected: dataset.n_treatments(),
            actual: design.n_arms(),
        });
    }
    if design.outcome_dim() != dataset.outcome_dim() {
        return Err(Error::DimensionMismatch {
            context: "design outcome dim",
            expected: dataset.outcome_dim(),
            actual: design.outcome_dim(),
        });
    }
    if propensity.scores.dim() != (dataset.n_samples(), dataset.n_treatments()) {
        return Err(Error::DimensionMismatch {
            context: "propensity scores rows",
            expected: dataset.n_samples(),
            actual: propensity.scores.nrows(),
        });
    }
    Ok(())
}

fn residual_sums(
    dataset: &Dataset,
    design: &DesignSet,
    propensity: &PropensityFit,
    beta: &Array1<f64>,
) -> (f64, f64) {
    let n = dataset.n_samples();
    let p = design.n_params();
    let mut weighted = 0.0;
    let mut masked = 0.0;
    for i in 0..n {
        let arm = dataset.observed_arm()[i];
        let x = design.design(i, arm);
        let mut ss = 0.0;
        for r in 0..dataset.outcome_dim() {
            let mut fitted = 0.0;
            for a in 0..p {
                fitted += x[[r, a]] * beta[a];
            }
            let d = dataset.outcomes()[[i, r]] - fitted;
            ss += d * d;
        }
        masked += ss;
        weighted += ss / propensity.scores[[i, arm]];
    }
    (weighted, masked)
}

/// Inverse-probability-weighted least squares:
/// β̂ = {Σ_h X̃ᵀW X̃}⁻¹ Σ_h X̃ᵀW ỹ.
pub fn ipw_fit(
    dataset: &Dataset,
    design: &DesignSet,
    propensity: &PropensityFit,
) -> Result<EstimatorFit> {
    check_shapes(dataset, design, propensity)?;
    let n = dataset.n_samples();
    let p = design.n_params();
    let m = dataset.outcome_dim();
    let mut gram = Array2::<f64>::zeros((p, p));
    let mut rhs = Array1::<f64>::zeros(p);
    for i in 0..n {
        let arm = dataset.observed_arm()[i];
        let w = 1.0 / propensity.scores[[i, arm]];
        let x = design.design(i, arm);
        for r in 0..m {
            let y = dataset.outcomes()[[i, r]];
            for a in 0..p {
                let xa = x[[r, a]];
                rhs[a] += w * xa * y;
                for b in 0..p {
                    gram[[a, b]] += w * xa * x[[r, b]];
                }
            }
        }
    }
    let beta = linalg::solve_spd(gram.view(), rhs.view(), "IPW weighted Gram", linalg::DEFAULT_COND_LIMIT)
        .map_err(|_| Error::SingularDesign {
            candidate: design.candidate_id().to_string(),
            detail: "weighted Gram Σ_h X̃ᵀWX̃ is singular (observed data do not span the design)"
                .into(),
        })?;
    let (weighted_rss, masked_rss) = residual_sums(dataset, design, propensity, &beta);
    let kind = match propensity.mode {
        ScoreMode::Known => EstimatorKind::IpwKnown,
        ScoreMode::Estimated => EstimatorKind::IpwEstimated,
    };
    Ok(EstimatorFit {
        kind,
        propensity_mode: propensity.mode,
        beta_hat: beta,
        weighted_rss,
        masked_rss,
    })
}

/// Doubly robust estimator:
/// β̂ = (Σ_h X̃ᵀX̃)⁻¹ Σ_h {X̃ᵀW ỹ + X̃ᵀ(I−W) Ê[ỹ^(h)|z̃]}.
pub fn dr_fit(
    dataset: &Dataset,
    design: &DesignSet,
    propensity: &PropensityFit,
    outcome: &OutcomeFit,
) -> Result<EstimatorFit> {
    check_shapes(dataset, design, propensity)?;
    let n = dataset.n_samples();
    let h = dataset.n_treatments();
    let p = design.n_params();
    let m = dataset.outcome_dim();
    if outcome.cond_means.dim() != (n, h, m) {
        return Err(Error::DimensionMismatch {
            context: "outcome cond_means",
            expected: n,
            actual: outcome.cond_means.dim().0,
        });
    }
    let mut gram = Array2::<f64>::zeros((p, p));
    let mut rhs = Array1::<f64>::zeros(p);
    for i in 0..n {
        let obs = dataset.observed_arm()[i];
        let w = 1.0 / propensity.scores[[i, obs]];
        for arm in 0..h {
            let x = design.design(i, arm);
            for r in 0..m {
                let c = outcome.cond_means[[i, arm, r]];
                // W picks the observed arm; (I−W) keeps the conditional mean
                // with weight 1 on unobserved arms and (1 − 1/e) on the
                // observed one.
                let target = if arm == obs {
                    w * dataset.outcomes()[[i, r]] + (1.0 - w) * c
                } else {
                    c
                };
                for a in 0..p {
                    let xa = x[[r, a]];
                    rhs[a] += xa * target;
                    for b in 0..p {
                        gram[[a, b]] += xa * x[[r, b]];
                    }
                }
            }
        }
    }
    let beta = linalg::solve_spd(gram.view(), rhs.view(), "DR Gram", linalg::DEFAULT_COND_LIMIT)
        .map_err(|_| Error::SingularDesign {
            candidate: design.candidate_id().to_string(),
            detail: "full design Gram Σ_h X̃ᵀX̃ is singular".into(),
        })?;
    let (weighted_rss, masked_rss) = residual_sums(dataset, design, propensity, &beta);
    Ok(EstimatorFit {
        kind: EstimatorKind::Dr,
        propensity_mode: propensity.mode,
        beta_hat: beta,
        weighted_rss,
        masked_rss,
    })
}
