//! The Cp-type model selection criteria for weighted and unweighted squared
//! error risk, in the three estimation regimes, together with the plug-in
//! estimators of their penalty terms.
//!
//! Every population expectation in a penalty is replaced by a sample average;
//! expectations containing the treatment indicator are estimated through
//! observed-arm weighting t/e (valid under ignorable assignment), residuals
//! stand in for the error vector, and the fitted conditional residual means
//! stand in for E[ε|z].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::design::{Dataset, DesignSet};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorFit, EstimatorKind};
use crate::linalg;
use crate::outcome::{conditional_residual_means, OutcomeFit};
use crate::propensity::{PropensityFit, ScoreMode};

/// Estimation regime a criterion is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    IpwKnown,
    IpwEstimated,
    /// Doubly robust with the propensity parameters treated as known.
    DrKnown,
    /// Doubly robust with maximum-likelihood propensity parameters.
    DrEstimated,
}

impl Regime {
    pub fn of_fit(fit: &EstimatorFit) -> Regime {
        match (fit.kind, fit.propensity_mode) {
            (EstimatorKind::IpwKnown, _) => Regime::IpwKnown,
            (EstimatorKind::IpwEstimated, _) => Regime::IpwEstimated,
            (EstimatorKind::Dr, ScoreMode::Known) => Regime::DrKnown,
            (EstimatorKind::Dr, ScoreMode::Estimated) => Regime::DrEstimated,
        }
    }

    pub fn is_dr(self) -> bool {
        matches!(self, Regime::DrKnown | Regime::DrEstimated)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::IpwKnown => "ipw_known",
            Regime::IpwEstimated => "ipw_estimated",
            Regime::DrKnown => "dr_known",
            Regime::DrEstimated => "dr",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The selection criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Qicw,
    Wcp,
    Ucp,
    WcpConditional,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Qicw => "qicw",
            Criterion::Wcp => "wcp",
            Criterion::Ucp => "ucp",
            Criterion::WcpConditional => "wcp_conditional",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One criterion evaluation for one candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionReport {
    pub candidate_id: String,
    pub n_params: usize,
    pub criterion: Criterion,
    pub regime: Regime,
    pub gof: f64,
    pub penalty: f64,
    pub total: f64,
}

impl CriterionReport {
    fn new(
        candidate_id: &str,
        n_params: usize,
        criterion: Criterion,
        regime: Regime,
        gof: f64,
        penalty: f64,
    ) -> Self {
        Self {
            candidate_id: candidate_id.to_string(),
            n_params,
            criterion,
            regime,
            gof,
            penalty,
            total: gof + penalty,
        }
    }
}

/// Options for the penalty plug-ins.
#[derive(Debug, Clone, Copy)]
pub struct PluginOptions {
    /// Condition threshold for the information-matrix inverse.
    pub cond_limit: f64,
    /// Hard-fail instead of pseudo-inverting a near-singular Ĵ.
    pub fail_on_singular_j: bool,
}

impl Default for PluginOptions {
    fn default() -> Self {
        Self {
            cond_limit: linalg::DEFAULT_COND_LIMIT,
            fail_on_singular_j: false,
        }
    }
}

/// Sample-average plug-ins for every expectation appearing in the penalty
/// terms. Factors of two are NOT included except in `term_inv_e`, which
/// stores the full 2·Σ_h E[(1/e^(h)) εᵀX^(h)X^(h)ᵀε] plug-in.
#[derive(Debug, Clone)]
pub struct PenaltyPlugins {
    pub regime: Regime,
    pub candidate_id: String,
    pub n_params: usize,
    /// 2Σ_h Ê[(1/e^(h)) εᵀX^(h)X^(h)ᵀε] via t/e² weighting.
    pub term_inv_e: f64,
    /// Λ̂^(h) = (1/N)Σ_i (t/e²) X^(h)ᵀ ε̂ (∂e^(h)/∂αᵀ), per arm (p×q).
    pub term_lambda: Vec<Array2<f64>>,
    /// Unweighted analogue Λ̂ᵤ^(h) with a single t/e factor.
    pub term_lambda_unweighted: Vec<Array2<f64>>,
    /// Ĵ = (1/N)Σ_i s_i s_iᵀ, s_i the per-sample score vector of the
    /// assignment likelihood (observed-arm gradient over its score).
    pub term_j: Array2<f64>,
    /// Σ_{h,k} Ê[E[ε|z]ᵀ X^(h)X^(k)ᵀ E[ε|z]].
    pub term_condmean_cross: f64,
    /// Σ_h Ê[(1/e^(h)) E[ε|z]ᵀ X^(h)X^(h)ᵀ E[ε|z]].
    pub term_condmean_inv_e: f64,
    /// Σ_{h,k} Ê[e^(h) E[ε|z]ᵀ X^(h)X^(k)ᵀ E[ε|z]].
    pub term_condmean_e: f64,
    /// Σ_h Ê[E[ε|z]ᵀ X^(h)X^(h)ᵀ E[ε|z]].
    pub term_condmean_own: f64,
    /// Pseudo-inverse of Ĵ (identity-sized zero matrix for regimes without a
    /// score correction).
    j_inverse: Array2<f64>,
    /// Whether Ĵ was rank-truncated during inversion.
    pub j_truncated: bool,
}

impl PenaltyPlugins {
    /// 2 Σ_{k,h} tr(Λ̂^(k) Ĵ⁻¹ Λ̂^(h)ᵀ), evaluated through S = Σ_h Λ̂^(h);
    /// the criteria subtract it.
    fn score_correction(&self, weighted_second_factor: bool) -> f64 {
        let p = self.n_params;
        let q = self.term_j.nrows();
        let mut s = Array2::<f64>::zeros((p, q));
        let mut s_other = Array2::<f64>::zeros((p, q));
        for lam in &self.term_lambda {
            s += lam;
        }
        let other = if weighted_second_factor {
            &self.term_lambda
        } else {
            &self.term_lambda_unweighted
        };
        for lam in other {
            s_other += lam;
        }
        let tmp = s.dot(&self.j_inverse);
        let mut trace = 0.0;
        for a in 0..p {
            for b in 0..q {
                trace += tmp[[a, b]] * s_other[[a, b]];
            }
        }
        2.0 * trace
    }
}

/// Computes every plug-in the requested fit's regime needs.
pub fn penalty_plugins(
    dataset: &Dataset,
    design: &DesignSet,
    fit: &EstimatorFit,
    propensity: &PropensityFit,
    outcome: Option<&OutcomeFit>,
    options: PluginOptions,
) -> Result<PenaltyPlugins> {
    let regime = Regime::of_fit(fit);
    let n = dataset.n_samples();
    let h = dataset.n_treatments();
    let m = dataset.outcome_dim();
    let p = design.n_params();
    let q = propensity.gradients.dim().2;
    let nf = n as f64;

    if fit.beta_hat.len() != p {
        return Err(Error::DimensionMismatch {
            context: "penalty_plugins beta",
            expected: p,
            actual: fit.beta_hat.len(),
        });
    }
    if regime.is_dr() && outcome.is_none() {
        return Err(Error::InvalidData(
            "doubly robust penalties require the outcome fit".into(),
        ));
    }

    // residuals at the observed arm and the per-arm quadratic pieces
    let mut term_inv_e = 0.0;
    let mut lambda = vec![Array2::<f64>::zeros((p, q)); h];
    let mut lambda_u = vec![Array2::<f64>::zeros((p, q)); h];
    let mut j_hat = Array2::<f64>::zeros((q, q));
    let mut u = vec![0.0f64; p];
    for i in 0..n {
        let arm = dataset.observed_arm()[i];
        let e = propensity.scores[[i, arm]];
        let x = design.design(i, arm);
        // u = X^(h)ᵀ ε̂ (p-vector)
        u.fill(0.0);
        for r in 0..m {
            let mut fitted = 0.0;
            for a in 0..p {
                fitted += x[[r, a]] * fit.beta_hat[a];
            }
            let resid = dataset.outcomes()[[i, r]] - fitted;
            for a in 0..p {
                u[a] += x[[r, a]] * resid;
            }
        }
        let unorm2: f64 = u.iter().map(|v| v * v).sum();
        term_inv_e += unorm2 / (e * e);
        if regime == Regime::IpwEstimated {
            let lam = &mut lambda[arm];
            let lam_u = &mut lambda_u[arm];
            for a in 0..p {
                let ua_e2 = u[a] / (e * e);
                let ua_e = u[a] / e;
                for j in 0..q {
                    let g = propensity.gradients[[i, arm, j]];
                    lam[[a, j]] += ua_e2 * g;
                    lam_u[[a, j]] += ua_e * g;
                }
            }
            // per-sample score vector of the assignment likelihood
            for j in 0..q {
                let gj = propensity.gradients[[i, arm, j]] / (e * e);
                for k in 0..q {
                    j_hat[[j, k]] += gj * propensity.gradients[[i, arm, k]];
                }
            }
        }
    }
    term_inv_e *= 2.0 / nf;
    for arm in 0..h {
        lambda[arm].mapv_inplace(|v| v / nf);
        lambda_u[arm].mapv_inplace(|v| v / nf);
    }
    j_hat.mapv_inplace(|v| v / nf);

    let (j_inverse, j_truncated) = if regime == Regime::IpwEstimated {
        let (inv, truncated) = linalg::pinv_spd(j_hat.view(), options.cond_limit);
        if truncated && options.fail_on_singular_j {
            return Err(Error::SingularMatrix {
                context: "information matrix Ĵ",
                cond: f64::INFINITY,
            });
        }
        (inv, truncated)
    } else {
        (Array2::zeros((q, q)), false)
    };

    // conditional-mean terms (all-sample averages; no treatment indicator)
    let mut cm_cross = 0.0;
    let mut cm_inv_e = 0.0;
    let mut cm_e = 0.0;
    let mut cm_own = 0.0;
    if regime.is_dr() {
        let outcome = outcome.unwrap();
        let rm = conditional_residual_means(outcome, design, fit.beta_hat.view())?;
        let mut v = vec![0.0f64; p];
        let mut vsum = vec![0.0f64; p];
        let mut vsum_e = vec![0.0f64; p];
        for i in 0..n {
            // v^(h) = X_i^(h)ᵀ rm_i per arm, plus their plain and e-weighted sums
            vsum.fill(0.0);
            vsum_e.fill(0.0);
            let mut own = 0.0;
            let mut own_inv_e = 0.0;
            for arm in 0..h {
                let x = design.design(i, arm);
                v.fill(0.0);
                for r in 0..m {
                    let w = rm[[i, r]];
                    for a in 0..p {
                        v[a] += x[[r, a]] * w;
                    }
                }
                let vnorm2: f64 = v.iter().map(|t| t * t).sum();
                own += vnorm2;
                own_inv_e += vnorm2 / propensity.scores[[i, arm]];
                let e = propensity.scores[[i, arm]];
                for a in 0..p {
                    vsum_e[a] += e * v[a];
                    vsum[a] += v[a];
                }
            }
            cm_cross += vsum.iter().map(|t| t * t).sum::<f64>();
            cm_e += vsum_e.iter().zip(&vsum).map(|(a, b)| a * b).sum::<f64>();
            cm_own += own;
            cm_inv_e += own_inv_e;
        }
        cm_cross /= nf;
        cm_inv_e /= nf;
        cm_e /= nf;
        cm_own /= nf;
    }

    Ok(PenaltyPlugins {
        regime,
        candidate_id: design.candidate_id().to_string(),
        n_params: p,
        term_inv_e,
        term_lambda: lambda,
        term_lambda_unweighted: lambda_u,
        term_j: j_hat,
        term_condmean_cross: cm_cross,
        term_condmean_inv_e: cm_inv_e,
        term_condmean_e: cm_e,
        term_condmean_own: cm_own,
        j_inverse,
        j_truncated,
    })
}

/// QIC_w: weighted goodness of fit with the 2σ²p penalty.
pub fn qicw(candidate_id: &str, fit: &EstimatorFit, sigma2: f64, p: usize) -> CriterionReport {
    CriterionReport::new(
        candidate_id,
        p,
        Criterion::Qicw,
        Regime::of_fit(fit),
        fit.weighted_rss,
        2.0 * sigma2 * p as f64,
    )
}

fn check_regime(fit: &EstimatorFit, plugins: &PenaltyPlugins) -> Result<Regime> {
    let regime = Regime::of_fit(fit);
    if regime != plugins.regime {
        return Err(Error::RegimeMismatch {
            plugins: plugins.regime.to_string(),
            requested: regime.to_string(),
        });
    }
    Ok(regime)
}

/// The weighted-risk criterion with the regime's penalty.
pub fn wcp(fit: &EstimatorFit, plugins: &PenaltyPlugins) -> Result<CriterionReport> {
    let regime = check_regime(fit, plugins)?;
    let penalty = match regime {
        Regime::IpwKnown => plugins.term_inv_e,
        Regime::IpwEstimated => plugins.term_inv_e - plugins.score_correction(true),
        Regime::DrKnown | Regime::DrEstimated => {
            plugins.term_inv_e + 2.0 * plugins.term_condmean_cross
                - 2.0 * plugins.term_condmean_inv_e
        }
    };
    Ok(CriterionReport::new(
        &plugins.candidate_id,
        plugins.n_params,
        Criterion::Wcp,
        regime,
        fit.weighted_rss,
        penalty,
    ))
}

/// The unweighted-risk criterion with the regime's penalty.
pub fn ucp(
    fit: &EstimatorFit,
    plugins: &PenaltyPlugins,
    sigma2: f64,
) -> Result<CriterionReport> {
    let regime = check_regime(fit, plugins)?;
    let base = 2.0 * sigma2 * plugins.n_params as f64;
    let penalty = match regime {
        Regime::IpwKnown => base,
        Regime::IpwEstimated => base - plugins.score_correction(false),
        Regime::DrKnown | Regime::DrEstimated => {
            base + 2.0 * plugins.term_condmean_e - 2.0 * plugins.term_condmean_own
        }
    };
    Ok(CriterionReport::new(
        &plugins.candidate_id,
        plugins.n_params,
        Criterion::Ucp,
        regime,
        fit.masked_rss,
        penalty,
    ))
}

/// The conditional-risk variant for estimated propensity scores: same
/// goodness of fit, penalty equal to the known-score plug-in evaluated at
/// the estimated scores (no score correction).
pub fn wcp_conditional(fit: &EstimatorFit, plugins: &PenaltyPlugins) -> Result<CriterionReport> {
    let regime = check_regime(fit, plugins)?;
    if regime != Regime::IpwEstimated {
        return Err(Error::RegimeMismatch {
            plugins: plugins.regime.to_string(),
            requested: "ipw_estimated (conditional criterion)".into(),
        });
    }
    Ok(CriterionReport::new(
        &plugins.candidate_id,
        plugins.n_params,
        Criterion::WcpConditional,
        regime,
        fit.weighted_rss,
        plugins.term_inv_e,
    ))
}

/// Picks the minimizing candidate; ties break toward fewer parameters, then
/// lexicographic candidate id.
pub fn select<'a>(reports: &'a [CriterionReport]) -> Result<&'a CriterionReport> {
    let first = reports.first().ok_or(Error::EmptySelection)?;
    for r in reports {
        if r.criterion != first.criterion || r.regime != first.regime {
            return Err(Error::InvalidData(format!(
                "select() requires one criterion/regime, found {}/{} and {}/{}",
                first.criterion, first.regime, r.criterion, r.regime
            )));
        }
    }
    Ok(reports
        .iter()
        .min_by(|a, b| {
            a.total
                .partial_cmp(&b.total)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.n_params.cmp(&b.n_params))
                .then(a.candidate_id.cmp(&b.candidate_id))
        })
        .expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{DesignSet};
    use crate::estimators::ipw_fit;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2, Array3};

    fn report(id: &str, p: usize, total: f64) -> CriterionReport {
        CriterionReport {
            candidate_id: id.into(),
            n_params: p,
            criterion: Criterion::Wcp,
            regime: Regime::IpwKnown,
            gof: total,
            penalty: 0.0,
            total,
        }
    }

    #[test]
    fn qicw_arithmetic() {
        let fit = EstimatorFit {
            kind: EstimatorKind::IpwKnown,
            propensity_mode: ScoreMode::Known,
            beta_hat: array![0.0],
            weighted_rss: 0.0,
            masked_rss: 0.0,
        };
        let r = qicw("c", &fit, 2.0, 3);
        assert_abs_diff_eq!(r.total, 12.0, epsilon = 0.0);
        assert_abs_diff_eq!(r.total, r.gof + r.penalty, epsilon = 0.0);

        // equal gof, p = 2 vs 3, σ² = 2 → totals differ by exactly 4
        let r2 = qicw("c2", &fit, 2.0, 2);
        let r3 = qicw("c3", &fit, 2.0, 3);
        assert_abs_diff_eq!(r3.total - r2.total, 4.0, epsilon = 0.0);
    }

    #[test]
    fn select_minimizes_and_breaks_ties() {
        let reports = vec![report("p1", 1, 5.0), report("p2", 2, 3.0), report("p3", 3, 7.0)];
        assert_eq!(select(&reports).unwrap().candidate_id, "p2");

        let tied = vec![report("p2", 2, 3.0), report("p3", 3, 3.0)];
        assert_eq!(select(&tied).unwrap().candidate_id, "p2");

        let shifted: Vec<CriterionReport> = reports
            .iter()
            .map(|r| report(&r.candidate_id, r.n_params, r.total + 100.0))
            .collect();
        assert_eq!(select(&shifted).unwrap().candidate_id, "p2");

        assert!(select(&[]).is_err());
    }

    #[test]
    fn full_observation_penalty_reduces_to_two_sigma2_p() {
        // e ≡ 1, H = 1: term_inv_e = (2/N) Σ ε̂ᵀXXᵀε̂ ≈ 2σ̂²p for an
        // orthonormal design (Σ_h X^(h)ᵀX^(h) = I means ‖X‖² sums to p)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let mut t = Array2::<u8>::zeros((n, 1));
        t.fill(1);
        let mut y = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            y[[i, 0]] = 1.0 + rng.gen_range(-2.0..2.0);
        }
        let ds = Dataset::new(t, Array2::zeros((n, 1)), y, None).unwrap();
        // single-arm orthonormal design: X = 1 (p = 1, Σ XᵀX = 1)
        let mats = vec![(0..n).map(|_| array![[1.0]]).collect::<Vec<_>>()];
        let design = DesignSet::from_per_sample("const", mats).unwrap();
        let pfit = PropensityFit {
            alpha: array![0.0],
            scores: Array2::from_elem((n, 1), 1.0),
            gradients: Array3::zeros((n, 1, 1)),
            mode: ScoreMode::Known,
            loglik: None,
            clipped: false,
        };
        let fit = ipw_fit(&ds, &design, &pfit).unwrap();
        let plugins =
            penalty_plugins(&ds, &design, &fit, &pfit, None, PluginOptions::default()).unwrap();
        let sigma2_hat = fit.masked_rss / n as f64;
        assert_abs_diff_eq!(
            plugins.term_inv_e,
            2.0 * sigma2_hat * 1.0,
            epsilon = 1e-10
        );

        // zero residuals: noiseless constant outcome
        let mut y0 = Array2::<f64>::zeros((n, 1));
        y0.fill(1.0);
        let ds0 = Dataset::new(ds.treatments().clone(), Array2::zeros((n, 1)), y0, None).unwrap();
        let fit0 = ipw_fit(&ds0, &design, &pfit).unwrap();
        let plugins0 =
            penalty_plugins(&ds0, &design, &fit0, &pfit, None, PluginOptions::default()).unwrap();
        assert_abs_diff_eq!(plugins0.term_inv_e, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn regime_mismatch_is_rejected() {
        let fit_known = EstimatorFit {
            kind: EstimatorKind::IpwKnown,
            propensity_mode: ScoreMode::Known,
            beta_hat: array![0.0],
            weighted_rss: 1.0,
            masked_rss: 1.0,
        };
        let plugins = PenaltyPlugins {
            regime: Regime::IpwEstimated,
            candidate_id: "c".into(),
            n_params: 1,
            term_inv_e: 0.0,
            term_lambda: vec![],
            term_lambda_unweighted: vec![],
            term_j: Array2::zeros((1, 1)),
            term_condmean_cross: 0.0,
            term_condmean_inv_e: 0.0,
            term_condmean_e: 0.0,
            term_condmean_own: 0.0,
            j_inverse: Array2::zeros((1, 1)),
            j_truncated: false,
        };
        assert!(wcp(&fit_known, &plugins).is_err());
        assert!(wcp_conditional(&fit_known, &plugins).is_err());
    }

    #[test]
    fn totals_are_exact_sums() {
        let fit = EstimatorFit {
            kind: EstimatorKind::IpwKnown,
            propensity_mode: ScoreMode::Known,
            beta_hat: array![0.0],
            weighted_rss: 17.25,
            masked_rss: 11.5,
        };
        let plugins = PenaltyPlugins {
            regime: Regime::IpwKnown,
            candidate_id: "c".into(),
            n_params: 3,
            term_inv_e: 80.5,
            term_lambda: vec![],
            term_lambda_unweighted: vec![],
            term_j: Array2::zeros((1, 1)),
            term_condmean_cross: 0.0,
            term_condmean_inv_e: 0.0,
            term_condmean_e: 0.0,
            term_condmean_own: 0.0,
            j_inverse: Array2::zeros((1, 1)),
            j_truncated: false,
        };
        let w = wcp(&fit, &plugins).unwrap();
        assert_eq!(w.total, w.gof + w.penalty);
        assert_eq!(w.gof, 17.25);
        assert_eq!(w.penalty, 80.5);
        let u = ucp(&fit, &plugins, 2.0).unwrap();
        assert_eq!(u.gof, 11.5);
        assert_eq!(u.penalty, 12.0);
    }
}
