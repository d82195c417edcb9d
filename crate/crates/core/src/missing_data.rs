//! Single-outcome missing-data analysis: binary missing indicator, logistic
//! propensity, IPW/DR estimation and the weighted-risk criterion penalties.
//! This is the one-arm reduction of the multi-treatment machinery.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorFit, EstimatorKind};
use crate::linalg;
use crate::propensity::{fit_mle, PropensityFit, PropensityModel, ScoreMode};

/// Outcome rows with `missing_indicator = 0` are never read by the
/// estimators; designs and confounders are known for every sample.
#[derive(Debug, Clone)]
pub struct MissingDataset {
    n_samples: usize,
    outcome_dim: usize,
    outcomes: Array2<f64>,
    missing_indicator: Vec<u8>,
    confounders: Array2<f64>,
    designs: Vec<Array2<f64>>,
}

impl MissingDataset {
    pub fn new(
        outcomes: Array2<f64>,
        missing_indicator: Vec<u8>,
        confounders: Array2<f64>,
        designs: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let n = outcomes.nrows();
        let m = outcomes.ncols();
        if n == 0 || m == 0 {
            return Err(Error::InvalidData("empty outcome matrix".into()));
        }
        if missing_indicator.len() != n || confounders.nrows() != n || designs.len() != n {
            return Err(Error::InvalidData(
                "missing-data arrays disagree on sample count".into(),
            ));
        }
        if let Some(bad) = missing_indicator.iter().position(|t| *t > 1) {
            return Err(Error::InvalidData(format!(
                "missing indicator at sample {bad} is {}, expected 0 or 1",
                missing_indicator[bad]
            )));
        }
        let p = designs[0].ncols();
        for d in &designs {
            if d.dim() != (m, p) {
                return Err(Error::InvalidData(
                    "per-sample design matrices differ in shape".into(),
                ));
            }
        }
        Ok(Self {
            n_samples: n,
            outcome_dim: m,
            outcomes,
            missing_indicator,
            confounders,
            designs,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn outcome_dim(&self) -> usize {
        self.outcome_dim
    }

    pub fn n_params(&self) -> usize {
        self.designs[0].ncols()
    }

    pub fn outcomes(&self) -> &Array2<f64> {
        &self.outcomes
    }

    pub fn missing_indicator(&self) -> &[u8] {
        &self.missing_indicator
    }

    pub fn confounders(&self) -> &Array2<f64> {
        &self.confounders
    }

    pub fn design(&self, i: usize) -> &Array2<f64> {
        &self.designs[i]
    }

    pub fn observed(&self, i: usize) -> bool {
        self.missing_indicator[i] == 1
    }
}

/// Observation probability per sample: e_i = P(t_i = 1 | z_i).
/// Arm 1 of the underlying binary fit carries e, arm 0 carries 1 − e.
pub fn fit_missing_propensity(
    missing_indicator: &[u8],
    confounders: ArrayView2<f64>,
    confounder_cols: &[usize],
) -> Result<PropensityFit> {
    let n = missing_indicator.len();
    let mut treatments = Array2::<u8>::zeros((n, 2));
    for (i, &t) in missing_indicator.iter().enumerate() {
        if t > 1 {
            return Err(Error::InvalidData(format!(
                "missing indicator at sample {i} is {t}, expected 0 or 1"
            )));
        }
        treatments[[i, t as usize]] = 1;
    }
    let model = PropensityModel::binary_logistic(confounder_cols.to_vec());
    fit_mle(&model, treatments.view(), confounders, None)
}

fn observation_scores(dataset: &MissingDataset, propensity: &PropensityFit) -> Result<Vec<f64>> {
    if propensity.scores.nrows() != dataset.n_samples() || propensity.scores.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            context: "missing-data propensity scores",
            expected: dataset.n_samples(),
            actual: propensity.scores.nrows(),
        });
    }
    Ok((0..dataset.n_samples())
        .map(|i| propensity.scores[[i, 1]])
        .collect())
}

fn residual_sums(dataset: &MissingDataset, beta: &Array1<f64>, e: &[f64]) -> (f64, f64) {
    let mut weighted = 0.0;
    let mut masked = 0.0;
    for i in 0..dataset.n_samples() {
        if !dataset.observed(i) {
            continue;
        }
        let fitted = dataset.design(i).dot(beta);
        let mut ss = 0.0;
        for r in 0..dataset.outcome_dim() {
            let d = dataset.outcomes()[[i, r]] - fitted[r];
            ss += d * d;
        }
        masked += ss;
        weighted += ss / e[i];
    }
    (weighted, masked)
}

/// β̂ = (X̃ᵀWX̃)⁻¹ X̃ᵀWỹ with W = diag(t_i/e_i).
pub fn ipw_missing(dataset: &MissingDataset, propensity: &PropensityFit) -> Result<EstimatorFit> {
    let e = observation_scores(dataset, propensity)?;
    let p = dataset.n_params();
    let mut gram = Array2::<f64>::zeros((p, p));
    let mut rhs = Array1::<f64>::zeros(p);
    for i in 0..dataset.n_samples() {
        if !dataset.observed(i) {
            continue;
        }
        let w = 1.0 / e[i];
        let x = dataset.design(i);
        for r in 0..dataset.outcome_dim() {
            let y = dataset.outcomes()[[i, r]];
            for a in 0..p {
                rhs[a] += w * x[[r, a]] * y;
                for b in 0..p {
                    gram[[a, b]] += w * x[[r, a]] * x[[r, b]];
                }
            }
        }
    }
    let beta = linalg::solve_spd(gram.view(), rhs.view(), "missing IPW Gram", linalg::DEFAULT_COND_LIMIT)
        .map_err(|_| Error::SingularDesign {
            candidate: "missing-data".into(),
            detail: "observed rows do not span the design".into(),
        })?;
    let (weighted_rss, masked_rss) = residual_sums(dataset, &beta, &e);
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

/// Least-squares conditional-mean model Ê[y|z] on [design columns,
/// confounder features], observed rows only, predicted for every sample.
#[derive(Debug, Clone)]
pub struct MissingOutcomeFit {
    pub gamma: Array1<f64>,
    /// N×m predicted conditional means.
    pub cond_means: Array2<f64>,
    pub confounder_cols: Vec<usize>,
}

pub fn fit_missing_outcome(
    dataset: &MissingDataset,
    confounder_cols: &[usize],
) -> Result<MissingOutcomeFit> {
    let p = dataset.n_params();
    let c = confounder_cols.len();
    let dim = p + c;
    let m = dataset.outcome_dim();
    let mut gram = Array2::<f64>::zeros((dim, dim));
    let mut rhs = Array1::<f64>::zeros(dim);
    let mut row = vec![0.0; dim];
    let mut observed_rows = 0usize;
    for i in 0..dataset.n_samples() {
        if !dataset.observed(i) {
            continue;
        }
        let x = dataset.design(i);
        for r in 0..m {
            for a in 0..p {
                row[a] = x[[r, a]];
            }
            for (k, &col) in confounder_cols.iter().enumerate() {
                row[p + k] = dataset.confounders()[[i, col]];
            }
            observed_rows += 1;
            let y = dataset.outcomes()[[i, r]];
            for a in 0..dim {
                rhs[a] += row[a] * y;
                for b in 0..dim {
                    gram[[a, b]] += row[a] * row[b];
                }
            }
        }
    }
    if observed_rows <= dim {
        return Err(Error::InvalidData(format!(
            "missing-data outcome regression needs more observed rows than \
             parameters (rows = {observed_rows}, dim = {dim})"
        )));
    }
    let gamma = linalg::solve_spd(gram.view(), rhs.view(), "missing outcome Gram", linalg::DEFAULT_COND_LIMIT)
        .map_err(|_| Error::SingularDesign {
            candidate: "missing-data outcome".into(),
            detail: "rank-deficient outcome regression".into(),
        })?;
    let mut cond_means = Array2::<f64>::zeros((dataset.n_samples(), m));
    for i in 0..dataset.n_samples() {
        let x = dataset.design(i);
        let mut shift = 0.0;
        for (k, &col) in confounder_cols.iter().enumerate() {
            shift += gamma[p + k] * dataset.confounders()[[i, col]];
        }
        for r in 0..m {
            let mut v = shift;
            for a in 0..p {
                v += x[[r, a]] * gamma[a];
            }
            cond_means[[i, r]] = v;
        }
    }
    Ok(MissingOutcomeFit {
        gamma,
        cond_means,
        confounder_cols: confounder_cols.to_vec(),
    })
}

/// β̂ = (X̃ᵀX̃)⁻¹ {X̃ᵀWỹ + X̃ᵀ(I−W)Ê[ỹ|z̃]}.
pub fn dr_missing(
    dataset: &MissingDataset,
    propensity: &PropensityFit,
    outcome: &MissingOutcomeFit,
) -> Result<EstimatorFit> {
    let e = observation_scores(dataset, propensity)?;
    let p = dataset.n_params();
    let m = dataset.outcome_dim();
    let mut gram = Array2::<f64>::zeros((p, p));
    let mut rhs = Array1::<f64>::zeros(p);
    for i in 0..dataset.n_samples() {
        let x = dataset.design(i);
        let w = if dataset.observed(i) { 1.0 / e[i] } else { 0.0 };
        for r in 0..m {
            let c = outcome.cond_means[[i, r]];
            let target = if dataset.observed(i) {
                w * dataset.outcomes()[[i, r]] + (1.0 - w) * c
            } else {
                c
            };
            for a in 0..p {
                rhs[a] += x[[r, a]] * target;
                for b in 0..p {
                    gram[[a, b]] += x[[r, a]] * x[[r, b]];
                }
            }
        }
    }
    let beta = linalg::solve_spd(gram.view(), rhs.view(), "missing DR Gram", linalg::DEFAULT_COND_LIMIT)
        .map_err(|_| Error::SingularDesign {
            candidate: "missing-data".into(),
            detail: "design Gram X̃ᵀX̃ is singular".into(),
        })?;
    let (weighted_rss, masked_rss) = residual_sums(dataset, &beta, &e);
    Ok(EstimatorFit {
        kind: EstimatorKind::Dr,
        propensity_mode: propensity.mode,
        beta_hat: beta,
        weighted_rss,
        masked_rss,
    })
}

/// Which penalty the missing-data criterion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingRegime {
    Known,
    Estimated,
    Dr,
}

impl std::fmt::Display for MissingRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MissingRegime::Known => "known",
            MissingRegime::Estimated => "estimated",
            MissingRegime::Dr => "dr",
        })
    }
}

/// Plug-ins for the missing-data penalties.
#[derive(Debug, Clone)]
pub struct MissingPlugins {
    pub regime: MissingRegime,
    /// 2Ê[(1/e) εᵀXXᵀε] via t/e² weighting.
    pub term_inv_e: f64,
    /// Λ̂ = (1/N)Σ (t/e²) Xᵀε̂ (∂e/∂αᵀ).
    pub term_lambda: Array2<f64>,
    /// Ĵ = (1/N)Σ_i (1/e_i)(∂e_i/∂α)(∂e_i/∂αᵀ), all samples.
    pub term_j: Array2<f64>,
    /// Ê[(1 − 1/e) E[ε|z]ᵀXXᵀE[ε|z]] (non-positive since e ≤ 1).
    pub term_one_minus_inv_e: f64,
    pub j_truncated: bool,
}

/// Computes the plug-ins the requested regime needs.
pub fn missing_penalty_plugins(
    dataset: &MissingDataset,
    fit: &EstimatorFit,
    propensity: &PropensityFit,
    outcome: Option<&MissingOutcomeFit>,
    regime: MissingRegime,
) -> Result<MissingPlugins> {
    let e = observation_scores(dataset, propensity)?;
    let n = dataset.n_samples();
    let nf = n as f64;
    let p = dataset.n_params();
    let m = dataset.outcome_dim();
    let q = propensity.gradients.dim().2;
    if regime == MissingRegime::Dr && outcome.is_none() {
        return Err(Error::InvalidData(
            "DR missing-data penalty requires the outcome fit".into(),
        ));
    }
    let mut term_inv_e = 0.0;
    let mut lambda = Array2::<f64>::zeros((p, q));
    let mut j_hat = Array2::<f64>::zeros((q, q));
    for i in 0..n {
        // observed-arm (t = 1) gradient of e_i with respect to alpha
        for a in 0..q {
            for b in 0..q {
                j_hat[[a, b]] +=
                    propensity.gradients[[i, 1, a]] * propensity.gradients[[i, 1, b]] / e[i];
            }
        }
        if !dataset.observed(i) {
            continue;
        }
        let x = dataset.design(i);
        let mut u = Array1::<f64>::zeros(p);
        for r in 0..m {
            let resid = dataset.outcomes()[[i, r]] - x.row(r).dot(&fit.beta_hat);
            for a in 0..p {
                u[a] += x[[r, a]] * resid;
            }
        }
        let unorm2: f64 = u.iter().map(|v| v * v).sum();
        term_inv_e += unorm2 / (e[i] * e[i]);
        if regime == MissingRegime::Estimated {
            for a in 0..p {
                for b in 0..q {
                    lambda[[a, b]] += u[a] * propensity.gradients[[i, 1, b]] / (e[i] * e[i]);
                }
            }
        }
    }
    term_inv_e *= 2.0 / nf;
    lambda.mapv_inplace(|v| v / nf);
    j_hat.mapv_inplace(|v| v / nf);

    let mut term_one_minus_inv_e = 0.0;
    if regime == MissingRegime::Dr {
        let outcome = outcome.unwrap();
        for i in 0..n {
            let x = dataset.design(i);
            let mut v = Array1::<f64>::zeros(p);
            for r in 0..m {
                let rm = outcome.cond_means[[i, r]] - x.row(r).dot(&fit.beta_hat);
                for a in 0..p {
                    v[a] += x[[r, a]] * rm;
                }
            }
            let vnorm2: f64 = v.iter().map(|t| t * t).sum();
            term_one_minus_inv_e += (1.0 - 1.0 / e[i]) * vnorm2;
        }
        term_one_minus_inv_e /= nf;
    }

    Ok(MissingPlugins {
        regime,
        term_inv_e,
        term_lambda: lambda,
        term_j: j_hat,
        term_one_minus_inv_e,
        j_truncated: false,
    })
}

/// Weighted-risk criterion totals for the missing-data regimes.
pub fn wcp_missing(
    fit: &EstimatorFit,
    plugins: &MissingPlugins,
    regime: MissingRegime,
) -> Result<crate::criteria::CriterionReport> {
    if regime != plugins.regime {
        return Err(Error::RegimeMismatch {
            plugins: plugins.regime.to_string(),
            requested: regime.to_string(),
        });
    }
    let penalty = match regime {
        MissingRegime::Known => plugins.term_inv_e,
        MissingRegime::Estimated => {
            let (j_inv, _trunc) = linalg::pinv_spd(plugins.term_j.view(), linalg::DEFAULT_COND_LIMIT);
            let tmp = plugins.term_lambda.dot(&j_inv);
            let mut trace = 0.0;
            for a in 0..tmp.nrows() {
                for b in 0..tmp.ncols() {
                    trace += tmp[[a, b]] * plugins.term_lambda[[a, b]];
                }
            }
            plugins.term_inv_e - 2.0 * trace
        }
        MissingRegime::Dr => plugins.term_inv_e + 2.0 * plugins.term_one_minus_inv_e,
    };
    let mapped_regime = match regime {
        MissingRegime::Known => crate::criteria::Regime::IpwKnown,
        MissingRegime::Estimated => crate::criteria::Regime::IpwEstimated,
        MissingRegime::Dr => crate::criteria::Regime::DrEstimated,
    };
    Ok(crate::criteria::CriterionReport {
        candidate_id: "missing-data".into(),
        n_params: fit.beta_hat.len(),
        criterion: crate::criteria::Criterion::Wcp,
        regime: mapped_regime,
        gof: fit.weighted_rss,
        penalty,
        total: fit.weighted_rss + penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mar_dataset(n: usize, seed: u64) -> MissingDataset {
        // y = Xb + z + noise, logistic observation e(z) = 1/(1+exp(-z)),
        // X = (1, x) with x standard normal, standardized so E[XᵀX] = I
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outcomes = Array2::<f64>::zeros((n, 1));
        let mut t = vec![0u8; n];
        let mut z = Array2::<f64>::zeros((n, 1));
        let mut designs = Vec::with_capacity(n);
        for i in 0..n {
            let zi: f64 = rng.sample(StandardNormal);
            let xi: f64 = rng.sample(StandardNormal);
            let noise: f64 = rng.sample(StandardNormal);
            let e = 1.0 / (1.0 + (-zi).exp());
            t[i] = u8::from(rng.gen::<f64>() < e);
            z[[i, 0]] = zi;
            designs.push(array![[1.0, xi]]);
            outcomes[[i, 0]] = 2.0 - 1.5 * xi + zi + noise;
        }
        MissingDataset::new(outcomes, t, z, designs).unwrap()
    }

    fn known_binary_scores(e: &[f64]) -> PropensityFit {
        let n = e.len();
        let mut scores = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            scores[[i, 0]] = 1.0 - e[i];
            scores[[i, 1]] = e[i];
        }
        PropensityFit {
            alpha: Array1::zeros(1),
            scores,
            gradients: ndarray::Array3::zeros((n, 2, 1)),
            mode: ScoreMode::Known,
            loglik: None,
            clipped: false,
        }
    }

    #[test]
    fn intercept_only_fit_recovers_observed_fraction() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.7)).collect();
        let z = Array2::<f64>::zeros((n, 1));
        let fit = fit_missing_propensity(&t, z.view(), &[]).unwrap();
        let frac = t.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            assert_abs_diff_eq!(fit.scores[[i, 1]], frac, epsilon = 1e-8);
        }
    }

    #[test]
    fn logistic_slope_is_consistent() {
        let ds = mar_dataset(2000, 8);
        let fit = fit_missing_propensity(ds.missing_indicator(), ds.confounders().view(), &[0])
            .unwrap();
        // alpha = (intercept, slope); truth (0, 1). SE from observed info.
        let mut info = Array2::<f64>::zeros((2, 2));
        for i in 0..ds.n_samples() {
            let e = fit.scores[[i, 1]];
            let zi = ds.confounders()[[i, 0]];
            let f = [1.0, zi];
            for a in 0..2 {
                for b in 0..2 {
                    info[[a, b]] += e * (1.0 - e) * f[a] * f[b];
                }
            }
        }
        let (inv, _) = linalg::pinv_spd(info.view(), 1e12);
        assert!((fit.alpha[0] - 0.0).abs() <= 3.0 * inv[[0, 0]].sqrt());
        assert!((fit.alpha[1] - 1.0).abs() <= 3.0 * inv[[1, 1]].sqrt());
    }

    #[test]
    fn small_fit_matches_grid_oracle() {
        // N=40 intercept-only logistic against a 1e-4 grid maximizer
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.6)).collect();
        let z = Array2::<f64>::zeros((n, 1));
        let fit = fit_missing_propensity(&t, z.view(), &[]).unwrap();
        let k = t.iter().map(|&v| v as f64).sum::<f64>();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut a: f64 = -4.0;
        while a <= 4.0 {
            let e: f64 = 1.0 / (1.0 + (-a).exp());
            let ll = k * e.ln() + (n as f64 - k) * (1.0 - e).ln();
            if ll > best.0 {
                best = (ll, a);
            }
            a += 1e-4;
        }
        assert!((fit.alpha[0] - best.1).abs() <= 1e-4 + 1e-9);
    }

    #[test]
    fn fully_observed_reduces_to_ols() {
        let mut ds = mar_dataset(60, 21);
        ds.missing_indicator = vec![1; 60];
        let e = vec![1.0; 60];
        let pfit = known_binary_scores(&e);
        let ipw = ipw_missing(&ds, &pfit).unwrap();
        let ofit = fit_missing_outcome(&ds, &[]).unwrap();
        let dr = dr_missing(&ds, &pfit, &ofit).unwrap();
        // direct OLS
        let p = 2;
        let mut gram = Array2::<f64>::zeros((p, p));
        let mut rhs = Array1::<f64>::zeros(p);
        for i in 0..60 {
            let x = ds.design(i);
            for a in 0..p {
                rhs[a] += x[[0, a]] * ds.outcomes()[[i, 0]];
                for b in 0..p {
                    gram[[a, b]] += x[[0, a]] * x[[0, b]];
                }
            }
        }
        let ols = linalg::solve_spd(gram.view(), rhs.view(), "ols", 1e12).unwrap();
        for j in 0..p {
            assert_abs_diff_eq!(ipw.beta_hat[j], ols[j], epsilon = 1e-10);
            assert_abs_diff_eq!(dr.beta_hat[j], ols[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn three_sample_weighted_regression_oracle() {
        // observed samples 0 and 2 with scalar design, hand-computable
        let outcomes = array![[1.0], [0.0], [5.0]];
        let t = vec![1, 0, 1];
        let z = Array2::<f64>::zeros((3, 1));
        let designs = vec![array![[1.0]], array![[1.0]], array![[2.0]]];
        let ds = MissingDataset::new(outcomes, t, z, designs).unwrap();
        let e = vec![0.5, 0.5, 0.25];
        let pfit = known_binary_scores(&e);
        let fit = ipw_missing(&ds, &pfit).unwrap();
        // beta = (w0·1·1 + w2·2·5) / (w0·1 + w2·4), w0 = 2, w2 = 4
        let expect = (2.0 * 1.0 + 4.0 * 10.0) / (2.0 + 16.0);
        assert_abs_diff_eq!(fit.beta_hat[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn mar_consistency_of_ipw_and_dr() {
        // replication-averaged bias at N = 5000 stays below 0.05 per
        // coefficient for both estimators
        let reps = 40;
        let mut ipw_bias = [0.0f64; 2];
        let mut dr_bias = [0.0f64; 2];
        for rep in 0..reps {
            let ds = mar_dataset(5000, 7000 + rep);
            let pfit =
                fit_missing_propensity(ds.missing_indicator(), ds.confounders().view(), &[0])
                    .unwrap();
            let ipw = ipw_missing(&ds, &pfit).unwrap();
            let ofit = fit_missing_outcome(&ds, &[0]).unwrap();
            let dr = dr_missing(&ds, &pfit, &ofit).unwrap();
            for j in 0..2 {
                let truth = if j == 0 { 2.0 } else { -1.5 };
                ipw_bias[j] += ipw.beta_hat[j] - truth;
                dr_bias[j] += dr.beta_hat[j] - truth;
            }
        }
        for j in 0..2 {
            let ib = ipw_bias[j] / reps as f64;
            let db = dr_bias[j] / reps as f64;
            assert!(ib.abs() <= 0.05, "IPW bias[{j}] = {ib}");
            assert!(db.abs() <= 0.05, "DR bias[{j}] = {db}");
        }
    }

    #[test]
    fn dr_cond_mean_zero_specialization() {
        // zero cond-means: β̂ = (X̃ᵀX̃)⁻¹X̃ᵀWỹ on an N=3 toy
        let outcomes = array![[2.0], [0.0], [3.0]];
        let t = vec![1, 0, 1];
        let z = Array2::<f64>::zeros((3, 1));
        let designs = vec![array![[1.0]], array![[1.5]], array![[2.0]]];
        let ds = MissingDataset::new(outcomes, t, z, designs).unwrap();
        let e = vec![0.5, 0.5, 0.5];
        let pfit = known_binary_scores(&e);
        let zero = MissingOutcomeFit {
            gamma: Array1::zeros(1),
            cond_means: Array2::zeros((3, 1)),
            confounder_cols: vec![],
        };
        let fit = dr_missing(&ds, &pfit, &zero).unwrap();
        let gram: f64 = 1.0 + 2.25 + 4.0;
        let rhs: f64 = 2.0 * (1.0 * 2.0 + 2.0 * 3.0);
        assert_abs_diff_eq!(fit.beta_hat[0], rhs / gram, epsilon = 1e-12);
    }

    #[test]
    fn dr_penalty_term_collapses_when_fully_weighted() {
        // e ≡ 1 → the (1 − 1/e) term vanishes exactly
        let mut ds = mar_dataset(80, 55);
        ds.missing_indicator = vec![1; 80];
        let e = vec![1.0; 80];
        let pfit = known_binary_scores(&e);
        let ofit = fit_missing_outcome(&ds, &[0]).unwrap();
        let fit = dr_missing(&ds, &pfit, &ofit).unwrap();
        let plugins =
            missing_penalty_plugins(&ds, &fit, &pfit, Some(&ofit), MissingRegime::Dr).unwrap();
        assert_abs_diff_eq!(plugins.term_one_minus_inv_e, 0.0, epsilon = 1e-14);

        // and the DR penalty term is never positive in general
        let ds2 = mar_dataset(300, 56);
        let pfit2 =
            fit_missing_propensity(ds2.missing_indicator(), ds2.confounders().view(), &[0])
                .unwrap();
        let ofit2 = fit_missing_outcome(&ds2, &[0]).unwrap();
        let fit2 = dr_missing(&ds2, &pfit2, &ofit2).unwrap();
        let plugins2 =
            missing_penalty_plugins(&ds2, &fit2, &pfit2, Some(&ofit2), MissingRegime::Dr).unwrap();
        assert!(plugins2.term_one_minus_inv_e <= 0.0);
    }

    #[test]
    fn zero_residuals_zero_penalty() {
        // exact-fit data: wcp known-alpha penalty is 0
        let outcomes = array![[2.0], [4.0], [6.0]];
        let t = vec![1, 1, 1];
        let z = Array2::<f64>::zeros((3, 1));
        let designs = vec![array![[1.0]], array![[2.0]], array![[3.0]]];
        let ds = MissingDataset::new(outcomes, t, z, designs).unwrap();
        let e = vec![0.5, 0.5, 0.5];
        let pfit = known_binary_scores(&e);
        let fit = ipw_missing(&ds, &pfit).unwrap();
        let plugins =
            missing_penalty_plugins(&ds, &fit, &pfit, None, MissingRegime::Known).unwrap();
        let report = wcp_missing(&fit, &plugins, MissingRegime::Known).unwrap();
        assert_abs_diff_eq!(report.penalty, 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(report.gof, 0.0, epsilon = 1e-18);
    }

    #[test]
    fn indicator_validation() {
        let outcomes = array![[1.0], [2.0]];
        let designs = vec![array![[1.0]], array![[1.0]]];
        let bad = MissingDataset::new(
            outcomes,
            vec![2, 0],
            Array2::zeros((2, 1)),
            designs,
        );
        assert!(bad.is_err());
    }
}
