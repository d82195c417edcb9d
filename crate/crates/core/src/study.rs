//! Monte Carlo study harness: replicated data generation from the polynomial
//! treatment-response process, estimation and criterion evaluation over the
//! candidate orders, and aggregation into the penalty-evaluation and
//! selection tables.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    self, penalty_plugins, Criterion, CriterionReport, PluginOptions, Regime,
};
use crate::design::{
    build_orthonormal_design, map_coefficients, polynomial_raw_rows, Dataset, DesignSet,
    TrueParams,
};
use crate::error::{Error, Result};
use crate::estimators::{dr_fit, ipw_fit};
use crate::outcome::{fit_outcome, OutcomeFeatures, OutcomeFit};
use crate::propensity::{evaluate_scores, fit_mle, PredictorSpec, PropensityFit, PropensityModel};

/// The polynomial order of the data-generating structure (quadratic).
pub const TRUE_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MisspecToggles {
    /// Drop the confounder from the outcome regression (DR sensitivity).
    pub outcome_drop_z: bool,
    /// Estimate the propensity from arm intercepts only, omitting the
    /// confounder (sensitivity).
    pub propensity_wrong: bool,
}

/// Full study description; `sample_sizes` × `curvatures` defines the cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub n_treatments: usize,
    pub sample_sizes: Vec<usize>,
    pub curvatures: Vec<f64>,
    pub alpha_true: Vec<f64>,
    pub sigma2: f64,
    pub replications: usize,
    pub candidate_orders: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub criteria: Vec<Criterion>,
    pub misspec: MisspecToggles,
    pub master_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_treatments: 6,
            sample_sizes: vec![100, 200],
            curvatures: vec![0.5, 0.3, 0.1],
            alpha_true: vec![0.8, 1.0, 0.9, 0.7, 0.6],
            sigma2: 2.0,
            replications: 5000,
            candidate_orders: (0..=5).collect(),
            regimes: vec![
                Regime::IpwKnown,
                Regime::IpwEstimated,
                Regime::DrEstimated,
                Regime::DrKnown,
            ],
            criteria: vec![
                Criterion::Qicw,
                Criterion::Wcp,
                Criterion::Ucp,
                Criterion::WcpConditional,
            ],
            misspec: MisspecToggles::default(),
            master_seed: 20240501,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_treatments < 2 {
            return Err(Error::InvalidConfig("need at least two treatments".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("sample sizes must be positive".into()));
        }
        if self.curvatures.is_empty() {
            return Err(Error::InvalidConfig("at least one curvature b".into()));
        }
        if self.alpha_true.len() != self.n_treatments - 1 {
            return Err(Error::InvalidConfig(format!(
                "alpha_true length {} must be H − 1 = {}",
                self.alpha_true.len(),
                self.n_treatments - 1
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidConfig("sigma2 must be positive".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be positive".into()));
        }
        if self.candidate_orders.is_empty() {
            return Err(Error::InvalidConfig("no candidate orders".into()));
        }
        if let Some(&bad) = self
            .candidate_orders
            .iter()
            .find(|&&o| o + 1 > self.n_treatments)
        {
            return Err(Error::InvalidConfig(format!(
                "candidate order {bad} needs {} parameters but only {} treatment \
                 values are available",
                bad + 1,
                self.n_treatments
            )));
        }
        if self.regimes.is_empty() || self.criteria.is_empty() {
            return Err(Error::InvalidConfig("regimes and criteria must be nonempty".into()));
        }
        for &n in &self.sample_sizes {
            if n <= self.alpha_true.len() {
                return Err(Error::InvalidConfig(format!(
                    "sample size {n} is too small for {} propensity parameters",
                    self.alpha_true.len()
                )));
            }
        }
        Ok(())
    }

    fn treatment_values(&self) -> Vec<f64> {
        (1..=self.n_treatments).map(|h| h as f64).collect()
    }

    fn true_propensity_model(&self) -> PropensityModel {
        PropensityModel::arm_slopes(self.n_treatments)
    }

    fn estimated_propensity_model(&self) -> PropensityModel {
        if self.misspec.propensity_wrong {
            PropensityModel::new(
                self.n_treatments,
                0,
                PredictorSpec::ArmwiseLinear {
                    intercept: true,
                    confounder_cols: vec![],
                },
            )
        } else {
            self.true_propensity_model()
        }
    }

    fn outcome_features(&self) -> OutcomeFeatures {
        if self.misspec.outcome_drop_z {
            OutcomeFeatures::none()
        } else {
            OutcomeFeatures::cols(vec![0])
        }
    }
}

/// Penalty-evaluation entry for one (regime, cell): the Monte Carlo
/// evaluation of the exact risk cross-term and the replication-average
/// plug-in penalty, at the true-order candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Row {
    pub regime: Regime,
    pub b: f64,
    pub n: usize,
    pub criterion: Criterion,
    pub mce: f64,
    pub ae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub regime: Regime,
    pub b: f64,
    pub n: usize,
    pub criterion: Criterion,
    /// Percentage selecting each candidate order, in `candidate_orders` order.
    pub freq: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRow {
    pub regime: Regime,
    pub b: f64,
    pub n: usize,
    pub criterion: Criterion,
    pub avg_wse: f64,
    pub avg_use: f64,
    /// Monte Carlo standard errors of the averages.
    pub wse_se: f64,
    pub use_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyMeta {
    pub master_seed: u64,
    pub replications: usize,
    pub failed_replications: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyTables {
    pub table1: Vec<Table1Row>,
    pub selection: Vec<SelectionRow>,
    pub errors: Vec<ErrorRow>,
    pub metadata: StudyMeta,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based replication stream: the seed depends only on
/// (master_seed, rep_index), so parallel and serial execution agree.
fn replication_rng(master_seed: u64, rep_index: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ rep_index.wrapping_mul(0xA24BAED4963EE407);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

struct Replication {
    dataset: Dataset,
    truth: TrueParams,
    true_scores: Array2<f64>,
}

fn generate_internal(
    config: &StudyConfig,
    b: f64,
    n: usize,
    rep_index: u64,
) -> Result<Replication> {
    let h = config.n_treatments;
    let mut rng = replication_rng(config.master_seed, rep_index);
    // fixed draw order: all z, then all noise, then all assignment uniforms
    let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * SQRT3 - SQRT3).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();

    let confounders = Array2::from_shape_fn((n, 1), |(i, _)| z[i]);
    let model = config.true_propensity_model();
    let alpha = Array1::from_vec(config.alpha_true.clone());
    let scores = evaluate_scores(&model, alpha.view(), confounders.view())?.scores;

    let mut treatments = Array2::<u8>::zeros((n, h));
    let mut outcomes = Array2::<f64>::zeros((n, 1));
    let mut true_means = Array3::<f64>::zeros((n, h, 1));
    let values = config.treatment_values();
    for i in 0..n {
        let mut arm = h - 1;
        let mut cum = 0.0;
        for a in 0..h {
            cum += scores[[i, a]];
            if u[i] < cum {
                arm = a;
                break;
            }
        }
        treatments[[i, arm]] = 1;
        let x = values[arm];
        outcomes[[i, 0]] = 1.0 + x + b * x * x + z[i] + noise[i];
        for a in 0..h {
            let xa = values[a];
            true_means[[i, a, 0]] = 1.0 + xa + b * xa * xa;
        }
    }
    let dataset = Dataset::new(treatments, confounders, outcomes, Some(true_means))?;

    let true_design = build_orthonormal_design(
        format!("p{TRUE_ORDER}"),
        &polynomial_raw_rows(&values, TRUE_ORDER),
    )?;
    let b_coeffs = Array1::from_vec(vec![1.0, 1.0, b]);
    let beta = map_coefficients(b_coeffs.view(), true_design.transform())?;
    let truth = TrueParams::new(beta, config.sigma2, alpha, b_coeffs)?;
    Ok(Replication {
        dataset,
        truth,
        true_scores: scores,
    })
}

/// One replication's data and true parameters; deterministic in
/// (master_seed, rep_index).
pub fn generate_replication(
    config: &StudyConfig,
    b: f64,
    n: usize,
    rep_index: u64,
) -> Result<(Dataset, TrueParams)> {
    let rep = generate_internal(config, b, n, rep_index)?;
    Ok((rep.dataset, rep.truth))
}

/// Per-replication weighted squared error of the fitted means against the
/// true means, weighted by t/e at the TRUE scores.
pub fn oracle_wse(
    beta: ArrayView1<f64>,
    design: &DesignSet,
    dataset: &Dataset,
    true_scores: &Array2<f64>,
) -> Result<f64> {
    let truth = dataset.true_means().ok_or(Error::MissingTruth)?;
    let p = design.n_params();
    let mut total = 0.0;
    for i in 0..dataset.n_samples() {
        let arm = dataset.observed_arm()[i];
        let x = design.design(i, arm);
        let mut ss = 0.0;
        for r in 0..dataset.outcome_dim() {
            let mut fitted = 0.0;
            for a in 0..p {
                fitted += x[[r, a]] * beta[a];
            }
            let d = fitted - truth[[i, arm, r]];
            ss += d * d;
        }
        total += ss / true_scores[[i, arm]];
    }
    Ok(total)
}

/// Unweighted analogue of [`oracle_wse`] (T-weighting).
pub fn oracle_use(beta: ArrayView1<f64>, design: &DesignSet, dataset: &Dataset) -> Result<f64> {
    let truth = dataset.true_means().ok_or(Error::MissingTruth)?;
    let p = design.n_params();
    let mut total = 0.0;
    for i in 0..dataset.n_samples() {
        let arm = dataset.observed_arm()[i];
        let x = design.design(i, arm);
        for r in 0..dataset.outcome_dim() {
            let mut fitted = 0.0;
            for a in 0..p {
                fitted += x[[r, a]] * beta[a];
            }
            let d = fitted - truth[[i, arm, r]];
            total += d * d;
        }
    }
    Ok(total)
}

/// Weighting of the risk cross-term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MceWeighting {
    Weighted,
    Unweighted,
}

/// The exact risk cross-term 2Σ_h (ỹ − μ̃^(h))ᵀ(W or T)^(h) X̃^(h)(β̂ − β)
/// for one replication; averaging over replications gives the Monte Carlo
/// penalty evaluation. W uses the TRUE scores.
pub fn mce_penalty(
    beta_hat: ArrayView1<f64>,
    beta_true: ArrayView1<f64>,
    design: &DesignSet,
    dataset: &Dataset,
    true_scores: &Array2<f64>,
    weighting: MceWeighting,
) -> Result<f64> {
    let truth = dataset.true_means().ok_or(Error::MissingTruth)?;
    let p = design.n_params();
    let delta: Vec<f64> = beta_hat
        .iter()
        .zip(beta_true.iter())
        .map(|(a, b)| a - b)
        .collect();
    let mut total = 0.0;
    for i in 0..dataset.n_samples() {
        let arm = dataset.observed_arm()[i];
        let x = design.design(i, arm);
        let mut dot = 0.0;
        for r in 0..dataset.outcome_dim() {
            let mut shift = 0.0;
            for a in 0..p {
                shift += x[[r, a]] * delta[a];
            }
            let eps = dataset.outcomes()[[i, r]] - truth[[i, arm, r]];
            dot += eps * shift;
        }
        total += match weighting {
            MceWeighting::Weighted => dot / true_scores[[i, arm]],
            MceWeighting::Unweighted => dot,
        };
    }
    Ok(2.0 * total)
}

/// (selected order index, wse, use) per (regime index, criterion index).
struct RepOutcome {
    selections: Vec<Vec<Option<(usize, f64, f64)>>>,
    /// per regime: [mce_w, mce_u, ae_w, ae_u] at the true-order candidate
    table1: Vec<Option<[f64; 4]>>,
}

fn criterion_applies(criterion: Criterion, regime: Regime) -> bool {
    criterion != Criterion::WcpConditional || regime == Regime::IpwEstimated
}

struct CandidateEval {
    fit: crate::estimators::EstimatorFit,
    wcp_penalty: f64,
    ucp_penalty: f64,
    /// Reports in config-criteria order, skipping inapplicable criteria.
    reports: Vec<(usize, CriterionReport)>,
}

struct RepEval {
    rep: Replication,
    /// per regime, per candidate.
    evals: Vec<Vec<CandidateEval>>,
}

fn evaluate_rep(
    config: &StudyConfig,
    b: f64,
    n: usize,
    rep_index: u64,
    designs: &[DesignSet],
) -> Result<RepEval> {
    let rep = generate_internal(config, b, n, rep_index)?;
    let dataset = &rep.dataset;
    let needs_estimated = config
        .regimes
        .iter()
        .any(|r| matches!(r, Regime::IpwEstimated | Regime::DrEstimated));
    let needs_dr = config.regimes.iter().any(|r| r.is_dr());

    let known_fit = evaluate_scores(
        &config.true_propensity_model(),
        Array1::from_vec(config.alpha_true.clone()).view(),
        dataset.confounders().view(),
    )?;
    let estimated_fit: Option<PropensityFit> = if needs_estimated {
        Some(fit_mle(
            &config.estimated_propensity_model(),
            dataset.treatments().view(),
            dataset.confounders().view(),
            None,
        )?)
    } else {
        None
    };
    let outcome_fits: Vec<Option<OutcomeFit>> = if needs_dr {
        let features = config.outcome_features();
        designs
            .iter()
            .map(|d| fit_outcome(dataset, d, &features).map(Some))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; designs.len()]
    };

    let mut evals = Vec::with_capacity(config.regimes.len());
    for &regime in &config.regimes {
        let pfit = match regime {
            Regime::IpwKnown | Regime::DrKnown => &known_fit,
            Regime::IpwEstimated | Regime::DrEstimated => estimated_fit.as_ref().unwrap(),
        };
        let mut candidates = Vec::with_capacity(designs.len());
        for (ci, design) in designs.iter().enumerate() {
            let outcome = outcome_fits[ci].as_ref();
            let fit = if regime.is_dr() {
                dr_fit(dataset, design, pfit, outcome.unwrap())?
            } else {
                ipw_fit(dataset, design, pfit)?
            };
            let plugins = penalty_plugins(
                dataset,
                design,
                &fit,
                pfit,
                if regime.is_dr() { outcome } else { None },
                PluginOptions::default(),
            )?;
            let wcp_penalty = criteria::wcp(&fit, &plugins)?.penalty;
            let ucp_penalty = criteria::ucp(&fit, &plugins, config.sigma2)?.penalty;
            let mut reports = Vec::with_capacity(config.criteria.len());
            for (ki, &criterion) in config.criteria.iter().enumerate() {
                if !criterion_applies(criterion, regime) {
                    continue;
                }
                let report = match criterion {
                    Criterion::Qicw => {
                        criteria::qicw(design.candidate_id(), &fit, config.sigma2, design.n_params())
                    }
                    Criterion::Wcp => criteria::wcp(&fit, &plugins)?,
                    Criterion::Ucp => criteria::ucp(&fit, &plugins, config.sigma2)?,
                    Criterion::WcpConditional => criteria::wcp_conditional(&fit, &plugins)?,
                };
                reports.push((ki, report));
            }
            candidates.push(CandidateEval {
                fit,
                wcp_penalty,
                ucp_penalty,
                reports,
            });
        }
        evals.push(candidates);
    }
    Ok(RepEval { rep, evals })
}

/// Criterion reports for one replication, every (regime, candidate,
/// criterion) combination, produced through exactly the code path the study
/// aggregation uses.
pub fn evaluate_replication(
    config: &StudyConfig,
    b: f64,
    n: usize,
    rep_index: u64,
) -> Result<Vec<CriterionReport>> {
    config.validate()?;
    let values = config.treatment_values();
    let designs: Vec<DesignSet> = config
        .candidate_orders
        .iter()
        .map(|&o| build_orthonormal_design(format!("p{o}"), &polynomial_raw_rows(&values, o)))
        .collect::<Result<Vec<_>>>()?;
    let eval = evaluate_rep(config, b, n, rep_index, &designs)?;
    let mut out = Vec::new();
    for candidates in eval.evals {
        for cand in candidates {
            for (_, report) in cand.reports {
                out.push(report);
            }
        }
    }
    Ok(out)
}

fn run_one_rep(
    config: &StudyConfig,
    b: f64,
    n: usize,
    rep_index: u64,
    designs: &[DesignSet],
) -> Result<RepOutcome> {
    let eval = evaluate_rep(config, b, n, rep_index, designs)?;
    let dataset = &eval.rep.dataset;
    let true_order_idx = config
        .candidate_orders
        .iter()
        .position(|&o| o == TRUE_ORDER);

    let mut selections = Vec::with_capacity(config.regimes.len());
    let mut table1 = Vec::with_capacity(config.regimes.len());
    for candidates in &eval.evals {
        let risks: Vec<(f64, f64)> = candidates
            .iter()
            .zip(designs)
            .map(|(cand, design)| {
                Ok((
                    oracle_wse(cand.fit.beta_hat.view(), design, dataset, &eval.rep.true_scores)?,
                    oracle_use(cand.fit.beta_hat.view(), design, dataset)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut regime_selections = vec![None; config.criteria.len()];
        for ki in 0..config.criteria.len() {
            let reports: Vec<CriterionReport> = candidates
                .iter()
                .flat_map(|c| {
                    c.reports
                        .iter()
                        .filter(|(k, _)| *k == ki)
                        .map(|(_, r)| r.clone())
                })
                .collect();
            if reports.is_empty() {
                continue;
            }
            let chosen = criteria::select(&reports)?;
            let idx = reports
                .iter()
                .position(|r| r.candidate_id == chosen.candidate_id)
                .expect("selected report exists");
            regime_selections[ki] = Some((idx, risks[idx].0, risks[idx].1));
        }
        selections.push(regime_selections);

        table1.push(match true_order_idx {
            Some(ti) => {
                let cand = &candidates[ti];
                let design = &designs[ti];
                let mce_w = mce_penalty(
                    cand.fit.beta_hat.view(),
                    eval.rep.truth.beta.view(),
                    design,
                    dataset,
                    &eval.rep.true_scores,
                    MceWeighting::Weighted,
                )?;
                let mce_u = mce_penalty(
                    cand.fit.beta_hat.view(),
                    eval.rep.truth.beta.view(),
                    design,
                    dataset,
                    &eval.rep.true_scores,
                    MceWeighting::Unweighted,
                )?;
                Some([mce_w, mce_u, cand.wcp_penalty, cand.ucp_penalty])
            }
            None => None,
        });
    }
    Ok(RepOutcome {
        selections,
        table1,
    })
}

/// Runs the full study: every (b, N) cell, every regime and criterion,
/// `replications` Monte Carlo replications each, in parallel. Aggregation is
/// performed in replication order, so results are bit-identical for a given
/// configuration regardless of thread count.
pub fn run_study(config: &StudyConfig) -> Result<StudyTables> {
    config.validate()?;
    let start = std::time::Instant::now();
    let values = config.treatment_values();
    let designs: Vec<DesignSet> = config
        .candidate_orders
        .iter()
        .map(|&o| build_orthonormal_design(format!("p{o}"), &polynomial_raw_rows(&values, o)))
        .collect::<Result<Vec<_>>>()?;

    let n_regimes = config.regimes.len();
    let n_criteria = config.criteria.len();
    let n_orders = designs.len();

    let mut table1 = Vec::new();
    let mut selection = Vec::new();
    let mut errors = Vec::new();
    let mut failed_total = 0usize;

    for &b in &config.curvatures {
        for &n in &config.sample_sizes {
            let outcomes: Vec<Result<RepOutcome>> = (0..config.replications as u64)
                .into_par_iter()
                .map(|rep| run_one_rep(config, b, n, rep, &designs))
                .collect();

            let mut failures = Vec::new();
            let mut sel_counts = vec![vec![vec![0usize; n_orders]; n_criteria]; n_regimes];
            let mut wse_sum = vec![vec![0.0f64; n_criteria]; n_regimes];
            let mut wse_sumsq = vec![vec![0.0f64; n_criteria]; n_regimes];
            let mut use_sum = vec![vec![0.0f64; n_criteria]; n_regimes];
            let mut use_sumsq = vec![vec![0.0f64; n_criteria]; n_regimes];
            let mut crit_reps = vec![vec![0usize; n_criteria]; n_regimes];
            let mut t1_sum = vec![[0.0f64; 4]; n_regimes];
            let mut t1_reps = vec![0usize; n_regimes];

            for (rep, out) in outcomes.into_iter().enumerate() {
                match out {
                    Err(e) => failures.push(format!("replication {rep}: {e}")),
                    Ok(out) => {
                        for ri in 0..n_regimes {
                            for ki in 0..n_criteria {
                                if let Some((idx, wse, usev)) = out.selections[ri][ki] {
                                    sel_counts[ri][ki][idx] += 1;
                                    wse_sum[ri][ki] += wse;
                                    wse_sumsq[ri][ki] += wse * wse;
                                    use_sum[ri][ki] += usev;
                                    use_sumsq[ri][ki] += usev * usev;
                                    crit_reps[ri][ki] += 1;
                                }
                            }
                            if let Some(vals) = out.table1[ri] {
                                for (acc, v) in t1_sum[ri].iter_mut().zip(vals) {
                                    *acc += v;
                                }
                                t1_reps[ri] += 1;
                            }
                        }
                    }
                }
            }

            let limit = 0.01;
            if failures.len() as f64 > limit * config.replications as f64 {
                return Err(Error::StudyAborted {
                    failures: failures.len(),
                    total: config.replications,
                    limit: limit * 100.0,
                    first: failures.first().cloned().unwrap_or_default(),
                });
            }
            failed_total += failures.len();

            for (ri, &regime) in config.regimes.iter().enumerate() {
                if t1_reps[ri] > 0 {
                    let r = t1_reps[ri] as f64;
                    table1.push(Table1Row {
                        regime,
                        b,
                        n,
                        criterion: Criterion::Wcp,
                        mce: t1_sum[ri][0] / r,
                        ae: t1_sum[ri][2] / r,
                    });
                    table1.push(Table1Row {
                        regime,
                        b,
                        n,
                        criterion: Criterion::Ucp,
                        mce: t1_sum[ri][1] / r,
                        ae: t1_sum[ri][3] / r,
                    });
                }
                for (ki, &criterion) in config.criteria.iter().enumerate() {
                    let reps = crit_reps[ri][ki];
                    if reps == 0 {
                        continue;
                    }
                    let rf = reps as f64;
                    let freq: Vec<f64> = sel_counts[ri][ki]
                        .iter()
                        .map(|&c| 100.0 * c as f64 / rf)
                        .collect();
                    selection.push(SelectionRow {
                        regime,
                        b,
                        n,
                        criterion,
                        freq,
                    });
                    let wse_mean = wse_sum[ri][ki] / rf;
                    let use_mean = use_sum[ri][ki] / rf;
                    let wse_var = (wse_sumsq[ri][ki] / rf - wse_mean * wse_mean).max(0.0);
                    let use_var = (use_sumsq[ri][ki] / rf - use_mean * use_mean).max(0.0);
                    errors.push(ErrorRow {
                        regime,
                        b,
                        n,
                        criterion,
                        avg_wse: wse_mean,
                        avg_use: use_mean,
                        wse_se: (wse_var / rf).sqrt(),
                        use_se: (use_var / rf).sqrt(),
                    });
                }
            }
        }
    }

    Ok(StudyTables {
        table1,
        selection,
        errors,
        metadata: StudyMeta {
            master_seed: config.master_seed,
            replications: config.replications,
            failed_replications: failed_total,
            wall_ms: start.elapsed().as_millis(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> StudyConfig {
        StudyConfig {
            sample_sizes: vec![100],
            curvatures: vec![0.5],
            replications: 40,
            master_seed: 99,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn replications_are_deterministic() {
        let config = tiny_config();
        let (d1, t1) = generate_replication(&config, 0.5, 100, 7).unwrap();
        let (d2, t2) = generate_replication(&config, 0.5, 100, 7).unwrap();
        assert_eq!(d1.outcomes(), d2.outcomes());
        assert_eq!(d1.treatments(), d2.treatments());
        assert_eq!(d1.confounders(), d2.confounders());
        assert_eq!(t1.beta, t2.beta);

        let (d3, _) = generate_replication(&config, 0.5, 100, 8).unwrap();
        assert_ne!(d1.outcomes(), d3.outcomes());
    }

    #[test]
    fn generated_moments_match_the_process() {
        // Var(z) ≈ 1, Var(noise) ≈ 1, Var(z + noise) ≈ 2, each within 1%
        let config = StudyConfig {
            replications: 1,
            ..StudyConfig::default()
        };
        let n = 1_000_000;
        let (ds, _) = generate_replication(&config, 0.5, n, 0).unwrap();
        let truth = ds.true_means().unwrap();
        let mut sz = 0.0;
        let mut szz = 0.0;
        let mut se = 0.0;
        let mut see = 0.0;
        let mut sn = 0.0;
        let mut snn = 0.0;
        for i in 0..n {
            let z = ds.confounders()[[i, 0]];
            let arm = ds.observed_arm()[i];
            let eps = ds.outcomes()[[i, 0]] - truth[[i, arm, 0]];
            let noise = eps - z;
            sz += z;
            szz += z * z;
            se += eps;
            see += eps * eps;
            sn += noise;
            snn += noise * noise;
        }
        let nf = n as f64;
        let var_z = szz / nf - (sz / nf).powi(2);
        let var_eps = see / nf - (se / nf).powi(2);
        let var_noise = snn / nf - (sn / nf).powi(2);
        assert!((var_z - 1.0).abs() < 0.01, "var z {var_z}");
        assert!((var_noise - 1.0).abs() < 0.01, "var noise {var_noise}");
        assert!((var_eps - 2.0).abs() < 0.02, "var eps {var_eps}");
    }

    #[test]
    fn symmetric_assignment_at_zero_exponent() {
        // alpha ≡ 0 collapses the assignment to uniform arm frequencies
        let config = StudyConfig {
            alpha_true: vec![0.0; 5],
            ..StudyConfig::default()
        };
        let n = 60_000;
        let (ds, _) = generate_replication(&config, 0.5, n, 3).unwrap();
        let mut counts = [0usize; 6];
        for &arm in ds.observed_arm() {
            counts[arm] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "arm frequency {f}");
        }
    }

    #[test]
    fn single_replication_tables_echo_that_replication() {
        let config = StudyConfig {
            replications: 1,
            sample_sizes: vec![100],
            curvatures: vec![0.5],
            regimes: vec![Regime::IpwKnown],
            criteria: vec![Criterion::Wcp],
            master_seed: 5,
            ..StudyConfig::default()
        };
        let tables = run_study(&config).unwrap();
        assert_eq!(tables.selection.len(), 1);
        let freq_sum: f64 = tables.selection[0].freq.iter().sum();
        assert_abs_diff_eq!(freq_sum, 100.0, epsilon = 1e-9);
        // exactly one order has 100%
        assert_eq!(
            tables.selection[0].freq.iter().filter(|&&f| f == 100.0).count(),
            1
        );
        assert_eq!(tables.errors.len(), 1);
        assert!(tables.errors[0].avg_wse.is_finite());
    }

    #[test]
    fn study_is_bit_identical_across_runs_and_thread_counts() {
        let config = tiny_config();
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.selection).unwrap(),
            serde_json::to_string(&b.selection).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.errors).unwrap(),
            serde_json::to_string(&b.errors).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.table1).unwrap(),
            serde_json::to_string(&b.table1).unwrap()
        );

        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| run_study(&config)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.errors).unwrap(),
            serde_json::to_string(&c.errors).unwrap()
        );
    }

    #[test]
    fn selection_frequencies_sum_to_hundred() {
        let config = StudyConfig {
            replications: 60,
            sample_sizes: vec![100],
            curvatures: vec![0.5],
            master_seed: 11,
            ..StudyConfig::default()
        };
        let tables = run_study(&config).unwrap();
        for row in &tables.selection {
            let sum: f64 = row.freq.iter().sum();
            assert!((sum - 100.0).abs() < 0.01, "{row:?}");
        }
        // one row per applicable (regime, criterion)
        let expected_rows = 4 * 3 + 1; // four regimes × three criteria + conditional in ipw_estimated
        assert_eq!(tables.selection.len(), expected_rows);
    }

    #[test]
    fn halving_replications_moves_averages_within_noise() {
        let full = StudyConfig {
            replications: 400,
            sample_sizes: vec![100],
            curvatures: vec![0.5],
            regimes: vec![Regime::IpwKnown],
            criteria: vec![Criterion::Wcp],
            master_seed: 21,
            ..StudyConfig::default()
        };
        let half = StudyConfig {
            replications: 200,
            ..full.clone()
        };
        let tf = run_study(&full).unwrap();
        let th = run_study(&half).unwrap();
        let diff = (tf.errors[0].avg_wse - th.errors[0].avg_wse).abs();
        assert!(
            diff <= 2.0 * th.errors[0].wse_se,
            "diff {diff} vs se {}",
            th.errors[0].wse_se
        );
    }

    #[test]
    fn oracles_vanish_at_the_truth_and_use_never_exceeds_wse() {
        let config = tiny_config();
        let (ds, truth) = generate_replication(&config, 0.5, 120, 2).unwrap();
        let values: Vec<f64> = (1..=6).map(|h| h as f64).collect();
        let design = crate::design::build_orthonormal_design(
            "p2",
            &crate::design::polynomial_raw_rows(&values, TRUE_ORDER),
        )
        .unwrap();
        let model = config.true_propensity_model();
        let scores = crate::propensity::evaluate_scores(
            &model,
            truth.alpha.view(),
            ds.confounders().view(),
        )
        .unwrap()
        .scores;
        let wse = oracle_wse(truth.beta.view(), &design, &ds, &scores).unwrap();
        let usev = oracle_use(truth.beta.view(), &design, &ds).unwrap();
        assert!(wse.abs() < 1e-18 && usev.abs() < 1e-18);
        let mce = mce_penalty(
            truth.beta.view(),
            truth.beta.view(),
            &design,
            &ds,
            &scores,
            MceWeighting::Weighted,
        )
        .unwrap();
        assert_eq!(mce, 0.0);

        // and at any other coefficient the weighted risk dominates
        let mut beta = truth.beta.clone();
        beta[1] += 0.3;
        let wse = oracle_wse(beta.view(), &design, &ds, &scores).unwrap();
        let usev = oracle_use(beta.view(), &design, &ds).unwrap();
        assert!(usev <= wse);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = tiny_config();
        config.replications = 0;
        assert!(config.validate().is_err());

        let mut config = tiny_config();
        config.candidate_orders = vec![6];
        assert!(config.validate().is_err());

        let mut config = tiny_config();
        config.alpha_true = vec![0.1; 3];
        assert!(config.validate().is_err());
    }
}
