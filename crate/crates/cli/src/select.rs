//! Real-data selection mode: ingest a per-(sample, arm) delimited file plus
//! a candidate/model spec, evaluate every criterion for every candidate and
//! regime, and report the selections.

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

use mscp_core::criteria::{self, Criterion, CriterionReport, PluginOptions, Regime};
use mscp_core::design::{build_orthonormal_design, polynomial_raw_rows, Dataset, DesignSet};
use mscp_core::estimators::{dr_fit, ipw_fit};
use mscp_core::outcome::{fit_outcome, OutcomeFeatures};
use mscp_core::propensity::{
    evaluate_scores, fit_mle, PredictorSpec, PropensityFit, PropensityModel,
};

use crate::config::{parse_criterion, parse_regime};
use crate::tables::CriteriaRow;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSpec {
    pub candidates: CandidateSpec,
    pub propensity: PropensitySpec,
    #[serde(default)]
    pub outcome: Option<OutcomeSpec>,
    pub regimes: Vec<String>,
    pub criteria: Vec<String>,
    /// Error variance for the 2σ²p penalties; defaults to the weighted
    /// residual mean square of the largest candidate.
    pub sigma2: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode")]
pub enum CandidateSpec {
    /// Polynomial bases in the arm values, orthonormalized here.
    #[serde(rename = "orders")]
    Orders {
        orders: Vec<usize>,
        treatment_values: Option<Vec<f64>>,
    },
    /// Column subsets of the x_* columns, used as given (pre-standardized).
    #[serde(rename = "inline")]
    Inline { sets: Vec<InlineCandidate> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCandidate {
    pub id: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensitySpec {
    /// "known" (requires alpha) or "estimate".
    pub mode: String,
    /// "arm_slopes" or "armwise_linear".
    #[serde(default = "default_family")]
    pub family: String,
    /// 1-based z columns entering the linear predictors.
    #[serde(default)]
    pub confounder_cols: Vec<usize>,
    #[serde(default)]
    pub intercept: bool,
    pub alpha: Option<Vec<f64>>,
}

fn default_family() -> String {
    "arm_slopes".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    /// 1-based z columns entering the outcome regression.
    #[serde(default)]
    pub confounder_cols: Vec<usize>,
}

/// Parsed per-(sample, arm) data file.
pub struct SelectData {
    pub dataset: Dataset,
    pub n_arms: usize,
    /// x_* columns per (sample, arm): `x[arm][sample]` is a 1×p-style row.
    pub x_rows: Vec<Vec<Vec<f64>>>,
    pub x_names: Vec<String>,
}

pub(crate) fn numbered(headers: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (idx, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            let k: usize = rest
                .parse()
                .with_context(|| format!("column `{h}` is not {prefix}<index>"))?;
            found.push((k, idx));
        }
    }
    found.sort();
    for (want, (got, _)) in found.iter().enumerate() {
        if *got != want + 1 {
            bail!("{prefix}* columns must be numbered consecutively from {prefix}1");
        }
    }
    Ok(found.into_iter().map(|(_, idx)| idx).collect())
}

pub fn read_select_data(path: &Path) -> Result<SelectData> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot open data file {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("data file has no header")?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("data file is missing required column `{name}`"))
    };
    let c_sample = col("sample_id")?;
    let c_arm = col("arm")?;
    let c_t = col("t")?;
    let y_cols = numbered(&headers, "y_")?;
    let z_cols = numbered(&headers, "z_")?;
    let x_cols = numbered(&headers, "x_")?;
    if y_cols.is_empty() {
        bail!("data file needs at least one y_* column");
    }

    struct Row {
        arm: usize,
        t: u8,
        y: Vec<Option<f64>>,
        z: Vec<f64>,
        x: Vec<f64>,
    }
    let mut by_sample: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut max_arm = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("bad record on data line {}", line + 2))?;
        let get = |idx: usize| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| anyhow!("short record on data line {}", line + 2))
        };
        let arm: usize = get(c_arm)?
            .trim()
            .parse()
            .with_context(|| format!("bad arm on data line {}", line + 2))?;
        if arm == 0 {
            bail!("arms are numbered from 1 (data line {})", line + 2);
        }
        let t: u8 = get(c_t)?
            .trim()
            .parse()
            .with_context(|| format!("bad t on data line {}", line + 2))?;
        if t > 1 {
            bail!("t must be 0 or 1 (data line {})", line + 2);
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number `{s}` on data line {}", line + 2))
        };
        let mut y = Vec::with_capacity(y_cols.len());
        for &c in &y_cols {
            let raw = get(c)?.trim();
            y.push(if raw.is_empty() { None } else { Some(parse_f(raw)?) });
        }
        let z = z_cols.iter().map(|&c| parse_f(get(c)?)).collect::<Result<Vec<_>>>()?;
        let x = x_cols.iter().map(|&c| parse_f(get(c)?)).collect::<Result<Vec<_>>>()?;
        max_arm = max_arm.max(arm);
        by_sample
            .entry(get(c_sample)?.trim().to_string())
            .or_default()
            .push(Row { arm: arm - 1, t, y, z, x });
    }
    if by_sample.is_empty() {
        bail!("data file contains no rows");
    }
    let h = max_arm;
    let n = by_sample.len();
    let m = y_cols.len();
    let s = z_cols.len();
    let mut treatments = Array2::<u8>::zeros((n, h));
    let mut confounders = Array2::<f64>::zeros((n, s));
    let mut outcomes = Array2::<f64>::zeros((n, m));
    let mut x_rows = vec![vec![vec![0.0; x_cols.len()]; n]; h];
    for (i, (sample_id, mut rows)) in by_sample.into_iter().enumerate() {
        rows.sort_by_key(|r| r.arm);
        if rows.len() != h || rows.iter().enumerate().any(|(k, r)| r.arm != k) {
            bail!("sample `{sample_id}` must have exactly one row per arm 1..{h}");
        }
        let mut observed = None;
        for row in &rows {
            if row.t == 1 {
                if observed.is_some() {
                    bail!("sample `{sample_id}` has more than one observed arm");
                }
                observed = Some(row.arm);
            }
        }
        let observed =
            observed.ok_or_else(|| anyhow!("sample `{sample_id}` has no observed arm"))?;
        for row in &rows {
            treatments[[i, row.arm]] = row.t;
            for (k, v) in row.x.iter().enumerate() {
                x_rows[row.arm][i][k] = *v;
            }
            if row.arm == observed {
                for (r, v) in row.y.iter().enumerate() {
                    outcomes[[i, r]] = v.ok_or_else(|| {
                        anyhow!("sample `{sample_id}` is missing y_{} on its observed arm", r + 1)
                    })?;
                }
                for (k, v) in row.z.iter().enumerate() {
                    confounders[[i, k]] = *v;
                }
            }
        }
        for row in &rows {
            for (k, v) in row.z.iter().enumerate() {
                if (confounders[[i, k]] - v).abs() > 1e-12 {
                    bail!("sample `{sample_id}` has inconsistent z_{} across arms", k + 1);
                }
            }
        }
    }
    let dataset = Dataset::new(treatments, confounders, outcomes, None)
        .map_err(|e| anyhow!("invalid dataset: {e}"))?;
    Ok(SelectData {
        dataset,
        n_arms: h,
        x_rows,
        x_names: x_cols.iter().map(|&c| headers[c].clone()).collect(),
    })
}

fn build_candidates(spec: &CandidateSpec, data: &SelectData) -> Result<Vec<DesignSet>> {
    match spec {
        CandidateSpec::Orders {
            orders,
            treatment_values,
        } => {
            let values: Vec<f64> = match treatment_values {
                Some(v) => v.clone(),
                None => (1..=data.n_arms).map(|h| h as f64).collect(),
            };
            if values.len() != data.n_arms {
                bail!(
                    "treatment_values has {} entries but the data has {} arms",
                    values.len(),
                    data.n_arms
                );
            }
            orders
                .iter()
                .map(|&o| {
                    build_orthonormal_design(format!("p{o}"), &polynomial_raw_rows(&values, o))
                        .map_err(|e| anyhow!("{e}"))
                })
                .collect()
        }
        CandidateSpec::Inline { sets } => {
            let m = data.dataset.outcome_dim();
            sets.iter()
                .map(|cand| {
                    let col_idx: Vec<usize> = cand
                        .columns
                        .iter()
                        .map(|name| {
                            data.x_names
                                .iter()
                                .position(|x| x == name)
                                .ok_or_else(|| anyhow!("unknown design column `{name}`"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let p = col_idx.len();
                    let mats: Vec<Vec<Array2<f64>>> = (0..data.n_arms)
                        .map(|arm| {
                            (0..data.dataset.n_samples())
                                .map(|i| {
                                    Array2::from_shape_fn((m, p), |(_, j)| {
                                        data.x_rows[arm][i][col_idx[j]]
                                    })
                                })
                                .collect()
                        })
                        .collect();
                    DesignSet::from_per_sample(cand.id.clone(), mats).map_err(|e| anyhow!("{e}"))
                })
                .collect()
        }
    }
}

fn propensity_model(spec: &PropensitySpec, h: usize) -> Result<PropensityModel> {
    let cols: Vec<usize> = spec
        .confounder_cols
        .iter()
        .map(|&c| {
            if c == 0 {
                bail!("confounder_cols are 1-based");
            } else {
                Ok(c - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    match spec.family.as_str() {
        "arm_slopes" => {
            let col = cols.first().copied().unwrap_or(0);
            Ok(PropensityModel::new(h, 0, PredictorSpec::ArmSlopes { confounder_col: col }))
        }
        "armwise_linear" => Ok(PropensityModel::new(
            h,
            0,
            PredictorSpec::ArmwiseLinear {
                intercept: spec.intercept,
                confounder_cols: cols,
            },
        )),
        other => bail!("unknown propensity family `{other}`"),
    }
}

fn propensity_for(
    spec: &PropensitySpec,
    regime: Regime,
    data: &SelectData,
) -> Result<PropensityFit> {
    let model = propensity_model(spec, data.n_arms)?;
    match regime {
        Regime::IpwKnown | Regime::DrKnown => {
            let alpha = spec
                .alpha
                .as_ref()
                .ok_or_else(|| anyhow!("regime {regime} needs [propensity].alpha"))?;
            evaluate_scores(
                &model,
                Array1::from_vec(alpha.clone()).view(),
                data.dataset.confounders().view(),
            )
            .map_err(|e| anyhow!("{e}"))
        }
        Regime::IpwEstimated | Regime::DrEstimated => fit_mle(
            &model,
            data.dataset.treatments().view(),
            data.dataset.confounders().view(),
            None,
        )
        .map_err(|e| anyhow!("{e}")),
    }
}

/// Evaluates every (candidate, regime, criterion) and flags the selection
/// per (regime, criterion) group. Singular candidates become failed rows.
pub fn evaluate(spec: &SelectSpec, data: &SelectData) -> Result<Vec<CriteriaRow>> {
    let regimes: Vec<Regime> = spec
        .regimes
        .iter()
        .map(|s| parse_regime(s))
        .collect::<Result<Vec<_>>>()?;
    let criteria: Vec<Criterion> = spec
        .criteria
        .iter()
        .map(|s| parse_criterion(s))
        .collect::<Result<Vec<_>>>()?;
    match spec.propensity.mode.as_str() {
        "known" | "estimate" => {}
        other => bail!("unknown propensity mode `{other}` (expected known or estimate)"),
    }
    if spec.propensity.mode == "known"
        && regimes
            .iter()
            .any(|r| matches!(r, Regime::IpwEstimated | Regime::DrEstimated))
    {
        bail!("estimated regimes need [propensity].mode = \"estimate\"");
    }
    let outcome_cols: Option<Vec<usize>> = match &spec.outcome {
        Some(o) => Some(
            o.confounder_cols
                .iter()
                .map(|&c| {
                    if c == 0 {
                        bail!("outcome confounder_cols are 1-based")
                    } else {
                        Ok(c - 1)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let candidates = build_candidates(&spec.candidates, data)?;
    if candidates.is_empty() {
        bail!("no candidates configured");
    }

    let mut rows = Vec::new();
    for &regime in &regimes {
        if regime.is_dr() && outcome_cols.is_none() {
            bail!("regime {regime} needs an [outcome] section");
        }
        let pfit = propensity_for(&spec.propensity, regime, data)?;

        // per-candidate fits; singular candidates are recorded, not fatal
        let mut fits = Vec::new();
        for design in &candidates {
            let result = (|| -> mscp_core::Result<_> {
                let outcome = match (&outcome_cols, regime.is_dr()) {
                    (Some(cols), true) => Some(fit_outcome(
                        &data.dataset,
                        design,
                        &OutcomeFeatures::cols(cols.clone()),
                    )?),
                    _ => None,
                };
                let fit = if regime.is_dr() {
                    dr_fit(&data.dataset, design, &pfit, outcome.as_ref().unwrap())?
                } else {
                    ipw_fit(&data.dataset, design, &pfit)?
                };
                let plugins = criteria::penalty_plugins(
                    &data.dataset,
                    design,
                    &fit,
                    &pfit,
                    outcome.as_ref(),
                    PluginOptions::default(),
                )?;
                Ok((fit, plugins))
            })();
            fits.push(result);
        }

        // sigma2 default: weighted residual mean square of the largest candidate
        let sigma2 = match spec.sigma2 {
            Some(v) => v,
            None => {
                let largest = candidates
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, d)| d.n_params())
                    .map(|(i, _)| i)
                    .unwrap();
                match &fits[largest] {
                    Ok((fit, _)) => {
                        fit.weighted_rss
                            / (data.dataset.n_samples() * data.dataset.outcome_dim()) as f64
                    }
                    Err(_) => bail!(
                        "cannot estimate sigma2: the largest candidate failed to fit; \
                         set `sigma2` in the spec file"
                    ),
                }
            }
        };

        for &criterion in &criteria {
            if criterion == Criterion::WcpConditional && regime != Regime::IpwEstimated {
                continue;
            }
            let mut reports: Vec<Option<CriterionReport>> = Vec::new();
            for (design, fit_result) in candidates.iter().zip(&fits) {
                match fit_result {
                    Err(_) => reports.push(None),
                    Ok((fit, plugins)) => {
                        let report = match criterion {
                            Criterion::Qicw => {
                                criteria::qicw(design.candidate_id(), fit, sigma2, design.n_params())
                            }
                            Criterion::Wcp => criteria::wcp(fit, plugins)
                                .map_err(|e| anyhow!("{e}"))?,
                            Criterion::Ucp => criteria::ucp(fit, plugins, sigma2)
                                .map_err(|e| anyhow!("{e}"))?,
                            Criterion::WcpConditional => criteria::wcp_conditional(fit, plugins)
                                .map_err(|e| anyhow!("{e}"))?,
                        };
                        reports.push(Some(report));
                    }
                }
            }
            let ok_reports: Vec<CriterionReport> =
                reports.iter().flatten().cloned().collect();
            let selected_id = if ok_reports.is_empty() {
                None
            } else {
                Some(criteria::select(&ok_reports).map_err(|e| anyhow!("{e}"))?.candidate_id.clone())
            };
            for (design, report) in candidates.iter().zip(&reports) {
                match report {
                    Some(r) => rows.push(CriteriaRow {
                        candidate: design.candidate_id().to_string(),
                        regime: regime.to_string(),
                        criterion: criterion.to_string(),
                        gof: Some(r.gof),
                        penalty: Some(r.penalty),
                        total: Some(r.total),
                        selected: selected_id.as_deref() == Some(design.candidate_id()),
                        failed: false,
                    }),
                    None => rows.push(CriteriaRow {
                        candidate: design.candidate_id().to_string(),
                        regime: regime.to_string(),
                        criterion: criterion.to_string(),
                        gof: None,
                        penalty: None,
                        total: None,
                        selected: false,
                        failed: true,
                    }),
                }
            }
        }
    }
    Ok(rows)
}

pub fn load_spec(path: &Path) -> Result<SelectSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read spec file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid spec file {}", path.display()))
}
