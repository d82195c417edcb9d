//! Missing-data selection mode: binary indicator schema, one row per sample.

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use serde::Deserialize;
use std::path::Path;

use mscp_core::missing_data::{
    dr_missing, fit_missing_outcome, fit_missing_propensity, ipw_missing,
    missing_penalty_plugins, wcp_missing, MissingDataset, MissingRegime,
};
use mscp_core::propensity::{evaluate_scores, PropensityFit, PropensityModel};

use crate::tables::CriteriaRow;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingSpec {
    pub candidates: Vec<MissingCandidate>,
    pub propensity: MissingPropensitySpec,
    #[serde(default)]
    pub outcome: Option<MissingOutcomeSpec>,
    /// Subset of "known", "estimated", "dr".
    pub regimes: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingCandidate {
    pub id: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingPropensitySpec {
    /// 1-based z columns (an intercept is always included).
    #[serde(default)]
    pub confounder_cols: Vec<usize>,
    /// Coefficients (intercept first) for the known-score regime.
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingOutcomeSpec {
    #[serde(default)]
    pub confounder_cols: Vec<usize>,
}

pub struct MissingData {
    pub outcomes: Array2<f64>,
    pub indicator: Vec<u8>,
    pub confounders: Array2<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
}

pub fn read_missing_data(path: &Path) -> Result<MissingData> {
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
    let c_t = headers
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| anyhow!("data file is missing required column `t`"))?;
    let y_cols = crate::select::numbered(&headers, "y_")?;
    let z_cols = crate::select::numbered(&headers, "z_")?;
    let x_cols = crate::select::numbered(&headers, "x_")?;
    if y_cols.is_empty() || x_cols.is_empty() {
        bail!("data file needs y_* and x_* columns");
    }

    let mut indicator = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut zs: Vec<Vec<f64>> = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("bad record on data line {}", line + 2))?;
        let get = |idx: usize| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| anyhow!("short record on data line {}", line + 2))
        };
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
            if raw.is_empty() {
                if t == 1 {
                    bail!("observed sample on data line {} has empty outcome", line + 2);
                }
                y.push(0.0);
            } else {
                y.push(parse_f(raw)?);
            }
        }
        indicator.push(t);
        ys.push(y);
        zs.push(z_cols.iter().map(|&c| parse_f(get(c)?)).collect::<Result<Vec<_>>>()?);
        xs.push(x_cols.iter().map(|&c| parse_f(get(c)?)).collect::<Result<Vec<_>>>()?);
    }
    if indicator.is_empty() {
        bail!("data file contains no rows");
    }
    let n = indicator.len();
    let outcomes = Array2::from_shape_fn((n, y_cols.len()), |(i, j)| ys[i][j]);
    let confounders = Array2::from_shape_fn((n, z_cols.len()), |(i, j)| zs[i][j]);
    Ok(MissingData {
        outcomes,
        indicator,
        confounders,
        x: xs,
        x_names: x_cols.iter().map(|&c| headers[c].clone()).collect(),
    })
}

fn dataset_for(data: &MissingData, columns: &[usize]) -> Result<MissingDataset> {
    let m = data.outcomes.ncols();
    let designs = data
        .x
        .iter()
        .map(|row| Array2::from_shape_fn((m, columns.len()), |(_, j)| row[columns[j]]))
        .collect();
    MissingDataset::new(
        data.outcomes.clone(),
        data.indicator.clone(),
        data.confounders.clone(),
        designs,
    )
    .map_err(|e| anyhow!("{e}"))
}

fn known_propensity(
    spec: &MissingPropensitySpec,
    data: &MissingData,
    cols: &[usize],
) -> Result<PropensityFit> {
    let alpha = spec
        .alpha
        .as_ref()
        .ok_or_else(|| anyhow!("the `known` regime needs [propensity].alpha"))?;
    let model = PropensityModel::binary_logistic(cols.to_vec());
    evaluate_scores(
        &model,
        ndarray::Array1::from_vec(alpha.clone()).view(),
        data.confounders.view(),
    )
    .map_err(|e| anyhow!("{e}"))
}

pub fn evaluate(spec: &MissingSpec, data: &MissingData) -> Result<Vec<CriteriaRow>> {
    if spec.candidates.is_empty() {
        bail!("no candidates configured");
    }
    let pcols: Vec<usize> = spec
        .propensity
        .confounder_cols
        .iter()
        .map(|&c| {
            if c == 0 {
                bail!("confounder_cols are 1-based")
            } else {
                Ok(c - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ocols: Option<Vec<usize>> = match &spec.outcome {
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

    let regimes: Vec<MissingRegime> = spec
        .regimes
        .iter()
        .map(|s| match s.as_str() {
            "known" => Ok(MissingRegime::Known),
            "estimated" => Ok(MissingRegime::Estimated),
            "dr" => Ok(MissingRegime::Dr),
            other => bail!("unknown missing-data regime `{other}`"),
        })
        .collect::<Result<Vec<_>>>()?;

    let col_indices: Vec<Vec<usize>> = spec
        .candidates
        .iter()
        .map(|cand| {
            cand.columns
                .iter()
                .map(|name| {
                    data.x_names
                        .iter()
                        .position(|x| x == name)
                        .ok_or_else(|| anyhow!("unknown design column `{name}`"))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let estimated: Option<PropensityFit> = if regimes
        .iter()
        .any(|r| matches!(r, MissingRegime::Estimated | MissingRegime::Dr))
    {
        Some(
            fit_missing_propensity(&data.indicator, data.confounders.view(), &pcols)
                .map_err(|e| anyhow!("{e}"))?,
        )
    } else {
        None
    };

    let mut rows = Vec::new();
    for &regime in &regimes {
        if regime == MissingRegime::Dr && ocols.is_none() {
            bail!("the dr regime needs an [outcome] section");
        }
        let pfit = match regime {
            MissingRegime::Known => known_propensity(&spec.propensity, data, &pcols)?,
            _ => estimated.clone().unwrap(),
        };
        let mut reports = Vec::new();
        for (cand, cols) in spec.candidates.iter().zip(&col_indices) {
            let result = (|| -> Result<_> {
                let ds = dataset_for(data, cols)?;
                let (fit, outcome) = match regime {
                    MissingRegime::Dr => {
                        let ofit = fit_missing_outcome(&ds, ocols.as_ref().unwrap())
                            .map_err(|e| anyhow!("{e}"))?;
                        let fit = dr_missing(&ds, &pfit, &ofit).map_err(|e| anyhow!("{e}"))?;
                        (fit, Some(ofit))
                    }
                    _ => (ipw_missing(&ds, &pfit).map_err(|e| anyhow!("{e}"))?, None),
                };
                let plugins =
                    missing_penalty_plugins(&ds, &fit, &pfit, outcome.as_ref(), regime)
                        .map_err(|e| anyhow!("{e}"))?;
                let report = wcp_missing(&fit, &plugins, regime).map_err(|e| anyhow!("{e}"))?;
                Ok((cand.id.clone(), cols.len(), report))
            })();
            reports.push(result);
        }
        let best = reports
            .iter()
            .flatten()
            .min_by(|(ai, ap, a), (bi, bp, b)| {
                a.total
                    .partial_cmp(&b.total)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(ap.cmp(bp))
                    .then(ai.cmp(bi))
            })
            .map(|(id, _, _)| id.clone());
        for (cand, result) in spec.candidates.iter().zip(reports) {
            match result {
                Ok((id, _, report)) => rows.push(CriteriaRow {
                    candidate: id.clone(),
                    regime: regime.to_string(),
                    criterion: "wcp".into(),
                    gof: Some(report.gof),
                    penalty: Some(report.penalty),
                    total: Some(report.total),
                    selected: best.as_deref() == Some(id.as_str()),
                    failed: false,
                }),
                Err(_) => rows.push(CriteriaRow {
                    candidate: cand.id.clone(),
                    regime: regime.to_string(),
                    criterion: "wcp".into(),
                    gof: None,
                    penalty: None,
                    total: None,
                    selected: false,
                    failed: true,
                }),
            }
        }
    }
    Ok(rows)
}

pub fn load_spec(path: &Path) -> Result<MissingSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read spec file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid spec file {}", path.display()))
}
