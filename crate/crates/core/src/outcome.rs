//! Conditional outcome model for doubly robust estimation: a Gaussian linear
//! model in the candidate design columns plus selected confounder features,
//! fit by pooled least squares over the observed arms.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::design::{Dataset, DesignSet};
use crate::error::{Error, Result};
use crate::linalg;

/// Confounder columns entering the outcome regression. An empty list is the
/// deliberately misspecified no-confounder model.
#[derive(Debug, Clone, Default)]
pub struct OutcomeFeatures {
    pub confounder_cols: Vec<usize>,
}

impl OutcomeFeatures {
    pub fn cols(cols: Vec<usize>) -> Self {
        Self {
            confounder_cols: cols,
        }
    }

    pub fn none() -> Self {
        Self {
            confounder_cols: vec![],
        }
    }
}

/// Fitted conditional-mean model: γ̂ over (design columns, confounder
/// features) and the implied Ê[y_i^(h)|z_i] for every sample and arm.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub gamma: Array1<f64>,
    /// N×H×m conditional means, filled for unobserved arms too.
    pub cond_means: Array3<f64>,
    pub n_design_cols: usize,
    pub features: OutcomeFeatures,
}

impl OutcomeFit {
    /// Whether the regression omitted every confounder feature.
    pub fn omits_all_confounders(&self) -> bool {
        self.features.confounder_cols.is_empty()
    }
}

/// Pooled least-squares fit of the observed outcomes on
/// [X_i^(h_i) columns, confounder features].
pub fn fit_outcome(
    dataset: &Dataset,
    design: &DesignSet,
    features: &OutcomeFeatures,
) -> Result<OutcomeFit> {
    let n = dataset.n_samples();
    let h = dataset.n_treatments();
    let m = dataset.outcome_dim();
    let p = design.n_params();
    let c = features.confounder_cols.len();
    let dim = p + c;
    if design.n_arms() != h {
        return Err(Error::DimensionMismatch {
            context: "outcome design arms",
            expected: h,
            actual: design.n_arms(),
        });
    }
    for &col in &features.confounder_cols {
        if col >= dataset.confounders().ncols() {
            return Err(Error::InvalidData(format!(
                "outcome feature column {col} out of range (s = {})",
                dataset.confounders().ncols()
            )));
        }
    }
    if n * m <= dim {
        return Err(Error::InvalidData(format!(
            "outcome regression needs more observations than parameters \
             (rows = {}, dim = {dim})",
            n * m
        )));
    }

    // normal equations over the m rows each observed (i, h_i) pair contributes
    let mut gram = Array2::<f64>::zeros((dim, dim));
    let mut rhs = Array1::<f64>::zeros(dim);
    let mut row = Array1::<f64>::zeros(dim);
    for i in 0..n {
        let arm = dataset.observed_arm()[i];
        let x = design.design(i, arm);
        let z = dataset.confounders().row(i);
        for r in 0..m {
            for j in 0..p {
                row[j] = x[[r, j]];
            }
            for (k, &col) in features.confounder_cols.iter().enumerate() {
                row[p + k] = z[col];
            }
            let y = dataset.outcomes()[[i, r]];
            for a in 0..dim {
                rhs[a] += row[a] * y;
                for bcol in 0..dim {
                    gram[[a, bcol]] += row[a] * row[bcol];
                }
            }
        }
    }
    let gamma = match linalg::cholesky(gram.view()) {
        Some(l) => linalg::cholesky_solve(&l, rhs.view()),
        None => {
            let (vals, _) = linalg::sym_eigen(gram.view());
            let bad = vals.iter().position(|v| *v <= 0.0).unwrap_or(dim - 1);
            return Err(Error::SingularDesign {
                candidate: design.candidate_id().to_string(),
                detail: format!(
                    "outcome regression is rank deficient near column {bad} \
                     (design columns 0..{p}, confounder features {:?})",
                    features.confounder_cols
                ),
            });
        }
    };

    let mut cond_means = Array3::<f64>::zeros((n, h, m));
    for i in 0..n {
        let z = dataset.confounders().row(i);
        let mut shift = 0.0;
        for (k, &col) in features.confounder_cols.iter().enumerate() {
            shift += gamma[p + k] * z[col];
        }
        for arm in 0..h {
            let x = design.design(i, arm);
            for r in 0..m {
                let mut v = shift;
                for j in 0..p {
                    v += x[[r, j]] * gamma[j];
                }
                cond_means[[i, arm, r]] = v;
            }
        }
    }
    Ok(OutcomeFit {
        gamma,
        cond_means,
        n_design_cols: p,
        features: features.clone(),
    })
}

/// Ê[ε_i|z_i] = mean over arms of Ê[y_i^(h)|z_i] − X_i^(h)β; exactly
/// arm-independent when the outcome model contains the candidate design
/// columns, so the 1/H average is a no-op there.
pub fn conditional_residual_means(
    fit: &OutcomeFit,
    design: &DesignSet,
    beta: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let (n, h, m) = fit.cond_means.dim();
    if beta.len() != design.n_params() {
        return Err(Error::DimensionMismatch {
            context: "conditional_residual_means beta",
            expected: design.n_params(),
            actual: beta.len(),
        });
    }
    if design.n_arms() != h {
        return Err(Error::DimensionMismatch {
            context: "conditional_residual_means arms",
            expected: h,
            actual: design.n_arms(),
        });
    }
    let p = design.n_params();
    let mut out = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for arm in 0..h {
            let x = design.design(i, arm);
            for r in 0..m {
                let mut fitted = 0.0;
                for a in 0..p {
                    fitted += x[[r, a]] * beta[a];
                }
                out[[i, r]] += (fit.cond_means[[i, arm, r]] - fitted) / h as f64;
            }
        }
    }
    Ok(out)
}
