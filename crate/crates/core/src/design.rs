//! Data objects of the marginal structural model and construction of
//! orthonormalized candidate designs.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;

/// Observed data for one study: treatment indicators, confounders and the
/// observed outcome per sample, plus (simulation only) the true
/// potential-outcome means.
#[derive(Debug, Clone)]
pub struct Dataset {
    n_samples: usize,
    n_treatments: usize,
    outcome_dim: usize,
    treatments: Array2<u8>,
    observed_arm: Vec<usize>,
    confounders: Array2<f64>,
    outcomes: Array2<f64>,
    true_means: Option<Array3<f64>>,
}

impl Dataset {
    /// Validates dimensions, the {0,1} coding and the one-treatment-per-row
    /// condition.
    pub fn new(
        treatments: Array2<u8>,
        confounders: Array2<f64>,
        outcomes: Array2<f64>,
        true_means: Option<Array3<f64>>,
    ) -> Result<Self> {
        let (n, h) = treatments.dim();
        if n == 0 || h == 0 {
            return Err(Error::InvalidData("empty treatment matrix".into()));
        }
        if confounders.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "confounder rows",
                expected: n,
                actual: confounders.nrows(),
            });
        }
        if outcomes.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "outcome rows",
                expected: n,
                actual: outcomes.nrows(),
            });
        }
        let m = outcomes.ncols();
        if m == 0 {
            return Err(Error::InvalidData("outcome dimension is zero".into()));
        }
        if let Some(tm) = &true_means {
            if tm.dim() != (n, h, m) {
                return Err(Error::InvalidData(format!(
                    "true_means shape {:?} does not match (N, H, m) = ({n}, {h}, {m})",
                    tm.dim()
                )));
            }
        }
        let mut observed_arm = Vec::with_capacity(n);
        for i in 0..n {
            let mut sum = 0usize;
            let mut arm = 0usize;
            for k in 0..h {
                match treatments[[i, k]] {
                    0 => {}
                    1 => {
                        sum += 1;
                        arm = k;
                    }
                    other => {
                        return Err(Error::InvalidData(format!(
                            "treatment entry ({i}, {k}) is {other}, expected 0 or 1"
                        )))
                    }
                }
            }
            if sum != 1 {
                return Err(Error::InvalidData(format!(
                    "treatment row {i} sums to {sum}, expected exactly 1"
                )));
            }
            observed_arm.push(arm);
        }
        Ok(Self {
            n_samples: n,
            n_treatments: h,
            outcome_dim: m,
            treatments,
            observed_arm,
            confounders,
            outcomes,
            true_means,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    pub fn outcome_dim(&self) -> usize {
        self.outcome_dim
    }

    pub fn treatments(&self) -> &Array2<u8> {
        &self.treatments
    }

    /// The single arm with t = 1 for each sample.
    pub fn observed_arm(&self) -> &[usize] {
        &self.observed_arm
    }

    pub fn confounders(&self) -> &Array2<f64> {
        &self.confounders
    }

    pub fn outcomes(&self) -> &Array2<f64> {
        &self.outcomes
    }

    pub fn outcome_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.outcomes.row(i)
    }

    pub fn true_means(&self) -> Option<&Array3<f64>> {
        self.true_means.as_ref()
    }
}

#[derive(Debug)]
enum DesignStore {
    /// One m×p matrix per arm, shared by all samples (the polynomial study).
    Shared(Vec<Array2<f64>>),
    /// Arm-major per-sample matrices, `mats[arm][sample]` of shape m×p.
    PerSample(Vec<Vec<Array2<f64>>>),
}

/// A candidate design: per-sample, per-arm independent-variable matrices
/// X_i^(h) together with the basis transform that standardized them.
#[derive(Debug)]
pub struct DesignSet {
    candidate_id: String,
    n_params: usize,
    n_arms: usize,
    outcome_dim: usize,
    transform: Array2<f64>,
    store: DesignStore,
}

impl DesignSet {
    /// Wraps user-supplied per-sample designs, assumed already standardized;
    /// the transform is the identity.
    pub fn from_per_sample(
        candidate_id: impl Into<String>,
        mats: Vec<Vec<Array2<f64>>>,
    ) -> Result<Self> {
        let candidate_id = candidate_id.into();
        let n_arms = mats.len();
        if n_arms == 0 || mats[0].is_empty() {
            return Err(Error::InvalidData("empty design set".into()));
        }
        let (m, p) = mats[0][0].dim();
        for arm in &mats {
            if arm.len() != mats[0].len() {
                return Err(Error::InvalidData(
                    "per-arm design lists differ in sample count".into(),
                ));
            }
            for x in arm {
                if x.dim() != (m, p) {
                    return Err(Error::InvalidData(
                        "design matrices differ in shape".into(),
                    ));
                }
            }
        }
        Ok(Self {
            candidate_id,
            n_params: p,
            n_arms,
            outcome_dim: m,
            transform: Array2::eye(p),
            store: DesignStore::PerSample(mats),
        })
    }

    pub fn candidate_id(&self) -> &str {
        &self.candidate_id
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn outcome_dim(&self) -> usize {
        self.outcome_dim
    }

    /// The standardizing transform A (identity for pre-standardized designs).
    pub fn transform(&self) -> &Array2<f64> {
        &self.transform
    }

    /// X_i^(h) for sample `i`, arm `arm`.
    pub fn design(&self, i: usize, arm: usize) -> ArrayView2<'_, f64> {
        match &self.store {
            DesignStore::Shared(mats) => mats[arm].view(),
            DesignStore::PerSample(mats) => mats[arm][i].view(),
        }
    }

    /// Whether all samples share one design per arm.
    pub fn is_shared(&self) -> bool {
        matches!(self.store, DesignStore::Shared(_))
    }
}

/// True data-generating parameters of a simulated study, in the standardized
/// basis.
#[derive(Debug, Clone)]
pub struct TrueParams {
    pub beta: Array1<f64>,
    pub sigma2: f64,
    pub alpha: Array1<f64>,
    pub b_coeffs: Array1<f64>,
}

impl TrueParams {
    pub fn new(beta: Array1<f64>, sigma2: f64, alpha: Array1<f64>, b_coeffs: Array1<f64>) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidData(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self {
            beta,
            sigma2,
            alpha,
            b_coeffs,
        })
    }
}

/// Builds an orthonormalized shared design from per-arm raw row matrices:
/// finds the upper-triangular A with AᵀA = Σ_h v^(h)ᵀv^(h) and returns
/// X^(h) = v^(h) A⁻¹, so that Σ_h X^(h)ᵀX^(h) = I exactly.
pub fn build_orthonormal_design(
    candidate_id: impl Into<String>,
    raw_rows: &[Array2<f64>],
) -> Result<DesignSet> {
    let candidate_id = candidate_id.into();
    let n_arms = raw_rows.len();
    if n_arms == 0 {
        return Err(Error::InvalidData("no treatment arms".into()));
    }
    let (m, p) = raw_rows[0].dim();
    let mut gram = Array2::<f64>::zeros((p, p));
    for v in raw_rows {
        if v.dim() != (m, p) {
            return Err(Error::InvalidData(
                "raw design rows differ in shape across arms".into(),
            ));
        }
        gram = gram + v.t().dot(v);
    }
    let l = linalg::cholesky(gram.view()).ok_or_else(|| Error::SingularDesign {
        candidate: candidate_id.clone(),
        detail: "Gram matrix Σ_h v^(h)ᵀv^(h) is not positive definite".into(),
    })?;
    let cond = linalg::chol_cond_estimate(&l);
    if cond > linalg::DEFAULT_COND_LIMIT {
        return Err(Error::SingularDesign {
            candidate: candidate_id,
            detail: format!("Gram matrix is numerically singular (condition estimate {cond:.3e})"),
        });
    }
    // A = Lᵀ is upper triangular with AᵀA = Gram; X^(h) solves X A = v^(h).
    let mut mats = Vec::with_capacity(n_arms);
    for v in raw_rows {
        let mut x = Array2::<f64>::zeros((m, p));
        for r in 0..m {
            // forward substitution on Aᵀ xᵀ = vᵀ, Aᵀ = L
            let mut row = Array1::<f64>::zeros(p);
            for j in 0..p {
                let mut s = v[[r, j]];
                for k in 0..j {
                    s -= l[[j, k]] * row[k];
                }
                row[j] = s / l[[j, j]];
            }
            x.row_mut(r).assign(&row);
        }
        mats.push(x);
    }
    let transform = l.t().to_owned();
    Ok(DesignSet {
        candidate_id,
        n_params: p,
        n_arms,
        outcome_dim: m,
        transform,
        store: DesignStore::Shared(mats),
    })
}

/// Polynomial raw rows (1, x, …, x^order) for the given per-arm treatment
/// values; the usual candidate family for ordered treatments.
pub fn polynomial_raw_rows(treatment_values: &[f64], order: usize) -> Vec<Array2<f64>> {
    treatment_values
        .iter()
        .map(|&x| {
            let mut row = Array2::<f64>::zeros((1, order + 1));
            let mut pow = 1.0;
            for j in 0..=order {
                row[[0, j]] = pow;
                pow *= x;
            }
            row
        })
        .collect()
}

/// Maps raw-basis coefficients b into the standardized basis: β = A·b.
pub fn map_coefficients(raw_coeffs: ArrayView1<f64>, transform: &Array2<f64>) -> Result<Array1<f64>> {
    if raw_coeffs.len() != transform.ncols() {
        return Err(Error::DimensionMismatch {
            context: "map_coefficients",
            expected: transform.ncols(),
            actual: raw_coeffs.len(),
        });
    }
    Ok(transform.dot(&raw_coeffs))
}

/// Inverse coefficient map: b = A⁻¹·β (A upper triangular from
/// `build_orthonormal_design`; general invertible transforms go through a
/// dense solve).
pub fn unmap_coefficients(beta: ArrayView1<f64>, transform: &Array2<f64>) -> Result<Array1<f64>> {
    let p = transform.ncols();
    if beta.len() != p {
        return Err(Error::DimensionMismatch {
            context: "unmap_coefficients",
            expected: p,
            actual: beta.len(),
        });
    }
    // A is upper triangular in this crate; back substitution suffices.
    let mut b = beta.to_owned();
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in (i + 1)..p {
            s -= transform[[i, k]] * b[k];
        }
        if transform[[i, i]] == 0.0 {
            return Err(Error::SingularMatrix {
                context: "unmap_coefficients",
                cond: f64::INFINITY,
            });
        }
        b[i] = s / transform[[i, i]];
    }
    Ok(b)
}
