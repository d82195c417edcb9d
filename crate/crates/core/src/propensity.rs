//! Propensity-score models: softmax evaluation with known parameters,
//! multinomial-logit maximum likelihood, and the analytic score gradients
//! ∂e^(h)/∂α consumed by the estimated-propensity penalty corrections.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_SCORE_CLIP: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 100;

/// Linear-predictor family for the treatment-assignment model. The baseline
/// arm's predictor is fixed at zero.
#[derive(Debug, Clone)]
pub enum PredictorSpec {
    /// η^(h) = α_{idx(h)} · z[col]: one slope per non-baseline arm on a
    /// single shared confounder, no intercepts.
    ArmSlopes { confounder_col: usize },
    /// η^(h) = α-block(h) · (1?, z[cols]…): an arm-specific linear predictor
    /// on a shared feature list.
    ArmwiseLinear {
        intercept: bool,
        confounder_cols: Vec<usize>,
    },
}

/// A multinomial propensity model over `n_arms` treatments.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    n_arms: usize,
    baseline_arm: usize,
    spec: PredictorSpec,
    clip: f64,
}

/// How the propensity parameters were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Known,
    Estimated,
}

/// Scores e_i^(h), their gradients ∂e_i^(h)/∂α and the parameter vector that
/// produced them.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub alpha: Array1<f64>,
    /// N×H, rows sum to one.
    pub scores: Array2<f64>,
    /// N×H×q.
    pub gradients: Array3<f64>,
    pub mode: ScoreMode,
    pub loglik: Option<f64>,
    /// Set when any score hit the clipping bound (possible separation).
    pub clipped: bool,
}

impl PropensityModel {
    pub fn new(n_arms: usize, baseline_arm: usize, spec: PredictorSpec) -> Self {
        assert!(baseline_arm < n_arms, "baseline arm out of range");
        Self {
            n_arms,
            baseline_arm,
            spec,
            clip: DEFAULT_SCORE_CLIP,
        }
    }

    /// The no-intercept, shared-confounder, arm-specific-slope family with
    /// arm 0 as baseline.
    pub fn arm_slopes(n_arms: usize) -> Self {
        Self::new(n_arms, 0, PredictorSpec::ArmSlopes { confounder_col: 0 })
    }

    /// Binary logistic model on an intercept plus the given confounder
    /// columns; arm 0 encodes t = 0, arm 1 encodes t = 1.
    pub fn binary_logistic(confounder_cols: Vec<usize>) -> Self {
        Self::new(
            2,
            0,
            PredictorSpec::ArmwiseLinear {
                intercept: true,
                confounder_cols,
            },
        )
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        assert!(clip > 0.0 && clip < 0.5);
        self.clip = clip;
        self
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn baseline_arm(&self) -> usize {
        self.baseline_arm
    }

    pub fn n_params(&self) -> usize {
        match &self.spec {
            PredictorSpec::ArmSlopes { .. } => self.n_arms - 1,
            PredictorSpec::ArmwiseLinear {
                intercept,
                confounder_cols,
            } => (self.n_arms - 1) * (usize::from(*intercept) + confounder_cols.len()),
        }
    }

    fn fill_features(&self, arm: usize, z: ArrayView1<f64>, out: &mut [f64]) {
        out.fill(0.0);
        if arm == self.baseline_arm {
            return;
        }
        let slot = if arm < self.baseline_arm { arm } else { arm - 1 };
        match &self.spec {
            PredictorSpec::ArmSlopes { confounder_col } => {
                out[slot] = z[*confounder_col];
            }
            PredictorSpec::ArmwiseLinear {
                intercept,
                confounder_cols,
            } => {
                let d = usize::from(*intercept) + confounder_cols.len();
                let mut k = slot * d;
                if *intercept {
                    out[k] = 1.0;
                    k += 1;
                }
                for &c in confounder_cols {
                    out[k] = z[c];
                    k += 1;
                }
            }
        }
    }

    /// Feature rows for every arm, written into an H×q buffer.
    fn fill_feature_matrix(&self, z: ArrayView1<f64>, out: &mut Array2<f64>) {
        for arm in 0..self.n_arms {
            let mut row = out.row_mut(arm);
            self.fill_features(arm, z, row.as_slice_mut().unwrap());
        }
    }
}

/// Numerically stable softmax of one predictor row.
pub(crate) fn softmax_row(eta: ArrayView1<f64>) -> Array1<f64> {
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = eta.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn clip_row(scores: &mut Array1<f64>, clip: f64) -> bool {
    let mut hit = false;
    for v in scores.iter_mut() {
        if *v < clip {
            *v = clip;
            hit = true;
        } else if *v > 1.0 - clip {
            *v = 1.0 - clip;
            hit = true;
        }
    }
    if hit {
        let sum = scores.sum();
        scores.mapv_inplace(|v| v / sum);
    }
    hit
}

/// Evaluates scores and gradients at a fixed parameter vector.
pub fn evaluate_scores(
    model: &PropensityModel,
    alpha: ArrayView1<f64>,
    confounders: ArrayView2<f64>,
) -> Result<PropensityFit> {
    if alpha.len() != model.n_params() {
        return Err(Error::DimensionMismatch {
            context: "propensity alpha",
            expected: model.n_params(),
            actual: alpha.len(),
        });
    }
    if alpha.iter().any(|v| !v.is_finite()) || confounders.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "non-finite propensity input (alpha or confounders)".into(),
        ));
    }
    let n = confounders.nrows();
    let h = model.n_arms();
    let q = model.n_params();
    let mut scores = Array2::<f64>::zeros((n, h));
    let mut gradients = Array3::<f64>::zeros((n, h, q));
    let mut clipped = false;
    let mut feats = Array2::<f64>::zeros((h, q));
    let mut eta = Array1::<f64>::zeros(h);
    let mut fbar = vec![0.0f64; q];
    for i in 0..n {
        let z = confounders.row(i);
        model.fill_feature_matrix(z, &mut feats);
        for a in 0..h {
            eta[a] = feats.row(a).dot(&alpha);
        }
        let mut e = softmax_row(eta.view());
        clipped |= clip_row(&mut e, model.clip);
        // fbar = Σ_k e_k f_k;  ∂e_h/∂α = e_h (f_h − fbar)
        fbar.fill(0.0);
        for a in 0..h {
            for j in 0..q {
                fbar[j] += e[a] * feats[[a, j]];
            }
        }
        for a in 0..h {
            for j in 0..q {
                gradients[[i, a, j]] = e[a] * (feats[[a, j]] - fbar[j]);
            }
        }
        scores.row_mut(i).assign(&e);
    }
    Ok(PropensityFit {
        alpha: alpha.to_owned(),
        scores,
        gradients,
        mode: ScoreMode::Known,
        loglik: None,
        clipped,
    })
}

fn log_likelihood(
    model: &PropensityModel,
    alpha: ArrayView1<f64>,
    observed_arm: &[usize],
    confounders: ArrayView2<f64>,
) -> f64 {
    let h = model.n_arms();
    let q = model.n_params();
    let mut feats = Array2::<f64>::zeros((h, q));
    let mut eta = vec![0.0f64; h];
    let mut ll = 0.0;
    for (i, &arm) in observed_arm.iter().enumerate() {
        model.fill_feature_matrix(confounders.row(i), &mut feats);
        for a in 0..h {
            eta[a] = feats.row(a).dot(&alpha);
        }
        let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + eta.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ll += eta[arm] - lse;
    }
    ll
}

/// Multinomial-logit maximum likelihood by Newton-Raphson with step-halving,
/// falling back to gradient ascent when the Hessian is singular.
pub fn fit_mle(
    model: &PropensityModel,
    treatments: ArrayView2<u8>,
    confounders: ArrayView2<f64>,
    init: Option<ArrayView1<f64>>,
) -> Result<PropensityFit> {
    let n = treatments.nrows();
    let h = model.n_arms();
    let q = model.n_params();
    if treatments.ncols() != h {
        return Err(Error::DimensionMismatch {
            context: "treatment columns",
            expected: h,
            actual: treatments.ncols(),
        });
    }
    if n <= q {
        return Err(Error::InvalidData(format!(
            "need more samples than propensity parameters (N = {n}, q = {q})"
        )));
    }
    let mut observed_arm = Vec::with_capacity(n);
    let mut arm_counts = vec![0usize; h];
    for i in 0..n {
        let mut arm = None;
        for a in 0..h {
            if treatments[[i, a]] == 1 {
                arm = Some(a);
            }
        }
        let arm = arm.ok_or_else(|| {
            Error::InvalidData(format!("sample {i} has no treatment indicator set"))
        })?;
        arm_counts[arm] += 1;
        observed_arm.push(arm);
    }
    if let Some(empty) = arm_counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidData(format!(
            "treatment arm {empty} is never observed"
        )));
    }

    let mut alpha = match init {
        Some(a) => {
            if a.len() != q {
                return Err(Error::DimensionMismatch {
                    context: "propensity init",
                    expected: q,
                    actual: a.len(),
                });
            }
            a.to_owned()
        }
        None => Array1::<f64>::zeros(q),
    };

    let mut ll = log_likelihood(model, alpha.view(), &observed_arm, confounders);
    let mut grad_norm = f64::INFINITY;
    let mut feats = Array2::<f64>::zeros((h, q));
    let mut eta = Array1::<f64>::zeros(h);
    let mut fbar = vec![0.0f64; q];
    for _iter in 0..MAX_NEWTON_ITERS {
        // score and observed information at the current alpha
        let mut grad = Array1::<f64>::zeros(q);
        let mut info = Array2::<f64>::zeros((q, q));
        for (i, &arm) in observed_arm.iter().enumerate() {
            let z = confounders.row(i);
            model.fill_feature_matrix(z, &mut feats);
            for a in 0..h {
                eta[a] = feats.row(a).dot(&alpha);
            }
            let e = softmax_row(eta.view());
            fbar.fill(0.0);
            for a in 0..h {
                for j in 0..q {
                    fbar[j] += e[a] * feats[[a, j]];
                }
            }
            for j in 0..q {
                grad[j] += feats[[arm, j]] - fbar[j];
            }
            for a in 0..h {
                let ea = e[a];
                for r in 0..q {
                    let fr = ea * feats[[a, r]];
                    for c in 0..q {
                        info[[r, c]] += fr * feats[[a, c]];
                    }
                }
            }
            for r in 0..q {
                for c in 0..q {
                    info[[r, c]] -= fbar[r] * fbar[c];
                }
            }
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= 1e-9 * ll.abs().max(1.0) {
            break;
        }
        let direction = match linalg::solve_spd(info.view(), grad.view(), "propensity Hessian", 1e12)
        {
            Ok(d) => d,
            // singular information matrix: plain gradient ascent step
            Err(_) => grad.clone(),
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &alpha + &(&direction * step);
            let trial_ll = log_likelihood(model, trial.view(), &observed_arm, confounders);
            if trial_ll > ll - 1e-14 {
                alpha = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if grad_norm > 1e-8 * ll.abs().max(1.0) {
        return Err(Error::NonConvergence {
            iterations: MAX_NEWTON_ITERS,
            grad_norm,
        });
    }

    let mut fit = evaluate_scores(model, alpha.view(), confounders)?;
    fit.mode = ScoreMode::Estimated;
    fit.loglik = Some(ll);
    Ok(fit)
}

/// Maximum deviation (relative to max(1, |fd|)) between the stored analytic
/// gradients and central finite differences of the scores, step 1e-6.
pub fn score_gradient_check(
    fit: &PropensityFit,
    model: &PropensityModel,
    confounders: ArrayView2<f64>,
) -> Result<f64> {
    let (n, h, q) = fit.gradients.dim();
    let step = 1e-6;
    let mut worst = 0.0f64;
    for j in 0..q {
        let mut plus = fit.alpha.clone();
        plus[j] += step;
        let mut minus = fit.alpha.clone();
        minus[j] -= step;
        let fp = evaluate_scores(model, plus.view(), confounders)?;
        let fm = evaluate_scores(model, minus.view(), confounders)?;
        for i in 0..n {
            for a in 0..h {
                let fd = (fp.scores[[i, a]] - fm.scores[[i, a]]) / (2.0 * step);
                let dev = (fit.gradients[[i, a, j]] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(dev);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(arms: &[usize], h: usize) -> Array2<u8> {
        let mut t = Array2::<u8>::zeros((arms.len(), h));
        for (i, &a) in arms.iter().enumerate() {
            t[[i, a]] = 1;
        }
        t
    }

    #[test]
    fn zero_alpha_gives_uniform_scores() {
        let model = PropensityModel::arm_slopes(6);
        let z = Array2::from_shape_fn((4, 1), |(i, _)| i as f64 - 1.5);
        let fit = evaluate_scores(&model, Array1::zeros(5).view(), z.view()).unwrap();
        for i in 0..4 {
            for h in 0..6 {
                assert_abs_diff_eq!(fit.scores[[i, h]], 1.0 / 6.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_confounder_kills_all_exponents() {
        let model = PropensityModel::arm_slopes(6);
        let alpha = array![0.8, 1.0, 0.9, 0.7, 0.6];
        let z = Array2::<f64>::zeros((3, 1));
        let fit = evaluate_scores(&model, alpha.view(), z.view()).unwrap();
        for i in 0..3 {
            for h in 0..6 {
                assert_abs_diff_eq!(fit.scores[[i, h]], 1.0 / 6.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_arm_hand_value() {
        // H=2, alpha=1, z = ln 3: e^(2) = 3/(1+3)
        let model = PropensityModel::arm_slopes(2);
        let z = Array2::from_elem((1, 1), 3.0f64.ln());
        let fit = evaluate_scores(&model, array![1.0].view(), z.view()).unwrap();
        assert_abs_diff_eq!(fit.scores[[0, 1]], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.scores[[0, 0]], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_gradients_sum_to_zero() {
        let model = PropensityModel::arm_slopes(6);
        let alpha = array![0.8, 1.0, 0.9, 0.7, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_fn((50, 1), |_| rng.gen_range(-1.8..1.8));
        let fit = evaluate_scores(&model, alpha.view(), z.view()).unwrap();
        for i in 0..50 {
            let sum: f64 = (0..6).map(|h| fit.scores[[i, h]]).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
            for j in 0..5 {
                let gsum: f64 = (0..6).map(|h| fit.gradients[[i, h, j]]).sum();
                assert_abs_diff_eq!(gsum, 0.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = PropensityModel::arm_slopes(6);
        let alpha = array![0.3, -0.7, 1.1, 0.2, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Array2::from_shape_fn((20, 1), |_| rng.gen_range(-1.5..1.5));
        let fit = evaluate_scores(&model, alpha.view(), z.view()).unwrap();
        let dev = score_gradient_check(&fit, &model, z.view()).unwrap();
        assert!(dev <= 1e-5, "deviation {dev}");

        // smooth point
        let fit0 = evaluate_scores(&model, Array1::zeros(5).view(), z.view()).unwrap();
        assert!(score_gradient_check(&fit0, &model, z.view()).unwrap() <= 1e-6);

        // constant-z dataset: scores constant across samples
        let zc = Array2::from_elem((10, 1), 0.4);
        let fitc = evaluate_scores(&model, alpha.view(), zc.view()).unwrap();
        assert!(score_gradient_check(&fitc, &model, zc.view()).unwrap() <= 1e-8);
    }

    #[test]
    fn baseline_shift_invariance() {
        // same assignment model encoded against two different baselines
        let slopes = [0.0, 0.5, 0.8];
        let m0 = PropensityModel::arm_slopes(3);
        let a0 = array![0.5, 0.8];
        let m1 = PropensityModel::new(3, 1, PredictorSpec::ArmSlopes { confounder_col: 0 });
        let a1 = array![slopes[0] - slopes[1], slopes[2] - slopes[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((25, 1), |_| rng.gen_range(-1.7..1.7));
        let f0 = evaluate_scores(&m0, a0.view(), z.view()).unwrap();
        let f1 = evaluate_scores(&m1, a1.view(), z.view()).unwrap();
        for i in 0..25 {
            for h in 0..3 {
                assert_abs_diff_eq!(f0.scores[[i, h]], f1.scores[[i, h]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mle_first_order_condition_and_balance() {
        // balanced assignment: alpha-hat near zero and score equation solved
        let model = PropensityModel::arm_slopes(3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1500;
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.7..1.7));
        let arms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let fit = fit_mle(&model, one_hot(&arms, 3).view(), z.view(), None).unwrap();
        assert!(fit.loglik.is_some());
        assert!(fit.alpha.iter().all(|a| a.abs() < 0.2), "{:?}", fit.alpha);
    }

    #[test]
    fn mle_matches_grid_search_oracle() {
        // N=50, q=1 binary problem against a 1e-4 grid maximizer
        let model = PropensityModel::arm_slopes(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 50;
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.7..1.7));
        let truth: f64 = 0.8;
        let arms: Vec<usize> = (0..n)
            .map(|i| {
                let e1 = 1.0 / (1.0 + (-truth * z[[i, 0]]).exp());
                usize::from(rng.gen::<f64>() < e1)
            })
            .collect();
        let tmat = one_hot(&arms, 2);
        let fit = fit_mle(&model, tmat.view(), z.view(), None).unwrap();

        let observed: Vec<usize> = arms.clone();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut a = -3.0;
        while a <= 3.0 {
            let ll = log_likelihood(&model, array![a].view(), &observed, z.view());
            if ll > best.0 {
                best = (ll, a);
            }
            a += 1e-4;
        }
        assert!(
            (fit.alpha[0] - best.1).abs() <= 1e-4 + 1e-9,
            "mle {} vs grid {}",
            fit.alpha[0],
            best.1
        );
    }

    #[test]
    fn mle_consistency_on_assignment_family() {
        // large-sample check: alpha-hat within 3 SEs of the truth componentwise
        let model = PropensityModel::arm_slopes(6);
        let alpha = array![0.8, 1.0, 0.9, 0.7, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let n = 2000;
        let z = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.732..1.732));
        let probe = evaluate_scores(&model, alpha.view(), z.view()).unwrap();
        let arms: Vec<usize> = (0..n)
            .map(|i| {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                for h in 0..6 {
                    cum += probe.scores[[i, h]];
                    if u < cum {
                        return h;
                    }
                }
                5
            })
            .collect();
        let fit = fit_mle(&model, one_hot(&arms, 6).view(), z.view(), None).unwrap();
        // observed information at alpha-hat for standard errors
        let mut info = Array2::<f64>::zeros((5, 5));
        for i in 0..n {
            let zi = z[[i, 0]];
            for r in 0..5 {
                for c in 0..5 {
                    let e_r = fit.scores[[i, r + 1]];
                    let e_c = fit.scores[[i, c + 1]];
                    let diag = if r == c { e_r } else { 0.0 };
                    info[[r, c]] += zi * zi * (diag - e_r * e_c);
                }
            }
        }
        let (inv, _) = linalg::pinv_spd(info.view(), 1e12);
        for j in 0..5 {
            let se = inv[[j, j]].sqrt();
            assert!(
                (fit.alpha[j] - alpha[j]).abs() <= 3.0 * se,
                "component {j}: {} vs {} (se {se})",
                fit.alpha[j],
                alpha[j]
            );
        }
    }

    #[test]
    fn mle_rejects_unobserved_arm() {
        let model = PropensityModel::arm_slopes(3);
        let z = Array2::<f64>::zeros((10, 1));
        let arms = vec![0usize; 10];
        assert!(fit_mle(&model, one_hot(&arms, 3).view(), z.view(), None).is_err());
    }
}
