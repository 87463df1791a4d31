//! Node-model fitting with a robustness ladder.
//!
//! The primary route is IRLS (closed form for gaussian responses). When a
//! binomial fit diverges — data separation drives the MLE to infinity —
//! a Firth bias-reduced fit takes over; it maximizes the log-likelihood
//! penalized by half the log-determinant of the Fisher information and
//! stays finite under complete separation. If even that fails, predictors
//! are removed one at a time until something fits.

use crate::data::{DesignMatrix, DistributionKind};
use crate::linalg::{cholesky_inverse, cholesky_solve, independent_columns, Matrix, QrFactor};
use crate::scalar::{cast, ln_gamma, Scalar};
use thiserror::Error;

const MAX_ITER: usize = 100;
/// Relative deviance change below this ends the iteration.
const REL_TOL: f64 = 1e-8;
/// |coefficient| beyond this on the linear-predictor scale is treated as
/// separation (the logistic curve is numerically saturated there).
const COEF_LIMIT: f64 = 15.0;
/// A standard error beyond this signals quasi-separation.
const SE_LIMIT: f64 = 1e3;
/// Ridge strength for the multinomial divergence fallback.
const RIDGE_LAMBDA: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("estimates diverged: {0}")]
    Diverged(String),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("too few observations: n = {n}, p = {p}")]
    TooFewRows { n: usize, p: usize },
    #[error("family not supported by this fitter: {0}")]
    UnsupportedFamily(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("node cannot be fit even intercept-only: {0}")]
    Unfittable(String),
}

/// Family of the child plus its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamilySpec {
    pub family: DistributionKind,
}

impl FamilySpec {
    pub fn new(family: DistributionKind) -> Self {
        FamilySpec { family }
    }

    /// Canonical link implied by the family.
    pub fn link_name(&self) -> &'static str {
        match self.family {
            DistributionKind::Gaussian => "identity",
            DistributionKind::Binomial => "logit",
            DistributionKind::Poisson => "log",
            DistributionKind::Multinomial { .. } => "softmax",
        }
    }
}

/// How a fit was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Irls,
    Firth,
    MultinomialMl,
    MultinomialRidge,
}

impl FitMethod {
    fn base_label(&self) -> &'static str {
        match self {
            FitMethod::Irls => "irls",
            FitMethod::Firth => "firth",
            FitMethod::MultinomialMl => "multinomial_ml",
            FitMethod::MultinomialRidge => "multinomial_ridge",
        }
    }
}

/// Fitted node model.
///
/// `coefficients` has one row per linear predictor: a single row except
/// for multinomial children, which get one row per non-baseline level.
#[derive(Debug, Clone)]
pub struct GlmFit<T> {
    pub coefficients: Matrix<T>,
    pub std_errors: Matrix<T>,
    /// Natural-log likelihood of the data at the returned coefficients,
    /// always unpenalized so entries stay on one scale.
    pub loglik: T,
    /// Free parameter count (gaussian includes the variance).
    pub d: usize,
    pub method: FitMethod,
    pub converged: bool,
    pub iterations: usize,
    /// Labels of columns removed by rank reduction or the ladder.
    pub dropped_columns: Vec<String>,
    /// Labels of the columns actually fitted, intercept first.
    pub column_labels: Vec<String>,
}

impl<T: Scalar> GlmFit<T> {
    /// Method tag including the rank-reduction prefix when columns were
    /// dropped, e.g. `rank_reduced+firth`.
    pub fn method_label(&self) -> String {
        if self.dropped_columns.is_empty() {
            self.method.base_label().to_string()
        } else {
            format!("rank_reduced+{}", self.method.base_label())
        }
    }

    pub fn p(&self) -> usize {
        self.coefficients.cols()
    }
}

/// Internal failure carrying the last iterate so the ladder can decide
/// which predictor to drop.
struct Failure<T> {
    error: GlmError,
    last_coefs: Option<Matrix<T>>,
}

impl<T> Failure<T> {
    fn new(error: GlmError) -> Self {
        Failure {
            error,
            last_coefs: None,
        }
    }

    fn with_coefs(error: GlmError, coefs: Matrix<T>) -> Self {
        Failure {
            error,
            last_coefs: Some(coefs),
        }
    }
}

fn all_finite<T: Scalar>(m: &Matrix<T>) -> bool {
    (0..m.rows()).all(|i| m.row(i).iter().all(|v| v.is_finite()))
}

fn row_matrix<T: Scalar>(v: Vec<T>) -> Matrix<T> {
    let p = v.len();
    Matrix::from_vec(1, p, v)
}

// ---------------------------------------------------------------------
// IRLS (gaussian closed form, binomial, poisson)
// ---------------------------------------------------------------------

/// Maximum-likelihood fit under the canonical link for gaussian, binomial
/// or poisson responses. The design must have full column rank.
pub fn fit_irls<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    fam: &FamilySpec,
) -> Result<GlmFit<T>, GlmError> {
    match fam.family {
        DistributionKind::Gaussian => fit_gaussian_inner(x, y).map_err(|f| f.error),
        DistributionKind::Binomial | DistributionKind::Poisson => {
            fit_irls_inner(x, y, fam.family).map_err(|f| f.error)
        }
        DistributionKind::Multinomial { .. } => Err(GlmError::UnsupportedFamily(
            "multinomial responses use fit_multinomial".into(),
        )),
    }
}

fn check_sizes<T: Scalar>(x: &DesignMatrix<T>, y: &[T]) -> Result<(), Failure<T>> {
    let (n, p) = (x.n(), x.p());
    if y.len() != n {
        return Err(Failure::new(GlmError::BadResponse(format!(
            "response length {} does not match {} design rows",
            y.len(),
            n
        ))));
    }
    if n <= p {
        return Err(Failure::new(GlmError::TooFewRows { n, p }));
    }
    Ok(())
}

fn fit_gaussian_inner<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
) -> Result<GlmFit<T>, Failure<T>> {
    check_sizes(x, y)?;
    let (n, p) = (x.n(), x.p());
    let qr = QrFactor::compute(&x.values).ok_or_else(|| Failure::new(GlmError::RankDeficient))?;
    let beta = qr.solve(y);
    let fitted = x.values.mat_vec(&beta);
    let nf = cast::<T>(n as f64);
    let rss = y
        .iter()
        .zip(&fitted)
        .fold(T::zero(), |acc, (&yi, &fi)| acc + (yi - fi) * (yi - fi));
    let sigma2 = rss / nf;
    // Scale-aware degeneracy test: an (essentially) exact fit has no
    // likelihood and must fail so the ladder can react.
    let ybar = y.iter().fold(T::zero(), |a, &v| a + v) / nf;
    let total_var = y
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - ybar) * (v - ybar))
        / nf;
    let floor = T::epsilon().powf(cast(1.5)) * total_var.max(T::one());
    if !sigma2.is_finite() || sigma2 <= floor {
        return Err(Failure::with_coefs(
            GlmError::Diverged("zero residual variance".into()),
            row_matrix(beta),
        ));
    }
    let two_pi = cast::<T>(2.0 * std::f64::consts::PI);
    let loglik = -nf / cast::<T>(2.0) * ((two_pi * sigma2).ln() + T::one());
    let se: Vec<T> = qr
        .xtx_inverse_diag()
        .into_iter()
        .map(|v| (sigma2 * v).sqrt())
        .collect();
    Ok(GlmFit {
        coefficients: row_matrix(beta),
        std_errors: row_matrix(se),
        loglik,
        d: p + 1,
        method: FitMethod::Irls,
        converged: true,
        iterations: 1,
        dropped_columns: Vec::new(),
        column_labels: x.column_labels.clone(),
    })
}

fn clamp_mu<T: Scalar>(mu: T, family: DistributionKind) -> T {
    let lo = cast::<T>(1e-10);
    match family {
        DistributionKind::Binomial => mu.max(lo).min(T::one() - lo),
        DistributionKind::Poisson => mu.max(lo),
        _ => mu,
    }
}

fn deviance<T: Scalar>(y: &[T], mu: &[T], family: DistributionKind) -> T {
    let two = cast::<T>(2.0);
    match family {
        DistributionKind::Binomial => {
            // Saturated log-likelihood is zero for 0/1 responses.
            -two * binomial_loglik(y, mu)
        }
        DistributionKind::Poisson => y
            .iter()
            .zip(mu)
            .fold(T::zero(), |acc, (&yi, &mi)| {
                let term = if yi > T::zero() {
                    yi * (yi / mi).ln() - (yi - mi)
                } else {
                    mi
                };
                acc + two * term
            }),
        _ => unreachable!("deviance only used for binomial/poisson IRLS"),
    }
}

fn binomial_loglik<T: Scalar>(y: &[T], mu: &[T]) -> T {
    y.iter().zip(mu).fold(T::zero(), |acc, (&yi, &mi)| {
        acc + yi * mi.ln() + (T::one() - yi) * (T::one() - mi).ln()
    })
}

fn poisson_loglik<T: Scalar>(y: &[T], mu: &[T]) -> T {
    y.iter().zip(mu).fold(T::zero(), |acc, (&yi, &mi)| {
        acc + yi * mi.ln() - mi - ln_gamma(yi + T::one())
    })
}

fn fit_irls_inner<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    family: DistributionKind,
) -> Result<GlmFit<T>, Failure<T>> {
    check_sizes(x, y)?;
    let (n, p) = (x.n(), x.p());
    match family {
        DistributionKind::Binomial => {
            if y.iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Failure::new(GlmError::BadResponse(
                    "binomial response must be 0/1".into(),
                )));
            }
        }
        DistributionKind::Poisson => {
            if y
                .iter()
                .any(|&v| v < T::zero() || v.fract() != T::zero() || !v.is_finite())
            {
                return Err(Failure::new(GlmError::BadResponse(
                    "poisson response must hold non-negative integers".into(),
                )));
            }
        }
        _ => unreachable!(),
    }
    if QrFactor::compute(&x.values).is_none() {
        return Err(Failure::new(GlmError::RankDeficient));
    }

    // Standard GLM starting values.
    let mut mu: Vec<T> = match family {
        DistributionKind::Binomial => y
            .iter()
            .map(|&v| (v + cast::<T>(0.5)) / cast::<T>(2.0))
            .collect(),
        DistributionKind::Poisson => y.iter().map(|&v| v + cast::<T>(0.1)).collect(),
        _ => unreachable!(),
    };
    let mut dev = deviance(y, &mu, family);
    let mut beta: Vec<T> = vec![T::zero(); p];
    let coef_limit = cast::<T>(COEF_LIMIT);
    let tol = cast::<T>(REL_TOL);

    for iter in 1..=MAX_ITER {
        let eta: Vec<T> = mu
            .iter()
            .map(|&m| match family {
                DistributionKind::Binomial => (m / (T::one() - m)).ln(),
                DistributionKind::Poisson => m.ln(),
                _ => unreachable!(),
            })
            .collect();
        let w: Vec<T> = mu
            .iter()
            .map(|&m| match family {
                DistributionKind::Binomial => m * (T::one() - m),
                DistributionKind::Poisson => m,
                _ => unreachable!(),
            })
            .collect();
        // Weighted least squares on the working response
        // z = η + (y − μ)/w, with rows scaled by √w.
        let mut a = Matrix::zeros(n, p);
        let mut b = vec![T::zero(); n];
        for i in 0..n {
            let sw = w[i].sqrt();
            if !sw.is_finite() {
                return Err(Failure::with_coefs(
                    GlmError::Diverged("non-finite working weights".into()),
                    row_matrix(beta),
                ));
            }
            for j in 0..p {
                a.set(i, j, x.values.get(i, j) * sw);
            }
            b[i] = sw * (eta[i] + (y[i] - mu[i]) / w[i]);
        }
        let qr = match QrFactor::compute(&a) {
            Some(qr) => qr,
            None => {
                return Err(Failure::with_coefs(
                    GlmError::Diverged("weighted design lost rank".into()),
                    row_matrix(beta),
                ))
            }
        };
        beta = qr.solve(&b);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Failure::with_coefs(
                GlmError::Diverged("non-finite coefficients".into()),
                row_matrix(beta),
            ));
        }
        if beta.iter().any(|v| v.abs() > coef_limit) {
            return Err(Failure::with_coefs(
                GlmError::Diverged(format!(
                    "coefficient beyond separation threshold {COEF_LIMIT}"
                )),
                row_matrix(beta),
            ));
        }
        let eta_new = x.values.mat_vec(&beta);
        mu = eta_new
            .iter()
            .map(|&e| {
                let m = match family {
                    DistributionKind::Binomial => T::one() / (T::one() + (-e).exp()),
                    DistributionKind::Poisson => e.exp(),
                    _ => unreachable!(),
                };
                clamp_mu(m, family)
            })
            .collect();
        let dev_new = deviance(y, &mu, family);
        let rel = (dev_new - dev).abs() / (dev.abs() + cast::<T>(0.1));
        dev = dev_new;
        if rel < tol {
            return finish_irls(x, y, &beta, &mu, family, iter);
        }
    }
    Err(Failure::with_coefs(
        GlmError::NotConverged {
            iterations: MAX_ITER,
        },
        row_matrix(beta),
    ))
}

fn finish_irls<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    beta: &[T],
    mu: &[T],
    family: DistributionKind,
    iterations: usize,
) -> Result<GlmFit<T>, Failure<T>> {
    let (n, p) = (x.n(), x.p());
    // Expected information at the optimum: XᵀWX with final weights.
    let mut a = Matrix::zeros(n, p);
    for i in 0..n {
        let w = match family {
            DistributionKind::Binomial => mu[i] * (T::one() - mu[i]),
            DistributionKind::Poisson => mu[i],
            _ => unreachable!(),
        };
        let sw = w.sqrt();
        for j in 0..p {
            a.set(i, j, x.values.get(i, j) * sw);
        }
    }
    let qr = match QrFactor::compute(&a) {
        Some(qr) => qr,
        None => {
            return Err(Failure::with_coefs(
                GlmError::Diverged("information matrix is singular at the optimum".into()),
                row_matrix(beta.to_vec()),
            ))
        }
    };
    let se: Vec<T> = qr.xtx_inverse_diag().into_iter().map(|v| v.sqrt()).collect();
    if family == DistributionKind::Binomial {
        let se_limit = cast::<T>(SE_LIMIT);
        if se.iter().any(|&s| !s.is_finite() || s > se_limit) {
            return Err(Failure::with_coefs(
                GlmError::Diverged(format!("standard error beyond {SE_LIMIT}")),
                row_matrix(beta.to_vec()),
            ));
        }
    }
    let loglik = match family {
        DistributionKind::Binomial => binomial_loglik(y, mu),
        DistributionKind::Poisson => poisson_loglik(y, mu),
        _ => unreachable!(),
    };
    Ok(GlmFit {
        coefficients: row_matrix(beta.to_vec()),
        std_errors: row_matrix(se),
        loglik,
        d: p,
        method: FitMethod::Irls,
        converged: true,
        iterations,
        dropped_columns: Vec::new(),
        column_labels: x.column_labels.clone(),
    })
}

// ---------------------------------------------------------------------
// Firth bias-reduced logistic regression
// ---------------------------------------------------------------------

/// Maximizes `ℓ(β) + ½ ln det I(β)` — the Jeffreys-penalized logistic
/// log-likelihood — via IRLS on hat-value-adjusted residuals. Estimates
/// stay finite even under complete separation.
pub fn fit_logistic_firth<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
) -> Result<GlmFit<T>, GlmError> {
    fit_firth_inner(x, y).map_err(|f| f.error)
}

fn firth_penalized_loglik<T: Scalar>(x: &DesignMatrix<T>, y: &[T], beta: &[T]) -> Option<T> {
    let (n, p) = (x.n(), x.p());
    let eta = x.values.mat_vec(beta);
    let mu: Vec<T> = eta
        .iter()
        .map(|&e| clamp_mu(T::one() / (T::one() + (-e).exp()), DistributionKind::Binomial))
        .collect();
    let mut a = Matrix::zeros(n, p);
    for i in 0..n {
        let sw = (mu[i] * (T::one() - mu[i])).sqrt();
        for j in 0..p {
            a.set(i, j, x.values.get(i, j) * sw);
        }
    }
    let qr = QrFactor::compute(&a)?;
    Some(binomial_loglik(y, &mu) + cast::<T>(0.5) * qr.log_det_xtx())
}

fn fit_firth_inner<T: Scalar>(x: &DesignMatrix<T>, y: &[T]) -> Result<GlmFit<T>, Failure<T>> {
    check_sizes(x, y)?;
    let (n, p) = (x.n(), x.p());
    if y.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Failure::new(GlmError::BadResponse(
            "binomial response must be 0/1".into(),
        )));
    }
    if QrFactor::compute(&x.values).is_none() {
        return Err(Failure::new(GlmError::RankDeficient));
    }

    let tol = cast::<T>(REL_TOL);
    let half = cast::<T>(0.5);
    let mut beta = vec![T::zero(); p];
    let mut pl = firth_penalized_loglik(x, y, &beta)
        .ok_or_else(|| Failure::new(GlmError::RankDeficient))?;

    for iter in 1..=MAX_ITER {
        let eta = x.values.mat_vec(&beta);
        let mu: Vec<T> = eta
            .iter()
            .map(|&e| clamp_mu(T::one() / (T::one() + (-e).exp()), DistributionKind::Binomial))
            .collect();
        let w: Vec<T> = mu.iter().map(|&m| m * (T::one() - m)).collect();
        let mut a = Matrix::zeros(n, p);
        for i in 0..n {
            let sw = w[i].sqrt();
            for j in 0..p {
                a.set(i, j, x.values.get(i, j) * sw);
            }
        }
        let qr = match QrFactor::compute(&a) {
            Some(qr) => qr,
            None => {
                return Err(Failure::with_coefs(
                    GlmError::NotConverged { iterations: iter },
                    row_matrix(beta),
                ))
            }
        };
        let h = qr.hat_diagonals();
        // Adjusted working response: the score gains h_i(½ − μ_i).
        let mut b = vec![T::zero(); n];
        for i in 0..n {
            let adj = y[i] - mu[i] + h[i] * (half - mu[i]);
            b[i] = w[i].sqrt() * (eta[i] + adj / w[i]);
        }
        let mut proposal = qr.solve(&b);
        // Step-halving towards the previous iterate if the penalized
        // log-likelihood would decrease.
        let mut accepted = None;
        for _ in 0..20 {
            if proposal.iter().all(|v| v.is_finite()) {
                if let Some(pl_new) = firth_penalized_loglik(x, y, &proposal) {
                    if pl_new >= pl - cast::<T>(1e-12) {
                        accepted = Some((proposal.clone(), pl_new));
                        break;
                    }
                }
            }
            for (prop, prev) in proposal.iter_mut().zip(&beta) {
                *prop = (*prop + *prev) * half;
            }
        }
        let (beta_new, pl_new) = match accepted {
            Some(v) => v,
            None => {
                return Err(Failure::with_coefs(
                    GlmError::NotConverged { iterations: iter },
                    row_matrix(beta),
                ))
            }
        };
        let dev_old = -cast::<T>(2.0) * pl;
        let dev_new = -cast::<T>(2.0) * pl_new;
        let rel = (dev_new - dev_old).abs() / (dev_old.abs() + cast::<T>(0.1));
        // The adjusted-score iteration approaches the optimum only
        // linearly, so a flat objective alone is not enough; require the
        // step itself to be small too.
        let step = beta
            .iter()
            .zip(&beta_new)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()));
        let scale = beta_new
            .iter()
            .fold(T::one(), |acc, &b| acc.max(b.abs()));
        beta = beta_new;
        pl = pl_new;
        if rel < tol && step < cast::<T>(1e-7) * scale {
            return finish_firth(x, y, &beta, iter);
        }
    }
    Err(Failure::with_coefs(
        GlmError::NotConverged {
            iterations: MAX_ITER,
        },
        row_matrix(beta),
    ))
}

fn finish_firth<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    beta: &[T],
    iterations: usize,
) -> Result<GlmFit<T>, Failure<T>> {
    let (n, p) = (x.n(), x.p());
    let eta = x.values.mat_vec(beta);
    let mu: Vec<T> = eta
        .iter()
        .map(|&e| clamp_mu(T::one() / (T::one() + (-e).exp()), DistributionKind::Binomial))
        .collect();
    let mut a = Matrix::zeros(n, p);
    for i in 0..n {
        let sw = (mu[i] * (T::one() - mu[i])).sqrt();
        for j in 0..p {
            a.set(i, j, x.values.get(i, j) * sw);
        }
    }
    let qr = match QrFactor::compute(&a) {
        Some(qr) => qr,
        None => {
            return Err(Failure::with_coefs(
                GlmError::NotConverged { iterations },
                row_matrix(beta.to_vec()),
            ))
        }
    };
    // Inverse penalized information at the optimum.
    let se: Vec<T> = qr.xtx_inverse_diag().into_iter().map(|v| v.sqrt()).collect();
    if beta.iter().any(|v| !v.is_finite()) || se.iter().any(|v| !v.is_finite()) {
        return Err(Failure::with_coefs(
            GlmError::NotConverged { iterations },
            row_matrix(beta.to_vec()),
        ));
    }
    Ok(GlmFit {
        coefficients: row_matrix(beta.to_vec()),
        std_errors: row_matrix(se),
        loglik: binomial_loglik(y, &mu),
        d: p,
        method: FitMethod::Firth,
        converged: true,
        iterations,
        dropped_columns: Vec::new(),
        column_labels: x.column_labels.clone(),
    })
}

// ---------------------------------------------------------------------
// Multinomial (softmax) regression
// ---------------------------------------------------------------------

/// Maximum conditional likelihood softmax regression with level 0 as the
/// baseline. Coefficients are a (C−1)×p matrix; optimization is Newton
/// with step halving. `levels == 2` is accepted and reproduces logistic
/// regression.
pub fn fit_multinomial<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    levels: usize,
) -> Result<GlmFit<T>, GlmError> {
    fit_multinomial_inner(x, y, levels, None).map_err(|f| f.error)
}

struct SoftmaxEval<T> {
    loglik: T,
    penalized: T,
    /// Row-major per-observation probabilities for levels 1..C−1.
    probs: Vec<T>,
}

fn softmax_eval<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    coefs: &Matrix<T>,
    ridge: Option<T>,
) -> SoftmaxEval<T> {
    let n = x.n();
    let cm1 = coefs.rows();
    let mut loglik = T::zero();
    let mut probs = vec![T::zero(); n * cm1];
    for i in 0..n {
        let row = x.values.row(i);
        let mut etas = vec![T::zero(); cm1];
        let mut max_eta = T::zero(); // baseline level has η = 0
        for c in 0..cm1 {
            let e = coefs
                .row(c)
                .iter()
                .zip(row)
                .fold(T::zero(), |acc, (&b, &v)| acc + b * v);
            etas[c] = e;
            if e > max_eta {
                max_eta = e;
            }
        }
        let mut denom = (-max_eta).exp();
        for &e in &etas {
            denom = denom + (e - max_eta).exp();
        }
        let lse = max_eta + denom.ln();
        let yi = y[i].to_usize().unwrap_or(0);
        let own_eta = if yi == 0 { T::zero() } else { etas[yi - 1] };
        loglik = loglik + own_eta - lse;
        for c in 0..cm1 {
            probs[i * cm1 + c] = (etas[c] - lse).exp();
        }
    }
    let mut penalized = loglik;
    if let Some(lambda) = ridge {
        let mut ssq = T::zero();
        for c in 0..cm1 {
            // Intercept (column 0) is left unpenalized.
            for j in 1..coefs.cols() {
                let b = coefs.get(c, j);
                ssq = ssq + b * b;
            }
        }
        penalized = loglik - lambda / cast::<T>(2.0) * ssq;
    }
    SoftmaxEval {
        loglik,
        penalized,
        probs,
    }
}

fn fit_multinomial_inner<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    levels: usize,
    ridge: Option<T>,
) -> Result<GlmFit<T>, Failure<T>> {
    check_sizes(x, y)?;
    let (n, p) = (x.n(), x.p());
    if levels < 2 {
        return Err(Failure::new(GlmError::BadResponse(
            "multinomial needs at least 2 levels".into(),
        )));
    }
    let mut counts = vec![0usize; levels];
    for &v in y {
        match v.to_usize() {
            Some(idx) if idx < levels && v.fract() == T::zero() => counts[idx] += 1,
            _ => {
                return Err(Failure::new(GlmError::BadResponse(format!(
                    "response value {v} is not a level index below {levels}"
                ))))
            }
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Failure::new(GlmError::BadResponse(format!(
            "level {missing} is never observed"
        ))));
    }
    if QrFactor::compute(&x.values).is_none() {
        return Err(Failure::new(GlmError::RankDeficient));
    }

    let cm1 = levels - 1;
    let dim = cm1 * p;
    let tol = cast::<T>(REL_TOL);
    let coef_limit = cast::<T>(COEF_LIMIT);
    let half = cast::<T>(0.5);
    let mut coefs = Matrix::zeros(cm1, p);
    let mut eval = softmax_eval(x, y, &coefs, ridge);

    for iter in 1..=MAX_ITER {
        // Gradient of the (penalized) log-likelihood.
        let mut grad = vec![T::zero(); dim];
        for i in 0..n {
            let yi = y[i].to_usize().unwrap();
            let row = x.values.row(i);
            for c in 0..cm1 {
                let ind = if yi == c + 1 { T::one() } else { T::zero() };
                let diff = ind - eval.probs[i * cm1 + c];
                for j in 0..p {
                    grad[c * p + j] = grad[c * p + j] + diff * row[j];
                }
            }
        }
        if let Some(lambda) = ridge {
            for c in 0..cm1 {
                for j in 1..p {
                    grad[c * p + j] = grad[c * p + j] - lambda * coefs.get(c, j);
                }
            }
        }
        // Negative Hessian: blocks Xᵀ diag(p_c(δ_cd − p_d)) X.
        let mut neg_h = Matrix::zeros(dim, dim);
        for i in 0..n {
            let row = x.values.row(i);
            for c in 0..cm1 {
                let pc = eval.probs[i * cm1 + c];
                for d in c..cm1 {
                    let pd = eval.probs[i * cm1 + d];
                    let wcd = if c == d { pc * (T::one() - pc) } else { -pc * pd };
                    for j in 0..p {
                        let rj = row[j] * wcd;
                        for l in 0..p {
                            let v = neg_h.get(c * p + j, d * p + l) + rj * row[l];
                            neg_h.set(c * p + j, d * p + l, v);
                        }
                    }
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                neg_h.set(a, b, neg_h.get(b, a));
            }
        }
        if let Some(lambda) = ridge {
            for c in 0..cm1 {
                for j in 1..p {
                    let idx = c * p + j;
                    neg_h.set(idx, idx, neg_h.get(idx, idx) + lambda);
                }
            }
        }
        let step = match cholesky_solve(&neg_h, &grad) {
            Some(s) => s,
            None => {
                return Err(Failure::with_coefs(
                    GlmError::Diverged("softmax information matrix not positive definite".into()),
                    coefs,
                ))
            }
        };

        // Step-halving on the penalized objective.
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..20 {
            let mut proposal = coefs.clone();
            for c in 0..cm1 {
                for j in 0..p {
                    let v = proposal.get(c, j) + scale * step[c * p + j];
                    proposal.set(c, j, v);
                }
            }
            if all_finite(&proposal) {
                let eval_new = softmax_eval(x, y, &proposal, ridge);
                if eval_new.penalized >= eval.penalized - cast::<T>(1e-12) {
                    accepted = Some((proposal, eval_new));
                    break;
                }
            }
            scale = scale * half;
        }
        let (coefs_new, eval_new) = match accepted {
            Some(v) => v,
            None => {
                return Err(Failure::with_coefs(
                    GlmError::NotConverged { iterations: iter },
                    coefs,
                ))
            }
        };
        if ridge.is_none() {
            let too_big = (0..cm1).any(|c| {
                coefs_new
                    .row(c)
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > coef_limit)
            });
            if too_big {
                return Err(Failure::with_coefs(
                    GlmError::Diverged(format!(
                        "coefficient beyond separation threshold {COEF_LIMIT}"
                    )),
                    coefs_new,
                ));
            }
        } else if !all_finite(&coefs_new) {
            return Err(Failure::with_coefs(
                GlmError::Diverged("non-finite coefficients".into()),
                coefs_new,
            ));
        }
        let dev_old = -cast::<T>(2.0) * eval.penalized;
        let dev_new = -cast::<T>(2.0) * eval_new.penalized;
        let rel = (dev_new - dev_old).abs() / (dev_old.abs() + cast::<T>(0.1));
        coefs = coefs_new;
        eval = eval_new;
        if rel < tol {
            return finish_multinomial(x, coefs, eval, ridge, iter);
        }
    }
    Err(Failure::with_coefs(
        GlmError::NotConverged {
            iterations: MAX_ITER,
        },
        coefs,
    ))
}

fn finish_multinomial<T: Scalar>(
    x: &DesignMatrix<T>,
    coefs: Matrix<T>,
    eval: SoftmaxEval<T>,
    ridge: Option<T>,
    iterations: usize,
) -> Result<GlmFit<T>, Failure<T>> {
    let (n, p) = (x.n(), x.p());
    let cm1 = coefs.rows();
    let dim = cm1 * p;
    // Information matrix at the optimum for standard errors.
    let mut info: Matrix<T> = Matrix::zeros(dim, dim);
    for i in 0..n {
        let row = x.values.row(i);
        for c in 0..cm1 {
            let pc = eval.probs[i * cm1 + c];
            for d in c..cm1 {
                let pd = eval.probs[i * cm1 + d];
                let wcd = if c == d { pc * (T::one() - pc) } else { -pc * pd };
                for j in 0..p {
                    let rj = row[j] * wcd;
                    for l in 0..p {
                        let v = info.get(c * p + j, d * p + l) + rj * row[l];
                        info.set(c * p + j, d * p + l, v);
                    }
                }
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            info.set(a, b, info.get(b, a));
        }
    }
    if let Some(lambda) = ridge {
        for c in 0..cm1 {
            for j in 1..p {
                let idx = c * p + j;
                info.set(idx, idx, info.get(idx, idx) + lambda);
            }
        }
    }
    let se = match cholesky_inverse(&info) {
        Some(inv) => {
            let mut se = Matrix::zeros(cm1, p);
            for c in 0..cm1 {
                for j in 0..p {
                    se.set(c, j, inv.get(c * p + j, c * p + j).sqrt());
                }
            }
            se
        }
        None => {
            return Err(Failure::with_coefs(
                GlmError::Diverged("information matrix singular at the optimum".into()),
                coefs,
            ))
        }
    };
    Ok(GlmFit {
        coefficients: coefs,
        std_errors: se,
        loglik: eval.loglik,
        d: cm1 * p,
        method: if ridge.is_some() {
            FitMethod::MultinomialRidge
        } else {
            FitMethod::MultinomialMl
        },
        converged: true,
        iterations,
        dropped_columns: Vec::new(),
        column_labels: x.column_labels.clone(),
    })
}

// ---------------------------------------------------------------------
// Rank reduction and the robustness ladder
// ---------------------------------------------------------------------

/// Restricts the design to a full-column-rank subset. Columns are scanned
/// left to right, so the intercept is never dropped and later-indexed
/// duplicates lose. Returns the reduced design and the dropped labels.
pub fn rank_reduce<T: Scalar>(x: &DesignMatrix<T>) -> (DesignMatrix<T>, Vec<String>) {
    let keep = independent_columns(&x.values);
    if keep.len() == x.p() {
        return (x.clone(), Vec::new());
    }
    let dropped: Vec<String> = (0..x.p())
        .filter(|j| !keep.contains(j))
        .map(|j| x.column_labels[j].clone())
        .collect();
    (x.restricted(&keep), dropped)
}

/// Fits one node with the full robustness ladder:
/// rank reduction → IRLS (or softmax) → Firth for diverged binomial fits
/// (ridge for diverged softmax fits) → sequential removal of the most
/// extreme predictor. Always returns finite coefficients or `Unfittable`.
pub fn fit_node_robust<T: Scalar>(
    x: &DesignMatrix<T>,
    y: &[T],
    fam: &FamilySpec,
) -> Result<GlmFit<T>, GlmError> {
    let (mut work, mut dropped) = rank_reduce(x);
    loop {
        // The fitters need strictly more rows than columns.
        while work.p() > 1 && work.n() <= work.p() {
            let last = work.p() - 1;
            dropped.push(work.column_labels[last].clone());
            let keep: Vec<usize> = (0..last).collect();
            work = work.restricted(&keep);
        }

        let primary = match fam.family {
            DistributionKind::Gaussian => fit_gaussian_inner(&work, y),
            DistributionKind::Binomial | DistributionKind::Poisson => {
                fit_irls_inner(&work, y, fam.family)
            }
            DistributionKind::Multinomial { levels } => {
                fit_multinomial_inner(&work, y, levels, None)
            }
        };

        let failure = match primary {
            Ok(mut fit) => {
                fit.dropped_columns = dropped;
                return Ok(fit);
            }
            Err(f) => {
                let retryable = matches!(
                    f.error,
                    GlmError::Diverged(_) | GlmError::NotConverged { .. }
                );
                match fam.family {
                    DistributionKind::Binomial if retryable => {
                        match fit_firth_inner(&work, y) {
                            Ok(mut fit) => {
                                fit.dropped_columns = dropped;
                                return Ok(fit);
                            }
                            Err(f2) => f2,
                        }
                    }
                    DistributionKind::Multinomial { levels } if retryable => {
                        match fit_multinomial_inner(&work, y, levels, Some(cast(RIDGE_LAMBDA))) {
                            Ok(mut fit) => {
                                fit.dropped_columns = dropped;
                                return Ok(fit);
                            }
                            Err(f2) => f2,
                        }
                    }
                    _ => f,
                }
            }
        };

        if work.p() == 1 {
            return Err(GlmError::Unfittable(failure.error.to_string()));
        }
        let drop_idx = pick_drop_column(&work, failure.last_coefs.as_ref());
        dropped.push(work.column_labels[drop_idx].clone());
        let keep: Vec<usize> = (0..work.p()).filter(|&j| j != drop_idx).collect();
        work = work.restricted(&keep);
    }
}

/// Drops the non-intercept predictor with the largest |coefficient| at
/// failure; without a usable iterate, the last column goes.
fn pick_drop_column<T: Scalar>(work: &DesignMatrix<T>, coefs: Option<&Matrix<T>>) -> usize {
    let p = work.p();
    match coefs {
        Some(m) if m.cols() == p => {
            let mut best = p - 1;
            let mut best_mag = T::neg_infinity();
            for j in 1..p {
                let mag = (0..m.rows())
                    .map(|r| m.get(r, j).abs())
                    .fold(T::zero(), |a, b| if b.is_finite() { a.max(b) } else { T::infinity() });
                // Ties go to the later column, matching the rank-reduce
                // convention of dropping later-indexed candidates.
                if mag >= best_mag {
                    best_mag = mag;
                    best = j;
                }
            }
            best
        }
        _ => p - 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_design, Dataset, INTERCEPT_LABEL};
    use approx::assert_abs_diff_eq;

    fn intercept_only(n: usize) -> DesignMatrix<f64> {
        DesignMatrix {
            values: Matrix::from_vec(n, 1, vec![1.0; n]),
            column_labels: vec![INTERCEPT_LABEL.to_string()],
            source_terms: vec![None],
        }
    }

    fn design_with_cols(cols: Vec<Vec<f64>>, labels: Vec<&str>) -> DesignMatrix<f64> {
        let n = cols[0].len();
        let p = cols.len();
        let mut m = Matrix::zeros(n, p);
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        DesignMatrix {
            values: m,
            column_labels: labels.iter().map(|s| s.to_string()).collect(),
            source_terms: labels.iter().map(|s| Some(s.to_string())).collect(),
        }
    }

    #[test]
    fn gaussian_intercept_only_closed_form() {
        let x = intercept_only(3);
        let y = vec![1.0, 2.0, 3.0];
        let fit = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Gaussian)).unwrap();
        assert_abs_diff_eq!(fit.coefficients.get(0, 0), 2.0, epsilon = 1e-12);
        let sigma2: f64 = 2.0 / 3.0;
        let expect = -1.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        assert_abs_diff_eq!(fit.loglik, expect, epsilon = 1e-12);
        assert_eq!(fit.d, 2);
        assert_eq!(fit.method, FitMethod::Irls);
    }

    #[test]
    fn binomial_intercept_only_logit_of_proportion() {
        let x = intercept_only(4);
        let y = vec![0.0, 1.0, 1.0, 1.0];
        let fit = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Binomial)).unwrap();
        assert_abs_diff_eq!(fit.coefficients.get(0, 0), 3.0f64.ln(), epsilon = 1e-7);
        assert_eq!(fit.d, 1);
        assert!(fit.loglik <= 0.0);
    }

    #[test]
    fn poisson_intercept_only_log_mean() {
        let x = intercept_only(5);
        let y = vec![1.0, 3.0, 2.0, 0.0, 4.0];
        let fit = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Poisson)).unwrap();
        assert_abs_diff_eq!(fit.coefficients.get(0, 0), 2.0f64.ln(), epsilon = 1e-7);
        // Check the log-likelihood value directly: Σ y ln μ − μ − ln y!.
        let mu = 2.0f64;
        let expect: f64 = y
            .iter()
            .map(|&yi| yi * mu.ln() - mu - statrs::function::gamma::ln_gamma(yi + 1.0))
            .sum();
        assert_abs_diff_eq!(fit.loglik, expect, epsilon = 1e-7);
    }

    #[test]
    fn gaussian_zero_variance_fails() {
        let x = intercept_only(4);
        let y = vec![5.0; 4];
        let err = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Gaussian)).unwrap_err();
        assert!(matches!(err, GlmError::Diverged(_)));
        // And the ladder turns it into Unfittable.
        let err =
            fit_node_robust(&x, &y, &FamilySpec::new(DistributionKind::Gaussian)).unwrap_err();
        assert!(matches!(err, GlmError::Unfittable(_)));
    }

    #[test]
    fn separated_binomial_diverges_then_firth_matches_half_corrected_table() {
        // x = 0 → five zeros, x = 1 → five ones: complete separation.
        let mut xcol = vec![0.0; 5];
        xcol.extend(vec![1.0; 5]);
        let mut y = vec![0.0; 5];
        y.extend(vec![1.0; 5]);
        let x = design_with_cols(vec![vec![1.0; 10], xcol], vec![INTERCEPT_LABEL, "x"]);
        let err = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Binomial)).unwrap_err();
        assert!(matches!(err, GlmError::Diverged(_)), "{err}");

        let fit = fit_logistic_firth(&x, &y).unwrap();
        // ½-corrected log odds ratio: ln((5.5·5.5)/(0.5·0.5)) = ln 121.
        assert_abs_diff_eq!(fit.coefficients.get(0, 1), 121.0f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(
            fit.coefficients.get(0, 0),
            (0.5f64 / 5.5).ln(),
            epsilon = 1e-6
        );
        assert_eq!(fit.method, FitMethod::Firth);
    }

    #[test]
    fn firth_intercept_only_all_ones() {
        let x = intercept_only(4);
        let y = vec![1.0; 4];
        let fit = fit_logistic_firth(&x, &y).unwrap();
        // p̂ = (4 + ½)/(4 + 1) = 0.9 → logit = ln 9.
        assert_abs_diff_eq!(fit.coefficients.get(0, 0), 9.0f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn multinomial_intercept_only_log_proportions() {
        let x = intercept_only(100);
        let mut y = vec![0.0; 10];
        y.extend(vec![1.0; 20]);
        y.extend(vec![2.0; 70]);
        let fit = fit_multinomial(&x, &y, 3).unwrap();
        assert_abs_diff_eq!(fit.coefficients.get(0, 0), 2.0f64.ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(fit.coefficients.get(1, 0), 7.0f64.ln(), epsilon = 1e-8);
        assert_eq!(fit.d, 2);
        assert!(fit.loglik <= 0.0);
    }

    #[test]
    fn multinomial_unobserved_level_rejected() {
        let x = intercept_only(6);
        let y = vec![0.0, 0.0, 2.0, 2.0, 0.0, 2.0]; // level 1 missing
        let err = fit_multinomial(&x, &y, 3).unwrap_err();
        assert!(matches!(err, GlmError::BadResponse(_)));
    }

    #[test]
    fn rank_reduce_drops_later_duplicate() {
        let xcol = vec![0.5, 1.0, -1.0, 2.0];
        let x = design_with_cols(
            vec![vec![1.0; 4], xcol.clone(), xcol],
            vec![INTERCEPT_LABEL, "a", "b"],
        );
        let (reduced, dropped) = rank_reduce(&x);
        assert_eq!(reduced.p(), 2);
        assert_eq!(dropped, vec!["b".to_string()]);
    }

    #[test]
    fn rank_reduce_never_drops_intercept() {
        // Second column is 2× the intercept.
        let x = design_with_cols(
            vec![vec![1.0; 4], vec![2.0; 4]],
            vec![INTERCEPT_LABEL, "c"],
        );
        let (reduced, dropped) = rank_reduce(&x);
        assert_eq!(reduced.column_labels, vec![INTERCEPT_LABEL.to_string()]);
        assert_eq!(dropped, vec!["c".to_string()]);
    }

    #[test]
    fn rank_reduce_identity_on_full_rank() {
        let x = design_with_cols(
            vec![vec![1.0; 4], vec![0.5, 1.0, -1.0, 2.0]],
            vec![INTERCEPT_LABEL, "a"],
        );
        let (reduced, dropped) = rank_reduce(&x);
        assert_eq!(reduced, x);
        assert!(dropped.is_empty());
    }

    #[test]
    fn robust_ladder_clean_gaussian_is_plain_irls() {
        let x = design_with_cols(
            vec![vec![1.0; 6], vec![0.1, 0.9, 1.7, -0.6, 0.4, 1.2]],
            vec![INTERCEPT_LABEL, "a"],
        );
        let y = vec![0.3, 2.0, 3.1, -1.4, 1.0, 2.6];
        let fit = fit_node_robust(&x, &y, &FamilySpec::new(DistributionKind::Gaussian)).unwrap();
        assert_eq!(fit.method_label(), "irls");
        assert!(fit.dropped_columns.is_empty());
    }

    #[test]
    fn robust_ladder_separation_goes_firth() {
        // Two clusters with a clear gap; the threshold separates exactly.
        let mut xcol: Vec<f64> = (0..15).map(|i| -1.0 + 0.05 * i as f64).collect();
        xcol.extend((0..15).map(|i| 0.3 + 0.05 * i as f64));
        let n = xcol.len();
        let y: Vec<f64> = xcol.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = design_with_cols(vec![vec![1.0; n], xcol], vec![INTERCEPT_LABEL, "x"]);
        let fit = fit_node_robust(&x, &y, &FamilySpec::new(DistributionKind::Binomial)).unwrap();
        assert_eq!(fit.method, FitMethod::Firth);
        assert!(fit.coefficients.row(0).iter().all(|v| v.is_finite()));
        assert!(fit.coefficients.row(0).iter().all(|v| v.abs() < 20.0));
    }

    #[test]
    fn robust_ladder_duplicate_plus_separation() {
        let mut xcol: Vec<f64> = (0..15).map(|i| -1.0 + 0.05 * i as f64).collect();
        xcol.extend((0..15).map(|i| 0.3 + 0.05 * i as f64));
        let n = xcol.len();
        let y: Vec<f64> = xcol.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = design_with_cols(
            vec![vec![1.0; n], xcol.clone(), xcol],
            vec![INTERCEPT_LABEL, "x", "x_dup"],
        );
        let fit = fit_node_robust(&x, &y, &FamilySpec::new(DistributionKind::Binomial)).unwrap();
        assert_eq!(fit.method_label(), "rank_reduced+firth");
        assert_eq!(fit.dropped_columns, vec!["x_dup".to_string()]);
    }

    #[test]
    fn multinomial_collapses_to_binomial_at_two_levels() {
        let ds = Dataset::new(
            vec!["y".into(), "x".into()],
            vec![
                vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
                vec![-1.1, 0.8, -0.4, 1.6, -0.3, 0.9, 1.1, 0.2],
            ],
            vec![DistributionKind::Binomial, DistributionKind::Gaussian],
        )
        .unwrap();
        let (x, y) = encode_design(&ds, 0, &[1], &[]).unwrap();
        let logit = fit_irls(&x, &y, &FamilySpec::new(DistributionKind::Binomial)).unwrap();
        let soft = fit_multinomial(&x, &y, 2).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(
                soft.coefficients.get(0, j),
                logit.coefficients.get(0, j),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn d_accounting_by_family() {
        let n = 40;
        let xcol: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = design_with_cols(vec![vec![1.0; n], xcol.clone()], vec![INTERCEPT_LABEL, "x"]);

        let yg: Vec<f64> = xcol.iter().enumerate().map(|(i, &v)| v + (i % 3) as f64).collect();
        let fit = fit_node_robust(&x, &yg, &FamilySpec::new(DistributionKind::Gaussian)).unwrap();
        assert_eq!(fit.d, 3); // p + 1

        let yb: Vec<f64> = (0..n).map(|i| ((i * 7) % 2) as f64).collect();
        let fit = fit_node_robust(&x, &yb, &FamilySpec::new(DistributionKind::Binomial)).unwrap();
        assert_eq!(fit.d, 2); // p

        let yp: Vec<f64> = (0..n).map(|i| ((i * 3) % 5) as f64).collect();
        let fit = fit_node_robust(&x, &yp, &FamilySpec::new(DistributionKind::Poisson)).unwrap();
        assert_eq!(fit.d, 2);

        let ym: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let fit = fit_node_robust(
            &x,
            &ym,
            &FamilySpec::new(DistributionKind::Multinomial { levels: 3 }),
        )
        .unwrap();
        assert_eq!(fit.d, 4); // (C−1)·p
    }
}
