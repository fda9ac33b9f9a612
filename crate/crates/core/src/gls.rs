//! Closed-form AR solution and concentrated likelihood for a fixed `θ`.
//!
//! For a fixed MA polynomial the model
//! `X_t = μ + Σ X_{t−i}Φ_i + θ(L)ε_t` is a GLS regression of
//! `X_θ = Θ_T⁻¹X` on `X_{θ,lag} = Θ_T⁻¹[1 | LX | … | L^pX]` with weight
//! `K = (I + λλᵀ)⁻¹`, conditional on the first `p` rows only. The
//! likelihood then concentrates to a function of `θ` alone:
//!
//! ```text
//! NLLK(θ) = Tk/2·log 2π + T/2·log det Ω_opt(θ) + k/2·log det(λᵀλ + I_q) + Tk/2
//! ```
//!
//! Its gradient uses the envelope property at the GLS optimum, so only the
//! transformed residuals and `λ` are differentiated.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Result, VarsmaError};
use crate::ma_kernel::{
    apply_dtheta_inverse, apply_theta_inverse, theta_star, theta_star_derivative, ThetaPoly,
    WoodburyKernel,
};

/// Scaled condition number above which the regressor Gram is rejected.
pub const MAX_GRAM_CONDITION: f64 = 1e12;
/// Relative eigenvalue floor applied to `Ω_opt` before taking its log-determinant.
pub const OMEGA_EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub trend: bool,
}

impl ModelSpec {
    pub fn new(k: usize, p: usize, q: usize, trend: bool) -> Result<Self> {
        if k == 0 {
            return Err(VarsmaError::Validation(
                "series count k must be at least 1".into(),
            ));
        }
        Ok(Self { k, p, q, trend })
    }

    /// Number of regressors `r = [trend] + p·k`.
    pub fn regressors(&self) -> usize {
        usize::from(self.trend) + self.p * self.k
    }

    /// Number of free parameters `q + r·k + k(k+1)/2`.
    pub fn parameter_count(&self) -> usize {
        self.q + self.regressors() * self.k + self.k * (self.k + 1) / 2
    }

    fn check(&self, data: &SeriesMatrix, theta: Option<&ThetaPoly>) -> Result<usize> {
        let horizon = self.check_shape(data, theta)?;
        if horizon <= self.regressors() {
            return Err(VarsmaError::Dimension(format!(
                "effective sample T = {horizon} must exceed the {} regressors",
                self.regressors()
            )));
        }
        Ok(horizon)
    }

    /// Shape checks needed to build the design, without the regression rank condition.
    fn check_shape(&self, data: &SeriesMatrix, theta: Option<&ThetaPoly>) -> Result<usize> {
        if data.k() != self.k {
            return Err(VarsmaError::Dimension(format!(
                "model has k = {} series but data has {} columns",
                self.k,
                data.k()
            )));
        }
        if let Some(theta) = theta {
            if theta.q() != self.q {
                return Err(VarsmaError::Dimension(format!(
                    "model has q = {} but theta has {} coefficients",
                    self.q,
                    theta.q()
                )));
            }
        }
        let n = data.rows();
        if n <= self.p {
            return Err(VarsmaError::Dimension(format!(
                "{n} rows cannot condition on p = {} presample rows",
                self.p
            )));
        }
        let horizon = n - self.p;
        if horizon < self.q {
            return Err(VarsmaError::Dimension(format!(
                "effective sample T = {horizon} is shorter than q = {}",
                self.q
            )));
        }
        Ok(horizon)
    }
}

/// Observation matrix with rows indexed by time and one column per series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    values: DMatrix<f64>,
}

impl SeriesMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(VarsmaError::Validation("series matrix is empty".into()));
        }
        let (rows, cols) = values.shape();
        for c in 0..cols {
            for r in 0..rows {
                let v = values[(r, c)];
                if !v.is_finite() {
                    return Err(VarsmaError::Validation(format!(
                        "non-finite value {v} at row {}, column {}",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != k) {
            return Err(VarsmaError::Validation(format!(
                "row {} has {} columns, expected {k}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c]))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

/// Untransformed response `X` (`T×k`) and regressors `[1 | LX | … | L^pX]` (`T×r`).
pub fn lagged_design(
    spec: &ModelSpec,
    data: &SeriesMatrix,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let horizon = spec.check_shape(data, None)?;
    let x_hat = data.values();
    let (p, k) = (spec.p, spec.k);
    let response = x_hat.rows(p, horizon).into_owned();
    let mut lagged = DMatrix::zeros(horizon, spec.regressors());
    let mut col = 0;
    if spec.trend {
        lagged.column_mut(0).fill(1.0);
        col = 1;
    }
    for i in 1..=p {
        lagged
            .columns_mut(col, k)
            .copy_from(&x_hat.rows(p - i, horizon));
        col += k;
    }
    Ok((response, lagged))
}

/// `X_θ` and `X_{θ,lag}`, both filtered by `Θ_T⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub x_theta: DMatrix<f64>,
    pub x_theta_lag: DMatrix<f64>,
}

pub fn transform_design(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
) -> Result<DesignBundle> {
    spec.check_shape(data, Some(theta))?;
    let (x, x_lag) = lagged_design(spec, data)?;
    Ok(DesignBundle {
        x_theta: apply_theta_inverse(theta, &x),
        x_theta_lag: apply_theta_inverse(theta, &x_lag),
    })
}

/// GLS solution at a fixed `θ`.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub theta: ThetaPoly,
    /// Intercept row, present when the model has a trend term.
    pub mu: Option<Vec<f64>>,
    /// `Φ_1..Φ_p`, each `k×k`, acting on the right of the row `X_{t−i}`.
    pub phis: Vec<DMatrix<f64>>,
    pub omega: DMatrix<f64>,
    pub nllk: f64,
    /// Stacked `(μ; Φ_1; …; Φ_p)`, `r×k`.
    pub coefficients: DMatrix<f64>,
    /// `log det(λᵀλ + I_q) = log det Σ_T`.
    pub log_det_sigma: f64,
    pub log_det_omega: f64,
    /// Condition number of the column-scaled regressor Gram `X_{θ,lag}ᵀKX_{θ,lag}`.
    pub gram_condition: f64,
    /// Set when `Ω_opt` needed its eigenvalues floored.
    pub omega_floored: bool,
    pub horizon: usize,
}

struct Evaluation {
    fit: GlsFit,
    kernel: WoodburyKernel,
    /// Untransformed residuals `Z`.
    z: DMatrix<f64>,
    /// `Θ_T⁻¹Z`.
    r: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
}

fn evaluate(spec: &ModelSpec, data: &SeriesMatrix, theta: &ThetaPoly) -> Result<Evaluation> {
    let horizon = spec.check(data, Some(theta))?;
    let (x, x_lag) = lagged_design(spec, data)?;
    let y = apply_theta_inverse(theta, &x);
    let w = apply_theta_inverse(theta, &x_lag);
    let kernel = WoodburyKernel::new(theta, horizon)?;

    let rcount = spec.regressors();
    let (coefficients, gram_condition) = if rcount == 0 {
        (DMatrix::zeros(0, spec.k), 1.0)
    } else {
        let kw = kernel.apply_k(&w)?;
        let gram = w.transpose() * &kw;
        let gram = (&gram + gram.transpose()) * 0.5;
        let condition = scaled_condition(&gram);
        if !(condition.is_finite() && condition <= MAX_GRAM_CONDITION) {
            return Err(VarsmaError::Collinear { condition });
        }
        let chol = Cholesky::new(gram).ok_or(VarsmaError::Collinear { condition })?;
        (chol.solve(&(kw.transpose() * &y)), condition)
    };

    let z = &x - &x_lag * &coefficients;
    let r = &y - &w * &coefficients;
    let kr = kernel.apply_k(&r)?;
    let s = r.transpose() * kr;
    let t = horizon as f64;
    let omega = (&s + s.transpose()) * (0.5 / t);

    let trace = omega.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(VarsmaError::DegenerateFit);
    }
    let eig = SymmetricEigen::new(omega.clone());
    let floor = OMEGA_EIGEN_FLOOR * trace;
    let omega_floored = eig.eigenvalues.iter().any(|&ev| ev < floor);
    let floored: Vec<f64> = eig.eigenvalues.iter().map(|&ev| ev.max(floor)).collect();
    let log_det_omega: f64 = floored.iter().map(|ev| ev.ln()).sum();
    if !log_det_omega.is_finite() {
        return Err(VarsmaError::DegenerateFit);
    }
    let inv_diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        floored.len(),
        floored.iter().map(|ev| 1.0 / ev),
    ));
    let omega_inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();

    let k = spec.k as f64;
    let log_det_sigma = kernel.log_det_sigma();
    let nllk = 0.5 * t * k * (2.0 * PI).ln()
        + 0.5 * t * log_det_omega
        + 0.5 * k * log_det_sigma
        + 0.5 * t * k;

    let (mu, phis) = unpack(spec, &coefficients);
    Ok(Evaluation {
        fit: GlsFit {
            theta: theta.clone(),
            mu,
            phis,
            omega,
            nllk,
            coefficients,
            log_det_sigma,
            log_det_omega,
            gram_condition,
            omega_floored,
            horizon,
        },
        kernel,
        z,
        r,
        omega_inv,
    })
}

fn scaled_condition(gram: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = gram
        .diagonal()
        .iter()
        .map(|v| 1.0 / v.abs().sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let scaled = DMatrix::from_fn(gram.nrows(), gram.ncols(), |i, j| {
        gram[(i, j)] * d[i] * d[j]
    });
    let eig = SymmetricEigen::new(scaled);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn unpack(spec: &ModelSpec, b: &DMatrix<f64>) -> (Option<Vec<f64>>, Vec<DMatrix<f64>>) {
    let k = spec.k;
    let offset = usize::from(spec.trend);
    let mu = spec.trend.then(|| b.row(0).iter().copied().collect());
    let phis = (0..spec.p)
        .map(|i| b.rows(offset + i * k, k).into_owned())
        .collect();
    (mu, phis)
}

pub fn gls_fit(spec: &ModelSpec, data: &SeriesMatrix, theta: &ThetaPoly) -> Result<GlsFit> {
    Ok(evaluate(spec, data, theta)?.fit)
}

pub fn concentrated_nllk(spec: &ModelSpec, data: &SeriesMatrix, theta: &ThetaPoly) -> Result<f64> {
    Ok(evaluate(spec, data, theta)?.fit.nllk)
}

/// `Z = X − 1μ − Σ L^iX Φ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZResiduals {
    pub values: DMatrix<f64>,
}

pub fn residuals(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    mu: Option<&[f64]>,
    phis: &[DMatrix<f64>],
) -> Result<ZResiduals> {
    let (x, x_lag) = lagged_design(spec, data)?;
    let b = stack(spec, mu, phis)?;
    Ok(ZResiduals {
        values: x - x_lag * b,
    })
}

fn stack(spec: &ModelSpec, mu: Option<&[f64]>, phis: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let k = spec.k;
    if phis.len() != spec.p || phis.iter().any(|m| m.shape() != (k, k)) {
        return Err(VarsmaError::Dimension(format!(
            "expected {} AR matrices of size {k}x{k}",
            spec.p
        )));
    }
    let mut b = DMatrix::zeros(spec.regressors(), k);
    let mut row = 0;
    match (spec.trend, mu) {
        (true, Some(mu)) if mu.len() == k => {
            b.row_mut(0).iter_mut().zip(mu).for_each(|(d, s)| *d = *s);
            row = 1;
        }
        (false, None) => {}
        _ => {
            return Err(VarsmaError::Dimension(
                "intercept must be given exactly when the model has a trend term".into(),
            ))
        }
    }
    for phi in phis {
        b.rows_mut(row, k).copy_from(phi);
        row += k;
    }
    Ok(b)
}

/// Conditional negative log-likelihood at arbitrary `(θ, μ, Φ, Ω)`.
pub fn full_nllk(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
    mu: Option<&[f64]>,
    phis: &[DMatrix<f64>],
    omega: &DMatrix<f64>,
) -> Result<f64> {
    let horizon = spec.check(data, Some(theta))?;
    if omega.shape() != (spec.k, spec.k) {
        return Err(VarsmaError::Dimension(format!(
            "omega must be {k}x{k}",
            k = spec.k
        )));
    }
    if (omega - omega.transpose()).amax() > 1e-12 * omega.amax().max(1.0) {
        return Err(VarsmaError::Validation("omega is not symmetric".into()));
    }
    let chol = Cholesky::new(omega.clone())
        .ok_or_else(|| VarsmaError::Validation("omega is not positive definite".into()))?;
    let log_det_omega = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();

    let z = residuals(spec, data, mu, phis)?.values;
    let kernel = WoodburyKernel::new(theta, horizon)?;
    let r = apply_theta_inverse(theta, &z);
    let s = r.transpose() * kernel.apply_k(&r)?;
    let quad = chol.solve(&s).trace();

    let t = horizon as f64;
    let k = spec.k as f64;
    Ok(0.5 * t * k * (2.0 * PI).ln()
        + 0.5 * t * log_det_omega
        + 0.5 * k * kernel.log_det_sigma()
        + 0.5 * quad)
}

pub fn nllk_grad(spec: &ModelSpec, data: &SeriesMatrix, theta: &ThetaPoly) -> Result<Vec<f64>> {
    Ok(nllk_and_grad(spec, data, theta)?.1)
}

/// Concentrated fit and its gradient in `(θ₁, …, θ_q)` from one evaluation.
pub fn nllk_and_grad(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
) -> Result<(GlsFit, Vec<f64>)> {
    let ev = evaluate(spec, data, theta)?;
    let q = theta.q();
    if q == 0 {
        return Ok((ev.fit, Vec::new()));
    }
    let horizon = ev.fit.horizon;
    let k = spec.k as f64;
    let lambda = ev.kernel.lambda().entries();
    let gram = ev.kernel.gram();
    let gram_inv = gram.inverse();
    let kr = ev.kernel.apply_k(&ev.r)?;
    let v = gram.solve(&(lambda.transpose() * &ev.r));
    let star = theta_star(theta, horizon)?;

    let mut grad = Vec::with_capacity(q);
    for i in 1..=q {
        let d_lambda = apply_dtheta_inverse(theta, i, &star)?
            + apply_theta_inverse(theta, &theta_star_derivative(q, i, horizon)?);
        let lt_dl = lambda.transpose() * &d_lambda;
        let d_gram = &lt_dl + lt_dl.transpose();
        let d_r = apply_dtheta_inverse(theta, i, &ev.z)?;
        let proj = d_lambda.transpose() * &ev.r;

        let cross = d_r.transpose() * &kr;
        let d_s = &cross + cross.transpose() - proj.transpose() * &v - v.transpose() * &proj
            + v.transpose() * &d_gram * &v;

        let omega_term = 0.5 * (&ev.omega_inv * d_s).trace();
        let sigma_term = 0.5 * k * (&gram_inv * d_gram).trace();
        grad.push(omega_term + sigma_term);
    }
    Ok((ev.fit, grad))
}
