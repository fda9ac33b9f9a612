//! Dense reference constructions for the MA(q) covariance algebra.
//!
//! These build `Σ_T`, `Θ_T` and `Θ_{*;T−q}` entry by entry and cost
//! `O(T²)` to `O(T³)`. They exist to check the implicit kernels in
//! [`crate::ma_kernel`] and are never called on an estimation path.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Result, VarsmaError};
use crate::ma_kernel::{apply_theta_inverse, ThetaPoly, WoodburyKernel};

/// `(γ₀, …, γ_q)` with `γ_l = Σ_{j=0..q−l} θ_j θ_{j+l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovSeq {
    pub gammas: Vec<f64>,
}

impl AutocovSeq {
    pub fn lag(&self, l: usize) -> f64 {
        self.gammas.get(l).copied().unwrap_or(0.0)
    }
}

pub fn autocov_gamma(theta: &ThetaPoly) -> AutocovSeq {
    let q = theta.q();
    let gammas = (0..=q)
        .map(|l| {
            (0..=q - l)
                .map(|j| theta.coeff(j) * theta.coeff(j + l))
                .sum()
        })
        .collect();
    AutocovSeq { gammas }
}

/// Banded symmetric Toeplitz `Σ_T` with `(i, j) = γ_{|i−j|}`.
pub fn build_sigma_dense(theta: &ThetaPoly, horizon: usize) -> DMatrix<f64> {
    let gamma = autocov_gamma(theta);
    DMatrix::from_fn(horizon, horizon, |i, j| gamma.lag(i.abs_diff(j)))
}

/// Lower-triangular banded Toeplitz `Θ_T`.
pub fn build_theta_t_dense(theta: &ThetaPoly, horizon: usize) -> Result<DMatrix<f64>> {
    check(theta, horizon)?;
    Ok(DMatrix::from_fn(horizon, horizon, |i, j| {
        if i >= j {
            theta.coeff(i - j)
        } else {
            0.0
        }
    }))
}

/// `Θ_{*;T−q}`: row `r` holds `θ_q, θ_{q−1}, …` starting at column `r`.
pub fn build_theta_star_dense(theta: &ThetaPoly, horizon: usize) -> Result<DMatrix<f64>> {
    check(theta, horizon)?;
    let q = theta.q();
    Ok(DMatrix::from_fn(horizon, q, |i, j| {
        if i < q && j >= i {
            theta.coeff(q - (j - i))
        } else {
            0.0
        }
    }))
}

fn check(theta: &ThetaPoly, horizon: usize) -> Result<()> {
    if horizon < theta.q() {
        return Err(VarsmaError::Dimension(format!(
            "horizon T = {horizon} is shorter than MA order q = {}",
            theta.q()
        )));
    }
    Ok(())
}

/// Dense `log det` through Cholesky.
pub fn dense_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| VarsmaError::Numerical("matrix is not positive definite".into()))?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>())
}

/// Worst deviations found by [`verify_prop1`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Report {
    /// `Σ_T` against `Θ_TΘ_Tᵀ + Θ_{*;T−q}Θ_{*;T−q}ᵀ`, relative to `‖Σ_T‖∞`.
    pub presample_split: f64,
    /// `Σ_T` against `Θ_T(I + λλᵀ)Θ_Tᵀ`, relative to `‖Σ_T‖∞`.
    pub lambda_factor: f64,
    /// `Σ_T⁻¹` against `Θ_T⁻ᵀ K Θ_T⁻¹`, relative to `‖Σ_T⁻¹‖∞`.
    pub inverse: f64,
    /// `|log det(λᵀλ + I_q) − log det Σ_T|`.
    pub log_det: f64,
}

impl Prop1Report {
    pub fn max(&self) -> f64 {
        self.presample_split
            .max(self.lambda_factor)
            .max(self.inverse)
            .max(self.log_det)
    }
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Checks the covariance factorizations of the implicit kernel against the
/// dense `Σ_T` for one `(θ, T)`.
pub fn verify_prop1(theta: &ThetaPoly, horizon: usize) -> Result<Prop1Report> {
    let sigma = build_sigma_dense(theta, horizon);
    let theta_t = build_theta_t_dense(theta, horizon)?;
    let star = build_theta_star_dense(theta, horizon)?;
    let scale = inf_norm(&sigma);

    let split = &theta_t * theta_t.transpose() + &star * star.transpose();
    let presample_split = (&split - &sigma).amax() / scale;

    let kernel = WoodburyKernel::new(theta, horizon)?;
    let lambda = kernel.lambda().entries();
    let eye = DMatrix::<f64>::identity(horizon, horizon);
    let factored = &theta_t * (&eye + lambda * lambda.transpose()) * theta_t.transpose();
    let lambda_factor = (&factored - &sigma).amax() / scale;

    let sigma_inv = Cholesky::new(sigma.clone())
        .ok_or_else(|| VarsmaError::Numerical("dense Sigma_T is not positive definite".into()))?
        .inverse();
    let theta_inv = apply_theta_inverse(theta, &eye);
    let implicit_inv = theta_inv.transpose() * kernel.apply_k(&theta_inv)?;
    let inverse = (&implicit_inv - &sigma_inv).amax() / inf_norm(&sigma_inv);

    let log_det = (kernel.log_det_sigma() - dense_log_det(&sigma)?).abs();

    Ok(Prop1Report {
        presample_split,
        lambda_factor,
        inverse,
        log_det,
    })
}
