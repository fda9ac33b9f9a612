//! Banded lower-triangular Toeplitz algebra for a scalar MA polynomial.
//!
//! Everything here is built from `Θ_T`, the `T×T` lower-triangular Toeplitz
//! matrix with first column `(1, θ₁, …, θ_q, 0, …)`. Its inverse is applied by
//! back-substitution (truncated deconvolution by `θ(L)⁻¹`), and the GLS
//! weight `K = (I + λλᵀ)⁻¹` is applied through the `q×q` Woodbury system
//! `G = λᵀλ + I_q`. Neither `Θ_T⁻¹` nor `K` is ever formed densely.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Result, VarsmaError};

/// Scalar MA polynomial `θ(L) = 1 + θ₁L + … + θ_qL^q`.
///
/// The constant coefficient is implicit. Trailing zeros are kept, so the
/// order `q` is always the length the caller supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPoly {
    coeffs: Vec<f64>,
}

impl ThetaPoly {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(pos) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(VarsmaError::Validation(format!(
                "MA coefficient theta_{} is not finite ({})",
                pos + 1,
                coeffs[pos]
            )));
        }
        Ok(Self { coeffs })
    }

    /// The polynomial `1 + 0·L + … + 0·L^q`.
    pub fn zeros(q: usize) -> Self {
        Self {
            coeffs: vec![0.0; q],
        }
    }

    pub fn q(&self) -> usize {
        self.coeffs.len()
    }

    /// `(θ₁, …, θ_q)`.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `L^j`, with `θ₀ = 1` and zero beyond `q`.
    pub fn coeff(&self, j: usize) -> f64 {
        match j {
            0 => 1.0,
            j if j <= self.coeffs.len() => self.coeffs[j - 1],
            _ => 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }
}

/// Builds a [`ThetaPoly`] from `(θ₁, …, θ_q)`.
pub fn make_theta(coeffs: &[f64]) -> Result<ThetaPoly> {
    ThetaPoly::new(coeffs.to_vec())
}

/// Leading coefficients of the power series `θ(L)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiWeights(Vec<f64>);

impl PsiWeights {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// First `n` coefficients of `θ(L)⁻¹` by the recursion
/// `ψ_t = −Σ_{j=1..min(t,q)} θ_j ψ_{t−j}`.
pub fn psi_weights(theta: &ThetaPoly, n: usize) -> PsiWeights {
    let q = theta.q();
    let mut psi = vec![0.0; n];
    if n == 0 {
        return PsiWeights(psi);
    }
    psi[0] = 1.0;
    for t in 1..n {
        let mut acc = 0.0;
        for j in 1..=t.min(q) {
            acc -= theta.coeffs[j - 1] * psi[t - j];
        }
        psi[t] = acc;
    }
    PsiWeights(psi)
}

/// `Θ_T⁻¹·M` by back-substitution down each column; `T = m.nrows()`.
pub fn apply_theta_inverse(theta: &ThetaPoly, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    theta_inverse_in_place(theta, &mut out);
    out
}

fn theta_inverse_in_place(theta: &ThetaPoly, out: &mut DMatrix<f64>) {
    let q = theta.q();
    if q == 0 {
        return;
    }
    let rows = out.nrows();
    for mut col in out.column_iter_mut() {
        for t in 1..rows {
            let mut acc = col[t];
            for j in 1..=t.min(q) {
                acc -= theta.coeffs[j - 1] * col[t - j];
            }
            col[t] = acc;
        }
    }
}

/// Shifts rows down by `lag`, filling the top rows with zeros (`L^lag`).
pub(crate) fn shift_down(m: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut out = DMatrix::zeros(rows, cols);
    if lag < rows {
        out.rows_mut(lag, rows - lag)
            .copy_from(&m.rows(0, rows - lag));
    }
    out
}

/// `Θ_{*;T−q}`: the `T×q` presample block whose top `q×q` part is the
/// upper-triangular `Θ_*` with `(r, c) = θ_{q−c+r}` for `c ≥ r`.
pub fn theta_star(theta: &ThetaPoly, horizon: usize) -> Result<DMatrix<f64>> {
    let q = theta.q();
    check_horizon(q, horizon)?;
    let mut star = DMatrix::zeros(horizon, q);
    for r in 0..q {
        for c in r..q {
            star[(r, c)] = theta.coeff(q - c + r);
        }
    }
    Ok(star)
}

/// `∂Θ_{*;T−q}/∂θ_i`: ones where `q − c + r = i`, zeros elsewhere.
pub fn theta_star_derivative(q: usize, i: usize, horizon: usize) -> Result<DMatrix<f64>> {
    check_horizon(q, horizon)?;
    check_index(q, i)?;
    let mut d = DMatrix::zeros(horizon, q);
    for r in 0..q {
        let c = q + r - i;
        if c >= r && c < q {
            d[(r, c)] = 1.0;
        }
    }
    Ok(d)
}

fn check_horizon(q: usize, horizon: usize) -> Result<()> {
    if horizon < q {
        return Err(VarsmaError::Dimension(format!(
            "horizon T = {horizon} is shorter than MA order q = {q}"
        )));
    }
    Ok(())
}

fn check_index(q: usize, i: usize) -> Result<()> {
    if i == 0 || i > q {
        return Err(VarsmaError::Validation(format!(
            "coefficient index {i} outside 1..={q}"
        )));
    }
    Ok(())
}

/// `λ = Θ_T⁻¹Θ_{*;T−q}`, shape `T×q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMatrix {
    entries: DMatrix<f64>,
}

impl LambdaMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn horizon(&self) -> usize {
        self.entries.nrows()
    }

    pub fn q(&self) -> usize {
        self.entries.ncols()
    }
}

pub fn build_lambda(theta: &ThetaPoly, horizon: usize) -> Result<LambdaMatrix> {
    let mut entries = theta_star(theta, horizon)?;
    theta_inverse_in_place(theta, &mut entries);
    Ok(LambdaMatrix { entries })
}

/// `G = λᵀλ + I_q` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SmallGram {
    gram: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl SmallGram {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `G⁻¹·B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(chol) => chol.solve(b),
            None => b.clone(),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.chol {
            Some(chol) => chol.inverse(),
            None => DMatrix::zeros(0, 0),
        }
    }

    pub fn log_det(&self) -> f64 {
        match &self.chol {
            Some(chol) => {
                2.0 * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>()
            }
            None => 0.0,
        }
    }
}

pub fn small_gram(lambda: &LambdaMatrix) -> Result<SmallGram> {
    let q = lambda.q();
    let l = &lambda.entries;
    let gram = l.transpose() * l + DMatrix::identity(q, q);
    if q == 0 {
        return Ok(SmallGram { gram, chol: None });
    }
    let chol = Cholesky::new(gram.clone()).ok_or_else(|| {
        VarsmaError::Numerical("Cholesky factorization of lambda'lambda + I failed".into())
    })?;
    Ok(SmallGram {
        gram,
        chol: Some(chol),
    })
}

/// Precomputed `λ` and `G` for one `(θ, T)`, used to apply `K` repeatedly.
#[derive(Debug, Clone)]
pub struct WoodburyKernel {
    theta: ThetaPoly,
    lambda: LambdaMatrix,
    gram: SmallGram,
}

impl WoodburyKernel {
    pub fn new(theta: &ThetaPoly, horizon: usize) -> Result<Self> {
        let lambda = build_lambda(theta, horizon)?;
        let gram = small_gram(&lambda)?;
        Ok(Self {
            theta: theta.clone(),
            lambda,
            gram,
        })
    }

    pub fn theta(&self) -> &ThetaPoly {
        &self.theta
    }

    pub fn horizon(&self) -> usize {
        self.lambda.horizon()
    }

    pub fn lambda(&self) -> &LambdaMatrix {
        &self.lambda
    }

    pub fn gram(&self) -> &SmallGram {
        &self.gram
    }

    /// `K·M = M − λ G⁻¹ (λᵀM)`.
    pub fn apply_k(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.horizon() {
            return Err(VarsmaError::Dimension(format!(
                "K is {t}x{t} but operand has {} rows",
                m.nrows(),
                t = self.horizon()
            )));
        }
        if self.theta.q() == 0 {
            return Ok(m.clone());
        }
        let l = self.lambda.entries();
        let inner = self.gram.solve(&(l.transpose() * m));
        Ok(m - l * inner)
    }

    /// `log det Σ_T = log det(λᵀλ + I_q)`.
    pub fn log_det_sigma(&self) -> f64 {
        self.gram.log_det()
    }
}

pub fn apply_k(theta: &ThetaPoly, horizon: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    WoodburyKernel::new(theta, horizon)?.apply_k(m)
}

pub fn log_det_sigma(theta: &ThetaPoly, horizon: usize) -> Result<f64> {
    Ok(WoodburyKernel::new(theta, horizon)?.log_det_sigma())
}

/// `∂(Θ_T⁻¹M)/∂θ_i = −Θ_T⁻¹ L^i Θ_T⁻¹ M`, i.e. convolution by `−L^i θ(L)⁻²`.
pub fn apply_dtheta_inverse(theta: &ThetaPoly, i: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_index(theta.q(), i)?;
    let once = apply_theta_inverse(theta, m);
    let mut out = shift_down(&once, i);
    theta_inverse_in_place(theta, &mut out);
    out.neg_mut();
    Ok(out)
}
