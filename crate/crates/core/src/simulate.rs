//! Synthetic sample paths and random admissible parameters.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VarsmaError};
use crate::gls::{ModelSpec, SeriesMatrix};
use crate::ma_kernel::ThetaPoly;
use crate::stability::sample_stable;

pub const DEFAULT_BURN_IN: usize = 200;
/// Spectral radius below which random AR draws are accepted.
pub const AR_RADIUS_LIMIT: f64 = 0.95;
const DAMPING_CAP: usize = 100;

/// Parameters of `X_t = μ + Σ X_{t−i}Φ_i + ε_t + Σ θ_j ε_{t−j}`, `ε_t ~ N(0, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub spec: ModelSpec,
    pub mu: Vec<f64>,
    pub phis: Vec<DMatrix<f64>>,
    pub theta: ThetaPoly,
    pub omega: DMatrix<f64>,
    pub burn_in: usize,
    pub seed: u64,
}

/// Spectral radius of the VAR companion matrix built from `Φ_1..Φ_p`.
pub fn companion_spectral_radius(phis: &[DMatrix<f64>]) -> f64 {
    let p = phis.len();
    if p == 0 {
        return 0.0;
    }
    let k = phis[0].nrows();
    let mut companion = DMatrix::zeros(k * p, k * p);
    for (i, phi) in phis.iter().enumerate() {
        companion.view_mut((0, i * k), (k, k)).copy_from(phi);
    }
    for i in 1..p {
        companion
            .view_mut((i * k, (i - 1) * k), (k, k))
            .copy_from(&DMatrix::identity(k, k));
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let ModelSpec { k, p, q, .. } = self.spec;
        if self.mu.len() != k {
            return Err(VarsmaError::Dimension(format!(
                "mu has {} entries, expected {k}",
                self.mu.len()
            )));
        }
        if self.phis.len() != p || self.phis.iter().any(|m| m.shape() != (k, k)) {
            return Err(VarsmaError::Dimension(format!(
                "expected {p} AR matrices of size {k}x{k}"
            )));
        }
        if self.theta.q() != q {
            return Err(VarsmaError::Dimension(format!(
                "theta has {} coefficients, expected {q}",
                self.theta.q()
            )));
        }
        if self.omega.shape() != (k, k) {
            return Err(VarsmaError::Dimension(format!("omega must be {k}x{k}")));
        }
        let all_finite = self.mu.iter().all(|v| v.is_finite())
            && self.phis.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.omega.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(VarsmaError::Validation(
                "generator parameters must be finite".into(),
            ));
        }
        if (&self.omega - self.omega.transpose()).amax() > 1e-12 * self.omega.amax().max(1.0) {
            return Err(VarsmaError::Validation("omega is not symmetric".into()));
        }
        if Cholesky::new(self.omega.clone()).is_none() {
            return Err(VarsmaError::Validation(
                "omega is not positive definite".into(),
            ));
        }
        let spectral_radius = companion_spectral_radius(&self.phis);
        if spectral_radius >= 1.0 {
            return Err(VarsmaError::NonStationary { spectral_radius });
        }
        Ok(())
    }
}

/// Simulates `n` rows after discarding `burn_in` rows started from zero.
pub fn gen_varsma(params: &GeneratorParams, n: usize) -> Result<SeriesMatrix> {
    params.validate()?;
    let ModelSpec { k, p, .. } = params.spec;
    if n <= p {
        return Err(VarsmaError::Dimension(format!(
            "need more than p = {p} rows, got {n}"
        )));
    }
    let chol = Cholesky::new(params.omega.clone())
        .ok_or_else(|| VarsmaError::Validation("omega is not positive definite".into()))?;
    let l = chol.l();
    let q = params.theta.q();
    let total = params.burn_in + n;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut eps = DMatrix::<f64>::zeros(total, k);
    let mut x = DMatrix::<f64>::zeros(total, k);
    let mut z = vec![0.0; k];
    for t in 0..total {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..k {
            eps[(t, a)] = (0..=a).map(|b| l[(a, b)] * z[b]).sum();
        }
        for a in 0..k {
            let mut v = params.mu[a] + eps[(t, a)];
            for j in 1..=q.min(t) {
                v += params.theta.coeff(j) * eps[(t - j, a)];
            }
            for (i, phi) in params.phis.iter().enumerate() {
                let lag = i + 1;
                if lag > t {
                    break;
                }
                v += (0..k).map(|b| x[(t - lag, b)] * phi[(b, a)]).sum::<f64>();
            }
            x[(t, a)] = v;
        }
    }
    SeriesMatrix::new(x.rows(params.burn_in, n).into_owned())
}

/// Random `Φ_1..Φ_p` whose companion spectral radius is below 0.95.
///
/// Scaling `Φ_i` by `c^i` scales every companion eigenvalue by `c`, so
/// over-radius draws are damped rather than redrawn.
pub fn random_stationary_ar<R: Rng + ?Sized>(
    k: usize,
    p: usize,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    let sd = 1.0 / ((k * p.max(1)) as f64).sqrt();
    let mut phis: Vec<DMatrix<f64>> = (0..p)
        .map(|_| DMatrix::from_fn(k, k, |_, _| sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    for _ in 0..DAMPING_CAP {
        let radius = companion_spectral_radius(&phis);
        if radius < AR_RADIUS_LIMIT {
            return Ok(phis);
        }
        let c = 0.9 * AR_RADIUS_LIMIT / radius;
        for (i, phi) in phis.iter_mut().enumerate() {
            *phi *= c.powi(i as i32 + 1);
        }
    }
    Err(VarsmaError::Numerical(format!(
        "AR damping did not reach spectral radius {AR_RADIUS_LIMIT} in {DAMPING_CAP} rounds"
    )))
}

/// `A·Aᵀ + 0.1·I` for a standard normal `k×k` matrix `A`.
pub fn random_spd<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = &a * a.transpose() + DMatrix::identity(k, k) * 0.1;
    (&m + m.transpose()) * 0.5
}

/// Draws a full random parameter set for `spec`.
pub fn sample_params(spec: ModelSpec, seed: u64) -> Result<GeneratorParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phis = random_stationary_ar(spec.k, spec.p, &mut rng)?;
    let theta = if spec.q == 0 {
        ThetaPoly::zeros(0)
    } else {
        sample_stable(spec.q, &mut rng)
    };
    let omega = random_spd(spec.k, &mut rng);
    let mu = if spec.trend {
        (0..spec.k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        vec![0.0; spec.k]
    };
    Ok(GeneratorParams {
        spec,
        mu,
        phis,
        theta,
        omega,
        burn_in: DEFAULT_BURN_IN,
        seed: rng.random(),
    })
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// On-disk parameter document. `phis[i]` is `Φ_{i+1}` as a list of rows,
/// applied on the right of the row vector `X_{t−i−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub trend: bool,
    pub mu: Vec<f64>,
    pub phis: Vec<Vec<Vec<f64>>>,
    pub theta: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(VarsmaError::Validation(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<&ParamsDocument> for GeneratorParams {
    type Error = VarsmaError;

    fn try_from(doc: &ParamsDocument) -> Result<Self> {
        let spec = ModelSpec::new(doc.k, doc.p, doc.q, doc.trend)?;
        let phis = doc
            .phis
            .iter()
            .enumerate()
            .map(|(i, m)| matrix_from_rows(m, &format!("phi_{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let params = GeneratorParams {
            spec,
            mu: doc.mu.clone(),
            phis,
            theta: ThetaPoly::new(doc.theta.clone())?,
            omega: matrix_from_rows(&doc.omega, "omega")?,
            burn_in: doc.burn_in,
            seed: doc.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

impl From<&GeneratorParams> for ParamsDocument {
    fn from(p: &GeneratorParams) -> Self {
        ParamsDocument {
            k: p.spec.k,
            p: p.spec.p,
            q: p.spec.q,
            trend: p.spec.trend,
            mu: p.mu.clone(),
            phis: p.phis.iter().map(matrix_to_rows).collect(),
            theta: p.theta.coeffs().to_vec(),
            omega: matrix_to_rows(&p.omega),
            burn_in: p.burn_in,
            seed: p.seed,
        }
    }
}

/// The two-series VAR(2) with scalar MA(2) used in the recovery study.
///
/// The published AR display lists `[Φ_1 Φ_2]` acting on column vectors;
/// here each block is transposed for the row convention.
pub fn reference_params(seed: u64) -> GeneratorParams {
    let phi1 = DMatrix::from_row_slice(2, 2, &[1.04962255, -1.45646867, -0.06188243, -0.04320034]);
    let phi2 = DMatrix::from_row_slice(2, 2, &[-0.25126899, 0.92767515, 0.03851439, 0.47572806]);
    GeneratorParams {
        spec: ModelSpec {
            k: 2,
            p: 2,
            q: 2,
            trend: true,
        },
        mu: vec![1.13078092, 0.10031679],
        phis: vec![phi1.transpose(), phi2.transpose()],
        theta: ThetaPoly::new(vec![0.02992109, -0.55845733]).expect("finite"),
        omega: DMatrix::from_row_slice(2, 2, &[0.54995831, 1.15162799, 1.15162799, 22.99279234]),
        burn_in: DEFAULT_BURN_IN,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::autocov_gamma;

    fn white_noise_params(k: usize, q: usize, theta: Vec<f64>, seed: u64) -> GeneratorParams {
        GeneratorParams {
            spec: ModelSpec {
                k,
                p: 0,
                q,
                trend: false,
            },
            mu: vec![0.0; k],
            phis: vec![],
            theta: ThetaPoly::new(theta).unwrap(),
            omega: DMatrix::identity(k, k),
            burn_in: 50,
            seed,
        }
    }

    fn autocov(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        (lag..n)
            .map(|t| (x[t] - mean) * (x[t - lag] - mean))
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let params = reference_params(42);
        let a = gen_varsma(&params, 300).unwrap();
        let b = gen_varsma(&params, 300).unwrap();
        assert_eq!(a, b);
        let c = gen_varsma(&reference_params(43), 300).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn white_noise_covariance() {
        let mut params = white_noise_params(2, 0, vec![], 5);
        params.omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let n = 40_000;
        let x = gen_varsma(&params, n).unwrap();
        let v = x.values();
        let cov = v.transpose() * v / n as f64;
        assert!((&cov - &params.omega).amax() < 5.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn pure_ma_autocovariances_match_gamma() {
        for (theta, seed) in [
            (vec![0.6], 1u64),
            (vec![0.3, -0.5], 2),
            (vec![-0.4, 0.2, 0.35], 3),
        ] {
            let q = theta.len();
            let params = white_noise_params(1, q, theta.clone(), seed);
            let n = 40_000;
            let x: Vec<f64> = gen_varsma(&params, n)
                .unwrap()
                .values()
                .iter()
                .copied()
                .collect();
            let gamma = autocov_gamma(&params.theta);
            let tol = 5.0 / (n as f64).sqrt();
            for lag in 0..=q + 3 {
                let expected = gamma.lag(lag);
                let got = autocov(&x, lag);
                assert!(
                    (got - expected).abs() < tol,
                    "theta {theta:?} lag {lag}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn rejects_nonstationary_ar() {
        let mut params = reference_params(0);
        params.phis[0] *= 3.0;
        assert!(matches!(
            gen_varsma(&params, 100),
            Err(VarsmaError::NonStationary { .. })
        ));
        let params = reference_params(0);
        assert!(gen_varsma(&params, 2).is_err());
    }

    #[test]
    fn reference_params_are_stationary() {
        let r = companion_spectral_radius(&reference_params(0).phis);
        assert!((r - 0.78503284).abs() < 1e-6, "{r}");
    }

    #[test]
    fn random_ar_draws_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let phis = random_stationary_ar(2, 2, &mut rng).unwrap();
            assert!(companion_spectral_radius(&phis) < AR_RADIUS_LIMIT);
        }
        let zero = vec![DMatrix::zeros(3, 3)];
        assert_eq!(companion_spectral_radius(&zero), 0.0);
    }

    #[test]
    fn random_spd_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 1..=4 {
            for _ in 0..250 {
                assert!(min_eigenvalue(&random_spd(k, &mut rng)) >= 0.1 - 1e-12);
            }
        }
    }

    #[test]
    fn params_document_round_trip() {
        let params = sample_params(
            ModelSpec {
                k: 3,
                p: 2,
                q: 1,
                trend: true,
            },
            17,
        )
        .unwrap();
        let doc = ParamsDocument::from(&params);
        let text = serde_json::to_string(&doc).unwrap();
        let back: ParamsDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(GeneratorParams::try_from(&back).unwrap(), params);
    }
}
