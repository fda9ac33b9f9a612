//! Built-in identity and gradient battery behind `varsma verify`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::covariance::verify_prop1;
use crate::error::Result;
use crate::gls::{concentrated_nllk, nllk_grad, ModelSpec, SeriesMatrix};
use crate::ma_kernel::ThetaPoly;
use crate::simulate::{gen_varsma, sample_params};
use crate::stability::{sample_stable, sample_unstable};

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

/// Analytic gradient next to its central finite difference.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// `‖analytic − fd‖∞ / max(‖analytic‖∞, 1)`.
    pub relative_error: f64,
}

pub fn finite_difference_grad(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
    step: f64,
) -> Result<Vec<f64>> {
    (0..theta.q())
        .map(|i| {
            let mut up = theta.coeffs().to_vec();
            let mut down = up.clone();
            up[i] += step;
            down[i] -= step;
            let fu = concentrated_nllk(spec, data, &ThetaPoly::new(up)?)?;
            let fd = concentrated_nllk(spec, data, &ThetaPoly::new(down)?)?;
            Ok((fu - fd) / (2.0 * step))
        })
        .collect()
}

pub fn gradient_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(1.0, f64::max);
    diff / scale
}

pub fn check_gradient(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
) -> Result<GradientCheck> {
    let analytic = nllk_grad(spec, data, theta)?;
    let finite_difference = finite_difference_grad(spec, data, theta, FD_STEP)?;
    let relative_error = gradient_relative_error(&analytic, &finite_difference);
    Ok(GradientCheck {
        analytic,
        finite_difference,
        relative_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCase {
    pub theta: ThetaPoly,
    pub horizon: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCase {
    pub spec: ModelSpec,
    pub theta: ThetaPoly,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryReport {
    pub identities: Vec<IdentityCase>,
    pub gradients: Vec<GradientCase>,
}

impl BatteryReport {
    pub fn worst_identity(&self) -> f64 {
        self.identities
            .iter()
            .map(|c| c.max_deviation)
            .fold(0.0, f64::max)
    }

    pub fn worst_gradient(&self) -> f64 {
        self.gradients
            .iter()
            .map(|c| c.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst_identity() < IDENTITY_TOLERANCE && self.worst_gradient() < GRADIENT_TOLERANCE
    }
}

/// Test hooks for exercising the harness itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// Flip the sign of the analytic gradient before comparing.
    pub gradient_sign: bool,
}

pub fn run_battery(seed: u64, fault: FaultInjection) -> Result<BatteryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities = Vec::new();
    let mut fixed = vec![
        ThetaPoly::new(vec![0.5])?,
        ThetaPoly::new(vec![0.02992109, -0.55845733])?,
        ThetaPoly::new(vec![0.0, -1.0])?,
    ];
    for q in 1..=3 {
        for _ in 0..4 {
            fixed.push(sample_stable(q, &mut rng));
        }
        fixed.push(sample_unstable(q, &mut rng));
    }
    for theta in fixed {
        let q = theta.q();
        let mut horizons = vec![q, q + 1, 10, 50];
        horizons.dedup();
        for horizon in horizons {
            let report = verify_prop1(&theta, horizon)?;
            identities.push(IdentityCase {
                theta: theta.clone(),
                horizon,
                max_deviation: report.max(),
            });
        }
    }

    let mut gradients = Vec::new();
    for (i, (k, p, q)) in [(1, 0, 1), (1, 1, 2), (2, 1, 1), (2, 2, 2), (3, 1, 3)]
        .into_iter()
        .enumerate()
    {
        let spec = ModelSpec::new(k, p, q, true)?;
        let params = sample_params(spec, seed.wrapping_add(i as u64 + 1))?;
        let data = gen_varsma(&params, 150 + p)?;
        let theta = sample_stable(q, &mut rng);
        let mut check = check_gradient(&spec, &data, &theta)?;
        if fault.gradient_sign {
            check.analytic.iter_mut().for_each(|g| *g = -*g);
            check.relative_error =
                gradient_relative_error(&check.analytic, &check.finite_difference);
        }
        gradients.push(GradientCase {
            spec,
            theta,
            relative_error: check.relative_error,
        });
    }
    Ok(BatteryReport {
        identities,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_battery_passes() {
        let report = run_battery(1, FaultInjection::default()).unwrap();
        assert!(
            report.passed(),
            "identity {:e} gradient {:e}",
            report.worst_identity(),
            report.worst_gradient()
        );
        assert!(report
            .identities
            .iter()
            .any(|c| c.horizon == 1 && c.theta.q() == 1));
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let report = run_battery(
            1,
            FaultInjection {
                gradient_sign: true,
            },
        )
        .unwrap();
        assert!(!report.passed());
    }
}
