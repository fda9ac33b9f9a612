//! Invertibility of `θ(L)`: every root of `θ(z)` strictly outside the unit circle.
//!
//! Orders 1 to 3 use closed-form inequality domains; higher orders fall back
//! to the eigenvalues of the companion matrix of `z^q θ(1/z)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;

use crate::ma_kernel::ThetaPoly;

/// Roots of `θ(z)` must have modulus above `1 + ROOT_TOLERANCE`.
pub const ROOT_TOLERANCE: f64 = 1e-10;

const MIN_ROOT_MODULUS: f64 = 1.05;
const MAX_ROOT_MODULUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityMethod {
    Trivial,
    ClosedFormQ1,
    ClosedFormQ2,
    ClosedFormQ3,
    RootTest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    /// Positive inside the invertibility domain. Raw inequality slack for the
    /// closed forms, `min |root| − 1 − ROOT_TOLERANCE` for the root test.
    pub margin: f64,
    pub method: StabilityMethod,
}

impl StabilityReport {
    fn from_margin(margin: f64, method: StabilityMethod) -> Self {
        Self {
            stable: margin > 0.0,
            margin,
            method,
        }
    }
}

pub fn is_invertible(theta: &ThetaPoly) -> StabilityReport {
    let c = theta.coeffs();
    match c.len() {
        0 => StabilityReport::from_margin(1.0, StabilityMethod::Trivial),
        1 => StabilityReport::from_margin(1.0 - c[0].abs(), StabilityMethod::ClosedFormQ1),
        2 => {
            let (t1, t2) = (c[0], c[1]);
            let margin = (1.0 - t2).min(1.0 - t1 + t2).min(1.0 + t1 + t2);
            StabilityReport::from_margin(margin, StabilityMethod::ClosedFormQ2)
        }
        3 => {
            let (t1, t2, t3) = (c[0], c[1], c[2]);
            let margin = (1.0 + t1 + t2 + t3)
                .min(3.0 + t1 - t2 - 3.0 * t3)
                .min(1.0 - t1 + t2 - t3)
                .min(1.0 - t2 - t3 * t3 + t1 * t3);
            StabilityReport::from_margin(margin, StabilityMethod::ClosedFormQ3)
        }
        _ => root_test(theta),
    }
}

/// Root-modulus test for any order, from the companion matrix of the
/// reciprocal polynomial `z^q + θ₁z^{q−1} + … + θ_q`, whose roots are the
/// reciprocals of the roots of `θ(z)`.
pub fn root_test(theta: &ThetaPoly) -> StabilityReport {
    let q = theta.q();
    if q == 0 {
        return StabilityReport::from_margin(1.0, StabilityMethod::Trivial);
    }
    let spectral = reciprocal_spectral_radius(theta.coeffs());
    let min_modulus = if spectral > 0.0 { 1.0 / spectral } else { 1e12 };
    StabilityReport::from_margin(
        min_modulus - 1.0 - ROOT_TOLERANCE,
        StabilityMethod::RootTest,
    )
}

fn reciprocal_spectral_radius(coeffs: &[f64]) -> f64 {
    let q = coeffs.len();
    let mut companion = DMatrix::zeros(q, q);
    for (j, &c) in coeffs.iter().enumerate() {
        companion[(0, j)] = -c;
    }
    for r in 1..q {
        companion[(r, r - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Random invertible polynomial of order `q ≥ 1` with root moduli drawn
/// uniformly from `(1.05, 3)`; complex roots come in conjugate pairs.
pub fn sample_stable<R: Rng + ?Sized>(q: usize, rng: &mut R) -> ThetaPoly {
    assert!(q >= 1, "sample_stable needs q >= 1");
    loop {
        let pairs = rng.random_range(0..=q / 2);
        // polynomial in L with constant term 1, built as ∏(1 − L/r)
        let mut poly = vec![1.0];
        for _ in 0..pairs {
            let modulus = rng.random_range(MIN_ROOT_MODULUS..MAX_ROOT_MODULUS);
            let angle = rng.random_range(0.0..PI);
            let inv = 1.0 / modulus;
            let factor = [1.0, -2.0 * inv * angle.cos(), inv * inv];
            poly = multiply(&poly, &factor);
        }
        for _ in 0..(q - 2 * pairs) {
            let modulus = rng.random_range(MIN_ROOT_MODULUS..MAX_ROOT_MODULUS);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            poly = multiply(&poly, &[1.0, -sign / modulus]);
        }
        let theta = ThetaPoly::new(poly[1..].to_vec()).expect("finite by construction");
        // roots sit at least 0.05 from the circle; the check only guards rounding
        if is_invertible(&theta).stable {
            return theta;
        }
    }
}

/// Random polynomial of order `q ≥ 1` with exactly one real root inside the
/// unit disk, at modulus drawn from `(0.95, 0.995)`; the remaining roots are
/// drawn as in [`sample_stable`].
pub fn sample_unstable<R: Rng + ?Sized>(q: usize, rng: &mut R) -> ThetaPoly {
    assert!(q >= 1, "sample_unstable needs q >= 1");
    let modulus = rng.random_range(0.95..0.995);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut poly = vec![1.0, -sign / modulus];
    if q > 1 {
        let rest = sample_stable(q - 1, rng);
        let rest: Vec<f64> = std::iter::once(1.0)
            .chain(rest.coeffs().iter().copied())
            .collect();
        poly = multiply(&poly, &rest);
    }
    ThetaPoly::new(poly[1..].to_vec()).expect("finite by construction")
}

fn multiply(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ma_kernel::make_theta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn th(c: &[f64]) -> ThetaPoly {
        make_theta(c).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let r = is_invertible(&th(&[0.99]));
        assert!(r.stable);
        assert_eq!(r.method, StabilityMethod::ClosedFormQ1);

        let r = is_invertible(&th(&[0.0]));
        assert!(r.stable);
        assert_eq!(r.margin, 1.0);

        assert!(!is_invertible(&th(&[1.0])).stable);
        assert!(!is_invertible(&th(&[-1.2])).stable);

        // triangle vertex
        assert!(!is_invertible(&th(&[0.0, -1.0])).stable);
        assert!(!is_invertible(&th(&[2.0, 1.0])).stable);
        assert!(!is_invertible(&th(&[-2.0, 1.0])).stable);
        assert!(is_invertible(&th(&[0.0, 0.0])).stable);

        let r = is_invertible(&th(&[0.5, 0.0, 0.0]));
        assert!(r.stable);
        assert_eq!(r.method, StabilityMethod::ClosedFormQ3);
        assert_eq!(r.margin, 0.5);

        let r = is_invertible(&ThetaPoly::zeros(0));
        assert!(r.stable);
        assert_eq!(r.margin, 1.0);
    }

    #[test]
    fn root_test_for_high_order() {
        // (1 − L/2)^4 has all roots at 2
        let c = [-2.0, 1.5, -0.5, 0.0625];
        let r = is_invertible(&th(&c));
        assert_eq!(r.method, StabilityMethod::RootTest);
        assert!(r.stable);
        assert!((r.margin - 1.0).abs() < 1e-3);

        // 1 + 2.5 L + L^2 + 0.1 L^3 + 0.1 L^4 has a root inside the disk
        assert!(!is_invertible(&th(&[2.5, 1.0, 0.1, 0.1])).stable);
        assert!(is_invertible(&ThetaPoly::zeros(5)).stable);
    }

    #[test]
    fn closed_forms_agree_with_root_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for q in 1..=3 {
            let mut checked = 0;
            while checked < 10_000 {
                let c: Vec<f64> = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
                let theta = th(&c);
                let roots = root_test(&theta);
                let min_modulus = roots.margin + 1.0 + ROOT_TOLERANCE;
                if (min_modulus - 1.0).abs() < 1e-6 {
                    continue;
                }
                assert_eq!(
                    is_invertible(&theta).stable,
                    roots.stable,
                    "disagreement at {c:?}"
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn unstable_samples_fail_the_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for q in 1..=4 {
            for _ in 0..200 {
                let t = sample_unstable(q, &mut rng);
                assert_eq!(t.q(), q);
                assert!(!is_invertible(&t).stable);
            }
        }
    }

    #[test]
    fn sampled_polynomials_are_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = sample_stable(1, &mut rng);
            assert!(t.coeffs()[0].abs() < 1.0 / 1.05);
        }
        for q in 2..=5 {
            for _ in 0..1000 {
                let t = sample_stable(q, &mut rng);
                assert_eq!(t.q(), q);
                assert!(is_invertible(&t).stable);
                assert!(root_test(&t).stable);
            }
        }
    }
}
