//! Multi-start trust-region search for the MA coefficients.
//!
//! Each start runs a dogleg trust-region method on the concentrated NLLK with
//! a BFGS model Hessian. Trial points outside the invertibility domain are
//! scored with a large penalty that grows with the distance outside, so
//! they are always rejected and the region shrinks back into the domain.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, VarsmaError};
use crate::gls::{concentrated_nllk, gls_fit, nllk_and_grad, GlsFit, ModelSpec, SeriesMatrix};
use crate::ma_kernel::ThetaPoly;
use crate::stability::{is_invertible, sample_stable};

const INITIAL_RADIUS: f64 = 0.1;
const MAX_RADIUS: f64 = 1.0;
const ACCEPT_RATIO: f64 = 1e-4;
const PENALTY_SLOPE: f64 = 1e6;
const NOISE_RETRIES: usize = 5;
/// Starts whose NLLK agree to this relative level are ranked by gradient norm.
const TIE_TOLERANCE: f64 = 1e-12;
/// Grid nodes closer than this to the edge of the domain are masked: node
/// coordinates carry rounding error, and points on the edge have a unit root.
const GRID_BOUNDARY_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Number of starts; `None` picks 5 for `q ≤ 2` and 10 otherwise.
    pub n_starts: Option<usize>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub penalty_value: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: None,
            max_iters: 200,
            grad_tol: 1e-6,
            step_tol: 1e-10,
            penalty_value: 1e12,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn starts_for(&self, q: usize) -> usize {
        self.n_starts.unwrap_or(if q <= 2 { 5 } else { 10 })
    }

    fn validate(&self) -> Result<()> {
        if self.n_starts == Some(0) {
            return Err(VarsmaError::Validation(
                "at least one start is required".into(),
            ));
        }
        for (name, v) in [
            ("gradient tolerance", self.grad_tol),
            ("step tolerance", self.step_tol),
            ("penalty value", self.penalty_value),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(VarsmaError::Validation(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StartStatus {
    Converged,
    MaxIterations,
    StepTolerance,
    Failed(String),
}

impl std::fmt::Display for StartStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StartStatus::Converged => write!(f, "converged"),
            StartStatus::MaxIterations => write!(f, "max-iterations"),
            StartStatus::StepTolerance => write!(f, "step-tolerance"),
            StartStatus::Failed(msg) => write!(f, "failed: {msg}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StartSummary {
    pub initial: ThetaPoly,
    pub final_theta: ThetaPoly,
    pub final_nllk: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: StartStatus,
    /// NLLK at every accepted iterate, starting point included.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ThetaPoly,
    pub fit: GlsFit,
    pub grad_norm: f64,
    pub converged: bool,
    pub starts_used: usize,
    pub per_start: Vec<StartSummary>,
}

/// Concentrated NLLK inside the invertibility domain; outside it,
/// `penalty_value + PENALTY_SLOPE · (−margin)`.
pub fn penalized_nllk(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    theta: &ThetaPoly,
    penalty_value: f64,
) -> Result<f64> {
    let report = is_invertible(theta);
    if !report.stable {
        return Ok(penalty_value + PENALTY_SLOPE * (-report.margin));
    }
    concentrated_nllk(spec, data, theta)
}

/// Starting polynomials: the zero polynomial, then random invertible draws.
pub fn initial_points(q: usize, n_starts: usize, seed: u64) -> Vec<ThetaPoly> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![ThetaPoly::zeros(q)];
    starts.extend((1..n_starts).map(|_| sample_stable(q, &mut rng)));
    starts
}

pub fn fit(spec: &ModelSpec, data: &SeriesMatrix, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    if spec.q == 0 {
        let theta = ThetaPoly::zeros(0);
        let fit = gls_fit(spec, data, &theta)?;
        let summary = StartSummary {
            initial: theta.clone(),
            final_theta: theta.clone(),
            final_nllk: fit.nllk,
            grad_norm: 0.0,
            iterations: 0,
            status: StartStatus::Converged,
            history: vec![fit.nllk],
        };
        return Ok(FitResult {
            theta,
            fit,
            grad_norm: 0.0,
            converged: true,
            starts_used: 1,
            per_start: vec![summary],
        });
    }

    let starts = initial_points(spec.q, options.starts_for(spec.q), options.seed);
    let summaries: Vec<StartSummary> = starts
        .into_par_iter()
        .map(|start| local_search(spec, data, start, options))
        .collect();

    let best = select_best(&summaries);
    let Some(best) = best else {
        return Err(VarsmaError::FitFailed {
            statuses: summaries.iter().map(|s| s.status.to_string()).collect(),
        });
    };

    let theta = summaries[best].final_theta.clone();
    let (fit, grad) = nllk_and_grad(spec, data, &theta)?;
    let grad_norm = norm(&grad);
    Ok(FitResult {
        theta,
        fit,
        grad_norm,
        converged: grad_norm <= options.grad_tol,
        starts_used: summaries.len(),
        per_start: summaries,
    })
}

/// Lowest NLLK wins. Starts within rounding of the best NLLK are ranked by
/// gradient norm, and remaining ties go to the earliest start.
fn select_best(summaries: &[StartSummary]) -> Option<usize> {
    let feasible = || {
        summaries
            .iter()
            .enumerate()
            .filter(|(_, s)| !matches!(s.status, StartStatus::Failed(_)))
    };
    let best_f = feasible()
        .map(|(_, s)| s.final_nllk)
        .fold(f64::INFINITY, f64::min);
    if !best_f.is_finite() {
        return None;
    }
    let tie = TIE_TOLERANCE * (1.0 + best_f.abs());
    feasible()
        .filter(|(_, s)| s.final_nllk <= best_f + tie)
        .min_by(|(ia, a), (ib, b)| a.grad_norm.total_cmp(&b.grad_norm).then(ia.cmp(ib)))
        .map(|(i, _)| i)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

enum Trial {
    Feasible(Point),
    /// Outside the domain or not evaluable; carries the penalized objective.
    Rejected(f64),
}

fn evaluate(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    x: &DVector<f64>,
    penalty_value: f64,
) -> Result<Trial> {
    let theta = ThetaPoly::new(x.iter().copied().collect())?;
    if !is_invertible(&theta).stable {
        return penalized_nllk(spec, data, &theta, penalty_value).map(Trial::Rejected);
    }
    let (fit, grad) = nllk_and_grad(spec, data, &theta)?;
    Ok(Trial::Feasible(Point {
        x: x.clone(),
        f: fit.nllk,
        g: DVector::from_vec(grad),
    }))
}

fn local_search(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    start: ThetaPoly,
    options: &FitOptions,
) -> StartSummary {
    let x0 = DVector::from_column_slice(start.coeffs());
    let mut point = match evaluate(spec, data, &x0, options.penalty_value) {
        Ok(Trial::Feasible(p)) => p,
        Ok(Trial::Rejected(_)) => {
            return failed(start, "start outside the invertibility domain".into())
        }
        Err(e) => return failed(start, e.to_string()),
    };
    let n = x0.len();
    let mut hessian: Option<DMatrix<f64>> = None;
    let mut radius = INITIAL_RADIUS;
    let mut history = vec![point.f];
    let mut status = StartStatus::MaxIterations;
    let mut iterations = 0;
    let mut noise_rejections = 0;

    while iterations < options.max_iters {
        if point.g.norm() <= options.grad_tol {
            status = StartStatus::Converged;
            break;
        }
        iterations += 1;
        let model = hessian
            .clone()
            .unwrap_or_else(|| DMatrix::identity(n, n) * (point.g.norm() / INITIAL_RADIUS));
        let step = dogleg(&point.g, &model, radius);
        let step_len = step.norm();
        let predicted = -(point.g.dot(&step) + 0.5 * step.dot(&(&model * &step)));
        let trial_x = &point.x + &step;

        let trial = evaluate(spec, data, &trial_x, options.penalty_value)
            .unwrap_or(Trial::Rejected(options.penalty_value));
        let trial_f = match &trial {
            Trial::Feasible(t) => t.f,
            Trial::Rejected(f) => *f,
        };
        let ratio = if predicted > 0.0 {
            (point.f - trial_f) / predicted
        } else {
            f64::NEG_INFINITY
        };
        let trial = match trial {
            Trial::Feasible(t) => Some(t),
            Trial::Rejected(_) => None,
        };

        if let Some(t) = &trial {
            let s = &t.x - &point.x;
            let y = &t.g - &point.g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let mut b = hessian
                    .take()
                    .unwrap_or_else(|| DMatrix::identity(n, n) * (y.dot(&y) / sy));
                let bs = &b * &s;
                b += &y * y.transpose() / sy - &bs * bs.transpose() / s.dot(&bs);
                hessian = Some((&b + b.transpose()) * 0.5);
            }
        }

        // steps whose predicted gain is below rounding in f are judged by f alone
        let noise_level = predicted <= 1e-13 * (1.0 + point.f.abs());
        let accept = match &trial {
            Some(t) => t.f <= point.f && (ratio > ACCEPT_RATIO || noise_level),
            None => false,
        };

        // a rejection at rounding level says nothing about the model, so the
        // radius is kept for a few retries with the refreshed Hessian
        let noise_retry =
            !accept && noise_level && trial.is_some() && noise_rejections < NOISE_RETRIES;
        if noise_retry {
            noise_rejections += 1;
        } else if accept {
            noise_rejections = 0;
        }
        if !noise_retry && ratio < 0.25 {
            radius = 0.25 * step_len;
        } else if !noise_retry && ratio > 0.75 && step_len >= 0.99 * radius {
            radius = (2.0 * radius).min(MAX_RADIUS);
        }
        if accept {
            point = trial.expect("accepted trial exists");
            history.push(point.f);
        }
        if radius < options.step_tol || step_len < options.step_tol {
            status = if point.g.norm() <= options.grad_tol {
                StartStatus::Converged
            } else {
                StartStatus::StepTolerance
            };
            break;
        }
    }
    if status == StartStatus::MaxIterations && point.g.norm() <= options.grad_tol {
        status = StartStatus::Converged;
    }

    StartSummary {
        initial: start,
        final_theta: ThetaPoly::new(point.x.iter().copied().collect()).expect("finite iterate"),
        final_nllk: point.f,
        grad_norm: point.g.norm(),
        iterations,
        status,
        history,
    }
}

fn failed(start: ThetaPoly, msg: String) -> StartSummary {
    StartSummary {
        final_theta: start.clone(),
        initial: start,
        final_nllk: f64::INFINITY,
        grad_norm: f64::INFINITY,
        iterations: 0,
        status: StartStatus::Failed(msg),
        history: Vec::new(),
    }
}

/// Powell dogleg step for `min gᵀs + ½sᵀBs` subject to `‖s‖ ≤ radius`.
fn dogleg(g: &DVector<f64>, b: &DMatrix<f64>, radius: f64) -> DVector<f64> {
    let gbg = g.dot(&(b * g));
    let cauchy = if gbg > 0.0 {
        g * (-g.dot(g) / gbg)
    } else {
        g * (-radius / g.norm())
    };
    if cauchy.norm() >= radius {
        let scale = radius / cauchy.norm();
        return cauchy * scale;
    }
    let newton = match Cholesky::new(b.clone()) {
        Some(chol) => -chol.solve(g),
        None => return cauchy,
    };
    if newton.norm() <= radius {
        return newton;
    }
    // walk from the Cauchy point towards the Newton point until the boundary
    let d = &newton - &cauchy;
    let a = d.dot(&d);
    let bq = 2.0 * cauchy.dot(&d);
    let c = cauchy.dot(&cauchy) - radius * radius;
    let tau = (-bq + (bq * bq - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    cauchy + d * tau
}

/// Concentrated NLLK on a rectangular grid over `θ` for `q ∈ {1, 2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrid {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the axes (first axis slowest); `NaN` where masked.
    pub nllk: Vec<f64>,
    /// `true` where the grid point lies inside the invertibility domain, at least 1e-12 from its edge, and was evaluated.
    pub mask: Vec<bool>,
}

impl LikelihoodGrid {
    /// Coordinates of flat grid index `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        let mut coords = vec![0.0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            coords[d] = axis[rem % axis.len()];
            rem /= axis.len();
        }
        coords
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Flat index of the smallest evaluated NLLK.
    pub fn argmin(&self) -> Option<usize> {
        (0..self.len())
            .filter(|&i| self.mask[i])
            .min_by(|&a, &b| self.nllk[a].total_cmp(&self.nllk[b]))
    }
}

pub fn default_grid_bounds(q: usize) -> Vec<(f64, f64)> {
    match q {
        1 => vec![(-0.999, 0.999)],
        _ => vec![(-2.0, 2.0), (-1.0, 1.0)],
    }
}

pub fn grid_nllk(
    spec: &ModelSpec,
    data: &SeriesMatrix,
    bounds: &[(f64, f64)],
    resolution: usize,
) -> Result<LikelihoodGrid> {
    let q = spec.q;
    if !(q == 1 || q == 2) {
        return Err(VarsmaError::Validation(format!(
            "likelihood grids are available for q = 1 or 2, not {q}"
        )));
    }
    if resolution < 2 {
        return Err(VarsmaError::Validation(
            "grid resolution must be at least 2".into(),
        ));
    }
    if bounds.len() != q
        || bounds
            .iter()
            .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
    {
        return Err(VarsmaError::Validation(format!(
            "expected {q} finite increasing bound pairs"
        )));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            (0..resolution)
                .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
                .collect()
        })
        .collect();
    let mut grid = LikelihoodGrid {
        axes,
        nllk: Vec::new(),
        mask: Vec::new(),
    };
    let total = resolution.pow(q as u32);
    let values: Vec<Option<f64>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let theta = ThetaPoly::new(grid.point(idx))?;
            if is_invertible(&theta).margin <= GRID_BOUNDARY_MARGIN {
                return Ok(None);
            }
            concentrated_nllk(spec, data, &theta).map(Some)
        })
        .collect::<Result<_>>()?;
    grid.mask = values.iter().map(Option::is_some).collect();
    grid.nllk = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    Ok(grid)
}
