//! Estimators on likelihood surfaces: box-constrained QMLE, posterior-mean
//! QBE, one-step Newton-type corrections and observed information.
//!
//! Surfaces may store any [`Scalar`]; optimization and quadrature run in
//! `f64` and reports are `f64`.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{annealed_loglik, LikelihoodError, Surface, SurfaceKind};
use crate::linalg::{condition_number, invert, Matrix};
use crate::model::ParamBox;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("surface could not be evaluated at any start point")]
    NoEvaluablePoint,
    #[error("parameter box has dimension {box_dim}, surface has {surface_dim}")]
    DimMismatch { box_dim: usize, surface_dim: usize },
    #[error("one-step order kappa must be 3 or 4, got {0}")]
    Kappa(usize),
    #[error("initial estimate {0:?} lies outside the parameter box")]
    InitialOutside(Vec<f64>),
    #[error("invalid option: {0}")]
    BadOption(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    QmleFixedAlpha,
    QbeFixedAlphaBeta,
    QmleMoving,
    QbeMoving,
    OneStepFromQmle,
    OneStepFromQbe,
    LocalQmle,
}

impl EstimatorKind {
    pub fn is_bayes(self) -> bool {
        matches!(self, EstimatorKind::QbeFixedAlphaBeta | EstimatorKind::QbeMoving)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Sample size n.
    pub n: usize,
    /// Increments entering each block.
    pub kept: Vec<usize>,
    pub iterations: usize,
    pub evaluations: usize,
    pub starts: usize,
    /// Number of distinct local optima found over the starts.
    pub distinct_optima: usize,
    pub converged: bool,
    /// Sup-norm of the gradient restricted to coordinates not held by an active bound.
    pub projected_grad: f64,
    pub at_boundary: bool,
    pub non_identifiable: bool,
    pub fallback: bool,
    pub laplace_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_error: Option<f64>,
}

/// Tuning values echoed into reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pn: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qn: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta_hat: Vec<f64>,
    pub kind: EstimatorKind,
    /// `None` when Γₙ is not positive definite at the estimate.
    pub stderr: Option<Vec<f64>>,
    /// Observed information, row-major rows.
    pub gamma_n: Option<Vec<Vec<f64>>>,
    /// Surface value at the estimate.
    pub log_likelihood: f64,
    pub diagnostics: Diagnostics,
    pub config: ConfigEcho,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmleOptions {
    /// Multi-start count for p ≥ 2 (box center plus a Latin hypercube).
    pub starts: usize,
    /// Grid size of the initial scan for p = 1.
    pub grid: usize,
    pub max_iter: usize,
    /// Relative tolerance on the projected gradient.
    pub tol: f64,
    pub seed: u64,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self { starts: 8, grid: 64, max_iter: 200, tol: 1e-8, seed: 0x5eed }
    }
}

/// Prior density up to a constant.
#[derive(Clone, Default)]
pub enum Prior {
    #[default]
    Uniform,
    Density(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Uniform => write!(f, "Uniform"),
            Prior::Density(_) => write!(f, "Density(..)"),
        }
    }
}

impl Prior {
    fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            Prior::Uniform => 0.0,
            Prior::Density(d) => d(theta).ln(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QbeOptions {
    /// Annealing index; set for the fixed-α variant, `None` for the moving one.
    pub beta: Option<f64>,
    pub prior: Prior,
    pub rel_tol: f64,
    /// Gauss–Hermite points per axis for p ≥ 3 (0 picks a default).
    pub hermite_points: usize,
    pub qmle: QmleOptions,
}

impl Default for QbeOptions {
    fn default() -> Self {
        Self { beta: Some(0.45), prior: Prior::Uniform, rel_tol: 1e-8, hermite_points: 0, qmle: QmleOptions::default() }
    }
}

/// f64 view of a surface with an evaluation counter.
struct Objective<'a, F, S> {
    surface: &'a S,
    evaluations: usize,
    _f: std::marker::PhantomData<F>,
}

struct LocalDerivs {
    value: f64,
    grad: Vec<f64>,
    hess: Matrix<f64>,
    third: crate::likelihood::Tensor3<f64>,
}

impl<'a, F: Scalar, S: Surface<F>> Objective<'a, F, S> {
    fn new(surface: &'a S) -> Self {
        Self { surface, evaluations: 0, _f: std::marker::PhantomData }
    }

    fn lift(x: &[f64]) -> Vec<F> {
        x.iter().map(|&v| F::of(v)).collect()
    }

    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.evaluations += 1;
        match self.surface.eval(&Self::lift(x)) {
            Ok(v) if v.is_finite() => Some(v.as_f64()),
            _ => None,
        }
    }

    fn derivs(&mut self, x: &[f64], order: usize) -> Option<LocalDerivs> {
        self.evaluations += 1;
        let d = self.surface.derivatives(&Self::lift(x), order).ok()?;
        let value = d.value.as_f64();
        let grad: Vec<f64> = d.grad.iter().map(|v| v.as_f64()).collect();
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some(LocalDerivs { value, grad, hess: d.hess.map(|v| v.as_f64()), third: d.third.map(|v| v.as_f64()) })
    }
}

fn box_f64<F: Scalar>(bx: &ParamBox<F>) -> (Vec<f64>, Vec<f64>) {
    (bx.lower().iter().map(|v| v.as_f64()).collect(), bx.upper().iter().map(|v| v.as_f64()).collect())
}

fn project(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(&v, (&l, &u))| v.clamp(l, u)).collect()
}

/// Coordinates not pinned at a bound by an outward-pointing gradient.
fn free_mask(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    (0..x.len()).map(|i| !((x[i] <= lo[i] && g[i] < 0.0) || (x[i] >= hi[i] && g[i] > 0.0))).collect()
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    free_mask(x, g, lo, hi).iter().zip(g).filter(|(f, _)| **f).fold(0.0, |m, (_, v)| m.max(v.abs()))
}

fn on_boundary(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    (0..x.len()).any(|i| {
        let w = (hi[i] - lo[i]) * 1e-9;
        x[i] - lo[i] <= w || hi[i] - x[i] <= w
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims<F: Scalar, S: Surface<F>>(surface: &S, bx: &ParamBox<F>) -> Result<(), EstimateError> {
    if surface.dim() != bx.dim() {
        return Err(EstimateError::DimMismatch { box_dim: bx.dim(), surface_dim: surface.dim() });
    }
    Ok(())
}

fn qmle_kind(kind: SurfaceKind) -> EstimatorKind {
    match kind {
        SurfaceKind::Moving => EstimatorKind::QmleMoving,
        SurfaceKind::Local => EstimatorKind::LocalQmle,
        _ => EstimatorKind::QmleFixedAlpha,
    }
}

struct OptimumSearch {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    starts: usize,
    distinct: usize,
    non_identifiable: bool,
}

/// Newton refinement on the free coordinates using the exact Hessian.
fn newton_polish<F: Scalar, S: Surface<F>>(
    obj: &mut Objective<'_, F, S>,
    mut x: Vec<f64>,
    mut value: f64,
    lo: &[f64],
    hi: &[f64],
    iterations: &mut usize,
) -> (Vec<f64>, f64) {
    for _ in 0..20 {
        let Some(d) = obj.derivs(&x, 2) else { break };
        let free = free_mask(&x, &d.grad, lo, hi);
        let idx: Vec<usize> = (0..x.len()).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            break;
        }
        let mut neg = Matrix::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                neg[(a, b)] = -d.hess[(i, j)];
            }
        }
        let Ok(chol) = neg.cholesky() else { break };
        let rhs: Vec<f64> = idx.iter().map(|&i| d.grad[i]).collect();
        let step = chol.solve(&rhs);
        let mut cand = x.clone();
        for (a, &i) in idx.iter().enumerate() {
            cand[i] += step[a];
        }
        let cand = project(&cand, lo, hi);
        let moved = cand.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        match obj.value(&cand) {
            Some(v) if v >= value - 1e-12 * (1.0 + value.abs()) => {
                *iterations += 1;
                x = cand;
                value = v;
            }
            _ => break,
        }
        if moved <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
    }
    (x, value)
}

fn scalar_search<F: Scalar, S: Surface<F>>(
    obj: &mut Objective<'_, F, S>,
    lo: f64,
    hi: f64,
    opts: &QmleOptions,
) -> Result<OptimumSearch, EstimateError> {
    let g = opts.grid.max(3);
    let grid: Vec<f64> = (0..g).map(|i| if i + 1 == g { hi } else { lo + (hi - lo) * i as f64 / (g - 1) as f64 }).collect();
    let vals: Vec<Option<f64>> = grid.iter().map(|&x| obj.value(&[x])).collect();
    let (best, vmax) = vals
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        })
        .ok_or(EstimateError::NoEvaluablePoint)?;
    let vmin = vals.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
    let non_identifiable = vmax - vmin <= 1e-12 * (1.0 + vmax.abs());
    let local_maxima = (0..g)
        .filter(|&i| {
            let v = match vals[i] {
                Some(v) => v,
                None => return false,
            };
            let left = i == 0 || vals[i - 1].is_none_or(|u| v > u);
            let right = i + 1 == g || vals[i + 1].is_none_or(|u| v >= u);
            left && right
        })
        .count();

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(g - 1)];
    let (bracket_lo, bracket_hi) = (a, b);
    let f = |obj: &mut Objective<'_, F, S>, x: f64| obj.value(&[x]).unwrap_or(f64::NEG_INFINITY);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(obj, c), f(obj, d));
    let mut iterations = 0;
    while (b - a) > 1e-13 * (1.0 + c.abs()) && iterations < opts.max_iter {
        iterations += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(obj, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(obj, d);
        }
    }
    // the grid point itself may beat the interior search at a bound
    let mut candidates = vec![(grid[best], vmax), (c, fc), (d, fd)];
    candidates.sort_by(|p, q| q.1.total_cmp(&p.1));
    let (x, v) = candidates[0];
    let (x, value) = newton_polish(obj, vec![x], v, &[bracket_lo], &[bracket_hi], &mut iterations);
    Ok(OptimumSearch { x, value, iterations, starts: 1, distinct: local_maxima.max(1), non_identifiable })
}

/// Projected BFGS ascent from `x0`.
fn bfgs<F: Scalar, S: Surface<F>>(
    obj: &mut Objective<'_, F, S>,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &QmleOptions,
    iterations: &mut usize,
) -> Option<(Vec<f64>, f64)> {
    let p = x0.len();
    let mut x = project(x0, lo, hi);
    let d0 = obj.derivs(&x, 1)?;
    let (mut f, mut g) = (d0.value, d0.grad);
    let width = (0..p).map(|i| hi[i] - lo[i]).fold(f64::INFINITY, f64::min);
    let initial_scale = |g: &[f64]| {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax > 0.0 {
            0.1 * width / gmax
        } else {
            1.0
        }
    };
    let mut hinv = Matrix::<f64>::identity(p).scaled(initial_scale(&g));
    let mut fresh = true;
    for _ in 0..opts.max_iter {
        let free = free_mask(&x, &g, lo, hi);
        let pg = (0..p).filter(|&i| free[i]).fold(0.0f64, |m, i| m.max(g[i].abs()));
        if pg <= opts.tol * (1.0 + f.abs()) {
            break;
        }
        let gf: Vec<f64> = (0..p).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let mut dir: Vec<f64> = hinv.mat_vec(&gf).into_iter().enumerate().map(|(i, v)| if free[i] { v } else { 0.0 }).collect();
        if dot(&dir, &gf) <= 0.0 {
            hinv = Matrix::identity(p).scaled(initial_scale(&g));
            fresh = true;
            dir = hinv.mat_vec(&gf);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..p).map(|i| x[i] + t * dir[i]).collect();
            let cand = project(&trial, lo, hi);
            let step: Vec<f64> = (0..p).map(|i| cand[i] - x[i]).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            if let Some(v) = obj.value(&cand) {
                if v >= f + 1e-4 * dot(&g, &step) {
                    accepted = Some((cand, v));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if fresh {
                break;
            }
            hinv = Matrix::identity(p).scaled(initial_scale(&g));
            fresh = true;
            continue;
        };
        *iterations += 1;
        let Some(dn) = obj.derivs(&xn, 1) else { break };
        let s: Vec<f64> = (0..p).map(|i| xn[i] - x[i]).collect();
        // curvature pair for minimizing −H
        let y: Vec<f64> = (0..p).map(|i| g[i] - dn.grad[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                hinv = Matrix::identity(p).scaled(sy / dot(&y, &y));
            }
            let rho = 1.0 / sy;
            let hy = hinv.mat_vec(&y);
            let yhy = dot(&y, &hy);
            for i in 0..p {
                for j in 0..p {
                    hinv[(i, j)] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
            fresh = false;
        }
        x = xn;
        f = fnew;
        g = dn.grad;
    }
    Some((x, f))
}

fn latin_hypercube(lo: &[f64], hi: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = lo.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(p);
    for i in 0..p {
        let mut cells: Vec<usize> = (0..count).collect();
        for k in (1..count).rev() {
            cells.swap(k, rng.random_range(0..=k));
        }
        columns.push(cells.iter().map(|&c| lo[i] + (hi[i] - lo[i]) * (c as f64 + rng.random::<f64>()) / count as f64).collect());
    }
    (0..count).map(|r| (0..p).map(|i| columns[i][r]).collect()).collect()
}

fn vector_search<F: Scalar, S: Surface<F>>(
    obj: &mut Objective<'_, F, S>,
    lo: &[f64],
    hi: &[f64],
    opts: &QmleOptions,
) -> Result<OptimumSearch, EstimateError> {
    let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut starts = vec![center];
    starts.extend(latin_hypercube(lo, hi, opts.starts.saturating_sub(1), opts.seed));
    let mut iterations = 0;
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut start_values = Vec::new();
    let mut start_grads = 0.0f64;
    for s in &starts {
        if let Some(d) = obj.derivs(s, 1) {
            start_values.push(d.value);
            start_grads = start_grads.max(d.grad.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        if let Some((x, v)) = bfgs(obj, s, lo, hi, opts, &mut iterations) {
            let (x, v) = newton_polish(obj, x, v, lo, hi, &mut iterations);
            found.push((x, v));
        }
    }
    if found.is_empty() {
        return Err(EstimateError::NoEvaluablePoint);
    }
    let vmax = start_values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let vmin = start_values.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let non_identifiable = vmax - vmin <= 1e-12 * (1.0 + vmax.abs()) && start_grads <= opts.tol * (1.0 + vmax.abs());
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for (x, _) in &found {
        let same = |y: &&Vec<f64>| (0..x.len()).all(|i| (x[i] - y[i]).abs() <= 1e-6 * (hi[i] - lo[i]));
        if !distinct.iter().any(same) {
            distinct.push(x);
        }
    }
    let distinct = distinct.len();
    let (x, value) = found.into_iter().fold(None, |acc: Option<(Vec<f64>, f64)>, cur| match acc {
        Some(a) if a.1 >= cur.1 => Some(a),
        _ => Some(cur),
    }).expect("nonempty");
    Ok(OptimumSearch { x, value, iterations, starts: starts.len(), distinct, non_identifiable })
}

/// Γₙ = −n⁻¹ ∂²ℍₙ at `theta` for the unannealed surface, and
/// `sqrt(diag Γₙ⁻¹) / √n` when Γₙ is positive definite.
pub fn observed_information<F: Scalar, S: Surface<F>>(
    surface: &S,
    theta: &[F],
) -> Result<(Matrix<f64>, Option<Vec<f64>>), EstimateError> {
    let hess = surface.hess(theta)?;
    let n = surface.sample_size() as f64;
    let factor = surface.annealing_factor().as_f64();
    let p = hess.rows();
    let mut gamma = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let v = 0.5 * (hess[(i, j)].as_f64() + hess[(j, i)].as_f64());
            gamma[(i, j)] = -v / (n * factor);
        }
    }
    let stderr = match (gamma.cholesky(), invert(&gamma)) {
        (Ok(_), Some(inv)) => {
            let se: Vec<f64> = (0..p).map(|i| (inv[(i, i)] / n).sqrt()).collect();
            se.iter().all(|v| v.is_finite()).then_some(se)
        }
        _ => None,
    };
    Ok((gamma, stderr))
}

fn matrix_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn attach_information<F: Scalar, S: Surface<F>>(report: &mut EstimateReport, surface: &S) {
    let theta: Vec<F> = report.theta_hat.iter().map(|&v| F::of(v)).collect();
    if let Ok((gamma, se)) = observed_information(surface, &theta) {
        report.gamma_n = Some(matrix_rows(&gamma));
        report.stderr = se;
    }
}

fn base_report<F: Scalar, S: Surface<F>>(surface: &S, kind: EstimatorKind, theta: Vec<f64>, value: f64) -> EstimateReport {
    EstimateReport {
        theta_hat: theta,
        kind,
        stderr: None,
        gamma_n: None,
        log_likelihood: value,
        diagnostics: Diagnostics { n: surface.sample_size(), kept: surface.kept_counts(), ..Default::default() },
        config: ConfigEcho::default(),
        runtime_seconds: 0.0,
    }
}

/// Maximizer of the surface over the closed box.
///
/// p = 1 uses a grid scan, golden-section refinement and Newton polish;
/// p ≥ 2 uses projected BFGS from several starts followed by Newton polish.
pub fn qmle<F: Scalar, S: Surface<F>>(surface: &S, bx: &ParamBox<F>, opts: &QmleOptions) -> Result<EstimateReport, EstimateError> {
    let started = Instant::now();
    check_dims(surface, bx)?;
    let (lo, hi) = box_f64(bx);
    let mut obj = Objective::new(surface);
    let found = if lo.len() == 1 { scalar_search(&mut obj, lo[0], hi[0], opts)? } else { vector_search(&mut obj, &lo, &hi, opts)? };
    let mut report = base_report(surface, qmle_kind(surface.kind()), found.x.clone(), found.value);
    if let Some(d) = obj.derivs(&found.x, 1) {
        let pg = projected_grad_norm(&found.x, &d.grad, &lo, &hi);
        report.diagnostics.projected_grad = pg;
        report.diagnostics.converged = pg <= opts.tol * (1.0 + found.value.abs());
    }
    report.diagnostics.iterations = found.iterations;
    report.diagnostics.starts = found.starts;
    report.diagnostics.distinct_optima = found.distinct;
    report.diagnostics.at_boundary = on_boundary(&found.x, &lo, &hi);
    report.diagnostics.non_identifiable = found.non_identifiable;
    report.diagnostics.evaluations = obj.evaluations;
    attach_information(&mut report, surface);
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

// Gauss–Kronrod 7/15 nodes and weights on [−1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gk15<const K: usize>(f: &mut impl FnMut(f64) -> [f64; K], a: f64, b: f64) -> ([f64; K], [f64; K]) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut kron = [0.0; K];
    let mut gauss = [0.0; K];
    let fc = f(c);
    for k in 0..K {
        kron[k] = WGK[7] * fc[k];
        gauss[k] = WG[3] * fc[k];
    }
    for j in 0..7 {
        let x = r * XGK[j];
        let (f1, f2) = (f(c - x), f(c + x));
        for k in 0..K {
            kron[k] += WGK[j] * (f1[k] + f2[k]);
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * (f1[k] + f2[k]);
            }
        }
    }
    let mut err = [0.0; K];
    for k in 0..K {
        kron[k] *= r;
        err[k] = (kron[k] - gauss[k] * r).abs();
    }
    (kron, err)
}

/// Adaptive Gauss–Kronrod over consecutive breakpoints. The tolerance is
/// relative per component; component values are assumed not to cancel.
fn integrate<const K: usize>(mut f: impl FnMut(f64) -> [f64; K], breaks: &[f64], rel_tol: f64) -> ([f64; K], f64) {
    struct Piece<const K: usize> {
        a: f64,
        b: f64,
        val: [f64; K],
        err: [f64; K],
    }
    let mut pieces: Vec<Piece<K>> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (val, err) = gk15(&mut f, w[0], w[1]);
            Piece { a: w[0], b: w[1], val, err }
        })
        .collect();
    let total = |pieces: &[Piece<K>]| {
        let mut v = [0.0; K];
        let mut e = [0.0; K];
        for p in pieces {
            for k in 0..K {
                v[k] += p.val[k];
                e[k] += p.err[k];
            }
        }
        (v, e)
    };
    let rel = |v: &[f64; K], e: &[f64; K]| (0..K).fold(0.0f64, |m, k| m.max(if v[k] != 0.0 { e[k] / v[k].abs() } else { e[k] }));
    for _ in 0..4000 {
        let (v, e) = total(&pieces);
        if rel(&v, &e) <= rel_tol || pieces.is_empty() {
            break;
        }
        let worst = (0..pieces.len())
            .max_by(|&i, &j| {
                let si = (0..K).fold(0.0f64, |m, k| m.max(pieces[i].err[k] / v[k].abs().max(f64::MIN_POSITIVE)));
                let sj = (0..K).fold(0.0f64, |m, k| m.max(pieces[j].err[k] / v[k].abs().max(f64::MIN_POSITIVE)));
                si.total_cmp(&sj)
            })
            .expect("nonempty");
        let p = pieces.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            pieces.push(p);
            break;
        }
        let (v1, e1) = gk15(&mut f, p.a, mid);
        let (v2, e2) = gk15(&mut f, mid, p.b);
        pieces.push(Piece { a: p.a, b: mid, val: v1, err: e1 });
        pieces.push(Piece { a: mid, b: p.b, val: v2, err: e2 });
    }
    let (v, e) = total(&pieces);
    (v, rel(&v, &e))
}

/// Breakpoints around `mode` at multiples of `sd`, clipped to `[lo, hi]`.
fn breakpoints(lo: f64, hi: f64, mode: f64, sd: f64) -> Vec<f64> {
    let mut b = vec![lo, hi];
    if sd.is_finite() && sd > 0.0 {
        for k in [0.0, 1.0, 2.5, 5.0, 10.0, 20.0, 40.0] {
            for s in [-1.0, 1.0] {
                let x = mode + s * k * sd;
                if x > lo && x < hi {
                    b.push(x);
                }
            }
        }
    }
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

/// Gauss–Hermite nodes and weights for the weight `exp(−x²)`.
fn gauss_hermite(points: usize) -> (Vec<f64>, Vec<f64>) {
    let n = points;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.855_75 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Posterior mean of θ under `exp(ℍ) ϖ` on the box. With `beta` set the
/// surface is annealed by `n^{−1+2β}` first.
pub fn qbe<F: Scalar, S: Surface<F>>(surface: &S, bx: &ParamBox<F>, opts: &QbeOptions) -> Result<EstimateReport, EstimateError> {
    let kind = match surface.kind() {
        SurfaceKind::Moving => EstimatorKind::QbeMoving,
        _ => EstimatorKind::QbeFixedAlphaBeta,
    };
    let mut report = match opts.beta {
        Some(beta) => {
            let annealed = annealed_loglik(surface, F::of(beta))?;
            posterior_mean(&annealed, bx, opts, kind)?
        }
        None => posterior_mean(surface, bx, opts, kind)?,
    };
    report.config.beta = opts.beta;
    Ok(report)
}

fn posterior_mean<F: Scalar, S: Surface<F>>(surface: &S, bx: &ParamBox<F>, opts: &QbeOptions, kind: EstimatorKind) -> Result<EstimateReport, EstimateError> {
    let started = Instant::now();
    check_dims(surface, bx)?;
    if !(opts.rel_tol > 0.0) {
        return Err(EstimateError::BadOption("rel_tol must be positive".into()));
    }
    let mode = qmle(surface, bx, &opts.qmle)?;
    let (lo, hi) = box_f64(bx);
    let p = lo.len();
    let mut obj = Objective::new(surface);
    let shift = mode.log_likelihood + opts.prior.log_density(&mode.theta_hat);
    let prior = opts.prior.clone();
    let weight = move |obj: &mut Objective<'_, F, S>, theta: &[f64]| -> f64 {
        match obj.value(theta) {
            Some(v) => (v + prior.log_density(theta) - shift).exp(),
            None => 0.0,
        }
    };
    // curvature at the mode sets the breakpoint scale
    let cov = obj.derivs(&mode.theta_hat, 2).and_then(|d| invert(&d.hess.scaled(-1.0))).filter(|c| (0..p).all(|i| c[(i, i)] > 0.0));
    let mut laplace = false;
    let mut quad_err = None;
    let theta: Vec<f64> = match p {
        1 => {
            let sd = cov.as_ref().map_or((hi[0] - lo[0]) / 10.0, |c| c[(0, 0)].sqrt());
            let br = breakpoints(lo[0], hi[0], mode.theta_hat[0], sd);
            let (v, e) = integrate(
                |t| {
                    let w = weight(&mut obj, &[t]);
                    [w, t * w]
                },
                &br,
                opts.rel_tol,
            );
            quad_err = Some(e);
            vec![v[1] / v[0]]
        }
        2 => {
            let m = &mode.theta_hat;
            let (s00, s01, s11) = cov
                .as_ref()
                .map_or(((hi[0] - lo[0]).powi(2) / 100.0, 0.0, (hi[1] - lo[1]).powi(2) / 100.0), |c| (c[(0, 0)], c[(0, 1)], c[(1, 1)]));
            let cond_sd = (s11 - s01 * s01 / s00).max(s11 * 1e-6).sqrt();
            let outer_br = breakpoints(lo[0], hi[0], m[0], s00.sqrt());
            let mut worst = 0.0f64;
            let inner_tol = opts.rel_tol * 0.1;
            let (v, e) = integrate(
                |t0| {
                    let centre = m[1] + s01 / s00 * (t0 - m[0]);
                    let br = breakpoints(lo[1], hi[1], centre, cond_sd);
                    let (iv, ie) = integrate(
                        |t1| {
                            let w = weight(&mut obj, &[t0, t1]);
                            [w, t0 * w, t1 * w]
                        },
                        &br,
                        inner_tol,
                    );
                    if iv[0] > 0.0 {
                        worst = worst.max(ie);
                    }
                    iv
                },
                &outer_br,
                opts.rel_tol,
            );
            quad_err = Some(e.max(worst));
            vec![v[1] / v[0], v[2] / v[0]]
        }
        _ => match cov.as_ref().and_then(|c| c.cholesky().ok()) {
            Some(chol) => {
                let k = if opts.hermite_points > 0 { opts.hermite_points } else { ((4000f64).powf(1.0 / p as f64).floor() as usize).clamp(3, 20) };
                let (nodes, weights) = gauss_hermite(k);
                let l = chol.factor();
                let mut acc = vec![0.0; p + 1];
                let mut idx = vec![0usize; p];
                loop {
                    let z: Vec<f64> = idx.iter().map(|&i| nodes[i] * std::f64::consts::SQRT_2).collect();
                    let off = l.mat_vec(&z);
                    let t: Vec<f64> = (0..p).map(|i| mode.theta_hat[i] + off[i]).collect();
                    if bx.contains(&t.iter().map(|&v| F::of(v)).collect::<Vec<F>>()) {
                        let gw: f64 = idx.iter().map(|&i| weights[i]).product::<f64>() * (0.5 * dot(&z, &z)).exp();
                        let w = weight(&mut obj, &t) * gw;
                        acc[0] += w;
                        for i in 0..p {
                            acc[i + 1] += w * t[i];
                        }
                    }
                    let mut d = 0;
                    while d < p {
                        idx[d] += 1;
                        if idx[d] < k {
                            break;
                        }
                        idx[d] = 0;
                        d += 1;
                    }
                    if d == p {
                        break;
                    }
                }
                if acc[0] > 0.0 {
                    (0..p).map(|i| acc[i + 1] / acc[0]).collect()
                } else {
                    laplace = true;
                    mode.theta_hat.clone()
                }
            }
            None => {
                laplace = true;
                mode.theta_hat.clone()
            }
        },
    };
    let theta = project(&theta, &lo, &hi);
    let value = obj.value(&theta).unwrap_or(f64::NAN);
    let edge_mass = mode.diagnostics.at_boundary;
    let mut report = base_report(surface, kind, theta, value);
    report.diagnostics.at_boundary = edge_mass;
    report.diagnostics.laplace_fallback = laplace;
    report.diagnostics.quadrature_error = quad_err;
    report.diagnostics.converged = !laplace && quad_err.is_none_or(|e| e <= opts.rel_tol * 10.0);
    report.diagnostics.iterations = mode.diagnostics.iterations;
    report.diagnostics.evaluations = obj.evaluations + mode.diagnostics.evaluations;
    report.diagnostics.non_identifiable = mode.diagnostics.non_identifiable;
    attach_information(&mut report, surface);
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// `θ̌ = θ₀ + A₁ (+ A₂ when κ = 4)` against `target`. Falls back to the box
/// center (flagged) when the Hessian is singular or the step leaves the box.
pub fn one_step<F: Scalar, S: Surface<F>>(
    initial: &EstimateReport,
    target: &S,
    kappa: usize,
    bx: &ParamBox<F>,
) -> Result<EstimateReport, EstimateError> {
    let started = Instant::now();
    if !(3..=4).contains(&kappa) {
        return Err(EstimateError::Kappa(kappa));
    }
    check_dims(target, bx)?;
    let theta0: Vec<F> = initial.theta_hat.iter().map(|&v| F::of(v)).collect();
    if theta0.len() != bx.dim() || !bx.contains(&theta0) {
        return Err(EstimateError::InitialOutside(initial.theta_hat.clone()));
    }
    let kind = if initial.kind.is_bayes() { EstimatorKind::OneStepFromQbe } else { EstimatorKind::OneStepFromQmle };
    let mut obj = Objective::new(target);
    let (lo, hi) = box_f64(bx);
    let fallback = || bx.center().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();

    let mut cond = None;
    let step = obj.derivs(&initial.theta_hat, kappa - 1).and_then(|d| {
        cond = Some(condition_number(&d.hess));
        let inv = invert(&d.hess)?;
        let a1: Vec<f64> = inv.mat_vec(&d.grad).into_iter().map(|v| -v).collect();
        let mut theta: Vec<f64> = initial.theta_hat.iter().zip(&a1).map(|(t, a)| t + a).collect();
        if kappa == 4 {
            let t = d.third.contract2(&a1);
            let a2: Vec<f64> = inv.mat_vec(&t).into_iter().map(|v| -0.5 * v).collect();
            for (v, a) in theta.iter_mut().zip(&a2) {
                *v += a;
            }
        }
        let lifted: Vec<F> = theta.iter().map(|&v| F::of(v)).collect();
        (theta.iter().all(|v| v.is_finite()) && bx.contains(&lifted)).then_some(theta)
    });
    let used_fallback = step.is_none();
    let theta = step.unwrap_or_else(fallback);
    let value = obj.value(&theta).unwrap_or(f64::NAN);
    let mut report = base_report(target, kind, theta.clone(), value);
    report.diagnostics.fallback = used_fallback;
    report.diagnostics.condition_number = cond;
    report.diagnostics.iterations = 1;
    report.diagnostics.at_boundary = on_boundary(&theta, &lo, &hi);
    report.diagnostics.evaluations = obj.evaluations;
    report.diagnostics.converged = !used_fallback;
    if let Some(d) = obj.derivs(&theta, 1) {
        report.diagnostics.projected_grad = projected_grad_norm(&theta, &d.grad, &lo, &hi);
    }
    report.config = initial.config.clone();
    report.config.kappa = Some(kappa);
    attach_information(&mut report, target);
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
