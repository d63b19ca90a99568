//! Quasi-log-likelihood surfaces and their θ-derivatives up to order three.
//!
//! Every surface kind shares one shape,
//!
//! ```text
//! H(θ) = −½ Σ_k Σ_{j kept} { a_k h⁻¹ S^(k)(X_{j−1}, θ)⁻¹[(Δ_j Y^(k))^{⊗2}] K_{n,j} + b_k log det S^(k)(X_{j−1}, θ) }
//! ```
//!
//! with block weights `a_k = 1/q`, `b_k = 1/p` set by the filter. Values are
//! computed generically over [`Real`]; derivatives come from evaluating
//! along directions in [`Taylor3`] jets and polarizing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{local_filter_set, moving_rank, FilterError, FilterKind, FilterResult};
use crate::linalg::Matrix;
use crate::model::{increments, BlockLayout, DiffusionModel, ModelError, ParamBox, SamplePath, TriangularVolatility};
use crate::scalar::{Real, Scalar, Taylor3};
use crate::statdist::TruncationConstants;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("S block {block} is not positive definite at increment {index} for theta {theta:?}")]
    NotPositiveDefinite { block: usize, index: usize, theta: Vec<f64> },
    #[error("parameter has dimension {got}, surface expects {expected}")]
    ParamDim { got: usize, expected: usize },
    #[error("inconsistent likelihood inputs: {0}")]
    Inconsistent(String),
    #[error("no increments survive the filter")]
    EmptyKeptSet,
    #[error("annealing index must lie in (0, 1/2], got {0}")]
    BetaRange(f64),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    FixedAlpha,
    Moving,
    Plain,
    Local,
    /// Any other surface (test functions, user code).
    Custom,
}

/// Symmetric third-order tensor stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<F> {
    p: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor3<F> {
    pub fn zeros(p: usize) -> Self {
        Self { p, data: vec![F::zero(); p * p * p] }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> F {
        self.data[(a * self.p + b) * self.p + c]
    }

    fn set_symmetric(&mut self, a: usize, b: usize, c: usize, v: F) {
        let p = self.p;
        for (i, j, k) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
            self.data[(i * p + j) * p + k] = v;
        }
    }

    /// `T[u ⊗ u]`, the vector with entries `Σ_{bc} T_abc u_b u_c`.
    pub fn contract2(&self, u: &[F]) -> Vec<F> {
        (0..self.p)
            .map(|a| {
                let mut acc = F::zero();
                for b in 0..self.p {
                    for c in 0..self.p {
                        acc += self.get(a, b, c) * u[b] * u[c];
                    }
                }
                acc
            })
            .collect()
    }

    pub fn scaled(&self, k: F) -> Self {
        Self { p: self.p, data: self.data.iter().map(|&v| v * k).collect() }
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Tensor3<G> {
        Tensor3 { p: self.p, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Value and derivatives of a surface at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives<F> {
    pub value: F,
    pub grad: Vec<F>,
    pub hess: Matrix<F>,
    pub third: Tensor3<F>,
}

/// An evaluable quasi-log-likelihood.
pub trait Surface<F: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Number of increments `n` behind the surface.
    fn sample_size(&self) -> usize;

    /// Multiplicative factor relative to the unannealed surface.
    fn annealing_factor(&self) -> F {
        F::one()
    }

    fn kind(&self) -> SurfaceKind {
        SurfaceKind::Custom
    }

    /// Increments entering each block, when the surface comes from a filter.
    fn kept_counts(&self) -> Vec<usize> {
        Vec::new()
    }

    fn value<R: Real<Base = F>>(&self, theta: &[R]) -> Result<R, LikelihoodError>;

    fn eval(&self, theta: &[F]) -> Result<F, LikelihoodError> {
        self.value(theta)
    }

    /// `t ↦ H(θ + t u)` as a third-order Taylor polynomial.
    fn jet(&self, theta: &[F], dir: &[F]) -> Result<Taylor3<F>, LikelihoodError> {
        let t: Vec<Taylor3<F>> = theta.iter().zip(dir).map(|(&v, &d)| Taylor3::variable(v, d)).collect();
        self.value(&t)
    }

    /// Derivatives up to `order` (1, 2 or 3); higher orders are left zero.
    fn derivatives(&self, theta: &[F], order: usize) -> Result<Derivatives<F>, LikelihoodError> {
        polarize(theta, order, |dir| self.jet(theta, dir))
    }

    fn grad(&self, theta: &[F]) -> Result<Vec<F>, LikelihoodError> {
        Ok(self.derivatives(theta, 1)?.grad)
    }

    fn hess(&self, theta: &[F]) -> Result<Matrix<F>, LikelihoodError> {
        Ok(self.derivatives(theta, 2)?.hess)
    }

    fn third(&self, theta: &[F]) -> Result<Tensor3<F>, LikelihoodError> {
        Ok(self.derivatives(theta, 3)?.third)
    }
}

impl<F: Scalar, S: Surface<F>> Surface<F> for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn sample_size(&self) -> usize {
        (**self).sample_size()
    }
    fn annealing_factor(&self) -> F {
        (**self).annealing_factor()
    }
    fn kind(&self) -> SurfaceKind {
        (**self).kind()
    }
    fn kept_counts(&self) -> Vec<usize> {
        (**self).kept_counts()
    }
    fn value<R: Real<Base = F>>(&self, theta: &[R]) -> Result<R, LikelihoodError> {
        (**self).value(theta)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Recovers gradient, Hessian and third-derivative tensor from directional
/// jets along sums of coordinate vectors (polarization identities).
fn polarize<F: Scalar>(
    theta: &[F],
    order: usize,
    mut jet: impl FnMut(&[F]) -> Result<Taylor3<F>, LikelihoodError>,
) -> Result<Derivatives<F>, LikelihoodError> {
    let p = theta.len();
    if p == 0 {
        let value = jet(&[])?.c[0];
        return Ok(Derivatives { value, grad: vec![], hess: Matrix::zeros(0, 0), third: Tensor3::zeros(0) });
    }
    let mut cache: HashMap<Vec<u32>, Taylor3<F>> = HashMap::new();
    // jet along Σ counts_i e_i, reduced to a primitive direction by homogeneity
    let mut along = |counts: Vec<u32>| -> Result<Taylor3<F>, LikelihoodError> {
        let g = counts.iter().copied().fold(0, gcd).max(1);
        let primitive: Vec<u32> = counts.iter().map(|c| c / g).collect();
        let base = match cache.get(&primitive) {
            Some(t) => *t,
            None => {
                let dir: Vec<F> = primitive.iter().map(|&c| F::of(f64::from(c))).collect();
                let t = jet(&dir)?;
                cache.insert(primitive, t);
                t
            }
        };
        let gf = F::of(f64::from(g));
        Ok(Taylor3 { c: [base.c[0], base.c[1] * gf, base.c[2] * gf * gf, base.c[3] * gf * gf * gf] })
    };
    let unit_sum = |idx: &[usize]| {
        let mut c = vec![0u32; p];
        for &i in idx {
            c[i] += 1;
        }
        c
    };

    let mut value = F::nan();
    let mut grad = vec![F::zero(); p];
    for a in 0..p {
        let t = along(unit_sum(&[a]))?;
        value = t.c[0];
        grad[a] = t.derivative(1);
    }

    let mut hess = Matrix::zeros(p, p);
    if order >= 2 {
        let q = |t: Taylor3<F>| t.derivative(2);
        for a in 0..p {
            hess[(a, a)] = q(along(unit_sum(&[a]))?);
        }
        for a in 0..p {
            for b in 0..a {
                let v = (q(along(unit_sum(&[a, b]))?) - hess[(a, a)] - hess[(b, b)]) * F::of(0.5);
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
    }

    let mut third = Tensor3::zeros(p);
    if order >= 3 {
        let cube = |t: Taylor3<F>| t.derivative(3);
        for a in 0..p {
            for b in 0..=a {
                for c in 0..=b {
                    let v = (cube(along(unit_sum(&[a, b, c]))?)
                        - cube(along(unit_sum(&[a, b]))?)
                        - cube(along(unit_sum(&[a, c]))?)
                        - cube(along(unit_sum(&[b, c]))?)
                        + cube(along(unit_sum(&[a]))?)
                        + cube(along(unit_sum(&[b]))?)
                        + cube(along(unit_sum(&[c]))?))
                        / F::of(6.0);
                    third.set_symmetric(a, b, c, v);
                }
            }
        }
    }
    Ok(Derivatives { value, grad, hess, third })
}

/// Kept increments of one block with their weights.
#[derive(Debug, Clone, PartialEq)]
struct BlockTerms<F> {
    block: usize,
    size: usize,
    /// Original positions of the kept increments.
    index: Vec<usize>,
    /// Kept increments, `size` values each, already multiplied by the cap.
    dy: Vec<F>,
    /// `X_{t_{j−1}}` rows of the kept increments.
    x: Vec<F>,
    quad_weight: F,
    logdet_weight: F,
    /// `Σ cap (ΔY)^{⊗2}` over kept increments, used when S ignores the state.
    scatter: Matrix<F>,
}

/// A quasi-log-likelihood built from a model, a path and per-block filters.
#[derive(Debug, Clone)]
pub struct QuasiLikelihood<F, M> {
    model: M,
    kind: SurfaceKind,
    n: usize,
    h_inv: F,
    dim_x: usize,
    blocks: Vec<BlockTerms<F>>,
}

impl<F: Scalar, M: DiffusionModel<F>> QuasiLikelihood<F, M> {
    /// General constructor. `data` replaces the path increments when given
    /// (the local comparator uses drift-corrected increments).
    fn build(
        model: M,
        path: &SamplePath<F>,
        kind: SurfaceKind,
        filters: &[FilterResult<F>],
        weights: &[(F, F)],
        data: Option<Vec<F>>,
    ) -> Result<Self, LikelihoodError> {
        let layout: BlockLayout = model.layout().clone();
        if model.dim_y() != path.dim_y() {
            return Err(LikelihoodError::Inconsistent(format!("model has {} observed coordinates, path has {}", model.dim_y(), path.dim_y())));
        }
        if filters.len() != layout.count() || weights.len() != layout.count() {
            return Err(LikelihoodError::Inconsistent(format!("need one filter and weight pair per block ({})", layout.count())));
        }
        let n = path.n();
        let dy = increments(path);
        let raw = data.as_deref().unwrap_or(dy.as_slice());
        let m = path.dim_y();
        let dim_x = path.dim_x();
        let mut blocks = Vec::with_capacity(layout.count());
        for (k, (filter, &(quad_weight, logdet_weight))) in filters.iter().zip(weights).enumerate() {
            if filter.n() != n {
                return Err(LikelihoodError::Inconsistent(format!("filter for block {k} covers {} increments, path has {n}", filter.n())));
            }
            let cols = layout.range(k);
            let size = cols.len();
            let mut values = Vec::with_capacity(filter.kept.len() * size);
            let mut xs = Vec::with_capacity(filter.kept.len() * dim_x);
            let mut scatter = Matrix::zeros(size, size);
            for &j in &filter.kept {
                let capped = if filter.cap[j] { F::one() } else { F::zero() };
                let row = &raw[j * m..(j + 1) * m];
                let v: Vec<F> = row[cols.clone()].iter().map(|&d| d * capped).collect();
                for a in 0..size {
                    for b in 0..size {
                        scatter[(a, b)] += v[a] * v[b];
                    }
                }
                values.extend_from_slice(&v);
                xs.extend_from_slice(path.x_row(j));
            }
            blocks.push(BlockTerms { block: k, size, index: filter.kept.clone(), dy: values, x: xs, quad_weight, logdet_weight, scatter });
        }
        Ok(Self { model, kind, n, h_inv: F::one() / path.h(), dim_x, blocks })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Original positions of the kept increments of block `k`.
    pub fn kept_indices(&self, k: usize) -> &[usize] {
        &self.blocks[k].index
    }

    /// `(1/q, 1/p)` weights per block.
    pub fn weights(&self) -> Vec<(F, F)> {
        self.blocks.iter().map(|b| (b.quad_weight, b.logdet_weight)).collect()
    }

    fn not_pd<R: Real<Base = F>>(block: usize, index: usize, theta: &[R]) -> LikelihoodError {
        LikelihoodError::NotPositiveDefinite { block, index, theta: theta.iter().map(|t| t.base().as_f64()).collect() }
    }

    fn block_value<R: Real<Base = F>>(&self, b: &BlockTerms<F>, theta: &[R]) -> Result<R, LikelihoodError> {
        let lift = |v: &[F]| -> Vec<R> { v.iter().map(|&d| R::lift(d)).collect() };
        let h_inv = R::lift(self.h_inv);
        let qw = R::lift(b.quad_weight);
        let lw = R::lift(b.logdet_weight);
        if !self.model.state_dependent() {
            // x is ignored by the model; any row works
            let x0 = b.x.get(..self.dim_x).unwrap_or(&[]);
            let x_probe = if x0.is_empty() { vec![F::zero(); self.dim_x] } else { x0.to_vec() };
            let s = self.model.s_block(b.block, &x_probe, theta);
            let chol = s.cholesky().map_err(|_| Self::not_pd(b.block, b.index.first().copied().unwrap_or(0), theta))?;
            let count = R::lift(F::of_usize(b.index.len()));
            // tr(S⁻¹ M) with M the scatter matrix
            let mut trace = R::zero();
            for c in 0..b.size {
                let col: Vec<F> = (0..b.size).map(|r| b.scatter[(r, c)]).collect();
                trace += chol.solve(&lift(&col))[c];
            }
            return Ok(qw * h_inv * trace + lw * count * chol.log_det());
        }
        let mut acc = R::zero();
        for (t, &j) in b.index.iter().enumerate() {
            let x = &b.x[t * self.dim_x..(t + 1) * self.dim_x];
            let s = self.model.s_block(b.block, x, theta);
            let chol = s.cholesky().map_err(|_| Self::not_pd(b.block, j, theta))?;
            let v = lift(&b.dy[t * b.size..(t + 1) * b.size]);
            acc += qw * h_inv * chol.quad_form(&v) + lw * chol.log_det();
        }
        Ok(acc)
    }
}

impl<F: Scalar, M: DiffusionModel<F>> Surface<F> for QuasiLikelihood<F, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn sample_size(&self) -> usize {
        self.n
    }

    fn kind(&self) -> SurfaceKind {
        self.kind
    }

    fn kept_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.index.len()).collect()
    }

    fn value<R: Real<Base = F>>(&self, theta: &[R]) -> Result<R, LikelihoodError> {
        if theta.len() != self.dim() {
            return Err(LikelihoodError::ParamDim { got: theta.len(), expected: self.dim() });
        }
        let mut total = R::zero();
        for b in &self.blocks {
            total += self.block_value(b, theta)?;
        }
        Ok(total.scale(F::of(-0.5)))
    }
}

fn check_filters<F: Scalar>(filters: &[FilterResult<F>], expected: FilterKind) -> Result<(), LikelihoodError> {
    if let Some(k) = filters.iter().position(|f| f.kind != expected && f.kind != FilterKind::None) {
        return Err(LikelihoodError::Inconsistent(format!("filter for block {k} is {:?}, expected {:?}", filters[k].kind, expected)));
    }
    Ok(())
}

/// Fixed-α quasi-log-likelihood with weights `1/q(α)` and `1/p(α)`.
pub fn fixed_alpha_loglik<F: Scalar, M: DiffusionModel<F>>(
    model: M,
    path: &SamplePath<F>,
    filters: &[FilterResult<F>],
    consts: &[TruncationConstants<F>],
) -> Result<QuasiLikelihood<F, M>, LikelihoodError> {
    check_filters(filters, FilterKind::FixedAlpha)?;
    let layout = model.layout().clone();
    if consts.len() != layout.count() {
        return Err(LikelihoodError::Inconsistent("one set of truncation constants per block".into()));
    }
    for (k, c) in consts.iter().enumerate() {
        if c.m != layout.sizes()[k] {
            return Err(LikelihoodError::Inconsistent(format!("constants for block {k} use m = {}, block has {}", c.m, layout.sizes()[k])));
        }
    }
    let weights: Vec<(F, F)> = consts.iter().map(|c| (F::one() / c.q, F::one() / c.p)).collect();
    QuasiLikelihood::build(model, path, SurfaceKind::FixedAlpha, filters, &weights, None)
}

/// Local-Gaussian quasi-log-likelihood on every increment, no cap.
pub fn plain_loglik<F: Scalar, M: DiffusionModel<F>>(model: M, path: &SamplePath<F>) -> Result<QuasiLikelihood<F, M>, LikelihoodError> {
    let dy = increments(path);
    let layout = model.layout().clone();
    let filters: Vec<FilterResult<F>> = (0..layout.count()).map(|k| FilterResult::all(dy.block_norms(layout.range(k)))).collect();
    let weights = vec![(F::one(), F::one()); layout.count()];
    QuasiLikelihood::build(model, path, SurfaceKind::Plain, &filters, &weights, None)
}

/// How the moving-threshold weights `p_n`, `q_n` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MovingWeights {
    /// `p_n = s_n / n`, `q_n = q(1 − s_n/n)`. Unbiased on jump-free
    /// paths; overcorrects a little once the dropped set is mostly jumps.
    #[default]
    Truncated,
    /// `p_n = s_n / n`, `q_n = 1`. Biased down by the lost Gaussian tail,
    /// about 7% in σ at n = 1000.
    RankOnly,
    /// `p_n = q_n = 1`.
    Unit,
}

impl MovingWeights {
    /// `(p_n, q_n)` for a block of dimension `m`.
    pub fn resolve<F: Scalar>(self, n: usize, m: usize, b: F, delta1: F) -> Result<(F, F), LikelihoodError> {
        let s = moving_rank(n, b, delta1)?;
        let pn = F::of_usize(s) / F::of_usize(n);
        Ok(match self {
            MovingWeights::Unit => (F::one(), F::one()),
            MovingWeights::RankOnly => (pn, F::one()),
            MovingWeights::Truncated => {
                let alpha_n = F::one() - pn;
                let q = TruncationConstants::new(alpha_n, m).map_err(|e| LikelihoodError::Inconsistent(e.to_string()))?.q;
                (pn, q)
            }
        })
    }
}

/// Moving-threshold quasi-log-likelihood with explicit `(p_n, q_n)` per block.
pub fn moving_loglik<F: Scalar, M: DiffusionModel<F>>(
    model: M,
    path: &SamplePath<F>,
    filters: &[FilterResult<F>],
    pn: &[F],
    qn: &[F],
) -> Result<QuasiLikelihood<F, M>, LikelihoodError> {
    check_filters(filters, FilterKind::Moving)?;
    if pn.len() != filters.len() || qn.len() != filters.len() {
        return Err(LikelihoodError::Inconsistent("one (p_n, q_n) pair per block".into()));
    }
    if let Some(k) = (0..pn.len()).find(|&k| !(pn[k] > F::zero() && qn[k] > F::zero())) {
        return Err(LikelihoodError::Inconsistent(format!("p_n and q_n of block {k} must be positive")));
    }
    let weights: Vec<(F, F)> = pn.iter().zip(qn).map(|(&p, &q)| (F::one() / q, F::one() / p)).collect();
    QuasiLikelihood::build(model, path, SurfaceKind::Moving, filters, &weights, None)
}

/// Local threshold comparator for a scalar path with known drift rate `eta`:
/// Gaussian likelihood of `X̄_j = ΔX_j + η X_{j−1} h` over `|ΔX_j| ≤ h^ρ`,
/// parameterized by `σ`.
pub fn local_loglik<F: Scalar>(
    path: &SamplePath<F>,
    rho: F,
    eta: F,
    param_box: ParamBox<F>,
) -> Result<QuasiLikelihood<F, TriangularVolatility<F>>, LikelihoodError> {
    if path.dim_y() != 1 {
        return Err(LikelihoodError::Inconsistent("local threshold likelihood needs a scalar path".into()));
    }
    let model = TriangularVolatility::new(BlockLayout::single(1), param_box)?;
    let dy = increments(path);
    let filter = local_filter_set(&dy, path.h(), rho)?;
    if filter.kept.is_empty() {
        return Err(LikelihoodError::EmptyKeptSet);
    }
    let h = path.h();
    let corrected: Vec<F> = (0..path.n()).map(|j| dy.row(j)[0] + eta * path.y_row(j)[0] * h).collect();
    QuasiLikelihood::build(model, path, SurfaceKind::Local, &[filter], &[(F::one(), F::one())], Some(corrected))
}

/// `n^{−1+2β} H`: the annealed surface.
#[derive(Debug, Clone)]
pub struct Annealed<S> {
    inner: S,
    beta: f64,
}

impl<S> Annealed<S> {
    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn annealed_loglik<F: Scalar, S: Surface<F>>(surface: S, beta: F) -> Result<Annealed<S>, LikelihoodError> {
    if !(beta > F::zero() && beta <= F::of(0.5)) {
        return Err(LikelihoodError::BetaRange(beta.as_f64()));
    }
    Ok(Annealed { inner: surface, beta: beta.as_f64() })
}

impl<F: Scalar, S: Surface<F>> Surface<F> for Annealed<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample_size(&self) -> usize {
        self.inner.sample_size()
    }

    fn kind(&self) -> SurfaceKind {
        self.inner.kind()
    }

    fn kept_counts(&self) -> Vec<usize> {
        self.inner.kept_counts()
    }

    fn annealing_factor(&self) -> F {
        self.inner.annealing_factor() * F::of_usize(self.sample_size()).powf(F::of(-1.0 + 2.0 * self.beta))
    }

    fn value<R: Real<Base = F>>(&self, theta: &[R]) -> Result<R, LikelihoodError> {
        let factor = F::of_usize(self.sample_size()).powf(F::of(-1.0 + 2.0 * self.beta));
        Ok(self.inner.value(theta)?.scale(factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{global_filter_from_norms, identity_scale, global_filter_set};
    use crate::model::StateDependentVolatility;
    use crate::simulate::{simulate_ou_jump, OuJumpParams};

    fn scalar_model() -> TriangularVolatility<f64> {
        TriangularVolatility::scalar(0.01, 2.0).unwrap()
    }

    #[test]
    fn one_zero_increment_gives_minus_log_theta() {
        let path = SamplePath::scalar(0.0, 1.0, vec![0.0, 0.0, 0.0]).unwrap();
        let f = FilterResult::all(vec![0.0, 0.0]);
        let consts = [TruncationConstants::new(0.0, 1).unwrap()];
        let model = scalar_model();
        let s = fixed_alpha_loglik(&model, &path, &[f], &consts).unwrap();
        // two zero increments: H = −2 log θ
        for &t in &[0.5, 1.0, 1.7] {
            assert!((s.eval(&[t]).unwrap() + 2.0 * f64::ln(t)).abs() < 1e-14);
        }
        assert_eq!(s.eval(&[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_stationary_point() {
        let p = OuJumpParams { lambda: 0.0, seed: 4, ..Default::default() };
        let path = simulate_ou_jump::<f64>(&p).unwrap();
        let s = plain_loglik(scalar_model(), &path).unwrap();
        let dy = increments(&path);
        let theta2 = dy.as_slice().iter().map(|d| d * d / path.h()).sum::<f64>() / path.n() as f64;
        let d = s.derivatives(&[theta2.sqrt()], 2).unwrap();
        assert!(d.grad[0].abs() < 1e-8, "grad {}", d.grad[0]);
        assert!(d.hess[(0, 0)] < 0.0);
    }

    #[test]
    fn annealing_factor_arithmetic() {
        let path = SamplePath::scalar(0.0, 0.01, (0..=100).map(|i| (i as f64 * 0.37).sin() * 0.1).collect()).unwrap();
        let s = plain_loglik(scalar_model(), &path).unwrap();
        let a = annealed_loglik(&s, 0.25).unwrap();
        assert!((a.annealing_factor() - 0.1).abs() < 1e-15);
        let v = s.eval(&[0.3]).unwrap();
        assert!((a.eval(&[0.3]).unwrap() - 0.1 * v).abs() < 1e-12 * v.abs());
        let half = annealed_loglik(&s, 0.5).unwrap();
        assert_eq!(half.eval(&[0.3]).unwrap(), v);
        assert!(annealed_loglik(&s, 0.0).is_err());
        assert!(annealed_loglik(&s, 0.6).is_err());
    }

    #[test]
    fn not_positive_definite_reports_location() {
        let path = SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0, 0.5, 0.7]).unwrap();
        let model = StateDependentVolatility::new(ParamBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()).unwrap();
        let s = plain_loglik(&model, &path).unwrap();
        // S = θ₀ + θ₁ x² vanishes at x = 1, which is X_{t_1}, the start of increment 2
        let err = s.eval(&[0.5, -0.5]).unwrap_err();
        assert!(matches!(err, LikelihoodError::NotPositiveDefinite { block: 0, index: 1, .. }), "{err:?}");
    }

    #[test]
    fn fixed_alpha_rejects_mismatched_constants() {
        let path = SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0, 0.5, 0.7]).unwrap();
        let f = global_filter_from_norms(vec![1.0, 0.5, 0.2], 0.3).unwrap();
        let bad = [TruncationConstants::new(0.3, 2).unwrap()];
        assert!(fixed_alpha_loglik(scalar_model(), &path, &[f.clone()], &bad).is_err());
        let moving = FilterResult { kind: FilterKind::Moving, ..f };
        let good = [TruncationConstants::new(0.3, 1).unwrap()];
        assert!(fixed_alpha_loglik(scalar_model(), &path, &[moving], &good).is_err());
    }

    #[test]
    fn local_comparator_closed_form() {
        let p = OuJumpParams { seed: 12, ..Default::default() };
        let path = simulate_ou_jump::<f64>(&p).unwrap();
        let bx = ParamBox::interval(0.001, 5.0).unwrap();
        let s = local_loglik(&path, 0.5, 0.1, bx.clone()).unwrap();
        let dy = increments(&path);
        let h = path.h();
        let thr = h.powf(0.5);
        let (mut acc, mut cnt) = (0.0, 0usize);
        for j in 0..path.n() {
            if dy.row(j)[0].abs() <= thr {
                let xb = dy.row(j)[0] + 0.1 * path.y_row(j)[0] * h;
                acc += xb * xb / h;
                cnt += 1;
            }
        }
        let sigma = (acc / cnt as f64).sqrt();
        assert!(s.grad(&[sigma]).unwrap()[0].abs() < 1e-8);
        // direct evaluation of the comparator at another point
        let at = 0.12f64;
        let direct = -(acc / (2.0 * at * at)) - 0.5 * cnt as f64 * (at * at).ln();
        assert!((s.eval(&[at]).unwrap() - direct).abs() < 1e-9 * direct.abs());

        // single surviving increment with X̄ = 0: H = −½ log σ²
        let flat = SamplePath::scalar(0.0, 1e-4, vec![0.0, 0.0, 1.0]).unwrap();
        let s = local_loglik(&flat, 0.5, 0.0, bx.clone()).unwrap();
        assert_eq!(s.kept_counts(), vec![1]);
        assert!((s.eval(&[0.3]).unwrap() + 0.5 * 0.09f64.ln()).abs() < 1e-14);

        let wild = SamplePath::scalar(0.0, 1e-4, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(local_loglik(&wild, 0.5, 0.0, bx).unwrap_err(), LikelihoodError::EmptyKeptSet);
    }

    #[test]
    fn third_derivative_of_scalar_model() {
        // H(θ) = −½ (A/θ² + 2B log θ): H''' = −½ (−24 A/θ⁵ + 4B/θ³)
        let path = SamplePath::scalar(0.0, 1.0, vec![0.0, 0.3, -0.1, 0.4]).unwrap();
        let s = plain_loglik(scalar_model(), &path).unwrap();
        let a: f64 = [0.3f64, -0.4, 0.5].iter().map(|d| d * d).sum();
        let b = 3.0;
        let t = 0.7f64;
        let d = s.derivatives(&[t], 3).unwrap();
        let g = -0.5 * (-2.0 * a / t.powi(3) + 2.0 * b / t);
        let h = -0.5 * (6.0 * a / t.powi(4) - 2.0 * b / (t * t));
        let c = -0.5 * (-24.0 * a / t.powi(5) + 4.0 * b / t.powi(3));
        assert!((d.grad[0] - g).abs() < 1e-12 * g.abs());
        assert!((d.hess[(0, 0)] - h).abs() < 1e-12 * h.abs());
        assert!((d.third.get(0, 0, 0) - c).abs() < 1e-12 * c.abs());
    }

    #[test]
    fn identity_scale_filter_feeds_surface() {
        let p = OuJumpParams { seed: 5, ..Default::default() };
        let path = simulate_ou_jump::<f64>(&p).unwrap();
        let dy = increments(&path);
        let f = global_filter_set(&dy, 0..1, &identity_scale(path.n(), 1), 0.05).unwrap();
        let consts = [TruncationConstants::new(0.05, 1).unwrap()];
        let s = fixed_alpha_loglik(scalar_model(), &path, &[f], &consts).unwrap();
        assert_eq!(s.kept_counts(), vec![950]);
        assert!(s.eval(&[0.1]).unwrap().is_finite());
    }
}
