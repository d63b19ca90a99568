//! Observation model: sample paths, increments, parameter boxes and the
//! block-diagonal diffusion coefficient.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{Real, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("a path needs at least 3 observations (n >= 2), got {0}")]
    TooShort(usize),
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("observation matrix has {len} entries, not a multiple of {cols} columns")]
    Ragged { len: usize, cols: usize },
    #[error("covariates have {x} rows but observations have {y}")]
    RowMismatch { y: usize, x: usize },
    #[error("jump truth has length {got}, expected {expected}")]
    TruthLength { got: usize, expected: usize },
    #[error("parameter box is empty or degenerate in coordinate {0}")]
    EmptyBox(usize),
    #[error("parameter has dimension {got}, model expects {expected}")]
    ParamDim { got: usize, expected: usize },
    #[error("parameter {0:?} lies outside the parameter box")]
    OutsideBox(Vec<f64>),
    #[error("S block {block} is not positive definite at increment {index} for theta {theta:?}")]
    NotPositiveDefinite { block: usize, index: usize, theta: Vec<f64> },
    #[error("block sizes {sizes:?} do not sum to the observation dimension {dim}")]
    BlockMismatch { sizes: Vec<usize>, dim: usize },
}

/// Discretely observed path on the grid `t_j = t0 + j h`, `j = 0..=n`.
///
/// `x` defaults to `y` (the covariate process is the observed process).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath<F> {
    t0: F,
    h: F,
    m: usize,
    y: Vec<F>,
    covariates: Option<(usize, Vec<F>)>,
    jump_truth: Option<Vec<bool>>,
}

impl<F: Scalar> SamplePath<F> {
    /// `y` is row-major with `m` columns and `n + 1` rows.
    pub fn new(t0: F, h: F, m: usize, y: Vec<F>) -> Result<Self, ModelError> {
        if !(h > F::zero()) || !h.is_finite() {
            return Err(ModelError::BadStep(h.as_f64()));
        }
        if m == 0 || y.len() % m != 0 {
            return Err(ModelError::Ragged { len: y.len(), cols: m });
        }
        let rows = y.len() / m;
        if rows < 3 {
            return Err(ModelError::TooShort(rows));
        }
        Ok(Self { t0, h, m, y, covariates: None, jump_truth: None })
    }

    /// Scalar path from a series of values.
    pub fn scalar(t0: F, h: F, y: Vec<F>) -> Result<Self, ModelError> {
        Self::new(t0, h, 1, y)
    }

    pub fn with_covariates(mut self, d: usize, x: Vec<F>) -> Result<Self, ModelError> {
        if d == 0 || x.len() % d != 0 {
            return Err(ModelError::Ragged { len: x.len(), cols: d });
        }
        if x.len() / d != self.rows() {
            return Err(ModelError::RowMismatch { y: self.rows(), x: x.len() / d });
        }
        self.covariates = Some((d, x));
        Ok(self)
    }

    pub fn with_jump_truth(mut self, truth: Vec<bool>) -> Result<Self, ModelError> {
        if truth.len() != self.n() {
            return Err(ModelError::TruthLength { got: truth.len(), expected: self.n() });
        }
        self.jump_truth = Some(truth);
        Ok(self)
    }

    fn rows(&self) -> usize {
        self.y.len() / self.m
    }

    /// Number of increments.
    pub fn n(&self) -> usize {
        self.rows() - 1
    }

    pub fn dim_y(&self) -> usize {
        self.m
    }

    pub fn dim_x(&self) -> usize {
        self.covariates.as_ref().map_or(self.m, |(d, _)| *d)
    }

    pub fn h(&self) -> F {
        self.h
    }

    pub fn t0(&self) -> F {
        self.t0
    }

    pub fn horizon(&self) -> F {
        self.h * F::of_usize(self.n())
    }

    pub fn time(&self, j: usize) -> F {
        self.t0 + self.h * F::of_usize(j)
    }

    pub fn y_row(&self, j: usize) -> &[F] {
        &self.y[j * self.m..(j + 1) * self.m]
    }

    pub fn x_row(&self, j: usize) -> &[F] {
        match &self.covariates {
            Some((d, x)) => &x[j * d..(j + 1) * d],
            None => self.y_row(j),
        }
    }

    pub fn has_covariates(&self) -> bool {
        self.covariates.is_some()
    }

    pub fn jump_truth(&self) -> Option<&[bool]> {
        self.jump_truth.as_deref()
    }

    pub fn y(&self) -> &[F] {
        &self.y
    }
}

/// Increments `Δ_j Y = Y_{t_j} − Y_{t_{j−1}}`, row `i` holding `Δ_{i+1} Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementView<F> {
    m: usize,
    dy: Vec<F>,
}

impl<F: Scalar> IncrementView<F> {
    pub fn n(&self) -> usize {
        self.dy.len() / self.m
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.dy[i * self.m..(i + 1) * self.m]
    }

    pub fn block(&self, i: usize, cols: Range<usize>) -> &[F] {
        &self.row(i)[cols]
    }

    /// Euclidean norms of the block over all increments.
    pub fn block_norms(&self, cols: Range<usize>) -> Vec<F> {
        (0..self.n())
            .map(|i| self.block(i, cols.clone()).iter().map(|v| *v * *v).sum::<F>().sqrt())
            .collect()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.dy
    }
}

pub fn increments<F: Scalar>(path: &SamplePath<F>) -> IncrementView<F> {
    let m = path.dim_y();
    let dy = path.y[m..].iter().zip(&path.y[..path.y.len() - m]).map(|(&b, &a)| b - a).collect();
    IncrementView { m, dy }
}

/// Partition of the observation coordinates into the diagonal blocks of S.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    sizes: Vec<usize>,
}

impl BlockLayout {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(!sizes.is_empty() && sizes.iter().all(|&s| s > 0), "blocks must be nonempty");
        Self { sizes }
    }

    pub fn single(m: usize) -> Self {
        Self::new(vec![m])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        let start: usize = self.sizes[..k].iter().sum();
        start..start + self.sizes[k]
    }
}

/// Axis-aligned parameter box Θ with nonempty interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox<F> {
    lower: Vec<F>,
    upper: Vec<F>,
}

impl<F: Scalar> ParamBox<F> {
    pub fn new(lower: Vec<F>, upper: Vec<F>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(ModelError::ParamDim { got: upper.len(), expected: lower.len() });
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i]) || !(upper[i] - lower[i]).is_finite()) {
            return Err(ModelError::EmptyBox(i));
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: F, hi: F) -> Result<Self, ModelError> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[F] {
        &self.lower
    }

    pub fn upper(&self) -> &[F] {
        &self.upper
    }

    pub fn center(&self) -> Vec<F> {
        self.lower.iter().zip(&self.upper).map(|(&a, &b)| (a + b) * F::of(0.5)).collect()
    }

    pub fn contains(&self, theta: &[F]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&t, (&a, &b))| t >= a && t <= b)
    }

    pub fn contains_interior(&self, theta: &[F]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&t, (&a, &b))| t > a && t < b)
    }

    pub fn project(&self, theta: &[F]) -> Vec<F> {
        theta.iter().zip(self.lower.iter().zip(&self.upper)).map(|(&t, (&a, &b))| t.max(a).min(b)).collect()
    }

    pub fn widths(&self) -> Vec<F> {
        self.lower.iter().zip(&self.upper).map(|(&a, &b)| b - a).collect()
    }

    /// The same box shifted by `offset`.
    pub fn translated(&self, offset: &[F]) -> Self {
        Self {
            lower: self.lower.iter().zip(offset).map(|(&a, &o)| a + o).collect(),
            upper: self.upper.iter().zip(offset).map(|(&b, &o)| b + o).collect(),
        }
    }
}

/// Parameterized block-diagonal diffusion coefficient `σ(x, θ)`.
///
/// Implementations are evaluated in any [`Real`] so that likelihood
/// derivatives come out of the same code.
pub trait DiffusionModel<F: Scalar>: Sync {
    fn layout(&self) -> &BlockLayout;

    fn param_box(&self) -> &ParamBox<F>;

    /// `σ^(k)(x, θ)`, an `m_k × m_k` matrix.
    fn sigma_block<R: Real<Base = F>>(&self, k: usize, x: &[F], theta: &[R]) -> Matrix<R>;

    /// `S^(k) = σ^(k) σ^(k)*`.
    fn s_block<R: Real<Base = F>>(&self, k: usize, x: &[F], theta: &[R]) -> Matrix<R> {
        self.sigma_block(k, x, theta).gram()
    }

    /// `false` when S does not depend on the state, so one factorization per block suffices.
    fn state_dependent(&self) -> bool {
        true
    }

    fn dim_y(&self) -> usize {
        self.layout().total()
    }

    fn num_params(&self) -> usize {
        self.param_box().dim()
    }
}

impl<F: Scalar, M: DiffusionModel<F>> DiffusionModel<F> for &M {
    fn layout(&self) -> &BlockLayout {
        (**self).layout()
    }

    fn param_box(&self) -> &ParamBox<F> {
        (**self).param_box()
    }

    fn sigma_block<R: Real<Base = F>>(&self, k: usize, x: &[F], theta: &[R]) -> Matrix<R> {
        (**self).sigma_block(k, x, theta)
    }

    fn s_block<R: Real<Base = F>>(&self, k: usize, x: &[F], theta: &[R]) -> Matrix<R> {
        (**self).s_block(k, x, theta)
    }

    fn state_dependent(&self) -> bool {
        (**self).state_dependent()
    }
}

/// Rejects θ outside Θ and any block failing Cholesky along the path.
pub fn check_positive_definite<F: Scalar, M: DiffusionModel<F>>(
    model: &M,
    path: &SamplePath<F>,
    theta: &[F],
) -> Result<(), ModelError> {
    if theta.len() != model.num_params() {
        return Err(ModelError::ParamDim { got: theta.len(), expected: model.num_params() });
    }
    if !model.param_box().contains(theta) {
        return Err(ModelError::OutsideBox(theta.iter().map(|v| v.as_f64()).collect()));
    }
    if model.dim_y() != path.dim_y() {
        return Err(ModelError::BlockMismatch { sizes: model.layout().sizes().to_vec(), dim: path.dim_y() });
    }
    let rows = if model.state_dependent() { path.n() + 1 } else { 1 };
    for k in 0..model.layout().count() {
        for j in 0..rows {
            if model.s_block(k, path.x_row(j), theta).cholesky().is_err() {
                return Err(ModelError::NotPositiveDefinite {
                    block: k,
                    index: j,
                    theta: theta.iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
    }
    Ok(())
}

/// Constant lower-triangular σ per block; θ lists each block's factor
/// entries row by row (`(0,0), (1,0), (1,1), ...`).
///
/// A single block of size 1 is the scalar model `σ(x, θ) = θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularVolatility<F> {
    layout: BlockLayout,
    param_box: ParamBox<F>,
    offsets: Vec<usize>,
}

impl<F: Scalar> TriangularVolatility<F> {
    pub fn new(layout: BlockLayout, param_box: ParamBox<F>) -> Result<Self, ModelError> {
        let mut offsets = Vec::with_capacity(layout.count());
        let mut p = 0;
        for &s in layout.sizes() {
            offsets.push(p);
            p += s * (s + 1) / 2;
        }
        if param_box.dim() != p {
            return Err(ModelError::ParamDim { got: param_box.dim(), expected: p });
        }
        Ok(Self { layout, param_box, offsets })
    }

    /// Scalar `σ = θ` on `[lo, hi]`.
    pub fn scalar(lo: F, hi: F) -> Result<Self, ModelError> {
        Self::new(BlockLayout::single(1), ParamBox::interval(lo, hi)?)
    }

    /// `m` independent scalar blocks with `σ_k = θ_k`.
    pub fn diagonal(param_box: ParamBox<F>) -> Result<Self, ModelError> {
        Self::new(BlockLayout::new(vec![1; param_box.dim()]), param_box)
    }
}

impl<F: Scalar> DiffusionModel<F> for TriangularVolatility<F> {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn param_box(&self) -> &ParamBox<F> {
        &self.param_box
    }

    fn sigma_block<R: Real<Base = F>>(&self, k: usize, _x: &[F], theta: &[R]) -> Matrix<R> {
        let s = self.layout.sizes()[k];
        let mut m = Matrix::zeros(s, s);
        let mut idx = self.offsets[k];
        for i in 0..s {
            for j in 0..=i {
                m[(i, j)] = theta[idx];
                idx += 1;
            }
        }
        m
    }

    fn state_dependent(&self) -> bool {
        false
    }
}

/// Scalar model with `S(x, θ) = θ₀ + θ₁ x²`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDependentVolatility<F> {
    layout: BlockLayout,
    param_box: ParamBox<F>,
}

impl<F: Scalar> StateDependentVolatility<F> {
    pub fn new(param_box: ParamBox<F>) -> Result<Self, ModelError> {
        if param_box.dim() != 2 {
            return Err(ModelError::ParamDim { got: param_box.dim(), expected: 2 });
        }
        Ok(Self { layout: BlockLayout::single(1), param_box })
    }
}

impl<F: Scalar> DiffusionModel<F> for StateDependentVolatility<F> {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn param_box(&self) -> &ParamBox<F> {
        &self.param_box
    }

    fn sigma_block<R: Real<Base = F>>(&self, k: usize, x: &[F], theta: &[R]) -> Matrix<R> {
        let s = self.s_block(k, x, theta);
        Matrix::from_row_major(1, 1, vec![s[(0, 0)].square_root()])
    }

    fn s_block<R: Real<Base = F>>(&self, _k: usize, x: &[F], theta: &[R]) -> Matrix<R> {
        let x2 = R::lift(x[0] * x[0]);
        Matrix::from_row_major(1, 1, vec![theta[0] + theta[1] * x2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_of_small_path() {
        let p = SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(increments(&p).as_slice(), &[1.0, 2.0]);
        let c = SamplePath::scalar(0.0, 0.5, vec![2.5; 6]).unwrap();
        assert!(increments(&c).as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn increments_telescope() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let y: Vec<f64> = (0..=1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = SamplePath::scalar(0.0, 1e-3, y.clone()).unwrap();
        let sum: f64 = increments(&p).as_slice().iter().sum();
        assert!((sum - (y[1000] - y[0])).abs() < 1e-11);
    }

    #[test]
    fn path_validation() {
        assert_eq!(SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0]).unwrap_err(), ModelError::TooShort(2));
        assert!(matches!(SamplePath::scalar(0.0, 0.0, vec![0.0; 4]), Err(ModelError::BadStep(_))));
        let p = SamplePath::scalar(0.0, 1.0, vec![0.0; 4]).unwrap();
        assert!(matches!(p.clone().with_jump_truth(vec![false; 4]), Err(ModelError::TruthLength { .. })));
        assert!(matches!(p.clone().with_covariates(1, vec![0.0; 3]), Err(ModelError::RowMismatch { .. })));
        let p = p.with_covariates(2, vec![1.0; 8]).unwrap();
        assert_eq!(p.x_row(3), &[1.0, 1.0]);
    }

    #[test]
    fn positive_definiteness_check() {
        let model = TriangularVolatility::scalar(-1.0, 1.0).unwrap();
        let p = SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(check_positive_definite(&model, &p, &[0.5]).is_ok());
        assert!(matches!(check_positive_definite(&model, &p, &[0.0]), Err(ModelError::NotPositiveDefinite { .. })));
        assert!(matches!(check_positive_definite(&model, &p, &[2.0]), Err(ModelError::OutsideBox(_))));

        let sd = StateDependentVolatility::new(ParamBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()).unwrap();
        // θ₀ + θ₁ x² vanishes at x = 1 for θ = (0.5, -0.5)
        let p = SamplePath::scalar(0.0, 1.0, vec![0.0, 1.0, 0.0]).unwrap();
        let err = check_positive_definite(&sd, &p, &[0.5, -0.5]).unwrap_err();
        assert!(matches!(err, ModelError::NotPositiveDefinite { block: 0, index: 1, .. }));
    }

    #[test]
    fn triangular_blocks() {
        let layout = BlockLayout::new(vec![1, 2]);
        let bx = ParamBox::new(vec![0.1; 4], vec![2.0; 4]).unwrap();
        let m = TriangularVolatility::new(layout, bx).unwrap();
        let theta = [1.0, 2.0, 0.5, 3.0];
        let s1 = DiffusionModel::<f64>::s_block(&m, 1, &[0.0], &theta[..]);
        assert_eq!(s1.as_slice(), &[4.0, 1.0, 1.0, 9.25]);
        assert!(TriangularVolatility::new(BlockLayout::new(vec![2]), ParamBox::interval(0.0, 1.0).unwrap()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn increments_are_linear(
            y1 in proptest::collection::vec(-10.0f64..10.0, 5),
            y2 in proptest::collection::vec(-10.0f64..10.0, 5),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let comb: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
            let d = increments(&SamplePath::scalar(0.0, 1.0, comb).unwrap());
            let d1 = increments(&SamplePath::scalar(0.0, 1.0, y1).unwrap());
            let d2 = increments(&SamplePath::scalar(0.0, 1.0, y2).unwrap());
            for i in 0..4 {
                let e = a * d1.row(i)[0] + b * d2.row(i)[0];
                proptest::prop_assert!((d.row(i)[0] - e).abs() < 1e-12);
            }
        }
    }
}
