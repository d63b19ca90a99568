//! Increment selection: the initial scale estimate, the fixed-α global
//! filter, the moving-threshold filter, the truncation cap and the local
//! threshold comparator.
//!
//! Index sets hold 0-based increment positions: position `i` is `Δ_{i+1} Y`.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::{BlockLayout, IncrementView};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("alpha must lie in [0, 1), got {0}")]
    AlphaRange(f64),
    #[error("rho must lie in (0, 1/2], got {0}")]
    RhoRange(f64),
    #[error("moving threshold rank s_n = {n} - {dropped} is below 1")]
    RankTooSmall { n: usize, dropped: usize },
    #[error("invalid filter parameter: {0}")]
    BadParameter(&'static str),
    #[error("scale estimate covers {got} increments, path has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("scale matrix for increment {0} is not positive definite")]
    ScaleNotPositiveDefinite(usize),
    #[error("detection metrics need jump ground truth")]
    MissingTruth,
}

/// Per-increment scale matrices `S̄_{n,j−1}` for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEstimate<F> {
    matrices: Vec<Matrix<F>>,
    floored: Vec<bool>,
    eps0: F,
}

impl<F: Scalar> ScaleEstimate<F> {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn matrix(&self, i: usize) -> &Matrix<F> {
        &self.matrices[i]
    }

    pub fn matrices(&self) -> &[Matrix<F>] {
        &self.matrices
    }

    /// Whether the eigenvalue floor replaced the raw estimate at increment `i`.
    pub fn floored(&self, i: usize) -> bool {
        self.floored[i]
    }

    pub fn eps0(&self) -> F {
        self.eps0
    }

    /// `|S̄^{-1/2} Δ_j Y^(k)|` for every increment.
    pub fn scaled_norms(&self, dy: &IncrementView<F>, cols: Range<usize>) -> Result<Vec<F>, FilterError> {
        if self.len() != dy.n() {
            return Err(FilterError::LengthMismatch { got: self.len(), expected: dy.n() });
        }
        (0..dy.n())
            .map(|i| {
                let chol = self.matrices[i].cholesky().map_err(|_| FilterError::ScaleNotPositiveDefinite(i))?;
                Ok(chol.quad_form(dy.block(i, cols.clone())).sqrt())
            })
            .collect()
    }
}

/// Windowed estimate of the block's scale built from increments that are
/// not larger than any of their `K − 1` predecessors, floored at `eps0/2`.
pub fn initial_scale<F: Scalar>(
    dy: &IncrementView<F>,
    cols: Range<usize>,
    h: F,
    k: usize,
    window: usize,
    eps0: F,
) -> Result<ScaleEstimate<F>, FilterError> {
    if k < 2 {
        return Err(FilterError::BadParameter("K must be at least 2"));
    }
    if window < 1 {
        return Err(FilterError::BadParameter("window must be at least 1"));
    }
    if !(eps0 > F::zero()) {
        return Err(FilterError::BadParameter("eps0 must be positive"));
    }
    let n = dy.n();
    let s = cols.len();
    let norms = dy.block_norms(cols.clone());
    // extended position e covers increments l = e + 1 - window (1-based), zero outside 1..=n
    let ext = n + 2 * window;
    let norm_at = |l: isize| -> F {
        if l >= 1 && (l as usize) <= n {
            norms[l as usize - 1]
        } else {
            F::zero()
        }
    };
    let mut count_prefix = vec![0usize; ext + 1];
    let mut sum_prefix = vec![F::zero(); (ext + 1) * s * s];
    for e in 0..ext {
        let l = e as isize + 1 - window as isize;
        let here = norm_at(l);
        let admitted = (1..k).all(|back| norm_at(l - back as isize) >= here);
        count_prefix[e + 1] = count_prefix[e] + usize::from(admitted);
        let (done, rest) = sum_prefix.split_at_mut((e + 1) * s * s);
        let prev = &done[e * s * s..];
        let cur = &mut rest[..s * s];
        cur.copy_from_slice(prev);
        if admitted && l >= 1 && (l as usize) <= n {
            let v = dy.block(l as usize - 1, cols.clone());
            for a in 0..s {
                for b in 0..s {
                    cur[a * s + b] += v[a] * v[b];
                }
            }
        }
    }

    let half_eps = eps0 * F::of(0.5);
    let mut matrices = Vec::with_capacity(n);
    let mut floored = Vec::with_capacity(n);
    for j in 1..=n {
        // window l in [j - window, j + window] maps to e in [j - 1, j - 1 + 2 window]
        let lo = j - 1;
        let hi = j + 2 * window;
        let count = count_prefix[hi] - count_prefix[lo];
        let denom = h * F::of_usize(count.max(1));
        let data: Vec<F> = (0..s * s).map(|t| (sum_prefix[hi * s * s + t] - sum_prefix[lo * s * s + t]) / denom).collect();
        let mut shat = Matrix::from_row_major(s, s, data);
        // symmetrize away prefix-sum rounding
        for a in 0..s {
            for b in 0..a {
                let v = (shat[(a, b)] + shat[(b, a)]) * F::of(0.5);
                shat[(a, b)] = v;
                shat[(b, a)] = v;
            }
        }
        let mut shifted = shat.clone();
        for a in 0..s {
            shifted[(a, a)] -= half_eps;
        }
        if shifted.cholesky().is_ok() {
            matrices.push(shat);
            floored.push(false);
        } else {
            matrices.push(Matrix::<F>::identity(s).scaled(half_eps));
            floored.push(true);
        }
    }
    Ok(ScaleEstimate { matrices, floored, eps0 })
}

/// `S̄ = I` for every increment.
pub fn identity_scale<F: Scalar>(n: usize, block_dim: usize) -> ScaleEstimate<F> {
    ScaleEstimate { matrices: vec![Matrix::identity(block_dim); n], floored: vec![false; n], eps0: F::zero() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    FixedAlpha,
    Moving,
    Local,
    None,
}

/// Selected increments of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult<F> {
    pub kind: FilterKind,
    /// Sorted, duplicate-free 0-based positions of kept increments.
    pub kept: Vec<usize>,
    pub mask: Vec<bool>,
    pub scaled_norms: Vec<F>,
    /// Truncation cap `K_{n,j}`; all true until [`FilterResult::with_cap`].
    pub cap: Vec<bool>,
    /// Cut-off value where one applies: the `s_n`-th order statistic or `h^ρ`.
    pub threshold: Option<F>,
}

impl<F: Scalar> FilterResult<F> {
    fn from_mask(kind: FilterKind, mask: Vec<bool>, scaled_norms: Vec<F>, threshold: Option<F>) -> Self {
        let kept = mask.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect();
        let cap = vec![true; mask.len()];
        Self { kind, kept, mask, scaled_norms, cap, threshold }
    }

    /// Keeps every increment.
    pub fn all(norms: Vec<F>) -> Self {
        let n = norms.len();
        Self::from_mask(FilterKind::None, vec![true; n], norms, None)
    }

    pub fn with_cap(mut self, cap: Vec<bool>) -> Self {
        assert_eq!(cap.len(), self.mask.len(), "cap length");
        self.cap = cap;
        self
    }

    pub fn n(&self) -> usize {
        self.mask.len()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn flagged_count(&self) -> usize {
        self.n() - self.kept.len()
    }
}

fn sorted_copy<F: Scalar>(v: &[F]) -> Vec<F> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    s
}

/// Keeps `j` when at least `αn` norms are strictly larger than `V_j`.
pub fn global_filter_from_norms<F: Scalar>(norms: Vec<F>, alpha: F) -> Result<FilterResult<F>, FilterError> {
    if !(alpha >= F::zero() && alpha < F::one()) {
        return Err(FilterError::AlphaRange(alpha.as_f64()));
    }
    let n = norms.len();
    let cut = alpha * F::of_usize(n);
    let sorted = sorted_copy(&norms);
    let mask = norms
        .iter()
        .map(|&v| {
            let not_larger = sorted.partition_point(|&w| w <= v);
            F::of_usize(n - not_larger) >= cut
        })
        .collect();
    Ok(FilterResult::from_mask(FilterKind::FixedAlpha, mask, norms, None))
}

pub fn global_filter_set<F: Scalar>(
    dy: &IncrementView<F>,
    cols: Range<usize>,
    scale: &ScaleEstimate<F>,
    alpha: F,
) -> Result<FilterResult<F>, FilterError> {
    global_filter_from_norms(scale.scaled_norms(dy, cols)?, alpha)
}

/// `⌊x⌋` that does not lose exact integers to `powf` rounding.
fn robust_floor<F: Scalar>(x: F) -> usize {
    let r = x.round();
    let v = if (x - r).abs() <= F::of(1e-9) * x.abs().max(F::one()) { r } else { x.floor() };
    v.to_usize().unwrap_or(0)
}

/// `s_n = n − ⌊B ⌊n^{δ₁}⌋⌋`.
pub fn moving_rank<F: Scalar>(n: usize, b: F, delta1: F) -> Result<usize, FilterError> {
    if !(b > F::zero()) || !b.is_finite() {
        return Err(FilterError::BadParameter("B must be positive"));
    }
    if !(delta1 > F::zero() && delta1 < F::of(0.5)) {
        return Err(FilterError::BadParameter("delta1 must lie in (0, 1/2)"));
    }
    let base = robust_floor(F::of_usize(n).powf(delta1));
    let dropped = robust_floor(b * F::of_usize(base));
    if dropped >= n {
        return Err(FilterError::RankTooSmall { n, dropped });
    }
    Ok(n - dropped)
}

/// Keeps `j` with `V_j < V_(s_n)`, the `s_n`-th smallest norm.
pub fn moving_filter_from_norms<F: Scalar>(norms: Vec<F>, b: F, delta1: F) -> Result<FilterResult<F>, FilterError> {
    let s = moving_rank(norms.len(), b, delta1)?;
    let sorted = sorted_copy(&norms);
    let pivot = sorted[s - 1];
    let mask = norms.iter().map(|&v| v < pivot).collect();
    Ok(FilterResult::from_mask(FilterKind::Moving, mask, norms, Some(pivot)))
}

pub fn moving_filter_set<F: Scalar>(
    dy: &IncrementView<F>,
    cols: Range<usize>,
    scale: &ScaleEstimate<F>,
    b: F,
    delta1: F,
) -> Result<FilterResult<F>, FilterError> {
    moving_filter_from_norms(scale.scaled_norms(dy, cols)?, b, delta1)
}

/// Keeps `j` with `|Δ_j Y| ≤ h^ρ`.
pub fn local_filter_set<F: Scalar>(dy: &IncrementView<F>, h: F, rho: F) -> Result<FilterResult<F>, FilterError> {
    if !(rho > F::zero() && rho <= F::of(0.5)) {
        return Err(FilterError::RhoRange(rho.as_f64()));
    }
    let norms = dy.block_norms(0..dy.dim());
    let threshold = h.powf(rho);
    let mask = norms.iter().map(|&v| v <= threshold).collect();
    Ok(FilterResult::from_mask(FilterKind::Local, mask, norms, Some(threshold)))
}

/// `K_{n,j} = 1{norm_j < C* n^exponent}`.
pub fn truncation_cap<F: Scalar>(norms: &[F], cstar: F, exponent: F) -> Result<Vec<bool>, FilterError> {
    if !(cstar > F::zero()) {
        return Err(FilterError::BadParameter("C* must be positive"));
    }
    let limit = cstar * F::of_usize(norms.len()).powf(exponent);
    Ok(norms.iter().map(|&v| v < limit).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Share of true-jump increments left in the kept set.
    pub fn_ratio: f64,
    /// Share of jump-free increments that were flagged.
    pub fp_ratio: f64,
    pub jumps: usize,
    pub flagged: usize,
}

pub fn detection_metrics<F: Scalar>(result: &FilterResult<F>, truth: Option<&[bool]>) -> Result<DetectionMetrics, FilterError> {
    let truth = truth.ok_or(FilterError::MissingTruth)?;
    if truth.len() != result.n() {
        return Err(FilterError::LengthMismatch { got: truth.len(), expected: result.n() });
    }
    let mut missed = 0usize;
    let mut jumps = 0usize;
    let mut false_flags = 0usize;
    let mut clean = 0usize;
    for (&is_jump, &kept) in truth.iter().zip(&result.mask) {
        if is_jump {
            jumps += 1;
            missed += usize::from(kept);
        } else {
            clean += 1;
            false_flags += usize::from(!kept);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DetectionMetrics { fn_ratio: ratio(missed, jumps), fp_ratio: ratio(false_flags, clean), jumps, flagged: result.flagged_count() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    Sbar,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapMode {
    Off,
    Raw,
    Scaled,
}

/// Tuning shared by the global filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub scale: ScaleKind,
    /// Minimum-of-`K` admission window of the initial scale estimate.
    pub k: usize,
    /// Half-width of the averaging window; `None` means `⌈√n⌉`.
    pub window: Option<usize>,
    pub eps0: f64,
    pub cap: CapMode,
    pub cstar: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub b: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            scale: ScaleKind::Sbar,
            k: 2,
            window: None,
            eps0: 1e-4,
            cap: CapMode::Raw,
            cstar: 1.0,
            delta0: 0.2,
            delta1: 4.0 / 9.0,
            b: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn window_for(&self, n: usize) -> usize {
        self.window.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
    }

    pub fn scale_for<F: Scalar>(&self, dy: &IncrementView<F>, cols: Range<usize>, h: F) -> Result<ScaleEstimate<F>, FilterError> {
        match self.scale {
            ScaleKind::Identity => Ok(identity_scale(dy.n(), cols.len())),
            ScaleKind::Sbar => initial_scale(dy, cols, h, self.k, self.window_for(dy.n()), F::of(self.eps0)),
        }
    }

    fn cap_for<F: Scalar>(&self, dy: &IncrementView<F>, cols: Range<usize>, scaled: &[F], exponent: F) -> Result<Vec<bool>, FilterError> {
        match self.cap {
            CapMode::Off => Ok(vec![true; dy.n()]),
            CapMode::Raw => truncation_cap(&dy.block_norms(cols), F::of(self.cstar), exponent),
            CapMode::Scaled => truncation_cap(scaled, F::of(self.cstar), exponent),
        }
    }

    /// Fixed-α filter per block with cap exponent `−1/4`.
    pub fn fixed_alpha<F: Scalar>(
        &self,
        dy: &IncrementView<F>,
        layout: &BlockLayout,
        h: F,
        alphas: &[F],
    ) -> Result<Vec<FilterResult<F>>, FilterError> {
        if alphas.len() != layout.count() {
            return Err(FilterError::BadParameter("one alpha per block"));
        }
        (0..layout.count())
            .map(|k| {
                let cols = layout.range(k);
                let scale = self.scale_for(dy, cols.clone(), h)?;
                let res = global_filter_set(dy, cols.clone(), &scale, alphas[k])?;
                let cap = self.cap_for(dy, cols, &res.scaled_norms, F::of(-0.25))?;
                Ok(res.with_cap(cap))
            })
            .collect()
    }

    /// Moving-threshold filter per block with cap exponent `−1/4 − δ₀`.
    pub fn moving<F: Scalar>(&self, dy: &IncrementView<F>, layout: &BlockLayout, h: F) -> Result<Vec<FilterResult<F>>, FilterError> {
        if !(self.delta0 > 0.0 && self.delta0 < 0.25) {
            return Err(FilterError::BadParameter("delta0 must lie in (0, 1/4)"));
        }
        (0..layout.count())
            .map(|k| {
                let cols = layout.range(k);
                let scale = self.scale_for(dy, cols.clone(), h)?;
                let res = moving_filter_set(dy, cols.clone(), &scale, F::of(self.b), F::of(self.delta1))?;
                let cap = self.cap_for(dy, cols, &res.scaled_norms, F::of(-0.25 - self.delta0))?;
                Ok(res.with_cap(cap))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{increments, SamplePath};

    fn brute_force(norms: &[f64], alpha: f64) -> Vec<usize> {
        let n = norms.len();
        (0..n).filter(|&j| (0..n).filter(|&i| norms[i] > norms[j]).count() as f64 >= alpha * n as f64).collect()
    }

    fn scalar_dy(d: &[f64]) -> IncrementView<f64> {
        let mut y = vec![0.0];
        for v in d {
            y.push(y.last().unwrap() + v);
        }
        increments(&SamplePath::scalar(0.0, 1.0, y).unwrap())
    }

    #[test]
    fn global_examples() {
        let r = global_filter_from_norms(vec![1.0, 3.0, 2.0, 4.0], 0.5).unwrap();
        assert_eq!(r.kept, vec![0, 2]);
        let r = global_filter_from_norms(vec![5.0, 5.0, 1.0], 1.0 / 3.0).unwrap();
        assert_eq!(r.kept, vec![2]);
        let r = global_filter_from_norms(vec![5.0, 5.0, 1.0], 0.0).unwrap();
        assert_eq!(r.kept, vec![0, 1, 2]);
        assert!(global_filter_from_norms(vec![1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn identity_scale_gives_raw_norms() {
        let dy = scalar_dy(&[0.5, -2.0, 1.0, 0.1]);
        let scale = identity_scale(4, 1);
        let r = global_filter_set(&dy, 0..1, &scale, 0.25).unwrap();
        for (a, b) in r.scaled_norms.iter().zip([0.5, 2.0, 1.0, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(r.kept, global_filter_from_norms(vec![0.5, 2.0, 1.0, 0.1], 0.25).unwrap().kept);
        assert_eq!(r.kept, vec![0, 2, 3]);
    }

    #[test]
    fn moving_examples() {
        // ⌊10^δ⌋ = 2 for δ = 0.35
        let norms: Vec<f64> = vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 1.0, 0.6];
        assert_eq!(moving_rank(10, 1.0, 0.35).unwrap(), 8);
        let r = moving_filter_from_norms(norms.clone(), 1.0, 0.35).unwrap();
        let mut expected: Vec<usize> = (0..10).collect();
        expected.sort_by(|&a, &b| norms[a].partial_cmp(&norms[b]).unwrap());
        let mut seven: Vec<usize> = expected[..7].to_vec();
        seven.sort_unstable();
        assert_eq!(r.kept, seven);
        assert_eq!(r.threshold, Some(0.8));

        let flat = moving_filter_from_norms(vec![1.0; 10], 1.0, 0.35).unwrap();
        assert!(flat.kept.is_empty());

        assert_eq!(moving_rank(1000, 1.0, 4.0 / 9.0).unwrap(), 979);
        assert!(matches!(moving_rank(3, 5.0, 0.45), Err(FilterError::RankTooSmall { .. })));
    }

    #[test]
    fn moving_rank_exact_integer_power() {
        // 1000^(1/3) = 10 exactly; powf may land just below
        assert_eq!(moving_rank(1000, 1.0, 1.0 / 3.0).unwrap(), 990);
    }

    #[test]
    fn cap_examples() {
        // n = 16 puts the threshold at 16^{-1/4} = 0.5
        let mut norms = vec![0.0; 16];
        norms[0] = 0.4;
        norms[1] = 0.6;
        let cap = truncation_cap(&norms, 1.0, -0.25).unwrap();
        assert!(cap[0] && !cap[1] && cap[2..].iter().all(|&c| c));
        assert!(truncation_cap(&[1e10, 3.0], 1e300, -0.25).unwrap().iter().all(|&c| c));
        assert!(truncation_cap(&[0.0; 5], 1.0, -0.25).unwrap().iter().all(|&c| c));
        assert!(truncation_cap(&[0.0; 5], 0.0, -0.25).is_err());
    }

    #[test]
    fn local_examples() {
        let h: f64 = 0.001;
        assert!((h.powf(0.5) - 0.03162).abs() < 1e-5);
        let dy = scalar_dy(&[0.04, 0.02, -0.04, -0.02]);
        let r = local_filter_set(&dy, h, 0.5).unwrap();
        assert_eq!(r.kept, vec![1, 3]);
        let zero = scalar_dy(&[0.0; 5]);
        assert_eq!(local_filter_set(&zero, h, 0.5).unwrap().kept_count(), 5);
        let r = local_filter_set(&dy, h, 1.0 / 3.0).unwrap();
        assert_eq!(r.kept_count(), 4);
        assert!(local_filter_set(&dy, h, 0.6).is_err());
        assert!(local_filter_set(&dy, h, 0.0).is_err());
    }

    #[test]
    fn metrics_examples() {
        let truth = vec![false, true, false, true, false];
        let perfect = FilterResult::from_mask(FilterKind::Local, vec![true, false, true, false, true], vec![0.0; 5], None);
        let m = detection_metrics(&perfect, Some(&truth)).unwrap();
        assert_eq!((m.fn_ratio, m.fp_ratio), (0.0, 0.0));
        let none = FilterResult::all(vec![0.0; 5]);
        let m = detection_metrics(&none, Some(&truth)).unwrap();
        assert_eq!((m.fn_ratio, m.fp_ratio), (1.0, 0.0));
        let no_jumps = vec![false; 5];
        let m = detection_metrics(&perfect, Some(&no_jumps)).unwrap();
        assert_eq!(m.fn_ratio, 0.0);
        assert!((m.fp_ratio - 0.4).abs() < 1e-15);
        assert_eq!(detection_metrics(&perfect, None), Err(FilterError::MissingTruth));
    }

    #[test]
    fn zero_path_scale_floors() {
        let dy = scalar_dy(&[0.0; 30]);
        let s = initial_scale(&dy, 0..1, 0.01, 2, 5, 1e-4).unwrap();
        assert!((0..30).all(|i| s.floored(i) && s.matrix(i)[(0, 0)] == 0.5e-4));
    }

    #[test]
    fn jump_excluded_from_windows_where_test_fails() {
        // Δ_10 is a huge jump; its predecessor is smaller so it fails the K=2 test
        let mut d = vec![0.01; 20];
        for (i, v) in d.iter_mut().enumerate() {
            *v = 0.01 + 0.0001 * i as f64;
        }
        d[9] = 5.0;
        let dy = scalar_dy(&d);
        let h = 0.05;
        let window = 3;
        let s = initial_scale(&dy, 0..1, h, 2, window, 1e-8).unwrap();
        let at = |l: isize| if (1..=20).contains(&l) { d[l as usize - 1] } else { 0.0 };
        for j in 1..=20isize {
            let (mut num, mut cnt) = (0.0, 0usize);
            for i in -(window as isize)..=(window as isize) {
                let l = j - i;
                if at(l - 1).abs() >= at(l).abs() {
                    num += at(l) * at(l);
                    cnt += 1;
                }
            }
            let expected = (num / (h * cnt.max(1) as f64)).max(0.5e-8);
            let got = s.matrix(j as usize - 1)[(0, 0)];
            assert!((got - expected).abs() <= 1e-12 * expected.max(1.0), "j={j} got={got} expected={expected}");
            assert!(got < 1.0, "jump leaked into window at j={j}");
        }
    }

    proptest::proptest! {
        #[test]
        fn global_matches_brute_force(norms in proptest::collection::vec(0u8..6, 1..13), alpha in 0.0f64..0.99) {
            let norms: Vec<f64> = norms.into_iter().map(f64::from).collect();
            let r = global_filter_from_norms(norms.clone(), alpha).unwrap();
            proptest::prop_assert_eq!(r.kept, brute_force(&norms, alpha));
        }

        #[test]
        fn global_is_scale_free_and_monotone(
            d in proptest::collection::vec(-1.0f64..1.0, 3..40),
            c in 0.01f64..100.0,
            a1 in 0.0f64..0.5,
            gap in 0.0f64..0.4,
        ) {
            let dy = scalar_dy(&d);
            let scaled: Vec<f64> = d.iter().map(|v| v * c).collect();
            let dy2 = scalar_dy(&scaled);
            let id = identity_scale(d.len(), 1);
            let r1 = global_filter_set(&dy, 0..1, &id, a1).unwrap();
            let r2 = global_filter_set(&dy2, 0..1, &id, a1).unwrap();
            // ranks survive scaling up to rounding ties; inputs are continuous so ties are absent
            proptest::prop_assert_eq!(&r1.kept, &r2.kept);
            let r3 = global_filter_set(&dy, 0..1, &id, a1 + gap).unwrap();
            proptest::prop_assert!(r3.kept.iter().all(|j| r1.mask[*j]));
        }

        #[test]
        fn fixed_alpha_size_without_ties(d in proptest::collection::vec(-1.0f64..1.0, 2..200), alpha in 0.0f64..0.95) {
            let norms: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            let mut s = norms.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            proptest::prop_assume!(s.windows(2).all(|w| w[0] < w[1]));
            let r = global_filter_from_norms(norms, alpha).unwrap();
            let target = (1.0 - alpha) * d.len() as f64;
            proptest::prop_assert!((r.kept_count() as f64 - target).abs() <= 1.0);
        }

        #[test]
        fn scale_matrices_respect_floor(d in proptest::collection::vec(-0.1f64..0.1, 5..60), eps0 in 1e-6f64..1.0) {
            let dy = scalar_dy(&d);
            let s = initial_scale(&dy, 0..1, 0.01, 2, 4, eps0).unwrap();
            for m in s.matrices() {
                proptest::prop_assert!(m[(0, 0)] >= eps0 / 2.0);
            }
        }
    }
}
