//! Euler–Maruyama simulation of jump diffusions with per-increment jump
//! ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DiffusionModel, ModelError, SamplePath};
use crate::scalar::Scalar;

/// Generator used for every simulated path.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Seed for replicate `index` derived from `base` (splitmix64 finalizer).
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ornstein–Uhlenbeck process with compound Poisson jumps,
/// `dX = −η X dt + σ dW + dJ`, with Gaussian marks of variance `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuJumpParams {
    pub eta: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// Variance of each jump mark.
    pub eps: f64,
    pub x0: f64,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub seed: u64,
    /// Euler steps per observation interval.
    pub substeps: usize,
}

impl Default for OuJumpParams {
    fn default() -> Self {
        Self { eta: 0.1, sigma: 0.1, lambda: 20.0, eps: 0.05, x0: 1.0, n: 1000, horizon: 1.0, seed: 0, substeps: 1 }
    }
}

impl OuJumpParams {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |msg| Err(SimulateError::InvalidParameter(msg));
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be nonnegative");
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return bad("eps must be nonnegative");
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("T must be positive");
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1");
        }
        if !self.eta.is_finite() || !self.x0.is_finite() {
            return bad("eta and x0 must be finite");
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.n as f64
    }
}

pub fn simulate_ou_jump<F: Scalar>(params: &OuJumpParams) -> Result<SamplePath<F>, SimulateError> {
    params.validate()?;
    let mut rng = SimRng::seed_from_u64(params.seed);
    let h = params.h();
    let dt = h / params.substeps as f64;
    let sqrt_dt = dt.sqrt();
    let count = (params.lambda > 0.0).then(|| Poisson::new(params.lambda * dt).expect("positive rate"));
    let mark = Normal::new(0.0, params.eps.sqrt()).expect("finite scale");

    let mut x = params.x0;
    let mut ys = Vec::with_capacity(params.n + 1);
    let mut truth = Vec::with_capacity(params.n);
    ys.push(F::of(x));
    for _ in 0..params.n {
        let mut jumped = false;
        for _ in 0..params.substeps {
            let z: f64 = rng.sample(StandardNormal);
            let mut dj = 0.0;
            if let Some(pois) = &count {
                let events = pois.sample(&mut rng) as u64;
                jumped |= events > 0;
                for _ in 0..events {
                    dj += mark.sample(&mut rng);
                }
            }
            x = x - params.eta * x * dt + params.sigma * sqrt_dt * z + dj;
        }
        ys.push(F::of(x));
        truth.push(jumped);
    }
    Ok(SamplePath::scalar(F::zero(), F::of(h), ys)?.with_jump_truth(truth)?)
}

/// Euler scheme for `dY = b(t, Y) dt + σ(Y, θ) dW + dJ` with `X = Y`.
///
/// `jumps(rng, t, h)` returns the jump increment over `(t, t + h]`, or
/// `None` when no event occurred.
#[allow(clippy::too_many_arguments)]
pub fn simulate_generic<F, M, B, J>(
    model: &M,
    theta: &[F],
    y0: &[F],
    drift: B,
    mut jumps: J,
    n: usize,
    horizon: F,
    seed: u64,
) -> Result<SamplePath<F>, SimulateError>
where
    F: Scalar,
    M: DiffusionModel<F>,
    B: Fn(F, &[F]) -> Vec<F>,
    J: FnMut(&mut SimRng, F, F) -> Option<Vec<F>>,
{
    let m = model.dim_y();
    if y0.len() != m {
        return Err(SimulateError::InvalidParameter("initial value dimension"));
    }
    if n < 2 || !(horizon > F::zero()) {
        return Err(SimulateError::InvalidParameter("need n >= 2 and T > 0"));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let h = horizon / F::of_usize(n);
    let sqrt_h = h.sqrt();
    let layout = model.layout().clone();

    let mut y = y0.to_vec();
    let mut rows = Vec::with_capacity((n + 1) * m);
    rows.extend_from_slice(&y);
    let mut truth = Vec::with_capacity(n);
    for j in 0..n {
        let t = F::of_usize(j) * h;
        let b = drift(t, &y);
        let mut next = y.clone();
        for k in 0..layout.count() {
            let cols = layout.range(k);
            if model.s_block(k, &y, theta).cholesky().is_err() {
                return Err(ModelError::NotPositiveDefinite {
                    block: k,
                    index: j,
                    theta: theta.iter().map(|v| v.as_f64()).collect(),
                }
                .into());
            }
            let sigma = model.sigma_block(k, &y, theta);
            let z: Vec<F> = cols.clone().map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect();
            let noise = sigma.mat_vec(&z);
            for (local, col) in cols.enumerate() {
                next[col] = y[col] + b[col] * h + noise[local] * sqrt_h;
            }
        }
        match jumps(&mut rng, t, h) {
            Some(dj) => {
                for (v, d) in next.iter_mut().zip(dj) {
                    *v += d;
                }
                truth.push(true);
            }
            None => truth.push(false),
        }
        rows.extend_from_slice(&next);
        y = next;
    }
    Ok(SamplePath::new(F::zero(), h, m, rows)?.with_jump_truth(truth)?)
}
