//! Path-to-estimate recipes: build the filtered surfaces and run the
//! estimators with one set of tuning values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{one_step, qbe, qmle, EstimateError, EstimateReport, QbeOptions, QmleOptions};
use crate::filter::{FilterConfig, FilterError, FilterResult};
use crate::likelihood::{fixed_alpha_loglik, local_loglik, moving_loglik, plain_loglik, LikelihoodError, MovingWeights, QuasiLikelihood};
use crate::model::{increments, DiffusionModel, ModelError, ParamBox, SamplePath};
use crate::statdist::{StatError, TruncationConstants};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// Short machine-readable code for result tables.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Filter(_) => "filter",
            PipelineError::Likelihood(LikelihoodError::NotPositiveDefinite { .. }) => "not-pd",
            PipelineError::Likelihood(LikelihoodError::EmptyKeptSet) => "empty-kept-set",
            PipelineError::Likelihood(_) => "likelihood",
            PipelineError::Estimate(EstimateError::NoEvaluablePoint) => "no-evaluable-point",
            PipelineError::Estimate(_) => "estimate",
            PipelineError::Stat(_) => "statdist",
            PipelineError::Model(_) => "model",
            PipelineError::Usage(_) => "usage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    QmleAlpha,
    QbeAlphaBeta,
    QmleMoving,
    QbeMoving,
    OnestepM,
    OnestepB,
    Local,
}

/// Tuning shared by every estimator run.
#[derive(Debug, Clone)]
pub struct Settings {
    pub filter: FilterConfig,
    pub moving_weights: MovingWeights,
    pub kappa: usize,
    pub beta: f64,
    pub qmle: QmleOptions,
    pub qbe: QbeOptions,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            moving_weights: MovingWeights::default(),
            kappa: 4,
            beta: 0.45,
            qmle: QmleOptions::default(),
            qbe: QbeOptions::default(),
        }
    }
}

pub struct Filtered<M> {
    pub surface: QuasiLikelihood<f64, M>,
    pub filters: Vec<FilterResult<f64>>,
}

/// Fixed-α surface with the same α for every block. `α = 0` gives the plain
/// quasi-likelihood apart from the truncation cap.
pub fn fixed_alpha_surface<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings, alpha: f64) -> Result<Filtered<M>, PipelineError> {
    let layout = model.layout().clone();
    let dy = increments(path);
    let alphas = vec![alpha; layout.count()];
    let filters = settings.filter.fixed_alpha(&dy, &layout, path.h(), &alphas)?;
    let consts = layout.sizes().iter().map(|&m| TruncationConstants::new(alpha, m)).collect::<Result<Vec<_>, _>>()?;
    let surface = fixed_alpha_loglik(model, path, &filters, &consts)?;
    Ok(Filtered { surface, filters })
}

/// Moving-threshold surface and its `(p_n, q_n)` per block.
pub fn moving_surface<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings) -> Result<(Filtered<M>, Vec<f64>, Vec<f64>), PipelineError> {
    let layout = model.layout().clone();
    let dy = increments(path);
    let filters = settings.filter.moving(&dy, &layout, path.h())?;
    let mut pn = Vec::with_capacity(layout.count());
    let mut qn = Vec::with_capacity(layout.count());
    for &m in layout.sizes() {
        let (p, q) = settings.moving_weights.resolve(path.n(), m, settings.filter.b, settings.filter.delta1)?;
        pn.push(p);
        qn.push(q);
    }
    let surface = moving_loglik(model, path, &filters, &pn, &qn)?;
    Ok((Filtered { surface, filters }, pn, qn))
}

fn echo_filter(report: &mut EstimateReport, settings: &Settings) {
    report.config.delta0 = Some(settings.filter.delta0);
    report.config.delta1 = Some(settings.filter.delta1);
    report.config.b = Some(settings.filter.b);
}

pub fn qmle_alpha<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings, alpha: f64) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let f = fixed_alpha_surface(model, path, settings, alpha)?;
    let mut r = qmle(&f.surface, &bx, &settings.qmle)?;
    r.config.alpha = Some(alpha);
    Ok(r)
}

pub fn qbe_alpha_beta<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings, alpha: f64) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let f = fixed_alpha_surface(model, path, settings, alpha)?;
    let opts = QbeOptions { beta: Some(settings.beta), ..settings.qbe.clone() };
    let mut r = qbe(&f.surface, &bx, &opts)?;
    r.config.alpha = Some(alpha);
    Ok(r)
}

pub fn qmle_moving<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let (f, pn, qn) = moving_surface(model, path, settings)?;
    let mut r = qmle(&f.surface, &bx, &settings.qmle)?;
    echo_filter(&mut r, settings);
    r.config.pn = Some(pn);
    r.config.qn = Some(qn);
    Ok(r)
}

pub fn qbe_moving<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let (f, pn, qn) = moving_surface(model, path, settings)?;
    let opts = QbeOptions { beta: None, ..settings.qbe.clone() };
    let mut r = qbe(&f.surface, &bx, &opts)?;
    echo_filter(&mut r, settings);
    r.config.pn = Some(pn);
    r.config.qn = Some(qn);
    Ok(r)
}

/// One-step correction of `initial` against the moving-threshold surface.
pub fn one_step_moving<M: DiffusionModel<f64>>(
    model: M,
    path: &SamplePath<f64>,
    settings: &Settings,
    initial: &EstimateReport,
) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let (f, pn, qn) = moving_surface(model, path, settings)?;
    let mut r = one_step(initial, &f.surface, settings.kappa, &bx)?;
    echo_filter(&mut r, settings);
    r.config.pn = Some(pn);
    r.config.qn = Some(qn);
    Ok(r)
}

/// Local threshold comparator; scalar paths only.
pub fn local_qmle(path: &SamplePath<f64>, settings: &Settings, rho: f64, eta: f64, bx: ParamBox<f64>) -> Result<EstimateReport, PipelineError> {
    let surface = local_loglik(path, rho, eta, bx.clone())?;
    let mut r = qmle(&surface, &bx, &settings.qmle)?;
    r.config.rho = Some(rho);
    Ok(r)
}

/// Plain quasi-likelihood QMLE, with no filter and no cap.
pub fn qmle_plain<M: DiffusionModel<f64>>(model: M, path: &SamplePath<f64>, settings: &Settings) -> Result<EstimateReport, PipelineError> {
    let bx = model.param_box().clone();
    let surface = plain_loglik(model, path)?;
    let mut r = qmle(&surface, &bx, &settings.qmle)?;
    r.config.alpha = Some(0.0);
    Ok(r)
}

/// Tuning values a method needs beyond [`Settings`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MethodArgs {
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub eta: Option<f64>,
}

pub fn run_method<M: DiffusionModel<f64>>(method: Method, model: &M, path: &SamplePath<f64>, settings: &Settings, args: MethodArgs) -> Result<EstimateReport, PipelineError> {
    let alpha = || args.alpha.ok_or_else(|| PipelineError::Usage(format!("{method:?} needs --alpha")));
    let mut report = match method {
        Method::QmleAlpha => qmle_alpha(model, path, settings, alpha()?)?,
        Method::QbeAlphaBeta => qbe_alpha_beta(model, path, settings, alpha()?)?,
        Method::QmleMoving => qmle_moving(model, path, settings)?,
        Method::QbeMoving => qbe_moving(model, path, settings)?,
        Method::OnestepM => {
            let a = alpha()?;
            let init = qmle_alpha(model, path, settings, a)?;
            let mut r = one_step_moving(model, path, settings, &init)?;
            r.config.alpha = Some(a);
            r
        }
        Method::OnestepB => {
            let a = alpha()?;
            let init = qbe_alpha_beta(model, path, settings, a)?;
            let mut r = one_step_moving(model, path, settings, &init)?;
            r.config.alpha = Some(a);
            r.config.beta = Some(settings.beta);
            r
        }
        Method::Local => {
            let rho = args.rho.ok_or_else(|| PipelineError::Usage("local needs --rho".into()))?;
            let eta = args.eta.ok_or_else(|| PipelineError::Usage("local needs --eta".into()))?;
            if model.dim_y() != 1 || model.num_params() != 1 {
                return Err(PipelineError::Usage("local estimator needs the scalar model".into()));
            }
            local_qmle(path, settings, rho, eta, model.param_box().clone())?
        }
    };
    if matches!(method, Method::OnestepM | Method::OnestepB) {
        report.config.kappa = Some(settings.kappa);
    }
    Ok(report)
}
