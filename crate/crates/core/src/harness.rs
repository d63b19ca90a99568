//! Monte Carlo experiments on the OU jump model: detection accuracy over α,
//! stability of raw and one-step global estimators over α, local vs global
//! comparison, and the RMSE rate in n.
//!
//! Replicates run in parallel; rows are sorted before they are written, so
//! `rows.csv` depends only on the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{one_step, qbe, qmle, EstimateReport, QbeOptions};
use crate::filter::{detection_metrics, local_filter_set, CapMode, FilterConfig, FilterResult, ScaleKind};
use crate::likelihood::MovingWeights;
use crate::model::{increments, DiffusionModel, ParamBox, SamplePath, TriangularVolatility};
use crate::pipeline::{fixed_alpha_surface, local_qmle, moving_surface, PipelineError, Settings};
use crate::simulate::{replicate_seed, simulate_ou_jump, OuJumpParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Table1,
    AlphaSweep,
    Compare,
    Rate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::AlphaSweep => "alpha-sweep",
            Experiment::Compare => "compare",
            Experiment::Rate => "rate",
        }
    }
}

/// Estimators a sweep can run. Order here is the row order in outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Global filter only (detection table); theta is the fixed-α QMLE.
    Global,
    /// Fixed-α QMLE.
    Raw,
    /// One-step from the fixed-α QMLE against the moving surface.
    Onestep,
    /// (α, β)-QBE.
    Qbe,
    /// One-step from the (α, β)-QBE.
    OnestepB,
    /// Moving-threshold QMLE.
    Moving,
    /// Local threshold QMLE, tuned by ρ.
    Local,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Global => "global",
            Estimator::Raw => "raw",
            Estimator::Onestep => "onestep",
            Estimator::Qbe => "qbe",
            Estimator::OnestepB => "onestep-b",
            Estimator::Moving => "moving",
            Estimator::Local => "local",
        }
    }

    fn tuning_name(self) -> &'static str {
        match self {
            Estimator::Local => "rho",
            Estimator::Moving => "none",
            _ => "alpha",
        }
    }
}

pub const TABLE1_ALPHAS: [f64; 8] = [0.005, 0.01, 0.015, 0.02, 0.025, 0.05, 0.1, 0.25];
pub const SWEEP_ALPHAS: [f64; 8] = [0.01, 0.02, 0.03, 0.05, 0.1, 0.15, 0.2, 0.3];

/// Flat experiment description; every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub eta: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub eps: f64,
    pub x0: f64,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub substeps: usize,
    pub replicates: usize,
    pub seed: u64,
    /// α grid; empty means the experiment's default grid.
    pub alphas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub n_grid: Vec<usize>,
    /// Fixed α of the raw and one-step estimators in the rate experiment.
    pub rate_alpha: f64,
    /// Estimators to run; empty means the experiment's default set.
    pub estimators: Vec<Estimator>,
    pub kappa: usize,
    pub beta: f64,
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub scale: ScaleKind,
    pub k: usize,
    pub window: Option<usize>,
    pub eps0: f64,
    pub cap: CapMode,
    pub cstar: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub b: f64,
    pub moving_weights: MovingWeights,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = OuJumpParams::default();
        let f = FilterConfig::default();
        Self {
            eta: p.eta,
            sigma: p.sigma,
            lambda: p.lambda,
            eps: p.eps,
            x0: p.x0,
            n: p.n,
            horizon: p.horizon,
            substeps: p.substeps,
            replicates: 500,
            seed: 20_240_601,
            alphas: Vec::new(),
            rhos: vec![1.0 / 3.0, 0.4, 0.45, 0.5],
            n_grid: vec![250, 500, 1000, 2000, 4000],
            rate_alpha: 0.2,
            estimators: Vec::new(),
            kappa: 4,
            beta: 0.45,
            theta_lower: 1e-3,
            theta_upper: 10.0,
            scale: f.scale,
            k: f.k,
            window: f.window,
            eps0: f.eps0,
            cap: f.cap,
            cstar: f.cstar,
            delta0: f.delta0,
            delta1: f.delta1,
            b: f.b,
            moving_weights: MovingWeights::default(),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    pub fn sim_params(&self, n: usize, lambda: f64, seed: u64) -> OuJumpParams {
        OuJumpParams { eta: self.eta, sigma: self.sigma, lambda, eps: self.eps, x0: self.x0, n, horizon: self.horizon, seed, substeps: self.substeps }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            filter: FilterConfig {
                scale: self.scale,
                k: self.k,
                window: self.window,
                eps0: self.eps0,
                cap: self.cap,
                cstar: self.cstar,
                delta0: self.delta0,
                delta1: self.delta1,
                b: self.b,
            },
            moving_weights: self.moving_weights,
            kappa: self.kappa,
            beta: self.beta,
            ..Default::default()
        }
    }

    pub fn model(&self) -> Result<TriangularVolatility<f64>, HarnessError> {
        TriangularVolatility::scalar(self.theta_lower, self.theta_upper).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn alphas_for(&self, exp: Experiment) -> Vec<f64> {
        if !self.alphas.is_empty() {
            return self.alphas.clone();
        }
        match exp {
            Experiment::Table1 => TABLE1_ALPHAS.to_vec(),
            _ => SWEEP_ALPHAS.to_vec(),
        }
    }

    pub fn estimators_for(&self, exp: Experiment) -> Vec<Estimator> {
        let mut list = if !self.estimators.is_empty() {
            self.estimators.clone()
        } else {
            match exp {
                Experiment::Table1 => vec![Estimator::Global],
                Experiment::AlphaSweep => vec![Estimator::Raw, Estimator::Onestep],
                Experiment::Compare => vec![Estimator::Onestep, Estimator::Local],
                Experiment::Rate => vec![Estimator::Raw, Estimator::Onestep, Estimator::Moving],
            }
        };
        list.sort();
        list.dedup();
        list
    }

    pub fn validate(&self, exp: Experiment) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if let Err(e) = self.sim_params(self.n, self.lambda, self.seed).validate() {
            return bad(e.to_string());
        }
        if !(self.theta_lower > 0.0 && self.theta_lower < self.theta_upper) {
            return bad("need 0 < theta_lower < theta_upper".into());
        }
        if !(3..=4).contains(&self.kappa) {
            return bad("kappa must be 3 or 4".into());
        }
        if !(self.beta > 0.0 && self.beta <= 0.5) {
            return bad("beta must lie in (0, 1/2]".into());
        }
        let ests = self.estimators_for(exp);
        let allowed: &[Estimator] = match exp {
            Experiment::Table1 => &[Estimator::Global],
            Experiment::AlphaSweep => &[Estimator::Raw, Estimator::Onestep, Estimator::Qbe, Estimator::OnestepB, Estimator::Moving],
            Experiment::Compare => &[Estimator::Raw, Estimator::Onestep, Estimator::Qbe, Estimator::OnestepB, Estimator::Local],
            Experiment::Rate => &[Estimator::Raw, Estimator::Onestep, Estimator::Qbe, Estimator::OnestepB, Estimator::Moving],
        };
        if let Some(e) = ests.iter().find(|e| !allowed.contains(e)) {
            return bad(format!("estimator {} is not available in {}", e.name(), exp.name()));
        }
        let needs_alpha = ests.iter().any(|e| !matches!(e, Estimator::Local | Estimator::Moving)) && exp != Experiment::Rate;
        if needs_alpha {
            if let Some(a) = self.alphas_for(exp).iter().find(|a| !(**a >= 0.0 && **a < 1.0)) {
                return bad(format!("alpha {a} outside [0, 1)"));
            }
        }
        if ests.contains(&Estimator::Local) {
            if self.rhos.is_empty() {
                return bad("rhos must be nonempty".into());
            }
            if let Some(r) = self.rhos.iter().find(|r| !(**r > 0.0 && **r <= 0.5)) {
                return bad(format!("rho {r} outside (0, 1/2]"));
            }
        }
        if exp == Experiment::Rate {
            if self.n_grid.len() < 2 || self.n_grid.iter().any(|&n| n < 2) {
                return bad("n_grid needs at least two sizes, each >= 2".into());
            }
            if !(self.rate_alpha >= 0.0 && self.rate_alpha < 1.0) {
                return bad("rate_alpha outside [0, 1)".into());
            }
        }
        Ok(())
    }
}

/// One estimator run on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub estimator: Estimator,
    pub lambda: f64,
    pub n: usize,
    pub tuning: f64,
    pub replicate: usize,
    pub seed: u64,
    pub theta_hat: f64,
    pub stderr: f64,
    pub fn_ratio: f64,
    pub fp_ratio: f64,
    pub kept: usize,
    pub fallback: bool,
    /// Empty on success, else a short error code.
    pub error: String,
    pub wall_seconds: f64,
}

impl SweepRow {
    /// Summary cell of the row.
    fn cell(&self) -> (Estimator, u64, usize, u64) {
        (self.estimator, self.lambda.to_bits(), self.n, self.tuning.to_bits())
    }
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.estimator
            .cmp(&b.estimator)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.n.cmp(&b.n))
            .then(a.tuning.total_cmp(&b.tuning))
            .then(a.replicate.cmp(&b.replicate))
    });
}

struct Replicate<'a> {
    cfg: &'a ExperimentConfig,
    settings: &'a Settings,
    model: &'a TriangularVolatility<f64>,
    path: SamplePath<f64>,
    lambda: f64,
    index: usize,
    seed: u64,
}

type Outcome = Result<(EstimateReport, FilterStats), PipelineError>;

#[derive(Debug, Clone, Copy, Default)]
struct FilterStats {
    fn_ratio: f64,
    fp_ratio: f64,
    kept: usize,
}

fn stats(filter: &FilterResult<f64>, path: &SamplePath<f64>) -> FilterStats {
    let m = detection_metrics(filter, path.jump_truth()).ok();
    FilterStats { fn_ratio: m.map_or(f64::NAN, |m| m.fn_ratio), fp_ratio: m.map_or(f64::NAN, |m| m.fp_ratio), kept: filter.kept_count() }
}

impl Replicate<'_> {
    fn row(&self, estimator: Estimator, tuning: f64, started: Instant, outcome: Outcome) -> SweepRow {
        let wall_seconds = started.elapsed().as_secs_f64();
        let base = SweepRow {
            estimator,
            lambda: self.lambda,
            n: self.path.n(),
            tuning,
            replicate: self.index,
            seed: self.seed,
            theta_hat: f64::NAN,
            stderr: f64::NAN,
            fn_ratio: f64::NAN,
            fp_ratio: f64::NAN,
            kept: 0,
            fallback: false,
            error: String::new(),
            wall_seconds,
        };
        match outcome {
            Ok((r, s)) => SweepRow {
                theta_hat: r.theta_hat[0],
                stderr: r.stderr.as_ref().map_or(f64::NAN, |s| s[0]),
                fn_ratio: s.fn_ratio,
                fp_ratio: s.fp_ratio,
                kept: s.kept,
                fallback: r.diagnostics.fallback,
                ..base
            },
            Err(e) => SweepRow { error: e.code().to_string(), ..base },
        }
    }

    fn bx(&self) -> &ParamBox<f64> {
        self.model.param_box()
    }

    /// Runs the alpha-tuned estimators at one α.
    fn at_alpha(&self, alpha: f64, ests: &[Estimator], moving: &Result<crate::pipeline::Filtered<&TriangularVolatility<f64>>, PipelineError>, out: &mut Vec<SweepRow>) {
        let started = Instant::now();
        let fixed = fixed_alpha_surface(self.model, &self.path, self.settings, alpha);
        let raw: Outcome = fixed.as_ref().map_err(Clone::clone).and_then(|f| {
            let r = qmle(&f.surface, self.bx(), &self.settings.qmle)?;
            Ok((r, stats(&f.filters[0], &self.path)))
        });
        for &e in ests {
            let t = Instant::now();
            let outcome = match e {
                Estimator::Global | Estimator::Raw => raw.clone(),
                Estimator::Onestep => raw.clone().and_then(|(init, s)| {
                    let m = moving.as_ref().map_err(Clone::clone)?;
                    Ok((one_step(&init, &m.surface, self.settings.kappa, self.bx())?, s))
                }),
                Estimator::Qbe | Estimator::OnestepB => fixed.as_ref().map_err(Clone::clone).and_then(|f| {
                    let opts = QbeOptions { beta: Some(self.settings.beta), ..self.settings.qbe.clone() };
                    let b = qbe(&f.surface, self.bx(), &opts)?;
                    let s = stats(&f.filters[0], &self.path);
                    if e == Estimator::Qbe {
                        return Ok((b, s));
                    }
                    let m = moving.as_ref().map_err(Clone::clone)?;
                    Ok((one_step(&b, &m.surface, self.settings.kappa, self.bx())?, s))
                }),
                Estimator::Moving | Estimator::Local => continue,
            };
            // the shared raw fit is charged to the first estimator that uses it
            let clock = if matches!(e, Estimator::Global | Estimator::Raw) { started } else { t };
            out.push(self.row(e, alpha, clock, outcome));
        }
    }

    fn moving_row(&self, moving: &Result<crate::pipeline::Filtered<&TriangularVolatility<f64>>, PipelineError>) -> SweepRow {
        let started = Instant::now();
        let outcome = moving.as_ref().map_err(Clone::clone).and_then(|m| {
            let r = qmle(&m.surface, self.bx(), &self.settings.qmle)?;
            Ok((r, stats(&m.filters[0], &self.path)))
        });
        self.row(Estimator::Moving, f64::NAN, started, outcome)
    }

    fn local_row(&self, rho: f64) -> SweepRow {
        let started = Instant::now();
        let outcome = local_qmle(&self.path, self.settings, rho, self.cfg.eta, self.bx().clone()).and_then(|r| {
            let f = local_filter_set(&increments(&self.path), self.path.h(), rho)?;
            Ok((r, stats(&f, &self.path)))
        });
        self.row(Estimator::Local, rho, started, outcome)
    }

    fn run(&self, exp: Experiment, ests: &[Estimator]) -> Vec<SweepRow> {
        let mut out = Vec::new();
        let moving = moving_surface(self.model, &self.path, self.settings).map(|(f, _, _)| f);
        if exp == Experiment::Rate {
            if self.lambda == 0.0 {
                if ests.contains(&Estimator::Moving) {
                    out.push(self.moving_row(&moving));
                }
                return out;
            }
            let tuned: Vec<Estimator> = ests.iter().copied().filter(|e| *e != Estimator::Moving).collect();
            self.at_alpha(self.cfg.rate_alpha, &tuned, &moving, &mut out);
            if ests.contains(&Estimator::Moving) {
                out.push(self.moving_row(&moving));
            }
            return out;
        }
        let tuned: Vec<Estimator> = ests.iter().copied().filter(|e| !matches!(e, Estimator::Moving | Estimator::Local)).collect();
        if !tuned.is_empty() {
            for a in self.cfg.alphas_for(exp) {
                self.at_alpha(a, &tuned, &moving, &mut out);
            }
        }
        if ests.contains(&Estimator::Moving) {
            out.push(self.moving_row(&moving));
        }
        if ests.contains(&Estimator::Local) {
            for &r in &self.cfg.rhos {
                out.push(self.local_row(r));
            }
        }
        out
    }
}

/// (n, λ, seed base) cells an experiment simulates.
fn cells(cfg: &ExperimentConfig, exp: Experiment) -> Vec<(usize, f64, u64)> {
    match exp {
        Experiment::Rate => {
            let mut v = Vec::new();
            for &n in &cfg.n_grid {
                let base = replicate_seed(cfg.seed, n as u64);
                v.push((n, 0.0, base));
                if cfg.lambda > 0.0 {
                    v.push((n, cfg.lambda, base));
                }
            }
            v
        }
        _ => vec![(cfg.n, cfg.lambda, cfg.seed)],
    }
}

/// Sweep rows, sorted; failures are rows with an error code.
pub fn run_rows(cfg: &ExperimentConfig, exp: Experiment) -> Result<Vec<SweepRow>, HarnessError> {
    cfg.validate(exp)?;
    let model = cfg.model()?;
    let settings = cfg.settings();
    let ests = cfg.estimators_for(exp);
    let work = || -> Vec<SweepRow> {
        let tasks: Vec<(usize, f64, u64, usize)> =
            cells(cfg, exp).into_iter().flat_map(|(n, l, base)| (0..cfg.replicates).map(move |r| (n, l, base, r))).collect();
        let mut rows: Vec<SweepRow> = tasks
            .into_par_iter()
            .flat_map_iter(|(n, lambda, base, r)| {
                let seed = replicate_seed(base, r as u64);
                let params = cfg.sim_params(n, lambda, seed);
                match simulate_ou_jump::<f64>(&params) {
                    Ok(path) => Replicate { cfg, settings: &settings, model: &model, path, lambda, index: r, seed }.run(exp, &ests),
                    // parameters were validated, so this is unreachable in practice
                    Err(_) => Vec::new(),
                }
            })
            .collect();
        sort_rows(&mut rows);
        rows
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build().map_err(|e| HarnessError::Pool(e.to_string()))?;
        Ok(pool.install(work))
    } else {
        Ok(work())
    }
}

/// Aggregate over replicates of one (estimator, λ, n, tuning) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub lambda: f64,
    pub n: usize,
    pub tuning: f64,
    pub count: usize,
    pub failures: usize,
    pub fallbacks: usize,
    pub mean: f64,
    /// Robust to the rare one-step blow-ups that dominate `mean`.
    pub median: f64,
    pub sd: f64,
    pub bias: f64,
    pub rmse: f64,
    pub mean_stderr: f64,
    pub fn_mean: f64,
    pub fp_mean: f64,
    pub kept_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Groups sorted rows; `truth` is σ*.
fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    }
}

pub fn summarize(rows: &[SweepRow], truth: f64) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let key = rows[i].cell();
        let mut j = i;
        while j < rows.len() && rows[j].cell() == key {
            j += 1;
        }
        let group = &rows[i..j];
        let ok: Vec<&SweepRow> = group.iter().filter(|r| r.error.is_empty()).collect();
        let theta: Vec<f64> = ok.iter().map(|r| r.theta_hat).collect();
        let finite = |f: fn(&SweepRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).filter(|v| v.is_finite()).collect() };
        let m = mean(&theta);
        let sq: Vec<f64> = theta.iter().map(|t| (t - truth) * (t - truth)).collect();
        out.push(SummaryRow {
            estimator: rows[i].estimator,
            lambda: rows[i].lambda,
            n: rows[i].n,
            tuning: rows[i].tuning,
            count: ok.len(),
            failures: group.len() - ok.len(),
            fallbacks: ok.iter().filter(|r| r.fallback).count(),
            mean: m,
            median: median(&theta),
            sd: sample_sd(&theta),
            bias: m - truth,
            rmse: mean(&sq).sqrt(),
            mean_stderr: mean(&finite(|r| r.stderr)),
            fn_mean: mean(&finite(|r| r.fn_ratio)),
            fp_mean: mean(&finite(|r| r.fp_ratio)),
            kept_mean: mean(&ok.iter().map(|r| r.kept as f64).collect::<Vec<_>>()),
        });
        i = j;
    }
    out
}

/// Derived scalar quantities, one per (name, estimator, λ).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub name: &'static str,
    pub estimator: Estimator,
    pub lambda: f64,
    pub value: f64,
}

/// OLS slope and intercept of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn aggregates(exp: Experiment, summary: &[SummaryRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    let mut series: Vec<(Estimator, u64)> = summary.iter().map(|s| (s.estimator, s.lambda.to_bits())).collect();
    series.dedup();
    for (e, l) in series {
        let lambda = f64::from_bits(l);
        let cells: Vec<&SummaryRow> = summary.iter().filter(|s| s.estimator == e && s.lambda.to_bits() == l).collect();
        let means: Vec<f64> = cells.iter().map(|s| s.mean).collect();
        let abs_bias = cells.iter().map(|s| s.bias.abs()).fold(f64::NAN, f64::max);
        match exp {
            Experiment::Rate => {
                let x: Vec<f64> = cells.iter().map(|s| (s.n as f64).ln()).collect();
                let y: Vec<f64> = cells.iter().map(|s| s.rmse.ln()).collect();
                let (slope, intercept) = ols(&x, &y);
                out.push(Aggregate { name: "rate_slope", estimator: e, lambda, value: slope });
                out.push(Aggregate { name: "rate_intercept", estimator: e, lambda, value: intercept });
            }
            _ => {
                if means.len() > 1 {
                    out.push(Aggregate { name: "sd_over_tuning", estimator: e, lambda, value: sample_sd(&means) });
                }
                out.push(Aggregate { name: "max_abs_bias", estimator: e, lambda, value: abs_bias });
            }
        }
    }
    out
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

pub fn write_rows(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimator", "tuning_name", "lambda", "n", "tuning", "replicate", "seed", "theta_hat", "stderr", "fn_ratio", "fp_ratio", "kept", "fallback", "error"])?;
    for r in rows {
        w.write_record([
            r.estimator.name().to_string(),
            r.estimator.tuning_name().to_string(),
            fmt_f(r.lambda),
            r.n.to_string(),
            fmt_f(r.tuning),
            r.replicate.to_string(),
            r.seed.to_string(),
            fmt_f(r.theta_hat),
            fmt_f(r.stderr),
            fmt_f(r.fn_ratio),
            fmt_f(r.fp_ratio),
            r.kept.to_string(),
            u8::from(r.fallback).to_string(),
            r.error.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimator", "lambda", "n", "tuning", "replicate", "wall_seconds"])?;
    for r in rows {
        w.write_record([r.estimator.name().to_string(), fmt_f(r.lambda), r.n.to_string(), fmt_f(r.tuning), r.replicate.to_string(), r.wall_seconds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(summary: &[SummaryRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "estimator", "lambda", "n", "tuning", "count", "failures", "fallbacks", "mean", "median", "sd", "bias", "rmse", "mean_stderr", "fn_percent", "fp_percent", "kept_mean",
    ])?;
    for s in summary {
        w.write_record([
            s.estimator.name().to_string(),
            fmt_f(s.lambda),
            s.n.to_string(),
            fmt_f(s.tuning),
            s.count.to_string(),
            s.failures.to_string(),
            s.fallbacks.to_string(),
            fmt_f(s.mean),
            fmt_f(s.median),
            fmt_f(s.sd),
            fmt_f(s.bias),
            fmt_f(s.rmse),
            fmt_f(s.mean_stderr),
            fmt_f(100.0 * s.fn_mean),
            fmt_f(100.0 * s.fp_mean),
            fmt_f(s.kept_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_aggregates(aggs: &[Aggregate], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "estimator", "lambda", "value"])?;
    for a in aggs {
        w.write_record([a.name.to_string(), a.estimator.name().to_string(), fmt_f(a.lambda), fmt_f(a.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Gnuplot data blocks (separated by two blank lines) and a script reading them.
fn plot_files(exp: Experiment, summary: &[SummaryRow], truth: f64) -> (String, String) {
    let mut dat = String::new();
    let mut gp = String::from("set datafile missing 'NaN'\nset key outside\n");
    let mut blocks: Vec<(Estimator, f64)> = Vec::new();
    for s in summary {
        if blocks.last().is_none_or(|b| b.0 != s.estimator || b.1.to_bits() != s.lambda.to_bits()) {
            blocks.push((s.estimator, s.lambda));
        }
    }
    match exp {
        Experiment::Table1 => {
            let _ = writeln!(dat, "# alpha fn_percent fp_percent");
            for s in summary {
                let _ = writeln!(dat, "{} {} {}", s.tuning, 100.0 * s.fn_mean, 100.0 * s.fp_mean);
            }
            gp.push_str("set logscale x\nset xlabel 'alpha'\nset ylabel 'percent'\n");
            gp.push_str("plot 'plot.dat' using 1:2 with linespoints title 'false negative', \\\n     'plot.dat' using 1:3 with linespoints title 'false positive'\n");
        }
        Experiment::Rate => {
            let mut plots = Vec::new();
            for (idx, (e, l)) in blocks.iter().enumerate() {
                let _ = writeln!(dat, "# {} lambda={}: log_n log_rmse", e.name(), l);
                for s in summary.iter().filter(|s| s.estimator == *e && s.lambda.to_bits() == l.to_bits()) {
                    let _ = writeln!(dat, "{} {}", (s.n as f64).ln(), s.rmse.ln());
                }
                dat.push_str("\n\n");
                plots.push(format!("'plot.dat' index {idx} using 1:2 with linespoints title '{} lambda={}'", e.name(), l));
            }
            gp.push_str("set xlabel 'log n'\nset ylabel 'log RMSE'\n");
            gp.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
        }
        Experiment::AlphaSweep | Experiment::Compare => {
            let mut plots = Vec::new();
            for (idx, (e, _)) in blocks.iter().enumerate() {
                let _ = writeln!(dat, "# {}: {} mean sd", e.name(), e.tuning_name());
                for s in summary.iter().filter(|s| s.estimator == *e) {
                    let _ = writeln!(dat, "{} {} {}", fmt_f(s.tuning), fmt_f(s.mean), fmt_f(s.sd));
                }
                dat.push_str("\n\n");
                plots.push(format!("'plot.dat' index {idx} using 1:2:3 with yerrorlines title '{}'", e.name()));
            }
            plots.push(format!("{truth} with lines dashtype 2 title 'truth'"));
            gp.push_str("set xlabel 'tuning value (alpha or rho)'\nset ylabel 'estimate'\n");
            gp.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
        }
    }
    (dat, gp)
}

/// Everything one experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub aggregates: Vec<Aggregate>,
}

pub fn run_experiment(cfg: &ExperimentConfig, exp: Experiment) -> Result<ExperimentOutput, HarnessError> {
    let rows = run_rows(cfg, exp)?;
    let summary = summarize(&rows, cfg.sigma);
    let aggregates = aggregates(exp, &summary);
    Ok(ExperimentOutput { rows, summary, aggregates })
}

/// Runs `exp` and writes rows.csv, summary.csv, aggregates.csv, plot.dat,
/// plot.gp and timing.csv into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, exp: Experiment, dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    let out = run_experiment(cfg, exp)?;
    fs::create_dir_all(dir)?;
    write_rows(&out.rows, &dir.join("rows.csv"))?;
    write_summary(&out.summary, &dir.join("summary.csv"))?;
    write_aggregates(&out.aggregates, &dir.join("aggregates.csv"))?;
    write_timing(&out.rows, &dir.join("timing.csv"))?;
    let (dat, gp) = plot_files(exp, &out.summary, cfg.sigma);
    fs::write(dir.join("plot.dat"), dat)?;
    fs::write(dir.join("plot.gp"), gp)?;
    Ok(out)
}
