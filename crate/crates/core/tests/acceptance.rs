//! Acceptance criteria 1 to 9. Each test prints one `PASS`/`FAIL` line and
//! then asserts, so `cargo test --test acceptance -- --nocapture` gives a
//! readable scorecard.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jumpqla::estimate::{observed_information, qmle, QmleOptions};
use jumpqla::filter::{global_filter_from_norms, moving_filter_from_norms, moving_rank, FilterConfig, FilterKind, FilterResult};
use jumpqla::harness::{aggregates, run_rows, summarize, Estimator, Experiment, ExperimentConfig, SummaryRow, SWEEP_ALPHAS};
use jumpqla::likelihood::{annealed_loglik, fixed_alpha_loglik, local_loglik, moving_loglik, plain_loglik, Surface};
use jumpqla::model::{increments, BlockLayout, DiffusionModel, ParamBox, SamplePath, StateDependentVolatility, TriangularVolatility};
use jumpqla::pipeline::{fixed_alpha_surface, moving_surface, Settings};
use jumpqla::simulate::{simulate_generic, simulate_ou_jump, OuJumpParams};
use jumpqla::statdist::{threshold_constant, truncation_factor, TruncationConstants};

fn verdict(id: &str, ok: bool, detail: String) {
    println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn check_time(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- 1

fn gamma_half(m: usize) -> f64 {
    // Γ(m/2) by the recurrence from Γ(1/2) or Γ(1)
    let (mut g, mut x) = if m % 2 == 1 { (std::f64::consts::PI.sqrt(), 0.5) } else { (1.0, 1.0) };
    while x < m as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Adaptive Simpson with Richardson correction.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

/// `m⁻¹ ∫₀^c v f_m(v) dv` with `v = u²`, which leaves a smooth integrand.
fn q_by_quadrature(c: f64, m: usize) -> f64 {
    let norm = 2f64.powf(m as f64 / 2.0) * gamma_half(m);
    let f = move |u: f64| 2.0 * u.powi(m as i32 + 1) * (-0.5 * u * u).exp() / norm / m as f64;
    let upper = if c.is_finite() { c.sqrt() } else { 40.0 };
    // fixed panels first so the adaptive rule cannot stop on a flat tail
    let panels = 64;
    let w = upper / panels as f64;
    (0..panels).map(|i| simpson(&f, i as f64 * w, (i + 1) as f64 * w, 1e-15)).sum()
}

#[test]
fn criterion_1_chi_square_identity() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for &alpha in &[0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 0.9] {
        for &m in &[1usize, 2, 3, 5] {
            let c = threshold_constant(alpha, m).unwrap();
            let q = truncation_factor(alpha, m).unwrap();
            worst = worst.max((q - q_by_quadrature(c, m)).abs());
        }
    }
    let c_half = threshold_constant(0.5, 2).unwrap();
    let err_c = (c_half - 2.0 * 2f64.ln()).abs();
    let elapsed = start.elapsed();
    let ok = worst <= 1e-10 && err_c <= 1e-10 && check_time(elapsed, 1.0);
    verdict("1", ok, format!("max |q - quadrature| = {worst:.2e}, |c(0.5,2) - 2 ln 2| = {err_c:.2e}, {:.3}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 2

fn brute_global(norms: &[f64], alpha: f64) -> Vec<bool> {
    let n = norms.len() as f64;
    norms.iter().map(|v| norms.iter().filter(|w| *w > v).count() as f64 >= alpha * n).collect()
}

fn brute_moving(norms: &[f64], s: usize) -> Vec<bool> {
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    norms.iter().map(|v| *v < sorted[s - 1]).collect()
}

#[test]
fn criterion_2_filter_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut moving_bad, mut ties_seen, mut moving_checked) = (0, 0, 0, 0);
    for inst in 0..1000 {
        let n = rng.random_range(1..=12);
        // every third instance draws from a tiny alphabet to force ties
        let norms: Vec<f64> = if inst % 3 == 0 {
            (0..n).map(|_| rng.random_range(0..3) as f64).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>() * 10.0).collect()
        };
        let mut uniq = norms.clone();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let distinct = uniq.len() == n;
        if !distinct {
            ties_seen += 1;
        }
        let alpha = match inst % 5 {
            0 => 0.0,
            1 => rng.random_range(0..n) as f64 / n as f64,
            _ => rng.random::<f64>() * 0.999,
        };
        let got = global_filter_from_norms(norms.clone(), alpha).unwrap();
        if got.mask != brute_global(&norms, alpha) {
            mismatches += 1;
        }
        let b = [0.5, 1.0, 2.0][inst % 3];
        let delta1 = 0.05 + 0.44 * rng.random::<f64>();
        if let Ok(s) = moving_rank::<f64>(n, b, delta1) {
            moving_checked += 1;
            let mv = moving_filter_from_norms(norms.clone(), b, delta1).unwrap();
            let size_ok = mv.kept_count() < s && (!distinct || mv.kept_count() == s - 1);
            if !size_ok || mv.mask != brute_moving(&norms, s) {
                moving_bad += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && moving_bad == 0 && ties_seen > 100 && moving_checked > 500 && check_time(elapsed, 5.0);
    verdict(
        "2",
        ok,
        format!("global mismatches {mismatches}/1000, moving violations {moving_bad}/{moving_checked}, {ties_seen} tied instances, {:.3}s", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn criterion_3_reduction_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = TriangularVolatility::scalar(1e-3, 10.0).unwrap();
    let (mut worst_alpha, mut worst_moving) = (0.0f64, 0.0f64);
    for rep in 0..50 {
        let lambda = if rep % 2 == 0 { 0.0 } else { 20.0 };
        let path: SamplePath<f64> = simulate_ou_jump(&OuJumpParams { n: 100, lambda, seed: 300 + rep, ..Default::default() }).unwrap();
        let dy = increments(&path);
        let plain = plain_loglik(&model, &path).unwrap();
        let global = global_filter_from_norms(dy.block_norms(0..1), 0.0).unwrap();
        let alpha0 = fixed_alpha_loglik(&model, &path, &[global], &[TruncationConstants::new(0.0, 1).unwrap()]).unwrap();
        let mut full = FilterResult::all(dy.block_norms(0..1));
        full.kind = FilterKind::Moving;
        let moving = moving_loglik(&model, &path, &[full], &[1.0], &[1.0]).unwrap();
        for _ in 0..5 {
            let theta = [rng.random_range(0.02..1.0)];
            let p = plain.eval(&theta).unwrap();
            worst_alpha = worst_alpha.max(relative_gap(alpha0.eval(&theta).unwrap(), p));
            worst_moving = worst_moving.max(relative_gap(moving.eval(&theta).unwrap(), p));
        }
    }
    let elapsed = start.elapsed();
    let ok = worst_alpha <= 1e-12 && worst_moving <= 1e-12 && check_time(elapsed, 10.0);
    verdict("3", ok, format!("alpha = 0 gap {worst_alpha:.2e}, full-K moving gap {worst_moving:.2e}, {:.3}s", elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 4

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Norm-wise relative error of `got` against `reference`.
fn rel_err(got: &[f64], reference: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(reference).map(|(a, b)| a - b).collect();
    max_abs(&diff) / max_abs(reference).max(1e-300)
}

/// Worst relative error of grad, hess and third against central differences
/// of value, grad and hess respectively.
fn fd_errors<S: Surface<f64>>(surface: &S, theta: &[f64]) -> [f64; 3] {
    let p = theta.len();
    let d = surface.derivatives(theta, 3).unwrap();
    let step = |i: usize| 1e-5 * theta[i].abs().max(1e-2);
    let shifted = |i: usize, s: f64| {
        let mut t = theta.to_vec();
        t[i] += s;
        t
    };
    let mut fd_grad = Vec::with_capacity(p);
    let mut fd_hess = Vec::with_capacity(p * p);
    let mut fd_third = Vec::with_capacity(p * p * p);
    let mut an_hess = Vec::with_capacity(p * p);
    let mut an_third = Vec::with_capacity(p * p * p);
    for i in 0..p {
        let e = step(i);
        let (up, dn) = (shifted(i, e), shifted(i, -e));
        fd_grad.push((surface.eval(&up).unwrap() - surface.eval(&dn).unwrap()) / (2.0 * e));
        let (gu, gd) = (surface.grad(&up).unwrap(), surface.grad(&dn).unwrap());
        let (hu, hd) = (surface.hess(&up).unwrap(), surface.hess(&dn).unwrap());
        for j in 0..p {
            fd_hess.push((gu[j] - gd[j]) / (2.0 * e));
            an_hess.push(d.hess[(i, j)]);
            for k in 0..p {
                fd_third.push((hu[(j, k)] - hd[(j, k)]) / (2.0 * e));
                an_third.push(d.third.get(i, j, k));
            }
        }
    }
    [rel_err(&d.grad, &fd_grad), rel_err(&an_hess, &fd_hess), rel_err(&an_third, &fd_third)]
}

fn random_in(rng: &mut ChaCha8Rng, ranges: &[(f64, f64)]) -> Vec<f64> {
    ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
}

#[test]
fn criterion_4_derivatives_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let settings = Settings::default();
    let scalar = TriangularVolatility::scalar(1e-3, 10.0).unwrap();
    let path: SamplePath<f64> = simulate_ou_jump(&OuJumpParams { n: 500, seed: 44, ..Default::default() }).unwrap();

    let chol = TriangularVolatility::new(BlockLayout::single(2), ParamBox::new(vec![1e-3, -1.0, 1e-3], vec![2.0, 1.0, 2.0]).unwrap()).unwrap();
    let theta2 = [0.2, 0.05, 0.15];
    let path2: SamplePath<f64> = simulate_generic(
        &chol,
        &theta2,
        &[0.0, 0.0],
        |_, y: &[f64]| y.iter().map(|v| -0.5 * v).collect(),
        |rng, _, h| (rng.random::<f64>() < 10.0 * h).then(|| vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]),
        400,
        1.0,
        45,
    )
    .unwrap();
    let state = StateDependentVolatility::new(ParamBox::new(vec![1e-3, 0.0], vec![1.0, 1.0]).unwrap()).unwrap();

    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str, surface: &dyn Fn(&[f64]) -> [f64; 3], ranges: &[(f64, f64)], rng: &mut ChaCha8Rng| {
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let theta = random_in(rng, ranges);
            worst = surface(&theta).iter().fold(worst, |m, v| m.max(*v));
        }
        results.push((name, worst));
    };

    let fixed = fixed_alpha_surface(&scalar, &path, &settings, 0.05).unwrap().surface;
    let (moving, _, _) = moving_surface(&scalar, &path, &settings).unwrap();
    let moving = moving.surface;
    let plain = plain_loglik(&scalar, &path).unwrap();
    let local = local_loglik(&path, 0.4, 0.1, ParamBox::new(vec![1e-3], vec![10.0]).unwrap()).unwrap();
    let annealed = annealed_loglik(&fixed, 0.3).unwrap();
    let fixed2 = fixed_alpha_surface(&chol, &path2, &settings, 0.05).unwrap().surface;
    let (moving2, _, _) = moving_surface(&chol, &path2, &settings).unwrap();
    let moving2 = moving2.surface;
    let state_plain = plain_loglik(&state, &path).unwrap();

    let s1 = [(0.03, 1.0)];
    let s3 = [(0.1, 0.4), (-0.1, 0.1), (0.1, 0.4)];
    run("fixed-alpha", &|t| fd_errors(&fixed, t), &s1, &mut rng);
    run("moving", &|t| fd_errors(&moving, t), &s1, &mut rng);
    run("plain", &|t| fd_errors(&plain, t), &s1, &mut rng);
    run("local", &|t| fd_errors(&local, t), &s1, &mut rng);
    run("annealed", &|t| fd_errors(&annealed, t), &s1, &mut rng);
    run("fixed-alpha 2x2", &|t| fd_errors(&fixed2, t), &s3, &mut rng);
    run("moving 2x2", &|t| fd_errors(&moving2, t), &s3, &mut rng);
    run("state-dependent", &|t| fd_errors(&state_plain, t), &[(0.005, 0.05), (0.001, 0.02)], &mut rng);

    let elapsed = start.elapsed();
    let worst = results.iter().fold(0.0f64, |m, r| m.max(r.1));
    let ok = worst <= 1e-5 && check_time(elapsed, 30.0);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict("4", ok, format!("worst relative error {worst:.2e} [{}], {:.2}s", detail.join(", "), elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_closed_form_qmle() {
    let model = TriangularVolatility::scalar(1e-3, 10.0).unwrap();
    let mut worst_theta = 0.0f64;
    let mut worst_gamma = 0.0f64;
    for seed in 0..5 {
        let path: SamplePath<f64> = simulate_ou_jump(&OuJumpParams { lambda: 0.0, seed: 500 + seed, ..Default::default() }).unwrap();
        let dy = increments(&path);
        let n = path.n() as f64;
        let closed = (dy.as_slice().iter().map(|d| d * d / path.h()).sum::<f64>() / n).sqrt();
        let global = global_filter_from_norms(dy.block_norms(0..1), 0.0).unwrap();
        let surface = fixed_alpha_loglik(&model, &path, &[global], &[TruncationConstants::new(0.0, 1).unwrap()]).unwrap();
        let r = qmle(&surface, model.param_box(), &QmleOptions::default()).unwrap();
        worst_theta = worst_theta.max((r.theta_hat[0] - closed).abs());
        let (gamma, _) = observed_information(&surface, &r.theta_hat).unwrap();
        worst_gamma = worst_gamma.max((gamma[(0, 0)] - 2.0 / (r.theta_hat[0] * r.theta_hat[0])).abs());
    }
    let ok = worst_theta <= 1e-8 && worst_gamma <= 1e-8;
    verdict("5", ok, format!("|QMLE - closed form| = {worst_theta:.2e}, |Gamma - 2/theta^2| = {worst_gamma:.2e}"));
    assert!(ok);
}

// ---------------------------------------------------------------- 6

fn cell<'a>(summary: &'a [SummaryRow], e: Estimator, tuning: f64) -> &'a SummaryRow {
    summary.iter().find(|s| s.estimator == e && (s.tuning - tuning).abs() < 1e-12).unwrap_or_else(|| panic!("no cell {e:?} {tuning}"))
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn criterion_6a_detection_table() {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let rows = run_rows(&cfg, Experiment::Table1).unwrap();
    let elapsed = start.elapsed();
    let summary = summarize(&rows, cfg.sigma);
    let fn05 = cell(&summary, Estimator::Global, 0.05).fn_mean;
    let fn005 = cell(&summary, Estimator::Global, 0.005).fn_mean;
    let fp25 = cell(&summary, Estimator::Global, 0.25).fp_mean;
    let ok = fn05 <= 0.05 && fn005 >= 0.40 && (0.20..=0.25).contains(&fp25) && check_time(elapsed, 300.0);
    verdict(
        "6a",
        ok,
        format!(
            "R = {}: FN(0.05) = {:.2}%, FN(0.005) = {:.2}%, FP(0.25) = {:.2}%, {:.1}s",
            cfg.replicates,
            100.0 * fn05,
            100.0 * fn005,
            100.0 * fp25,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6b_one_step_stabilizes() {
    let cfg = ExperimentConfig { estimators: vec![Estimator::Raw, Estimator::Onestep], alphas: SWEEP_ALPHAS.to_vec(), ..Default::default() };
    let summary = summarize(&run_rows(&cfg, Experiment::AlphaSweep).unwrap(), cfg.sigma);
    let means = |e| SWEEP_ALPHAS.iter().map(|&a| cell(&summary, e, a).mean).collect::<Vec<_>>();
    let medians = |e| SWEEP_ALPHAS.iter().map(|&a| cell(&summary, e, a).median).collect::<Vec<_>>();
    let (raw, one) = (sd(&means(Estimator::Raw)), sd(&means(Estimator::Onestep)));
    let (raw_med, one_med) = (sd(&medians(Estimator::Raw)), sd(&medians(Estimator::Onestep)));
    let ok = 2.0 * one <= raw;
    verdict(
        "6b",
        ok,
        format!("sd over alpha of MC means: raw {raw:.4}, one-step {one:.4} (ratio {:.2}); of MC medians: raw {raw_med:.4}, one-step {one_med:.4}", raw / one),
    );
    assert!(ok);
}

#[test]
fn criterion_6c_local_comparison() {
    let cfg = ExperimentConfig { estimators: vec![Estimator::Onestep, Estimator::Local], alphas: SWEEP_ALPHAS.to_vec(), ..Default::default() };
    let summary = summarize(&run_rows(&cfg, Experiment::Compare).unwrap(), cfg.sigma);
    let local = cell(&summary, Estimator::Local, 1.0 / 3.0).bias.abs();
    let one: Vec<f64> = SWEEP_ALPHAS.iter().map(|&a| cell(&summary, Estimator::Onestep, a).bias.abs()).collect();
    let beaten: Vec<String> = SWEEP_ALPHAS.iter().zip(&one).filter(|(_, b)| **b >= local).map(|(a, b)| format!("{a}: {b:.4}")).collect();
    let ok = beaten.is_empty();
    verdict("6c", ok, format!("local |bias| at rho = 1/3 is {local:.4}; one-step alphas not below it: [{}]", beaten.join(", ")));
    assert!(ok);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_rate() {
    let cfg = ExperimentConfig { estimators: vec![Estimator::Moving], ..Default::default() };
    let start = Instant::now();
    let summary = summarize(&run_rows(&cfg, Experiment::Rate).unwrap(), cfg.sigma);
    let elapsed = start.elapsed();
    let aggs = aggregates(Experiment::Rate, &summary);
    let slope = |lambda: f64| aggs.iter().find(|a| a.name == "rate_slope" && a.lambda == lambda).map(|a| a.value).unwrap();
    let (free, jumps) = (slope(0.0), slope(cfg.lambda));
    let ok = (free + 0.5).abs() <= 0.1 && (jumps + 0.5).abs() <= 0.15 && check_time(elapsed, 900.0);
    let rmse: Vec<String> = summary.iter().map(|s| format!("(λ={}, n={}) {:.2e}", s.lambda, s.n, s.rmse)).collect();
    verdict("7", ok, format!("slope jump-free {free:.3}, with jumps {jumps:.3}; RMSE {}; {:.1}s", rmse.join(" "), elapsed.as_secs_f64()));
    assert!(ok);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_wald_coverage() {
    let cfg = ExperimentConfig { lambda: 0.0, estimators: vec![Estimator::Moving], ..Default::default() };
    let rows = run_rows(&cfg, Experiment::AlphaSweep).unwrap();
    let usable: Vec<_> = rows.iter().filter(|r| r.error.is_empty() && r.stderr.is_finite()).collect();
    let covered = usable.iter().filter(|r| (r.theta_hat - cfg.sigma).abs() <= 1.959_963_984_540_054 * r.stderr).count();
    let coverage = covered as f64 / rows.len() as f64;
    let ok = rows.len() == 500 && (0.92..=0.98).contains(&coverage);
    verdict("8", ok, format!("{covered}/{} intervals cover sigma = {} ({:.1}%)", rows.len(), cfg.sigma, 100.0 * coverage));
    assert!(ok);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "replicates = 200\nseed = 99\n").unwrap();
    let run = |out: &str| {
        let target = dir.path().join(out);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_jumpqla"))
            .args(["mc", "--experiment", "table1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&target)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(target.join("rows.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = a == b && !a.is_empty();
    verdict("9", ok, format!("rows.csv {} bytes, identical = {}", a.len(), a == b));
    assert!(ok);
}

#[test]
fn filter_config_defaults_are_the_documented_ones() {
    let f = FilterConfig::default();
    assert_eq!((f.k, f.delta0, f.delta1, f.b), (2, 0.2, 4.0 / 9.0, 1.0));
    assert_eq!(moving_rank::<f64>(1000, 1.0, 4.0 / 9.0).unwrap(), 979);
}
