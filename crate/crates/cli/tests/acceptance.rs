//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stdout (bypassing the test harness capture) before asserting.
//!
//! The Monte Carlo checks are slow; run with `--release`-level optimization
//! (the workspace test profile already uses it).

mod common;

use std::io::Write as _;
use std::sync::OnceLock;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use seqint_core::interaction::{dr_delta, dr_psi, dr_weights, weighted_projection};
use seqint_core::ks::ks_test_uniform;
use seqint_core::nalgebra::{DMatrix, DVector};
use seqint_core::nuisance::{
    fit_adaptive_lasso_linear, fit_logistic, fit_ridge, AdaptiveLassoOptions, FittedNuisance, LogisticPenalty,
    RidgePenalty,
};
use seqint_core::simgen::{mc_outcomes, mc_study, McMethod, McReport, MethodTable, Scenario, StudyConfig};
use seqint_core::{
    run_sequence_exploratory, BootstrapPlan, Dataset, Method, Recipe, SequenceConfig, SequenceResult, StepContext,
};

use common::{code, run};

fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn plan(b: usize) -> BootstrapPlan {
    BootstrapPlan {
        b,
        ..BootstrapPlan::default()
    }
}

fn study(scenario: Scenario, methods: Vec<McMethod>, reps: usize, b: usize, max_steps: usize, seed: u64) -> McReport {
    let cfg = StudyConfig {
        scenario,
        methods,
        reps,
        plan: plan(b),
        max_steps,
        seed,
    };
    mc_study(&cfg).expect("study runs")
}

fn table(rep: &McReport, m: McMethod) -> &MethodTable {
    rep.table(m).expect("method was run")
}

fn rate(cell: &seqint_core::simgen::StepCell) -> f64 {
    cell.rate.map_or(f64::NAN, |r| r.rate)
}

/// Scenario N1 at n = 250, p = 10 with the three RCT calibrations, shared by
/// several checks.
fn n1_study() -> &'static McReport {
    static CELL: OnceLock<McReport> = OnceLock::new();
    CELL.get_or_init(|| {
        study(
            Scenario::named("N1", 250, 10).unwrap(),
            vec![McMethod::NullSampling, McMethod::MBoot, McMethod::NBoot],
            1000,
            1000,
            1,
            11,
        )
    })
}

#[test]
fn null_level_of_proposed_calibrations() {
    let rep = n1_study();
    let ns = rate(&table(rep, McMethod::NullSampling).steps[0].null);
    let mb = rate(&table(rep, McMethod::MBoot).steps[0].null);
    let ok = (0.03..=0.08).contains(&ns) && (0.03..=0.08).contains(&mb);
    let detail = format!("N1 step-1 rejection: null-sampling {ns:.3}, m-boot {mb:.3} (target [0.03, 0.08])");
    assert!(verdict("type-I error control", ok, &detail), "{detail}");
}

#[test]
fn plain_bootstrap_is_anticonservative() {
    let rep = n1_study();
    let ns = rate(&table(rep, McMethod::NullSampling).steps[0].null);
    let mb = rate(&table(rep, McMethod::MBoot).steps[0].null);
    let nb = rate(&table(rep, McMethod::NBoot).steps[0].null);
    let ok = nb >= 0.08 && nb > ns && nb > mb;
    let detail = format!("N1 step-1 rejection: n-boot {nb:.3} vs null-sampling {ns:.3}, m-boot {mb:.3} (target >= 0.08 and above both)");
    assert!(verdict("n-boot anti-conservatism", ok, &detail), "{detail}");
}

#[test]
fn power_selection_and_second_step_level() {
    let rep = study(Scenario::named("S1", 250, 10).unwrap(), vec![McMethod::MBoot], 1000, 1000, 2, 12);
    let t = table(&rep, McMethod::MBoot);
    let power = rate(&t.steps[0].power);
    let sel = rate(&t.steps[0].selection);
    let step2 = t.steps.get(1).map_or(f64::NAN, |s| rate(&s.null));
    let ok = power >= 0.80 && sel >= 0.90 && step2 <= 0.08;
    let detail = format!(
        "S1 m-boot: step-1 power {power:.3} (>= 0.80), selection {sel:.3} (>= 0.90), step-2 null rejection {step2:.3} (<= 0.08, {} reps reached)",
        t.steps.get(1).map_or(0, |s| s.null.total)
    );
    assert!(verdict("power and step-2 control", ok, &detail), "{detail}");
}

const DR_REPS: usize = 500;
/// Bootstrap replicates for the doubly robust checks; the per-replicate
/// propensity refit makes the default of 1000 impractically slow.
const DR_B: usize = 250;

#[test]
fn doubly_robust_null_level() {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, name) in ["D1-null", "D2-null"].iter().enumerate() {
        let rep = study(Scenario::named(name, 250, 10).unwrap(), vec![McMethod::MBootDr], DR_REPS, DR_B, 1, 20 + i as u64);
        let t = table(&rep, McMethod::MBootDr);
        let r = rate(&t.steps[0].null);
        ok &= (0.03..=0.09).contains(&r);
        parts.push(format!("{name} {r:.3} ({} failed reps)", t.failed_reps));
    }
    let detail = format!("m-boot-DR step-1 rejection: {} (target [0.03, 0.09])", parts.join(", "));
    assert!(verdict("double robustness: level", ok, &detail), "{detail}");
}

#[test]
fn doubly_robust_power() {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, name) in ["D1-S1", "D2-S1"].iter().enumerate() {
        let rep = study(Scenario::named(name, 250, 10).unwrap(), vec![McMethod::MBootDr], DR_REPS, DR_B, 1, 30 + i as u64);
        let t = table(&rep, McMethod::MBootDr);
        let r = rate(&t.steps[0].power);
        ok &= r >= 0.70;
        parts.push(format!("{name} {r:.3} ({} failed reps)", t.failed_reps));
    }
    let detail = format!("m-boot-DR step-1 power: {} (target >= 0.70)", parts.join(", "));
    assert!(verdict("double robustness: power", ok, &detail), "{detail}");
}

#[test]
fn pretest_consistency() {
    let null = table(n1_study(), McMethod::MBoot);
    let r_one = null.r_hat_one as f64 / null.completed_reps as f64;
    let strong = Scenario::named("S1", 250, 10).unwrap().scale_interactions(2.0);
    let rep = study(strong, vec![McMethod::MBoot], 1000, 1000, 1, 13);
    let t = table(&rep, McMethod::MBoot);
    let m_n = t.m_hat_n as f64 / t.completed_reps as f64;
    let ok = r_one >= 0.95 && m_n >= 0.95;
    let detail = format!("N1 fraction r_hat = 1: {r_one:.3} (>= 0.95); strong S1 fraction m_hat = n: {m_n:.3} (>= 0.95)");
    assert!(verdict("pre-test consistency", ok, &detail), "{detail}");
}

fn normals(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `x − X̃(X̃ᵀDX̃)⁻¹X̃ᵀDx` with `D = diag(d)`, by a dense LU solve.
fn weighted_residual(x: &[f64], xt: &DMatrix<f64>, d: &[f64]) -> Vec<f64> {
    let dm = DMatrix::from_diagonal(&DVector::from_row_slice(d));
    let xv = DVector::from_row_slice(x);
    let coef = (xt.transpose() * &dm * xt).lu().solve(&(xt.transpose() * &dm * &xv)).expect("full rank");
    (xv - xt * coef).iter().copied().collect()
}

/// Least squares of `r` on the given columns; returns coefficients and the
/// mean squared residual.
fn least_squares(cols: &[Vec<f64>], r: &[f64]) -> (Vec<f64>, f64) {
    let n = r.len();
    let d = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let rv = DVector::from_row_slice(r);
    let sol = d.clone().svd(true, true).solve(&rv, 1e-14).expect("solvable");
    let res = rv - d * &sol;
    (sol.iter().copied().collect(), res.norm_squared() / n as f64)
}

#[test]
fn oracle_equivalence_suite() {
    let started = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(6);
    let (mut sel_mismatch, mut theta_err, mut dr_err, mut orth_err) = (0usize, 0.0_f64, 0.0_f64, 0.0_f64);
    for inst in 0..200 {
        let n = rng.random_range(20..=50);
        let p = rng.random_range(2..=8);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        for i in (1..n).rev() {
            a.swap(i, rng.random_range(0..=i));
        }
        let beta: Vec<f64> = (0..p).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let eps = normals(&mut rng, n);
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 0)] + a[i] * (0.5 + (0..p).map(|k| x[(i, k)] * beta[k]).sum::<f64>()) + eps[i])
            .collect();
        let names = (0..p).map(|k| format!("x{k}")).collect();
        let data = Dataset::new(y, a.clone(), x.clone(), Some(vec![0.5; n]), names).unwrap();
        let j_len = rng.random_range(0..=(p - 1).min(3));
        let j_set: Vec<usize> = (0..j_len).map(|j| (j * 3 + inst) % p).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let step = StepContext::new(&data, j_set.clone()).unwrap();

        // Selection and coefficients against brute-force least squares.
        let ev = Recipe::rct().evaluate(&data, &step, false).unwrap();
        let (r, w) = (&ev.residualized.r, &ev.residualized.w);
        let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
        let xt = DMatrix::from_fn(n, 1 + j_set.len(), |i, j| if j == 0 { 1.0 } else { x[(i, j_set[j - 1])] });
        let mut best = (f64::INFINITY, usize::MAX);
        for s in &ev.stats {
            let u = weighted_residual(x.column(s.k).as_slice(), &xt, &w2);
            let wu: Vec<f64> = (0..n).map(|i| w[i] * u[i]).collect();
            let (coef, mse) = least_squares(&[w.clone(), wu], r);
            theta_err = theta_err.max((coef[1] - s.coef).abs() / coef[1].abs().max(1.0));
            if mse < best.0 {
                best = (mse, s.k);
            }
        }
        sel_mismatch += usize::from(best.1 != ev.k_hat());

        // Weighted projection residuals are orthogonal to X̃ under the weights.
        let xk = x.column(*step.jc_set().first().unwrap()).as_slice().to_vec();
        let (_, res) = weighted_projection(&xk, &xt, &w2).unwrap();
        for j in 0..xt.ncols() {
            let ip: f64 = (0..n).map(|i| w2[i] * xt[(i, j)] * res[i]).sum();
            let scale: f64 = (0..n).map(|i| (w2[i] * xt[(i, j)] * xk[i]).abs()).sum::<f64>().max(1e-300);
            orth_err = orth_err.max(ip.abs() / scale);
        }

        // Doubly robust coefficient solves the empirical estimating equation.
        let qhat: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
        let wt: Vec<f64> = (0..n).map(|i| a[i] - qhat[i]).collect();
        let rr = normals(&mut rng, n);
        let (_, lk) = weighted_projection(&xk, &xt, &dr_weights(&a, &wt)).unwrap();
        let psi = dr_psi(&rr, &wt, &a, &lk, 0).unwrap().coef;
        let delta = dr_delta(&xt, &xk, &rr, &wt, &a, psi).unwrap();
        for col in 0..=xt.ncols() {
            let v: f64 = (0..n)
                .map(|i| {
                    let fit: f64 = (0..xt.ncols()).map(|j| xt[(i, j)] * delta[j]).sum::<f64>() + xk[i] * psi;
                    let z = if col < xt.ncols() { xt[(i, col)] } else { xk[i] };
                    z * wt[i] * (rr[i] - fit * a[i])
                })
                .sum::<f64>()
                / n as f64;
            dr_err = dr_err.max(v.abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = sel_mismatch == 0 && theta_err <= 1e-10 && dr_err <= 1e-8 && orth_err <= 1e-8 && secs <= 60.0;
    let detail = format!(
        "200 instances: selection mismatches {sel_mismatch}, max theta error {theta_err:.1e}, max estimating-equation residual {dr_err:.1e}, max relative projection inner product {orth_err:.1e}, {secs:.1}s"
    );
    assert!(verdict("oracle equivalence", ok, &detail), "{detail}");
}

#[test]
fn null_sampling_pvalues_are_uniform() {
    let started = std::time::Instant::now();
    let cfg = StudyConfig {
        scenario: Scenario::named("N1", 500, 10).unwrap(),
        methods: vec![McMethod::NullSampling],
        reps: 2000,
        plan: plan(1000),
        max_steps: 1,
        seed: 14,
    };
    let out = mc_outcomes(&cfg).unwrap();
    let pv: Vec<f64> = out[0].reps.iter().flatten().map(|steps| steps[0].p_value).collect();
    let (d, p) = ks_test_uniform(&pv);
    let secs = started.elapsed().as_secs_f64();
    let ok = p > 0.01 && pv.len() == 2000;
    let detail = format!("N1 n=500, {} p-values: KS D = {d:.4}, p = {p:.3} (> 0.01), {secs:.0}s", pv.len());
    assert!(verdict("null-sampling uniformity", ok, &detail), "{detail}");
}

fn transform(data: &Dataset, scale: &[f64], shift: &[f64], order: &[usize]) -> Dataset {
    let n = data.n();
    let x = DMatrix::from_fn(n, order.len(), |i, j| {
        let k = order[j];
        data.x()[(i, k)] * scale[k] + shift[k]
    });
    let names = order.iter().map(|&k| data.names()[k].clone()).collect();
    Dataset::new(data.y().to_vec(), data.a().to_vec(), x, data.q0().map(|q| q.to_vec()), names).unwrap()
}

/// `(original 1-based covariate, r̂, m̂, p)` per step.
fn fingerprint(res: &SequenceResult, order: &[usize]) -> Vec<(usize, u8, usize, f64)> {
    res.steps
        .iter()
        .map(|s| (order[s.covariate - 1] + 1, s.calibration.r_hat, s.calibration.m_hat, s.calibration.p_value))
        .collect()
}

#[test]
fn affine_and_permutation_invariance() {
    let mut rng = StdRng::seed_from_u64(8);
    let mut failures = Vec::new();
    for inst in 0..20u64 {
        let name = if inst % 2 == 0 { "S1" } else { "N1" };
        let s = Scenario::named(name, 150, 5).unwrap();
        let data = seqint_core::simgen::generate(&s, seqint_core::rng::StreamKey::new(100 + inst)).unwrap();
        let p = data.p();
        let identity: Vec<usize> = (0..p).collect();
        let scale: Vec<f64> = (0..p)
            .map(|_| {
                let m = rng.random_range(0.1..10.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let shift: Vec<f64> = (0..p).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut perm = identity.clone();
        for i in (1..p).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for method in [Method::MBoot, Method::NullSampling] {
            let mut pl = plan(200);
            pl.seed = 500 + inst;
            let cfg = SequenceConfig::new(Recipe::rct(), method, pl, 3);
            let base = fingerprint(&run_sequence_exploratory(&data, &cfg, 3).unwrap(), &identity);
            let affine = transform(&data, &scale, &shift, &identity);
            let a = fingerprint(&run_sequence_exploratory(&affine, &cfg, 3).unwrap(), &identity);
            let permuted = transform(&data, &vec![1.0; p], &vec![0.0; p], &perm);
            let b = fingerprint(&run_sequence_exploratory(&permuted, &cfg, 3).unwrap(), &perm);
            if a != base {
                failures.push(format!("instance {inst} {}: affine {a:?} vs {base:?}", method.label()));
            }
            if b != base {
                failures.push(format!("instance {inst} {}: permutation {b:?} vs {base:?}", method.label()));
            }
        }
    }
    let detail = if failures.is_empty() {
        "20 instances x {m-boot, null-sampling} x 3 steps unchanged under rescaling, shifting and column permutation".to_string()
    } else {
        failures.join("; ")
    };
    assert!(verdict("invariance", failures.is_empty(), &detail), "{detail}");
}

#[test]
fn cli_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::write_trial(dir.path(), "S1", 200, 6, 5);
    let mut ok = true;
    let mut notes = Vec::new();
    for mode in ["test", "simulate"] {
        let mut outputs = Vec::new();
        for (i, workers) in ["1", "1", "4", "8"].iter().enumerate() {
            let out = dir.path().join(format!("{mode}{i}.json"));
            let out_s = out.to_str().unwrap().to_string();
            let mut args: Vec<&str> = vec![mode, "--workers", workers, "--seed", "2024", "--B", "200", "--out", &out_s];
            let data_s = data.to_str().unwrap().to_string();
            if mode == "test" {
                args.extend(["--data", &data_s, "--propensity", "q", "--steps", "3"]);
            } else {
                args.extend(["--scenario", "S2", "--n", "120", "--p", "5", "--reps", "100", "--steps", "2"]);
                args.extend(["--methods", "null,mboot,nboot,bonf,lrt"]);
            }
            let o = run(&args);
            if code(&o) != 0 {
                ok = false;
                notes.push(format!("{mode} exited {}: {}", code(&o), String::from_utf8_lossy(&o.stderr)));
                break;
            }
            outputs.push((std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("csv")).unwrap()));
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]);
        ok &= same && outputs.len() == 4;
        notes.push(format!("{mode}: {} runs byte-identical = {same}", outputs.len()));
    }
    let detail = format!("{} (workers 1, 1, 4, 8)", notes.join(", "));
    assert!(verdict("determinism", ok, &detail), "{detail}");
}

fn logistic_score(x: &DMatrix<f64>, y: &[f64], f: &FittedNuisance) -> Vec<f64> {
    let n = y.len();
    let mut s = vec![0.0; x.ncols() + 1];
    for i in 0..n {
        let eta = f.intercept + (0..x.ncols()).map(|k| f.coefficients[k] * x[(i, k)]).sum::<f64>();
        let r = y[i] - 1.0 / (1.0 + (-eta).exp());
        s[0] += r / n as f64;
        for k in 0..x.ncols() {
            s[k + 1] += r * x[(i, k)] / n as f64;
        }
    }
    s
}

/// Largest violation of `score_j ∈ λwⱼ·∂|βⱼ|` and of a zero intercept score.
fn kkt_violation(score: &[f64], f: &FittedNuisance) -> f64 {
    let lambda = f.lambda.unwrap();
    let w = f.penalty_weights.as_ref().unwrap();
    let mut worst = score[0].abs();
    for (k, &b) in f.coefficients.iter().enumerate() {
        let v = if w[k].is_infinite() {
            if b == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else if b != 0.0 {
            (score[k + 1] - lambda * w[k] * b.signum()).abs()
        } else {
            (score[k + 1].abs() - lambda * w[k]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

#[test]
fn solver_checks() {
    let mut rng = StdRng::seed_from_u64(10);
    let (mut lasso, mut logit_lasso, mut ridge, mut score) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    let mut logistic_fits = 0;
    for _ in 0..50 {
        let n = rng.random_range(60..=200);
        let p = rng.random_range(2..=8);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta: Vec<f64> = (0..p).map(|k| if k < 2 { 1.0 } else { 0.0 }).collect();
        let eps = normals(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|i| 0.5 + (0..p).map(|k| x[(i, k)] * beta[k]).sum::<f64>() + eps[i]).collect();

        let f = fit_adaptive_lasso_linear(&x, &y, &AdaptiveLassoOptions::default(), false).unwrap();
        let resid: Vec<f64> = (0..n)
            .map(|i| y[i] - f.intercept - (0..p).map(|k| f.coefficients[k] * x[(i, k)]).sum::<f64>())
            .collect();
        let mut s = vec![resid.iter().sum::<f64>() / n as f64];
        s.extend((0..p).map(|k| (0..n).map(|i| x[(i, k)] * resid[i]).sum::<f64>() / n as f64));
        lasso = lasso.max(kkt_violation(&s, &f));

        let lambda = rng.random_range(0.01..10.0);
        let fr = fit_ridge(&x, &y, &RidgePenalty::Fixed(lambda), false).unwrap();
        let mut d = DMatrix::from_element(n, p + 1, 1.0);
        d.columns_mut(1, p).copy_from(&x);
        let mut g = d.transpose() * &d;
        for j in 1..=p {
            g[(j, j)] += lambda;
        }
        let sol = g.lu().solve(&(d.transpose() * DVector::from_row_slice(&y))).unwrap();
        ridge = ridge.max((fr.intercept - sol[0]).abs());
        for k in 0..p {
            ridge = ridge.max((fr.coefficients[k] - sol[k + 1]).abs());
        }

        // Overlapping classes: a probit-like latent with unit noise.
        let t: Vec<f64> = (0..n)
            .map(|i| {
                let eta = 0.3 + 0.8 * x[(i, 0)] - 0.5 * x[(i, 1)] + rng.sample::<f64, _>(StandardNormal);
                f64::from(eta > 0.0)
            })
            .collect();
        if let Ok(fl) = fit_logistic(&x, &t, &LogisticPenalty::None, false) {
            logistic_fits += 1;
            score = score.max(logistic_score(&x, &t, &fl).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
        let fa = fit_logistic(&x, &t, &LogisticPenalty::AdaptiveLasso(AdaptiveLassoOptions::default()), false).unwrap();
        logit_lasso = logit_lasso.max(kkt_violation(&logistic_score(&x, &t, &fa), &fa));
    }
    let ok = lasso <= 1e-6 && logit_lasso <= 1e-6 && ridge <= 1e-8 && score <= 1e-8 && logistic_fits >= 45;
    let detail = format!(
        "50 instances: adaptive-lasso KKT {lasso:.1e} (linear), {logit_lasso:.1e} (logistic); ridge vs normal equations {ridge:.1e}; logistic score {score:.1e} over {logistic_fits} non-separable fits"
    );
    assert!(verdict("solver checks", ok, &detail), "{detail}");
}
