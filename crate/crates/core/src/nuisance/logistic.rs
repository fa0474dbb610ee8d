use nalgebra::DMatrix;

use super::cd::cd_gram;
use super::linear::{fold_labels, lambda_grid, EXCLUDE_TOL};
use super::{
    expit, unscale, working_columns, AdaptiveLassoOptions, Convergence, FittedNuisance,
    LambdaSelection, Link, CD_MAX_SWEEPS, IRLS_MAX_ITER, IRLS_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky};

/// Linear predictors beyond this magnitude signal (quasi-)separation.
const ETA_LIMIT: f64 = 30.0;
/// Inner coordinate-descent tolerance; kept well below the IRLS tolerance
/// so the outer loop can actually reach it.
const INNER_CD_TOLERANCE: f64 = 1e-10;
/// IRLS tolerance along the λ path; the selected solution is then polished
/// to the full tolerance.
const PATH_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum LogisticPenalty {
    None,
    /// `(λ/2)‖β‖²` added to the mean negative log-likelihood.
    Ridge(f64),
    /// `λ Σ wⱼ|βⱼ|` with data-driven weights and `λ` chosen per `selection`.
    AdaptiveLasso(AdaptiveLassoOptions),
}

/// Working design: intercept column plus centered (scaled) covariates,
/// with the penalty acting on slopes only.
struct Design<'a> {
    cols: &'a [Vec<f64>],
    rows: Option<&'a [usize]>,
}

impl Design<'_> {
    fn n(&self, y: &[f64]) -> usize {
        self.rows.map_or(y.len(), |r| r.len())
    }

    fn row(&self, i: usize) -> usize {
        self.rows.map_or(i, |r| r[i])
    }

    fn eta(&self, b: &[f64], n: usize) -> Vec<f64> {
        let mut eta = vec![b[0]; n];
        for (j, col) in self.cols.iter().enumerate() {
            let bj = b[j + 1];
            if bj == 0.0 {
                continue;
            }
            for (i, e) in eta.iter_mut().enumerate() {
                *e += bj * col[self.row(i)];
            }
        }
        eta
    }

    /// `Σ wᵢ xᵢ xᵢᵀ / n` and the right-hand side `Σ xᵢ wᵢ vᵢ / n` (or
    /// `Σ xᵢ vᵢ / n` when `weight_rhs` is false) over the `p + 1` columns.
    fn weighted_system(&self, w: &[f64], v: &[f64], weight_rhs: bool) -> (Vec<f64>, Vec<f64>) {
        let n = w.len();
        let d = self.cols.len() + 1;
        let nf = n as f64;
        let picked: Vec<Vec<f64>>;
        let cols: &[Vec<f64>] = match self.rows {
            None => self.cols,
            Some(rows) => {
                picked = self
                    .cols
                    .iter()
                    .map(|c| rows.iter().map(|&i| c[i]).collect())
                    .collect();
                &picked
            }
        };
        let mut g = vec![0.0; d * d];
        let mut c = vec![0.0; d];
        let mut wx = vec![0.0; n];
        for a in 0..d {
            let xa = (a > 0).then(|| cols[a - 1].as_slice());
            match xa {
                None => wx.copy_from_slice(w),
                Some(xa) => {
                    for i in 0..n {
                        wx[i] = w[i] * xa[i];
                    }
                }
            }
            c[a] = if weight_rhs {
                dot(&wx, v)
            } else {
                xa.map_or_else(|| v.iter().sum(), |xa| dot(xa, v))
            } / nf;
            g[a * d] = wx.iter().sum::<f64>() / nf;
            g[a] = g[a * d];
            for b in 1..=a {
                let s = dot(&wx, &cols[b - 1]) / nf;
                g[a * d + b] = s;
                g[b * d + a] = s;
            }
        }
        (g, c)
    }
}

fn mean_nll(eta: &[f64], y: &[f64], design: &Design) -> f64 {
    let n = eta.len();
    let mut s = 0.0;
    for i in 0..n {
        let e = eta[i];
        // log(1 + e^η) − yη, computed stably.
        let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        s += softplus - y[design.row(i)] * e;
    }
    s / n as f64
}

struct IrlsFit {
    b: Vec<f64>,
    iterations: usize,
    final_change: f64,
}

/// Damped Newton for `nll(b) + (λ/2)‖b_slopes‖²`.
fn newton_ridge(design: &Design, y: &[f64], lambda: f64, check_separation: bool) -> Result<IrlsFit> {
    let n = design.n(y);
    let d = design.cols.len() + 1;
    let mut b = vec![0.0; d];
    let ybar = (0..n).map(|i| y[design.row(i)]).sum::<f64>() / n as f64;
    b[0] = (ybar / (1.0 - ybar)).ln();
    let objective = |b: &[f64], eta: &[f64]| {
        mean_nll(eta, y, design) + 0.5 * lambda * b[1..].iter().map(|v| v * v).sum::<f64>()
    };
    let mut eta = design.eta(&b, n);
    let mut obj = objective(&b, &eta);
    for iter in 1..=IRLS_MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let w: Vec<f64> = p.iter().map(|p| (p * (1.0 - p)).max(1e-12)).collect();
        let resid: Vec<f64> = (0..n).map(|i| y[design.row(i)] - p[i]).collect();
        let (mut h, mut grad) = design.weighted_system(&w, &resid, false);
        for j in 1..d {
            h[j * d + j] += lambda;
            grad[j] -= lambda * b[j];
        }
        let chol = Cholesky::new(h, d, 1e-14).ok_or(if check_separation {
            Error::QuasiSeparation
        } else {
            Error::SingularDesign
        })?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let (new_b, new_eta, new_obj) = loop {
            let cand: Vec<f64> = b.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let cand_eta = design.eta(&cand, n);
            let cand_obj = objective(&cand, &cand_eta);
            if cand_obj <= obj + 1e-14 * obj.abs().max(1.0) || t < 1e-10 {
                break (cand, cand_eta, cand_obj);
            }
            t *= 0.5;
        };
        let change = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        b = new_b;
        eta = new_eta;
        obj = new_obj;
        if check_separation && eta.iter().any(|e| e.abs() > ETA_LIMIT) {
            return Err(Error::QuasiSeparation);
        }
        if change < IRLS_TOLERANCE {
            return Ok(IrlsFit {
                b,
                iterations: iter,
                final_change: change,
            });
        }
    }
    if check_separation && eta.iter().any(|e| e.abs() > 0.5 * ETA_LIMIT) {
        return Err(Error::QuasiSeparation);
    }
    Err(Error::ConvergenceFailure {
        iterations: IRLS_MAX_ITER,
        residual: f64::NAN,
    })
}

/// IRLS with a weighted-ℓ₁ coordinate-descent inner solve, warm-started at
/// `b`, until no coefficient moves by `tol`. Returns `None` if the linear
/// predictor diverges.
fn irls_lasso(
    design: &Design,
    y: &[f64],
    pen: &[f64],
    b: &mut Vec<f64>,
    tol: f64,
) -> Result<Option<(usize, f64)>> {
    let n = design.n(y);
    let objective = |b: &[f64], eta: &[f64]| {
        mean_nll(eta, y, design) + b.iter().zip(pen).filter(|(v, _)| **v != 0.0).map(|(v, p)| p * v.abs()).sum::<f64>()
    };
    let mut eta = design.eta(b, n);
    let mut obj = objective(b, &eta);
    for iter in 1..=IRLS_MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let w: Vec<f64> = p.iter().map(|p| (p * (1.0 - p)).max(1e-12)).collect();
        // Working response z = η + (y − p)/w.
        let z: Vec<f64> = (0..n)
            .map(|i| eta[i] + (y[design.row(i)] - p[i]) / w[i])
            .collect();
        let (g, c) = design.weighted_system(&w, &z, true);
        let mut cand = b.clone();
        cd_gram(&g, &c, pen, &mut cand, INNER_CD_TOLERANCE, CD_MAX_SWEEPS)?;
        let mut t = 1.0;
        let (new_b, new_eta, new_obj) = loop {
            let trial: Vec<f64> = b.iter().zip(&cand).map(|(o, c)| o + t * (c - o)).collect();
            let trial_eta = design.eta(&trial, n);
            let trial_obj = objective(&trial, &trial_eta);
            if trial_obj <= obj + 1e-14 * obj.abs().max(1.0) || t < 1e-10 {
                break (trial, trial_eta, trial_obj);
            }
            t *= 0.5;
        };
        let change = b
            .iter()
            .zip(&new_b)
            .map(|(o, v)| (o - v).abs())
            .fold(0.0, f64::max);
        *b = new_b;
        eta = new_eta;
        obj = new_obj;
        if eta.iter().any(|e| e.abs() > ETA_LIMIT) {
            return Ok(None);
        }
        if change < tol {
            return Ok(Some((iter, change)));
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: IRLS_MAX_ITER,
        residual: f64::NAN,
    })
}

fn check_binary(y: &[f64]) -> Result<()> {
    let mut ones = 0usize;
    for (row, &v) in y.iter().enumerate() {
        if v == 1.0 {
            ones += 1;
        } else if v != 0.0 {
            return Err(Error::TreatmentNotBinary { row, value: v });
        }
    }
    if ones == 0 || ones == y.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Logistic regression of a 0/1 response with an unpenalized intercept.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    penalty: &LogisticPenalty,
    standardize: bool,
) -> Result<FittedNuisance> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            what: "treatment",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    check_binary(y)?;
    let n = y.len();
    let (cols, scaling) = working_columns(x, standardize);
    let design = Design {
        cols: &cols,
        rows: None,
    };
    let (b, conv, lambda, weights) = match penalty {
        LogisticPenalty::None => {
            let f = newton_ridge(&design, y, 0.0, true)?;
            (f.b, (f.iterations, f.final_change), None, None)
        }
        LogisticPenalty::Ridge(l) => {
            let f = newton_ridge(&design, y, *l, *l == 0.0)?;
            (f.b, (f.iterations, f.final_change), Some(*l), None)
        }
        LogisticPenalty::AdaptiveLasso(opts) => {
            let (b, conv, l, w) = adaptive_lasso(&design, y, opts, n)?;
            (b, conv, Some(l), Some(w))
        }
    };
    let (intercept, coefficients) = unscale(b[0], &b[1..], &scaling);
    Ok(FittedNuisance {
        spec: None,
        intercept,
        coefficients,
        link: Link::Logit,
        scaling: Some(scaling),
        convergence: Convergence {
            iterations: conv.0,
            final_change: conv.1,
        },
        lambda,
        penalty_weights: weights,
    })
}

type LassoSolution = (Vec<f64>, (usize, f64), f64, Vec<f64>);

fn penalties(lambda: f64, weights: &[f64]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(weights.iter().map(|w| if w.is_infinite() { f64::INFINITY } else { lambda * w }))
        .collect()
}

/// Solves along the grid, stopping early if the fit diverges.
fn logistic_path(
    design: &Design,
    y: &[f64],
    weights: &[f64],
    grid: &[f64],
) -> Result<Vec<(Vec<f64>, (usize, f64))>> {
    let n = design.n(y);
    let ybar = (0..n).map(|i| y[design.row(i)]).sum::<f64>() / n as f64;
    let mut b = vec![0.0; weights.len() + 1];
    b[0] = (ybar / (1.0 - ybar)).ln();
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut trial = b.clone();
        match irls_lasso(design, y, &penalties(lambda, weights), &mut trial, PATH_TOLERANCE)? {
            Some(conv) => {
                b = trial;
                out.push((b.clone(), conv));
            }
            None => break,
        }
    }
    Ok(out)
}

fn adaptive_lasso(
    design: &Design,
    y: &[f64],
    opts: &AdaptiveLassoOptions,
    n: usize,
) -> Result<LassoSolution> {
    let p = design.cols.len();
    // Initial estimate: lightly ridge-penalized logistic fit.
    let mean_var = design.cols.iter().map(|c| dot(c, c) / n as f64).sum::<f64>() / p.max(1) as f64;
    let init = newton_ridge(design, y, 1e-3 * mean_var.max(f64::MIN_POSITIVE), false)?;
    let weights: Vec<f64> = init.b[1..]
        .iter()
        .map(|b| {
            if b.abs() > EXCLUDE_TOL {
                b.abs().powf(-opts.gamma)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let grad: Vec<f64> = design
        .cols
        .iter()
        .map(|c| c.iter().zip(y).map(|(x, y)| x * (y - ybar)).sum::<f64>() / n as f64)
        .collect();
    let lmax = grad
        .iter()
        .zip(&weights)
        .filter(|(_, w)| w.is_finite())
        .map(|(g, w)| g.abs() / w)
        .fold(0.0, f64::max);
    let grid = match opts.selection {
        LambdaSelection::Fixed(l) => vec![l],
        _ => lambda_grid(lmax, opts.n_lambda, opts.lambda_min_ratio),
    };
    let path = logistic_path(design, y, &weights, &grid)?;
    if path.is_empty() {
        return Err(Error::QuasiSeparation);
    }
    let chosen = match &opts.selection {
        LambdaSelection::Fixed(_) => 0,
        LambdaSelection::Bic => {
            let nf = n as f64;
            let mut best = (f64::INFINITY, 0);
            for (i, (b, _)) in path.iter().enumerate() {
                let eta = design.eta(b, n);
                let df = b[1..].iter().filter(|v| **v != 0.0).count() as f64;
                let bic = 2.0 * nf * mean_nll(&eta, y, design) + df * nf.ln();
                if bic < best.0 {
                    best = (bic, i);
                }
            }
            best.1
        }
        LambdaSelection::Cv { folds, seed } => {
            let labels = fold_labels(n, (*folds).min(n), *seed);
            let mut dev = vec![0.0; path.len()];
            for f in 0..(*folds).min(n) {
                let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
                let ones = train.iter().filter(|&&i| y[i] == 1.0).count();
                if test.is_empty() || ones == 0 || ones == train.len() {
                    continue;
                }
                let sub = Design {
                    cols: design.cols,
                    rows: Some(&train),
                };
                let fold_path = logistic_path(&sub, y, &weights, &grid[..path.len()])?;
                let held = Design {
                    cols: design.cols,
                    rows: Some(&test),
                };
                for g in 0..path.len() {
                    if fold_path.is_empty() {
                        dev[g] = f64::INFINITY;
                        continue;
                    }
                    // A fold that diverged earlier reuses its last solution.
                    let b = &fold_path[g.min(fold_path.len() - 1)].0;
                    let eta = held.eta(b, test.len());
                    dev[g] += mean_nll(&eta, y, &held) * test.len() as f64;
                }
            }
            let mut best = (f64::INFINITY, 0);
            for (g, d) in dev.iter().enumerate() {
                if *d < best.0 {
                    best = (*d, g);
                }
            }
            best.1
        }
    };
    let mut b = path[chosen].0.clone();
    let conv = irls_lasso(design, y, &penalties(grid[chosen], &weights), &mut b, IRLS_TOLERANCE)?
        .ok_or(Error::QuasiSeparation)?;
    Ok((b, conv, grid[chosen], weights))
}
