use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::cd::{cd_gram, CdReport};
use super::{
    default_gcv_grid, unscale, working_columns, AdaptiveLassoOptions, Convergence, FittedNuisance,
    LambdaSelection, Link, RidgePenalty, Scaling, CD_MAX_SWEEPS, CD_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky};
use crate::rng::{tag, StreamKey};

/// Initial estimates below this magnitude exclude their coordinate.
pub(crate) const EXCLUDE_TOL: f64 = 1e-10;

fn constant_fit(intercept: f64, p: usize, scaling: Option<Scaling>) -> FittedNuisance {
    FittedNuisance {
        spec: None,
        intercept,
        coefficients: vec![0.0; p],
        link: Link::Identity,
        scaling,
        convergence: Convergence {
            iterations: 0,
            final_change: 0.0,
        },
        lambda: None,
        penalty_weights: None,
    }
}

pub fn fit_mean(y: &[f64]) -> Result<FittedNuisance> {
    if y.is_empty() {
        return Err(Error::EmptyInput("outcome"));
    }
    let mut f = constant_fit(y.iter().sum::<f64>() / y.len() as f64, 0, None);
    f.coefficients.clear();
    Ok(f)
}

fn check_rows(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            what: "outcome",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::TooFewRows { n: y.len(), min: 2 });
    }
    Ok(())
}

/// Centered (and optionally scaled) least-squares problem in Gram form.
struct GramProblem {
    /// Row-major `p × p`, `ZᵀZ/n`.
    g: Vec<f64>,
    /// `Zᵀ(y − ȳ)/n`.
    c: Vec<f64>,
    /// `‖y − ȳ‖²/n`.
    yy: f64,
    ybar: f64,
    zbar: Vec<f64>,
}

impl GramProblem {
    fn build(cols: &[Vec<f64>], y: &[f64], rows: Option<&[usize]>) -> Self {
        let p = cols.len();
        let pick = |v: &[f64]| -> Vec<f64> {
            match rows {
                Some(r) => r.iter().map(|&i| v[i]).collect(),
                None => v.to_vec(),
            }
        };
        let yv = pick(y);
        let n = yv.len() as f64;
        let ybar = yv.iter().sum::<f64>() / n;
        let yc: Vec<f64> = yv.iter().map(|v| v - ybar).collect();
        let mut zbar = Vec::with_capacity(p);
        let zc: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| {
                let v = pick(c);
                let m = v.iter().sum::<f64>() / n;
                zbar.push(m);
                v.into_iter().map(|x| x - m).collect()
            })
            .collect();
        let mut g = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..=a {
                let v = dot(&zc[a], &zc[b]) / n;
                g[a * p + b] = v;
                g[b * p + a] = v;
            }
        }
        let c = zc.iter().map(|z| dot(z, &yc) / n).collect();
        Self {
            g,
            c,
            yy: dot(&yc, &yc) / n,
            ybar,
            zbar,
        }
    }

    fn rss_over_n(&self, beta: &[f64]) -> f64 {
        let p = beta.len();
        let mut quad = 0.0;
        for a in 0..p {
            if beta[a] == 0.0 {
                continue;
            }
            for b in 0..p {
                quad += beta[a] * self.g[a * p + b] * beta[b];
            }
        }
        (self.yy - 2.0 * dot(beta, &self.c) + quad).max(0.0)
    }
}

/// Ridge regression with an unpenalized intercept:
/// `min ‖y − β₀1 − Zβ‖² + λ‖β‖²` on the working columns `Z`.
pub fn fit_ridge(
    x: &DMatrix<f64>,
    y: &[f64],
    penalty: &RidgePenalty,
    standardize: bool,
) -> Result<FittedNuisance> {
    check_rows(x, y)?;
    let n = y.len();
    let p = x.ncols();
    let (cols, scaling) = working_columns(x, standardize);
    let prob = GramProblem::build(&cols, y, None);
    if p == 0 {
        return Ok(constant_fit(prob.ybar, 0, Some(scaling)));
    }
    let nf = n as f64;
    // Unnormalized normal equations: (ZᵀZ + λI)β = Zᵀyc.
    let gram: Vec<f64> = prob.g.iter().map(|v| v * nf).collect();
    let rhs: Vec<f64> = prob.c.iter().map(|v| v * nf).collect();
    let (lambda, beta) = match penalty {
        RidgePenalty::Fixed(lambda) => {
            let mut a = gram.clone();
            for j in 0..p {
                a[j * p + j] += lambda;
            }
            let chol = Cholesky::new(a, p, 1e-12).ok_or(Error::SingularDesign)?;
            (*lambda, chol.solve(&rhs))
        }
        RidgePenalty::Gcv(grid) => {
            let grid = if grid.is_empty() {
                default_gcv_grid(n)
            } else {
                grid.clone()
            };
            gcv_ridge(&gram, &rhs, prob.yy * nf, n, &grid)
        }
    };
    let (intercept, coefficients) = unscale(prob.ybar, &beta, &scaling);
    Ok(FittedNuisance {
        spec: None,
        intercept,
        coefficients,
        link: Link::Identity,
        scaling: Some(scaling),
        convergence: Convergence {
            iterations: 1,
            final_change: 0.0,
        },
        lambda: Some(lambda),
        penalty_weights: None,
    })
}

/// Picks `λ` minimizing `GCV(λ) = (RSS/n) / (1 − df/n)²`, with
/// `df = 1 + Σ dⱼ/(dⱼ + λ)` counting the intercept.
fn gcv_ridge(gram: &[f64], rhs: &[f64], yy: f64, n: usize, grid: &[f64]) -> (f64, Vec<f64>) {
    let p = rhs.len();
    let eig = DMatrix::from_row_slice(p, p, gram).symmetric_eigen();
    let proj = eig.eigenvectors.transpose() * DVector::from_row_slice(rhs);
    let nf = n as f64;
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let mut rss = yy;
        let mut df = 1.0;
        for j in 0..p {
            let d = eig.eigenvalues[j].max(0.0);
            let s = d + lambda;
            if s <= 0.0 {
                continue;
            }
            rss -= proj[j] * proj[j] * (2.0 / s - d / (s * s));
            df += d / s;
        }
        let denom = (1.0 - df / nf).powi(2);
        let score = if denom > 0.0 {
            rss.max(0.0) / nf / denom
        } else {
            f64::INFINITY
        };
        if score < best.0 {
            best = (score, lambda);
        }
    }
    let lambda = best.1;
    let coef_eig: Vec<f64> = (0..p)
        .map(|j| {
            let s = eig.eigenvalues[j].max(0.0) + lambda;
            if s > 0.0 {
                proj[j] / s
            } else {
                0.0
            }
        })
        .collect();
    let beta = &eig.eigenvectors * DVector::from_vec(coef_eig);
    (lambda, beta.iter().copied().collect())
}

/// Adaptive-lasso weights `|β̃ⱼ|^{-γ}` from a lightly penalized ridge start
/// (`λ_init = 10⁻³ ×` mean working-column variance, in the `n`-normalized
/// scale). Coordinates whose start is numerically zero get an infinite
/// weight.
pub(crate) fn adaptive_weights(g: &[f64], c: &[f64], gamma: f64) -> Vec<f64> {
    let p = c.len();
    let mean_var = (0..p).map(|j| g[j * p + j]).sum::<f64>() / p.max(1) as f64;
    if !(mean_var > 0.0) {
        return vec![f64::INFINITY; p];
    }
    let lambda_init = 1e-3 * mean_var;
    let mut a = g.to_vec();
    for j in 0..p {
        a[j * p + j] += lambda_init;
    }
    let init = match Cholesky::new(a, p, 1e-14) {
        Some(ch) => ch.solve(c),
        None => vec![0.0; p],
    };
    init.iter()
        .map(|b| {
            if b.abs() > EXCLUDE_TOL {
                b.abs().powf(-gamma)
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Log-spaced grid from `λ_max` down to `ratio·λ_max`.
pub(crate) fn lambda_grid(lambda_max: f64, n_lambda: usize, ratio: f64) -> Vec<f64> {
    if !(lambda_max > 0.0) {
        return vec![0.0];
    }
    if n_lambda == 1 {
        return vec![lambda_max];
    }
    let step = ratio.ln() / (n_lambda - 1) as f64;
    (0..n_lambda)
        .map(|i| lambda_max * (step * i as f64).exp())
        .collect()
}

fn lambda_max(c: &[f64], weights: &[f64]) -> f64 {
    c.iter()
        .zip(weights)
        .filter(|(_, w)| w.is_finite())
        .map(|(c, w)| c.abs() / w)
        .fold(0.0, f64::max)
}

/// Warm-started path; returns one solution per grid value.
fn lasso_path(
    prob: &GramProblem,
    weights: &[f64],
    grid: &[f64],
) -> Result<Vec<(Vec<f64>, CdReport)>> {
    let p = prob.c.len();
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let pen: Vec<f64> = weights.iter().map(|w| lambda * w).collect();
        // An infinite weight stays infinite even at λ = 0.
        let pen: Vec<f64> = pen
            .iter()
            .zip(weights)
            .map(|(p, w)| if w.is_infinite() { f64::INFINITY } else { *p })
            .collect();
        let report = cd_gram(&prob.g, &prob.c, &pen, &mut beta, CD_TOLERANCE, CD_MAX_SWEEPS)?;
        out.push((beta.clone(), report));
    }
    Ok(out)
}

/// Adaptive lasso for a continuous response:
/// `min (2n)⁻¹‖y − β₀1 − Zβ‖² + λ Σ wⱼ|βⱼ|`, solved by coordinate descent
/// with `λ` chosen by BIC, k-fold CV, or fixed.
pub fn fit_adaptive_lasso_linear(
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &AdaptiveLassoOptions,
    standardize: bool,
) -> Result<FittedNuisance> {
    check_rows(x, y)?;
    let n = y.len();
    let p = x.ncols();
    let (cols, scaling) = working_columns(x, standardize);
    let prob = GramProblem::build(&cols, y, None);
    let weights = adaptive_weights(&prob.g, &prob.c, opts.gamma);
    let grid = match opts.selection {
        LambdaSelection::Fixed(l) => vec![l],
        _ => lambda_grid(lambda_max(&prob.c, &weights), opts.n_lambda, opts.lambda_min_ratio),
    };
    let path = lasso_path(&prob, &weights, &grid)?;
    let chosen = match &opts.selection {
        LambdaSelection::Fixed(_) => 0,
        LambdaSelection::Bic => {
            let nf = n as f64;
            let mut best = (f64::INFINITY, 0);
            for (i, (beta, _)) in path.iter().enumerate() {
                let df = beta.iter().filter(|b| **b != 0.0).count() as f64;
                let rss = prob.rss_over_n(beta).max(f64::MIN_POSITIVE);
                let bic = nf * rss.ln() + df * nf.ln();
                if bic < best.0 {
                    best = (bic, i);
                }
            }
            best.1
        }
        LambdaSelection::Cv { folds, seed } => {
            cv_select(&cols, y, &weights, &grid, *folds, *seed)?
        }
    };
    let (beta, report) = &path[chosen];
    let (intercept, coefficients) = unscale(prob.ybar, beta, &scaling);
    debug_assert_eq!(coefficients.len(), p);
    Ok(FittedNuisance {
        spec: None,
        intercept,
        coefficients,
        link: Link::Identity,
        scaling: Some(scaling),
        convergence: Convergence {
            iterations: report.sweeps,
            final_change: report.final_change,
        },
        lambda: Some(grid[chosen]),
        penalty_weights: Some(weights),
    })
}

/// Seeded fold labels; identical for a given `(n, folds, seed)`.
pub(crate) fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut StreamKey::new(seed).derive(tag::CV_FOLDS).rng());
    let mut labels = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

fn cv_select(
    cols: &[Vec<f64>],
    y: &[f64],
    weights: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<usize> {
    let n = y.len();
    let folds = folds.min(n);
    let labels = fold_labels(n, folds, seed);
    let mut err = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
        if train.len() < 2 || test.is_empty() {
            continue;
        }
        let prob = GramProblem::build(cols, y, Some(&train));
        let path = lasso_path(&prob, weights, grid)?;
        for (g, (beta, _)) in path.iter().enumerate() {
            for &i in &test {
                let mut pred = prob.ybar;
                for (j, b) in beta.iter().enumerate() {
                    if *b != 0.0 {
                        pred += b * (cols[j][i] - prob.zbar[j]);
                    }
                }
                err[g] += (y[i] - pred).powi(2);
            }
        }
    }
    let mut best = (f64::INFINITY, 0);
    for (g, e) in err.iter().enumerate() {
        if *e < best.0 {
            best = (*e, g);
        }
    }
    Ok(best.1)
}
