//! Competing per-step tests: Bonferroni-adjusted marginal z-tests and the
//! classical F-test for the remaining interactions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::data::{Dataset, StepContext};
use crate::error::{Error, Result};
use crate::recipe::Recipe;

/// Relative pivot size below which a design column counts as dependent.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonferroniOutcome {
    pub reject: bool,
    /// `(k, adjusted p)` for each non-degenerate candidate, 0-based `k`.
    pub adjusted: Vec<(usize, f64)>,
    /// Candidate with the smallest adjusted p-value (ties to smaller `k`).
    pub selected: usize,
    pub min_p: f64,
}

/// Two-sided z-tests from the plug-in influence matrix, multiplied by
/// `|Jᶜ|` and capped at 1.
pub fn bonferroni_test(data: &Dataset, step: &StepContext, alpha: f64) -> Result<BonferroniOutcome> {
    let recipe = Recipe::rct();
    let eval = recipe.evaluate(data, step, true)?;
    let inf = recipe.influence(step, &eval)?;
    let sigma = inf.covariance();
    let normal = Normal::standard();
    let sqrt_n = (data.n() as f64).sqrt();
    let m = step.jc_set().len() as f64;
    let adjusted: Vec<(usize, f64)> = eval
        .stats
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = sigma[(j, j)].max(0.0).sqrt() / s.denom;
            let t = sqrt_n * s.coef;
            let p = if sd > 0.0 {
                2.0 * normal.sf((t / sd).abs())
            } else if t == 0.0 {
                1.0
            } else {
                0.0
            };
            (s.k, (p * m).min(1.0))
        })
        .collect();
    let (selected, min_p) = adjusted
        .iter()
        .copied()
        .fold((usize::MAX, f64::INFINITY), |best, (k, p)| {
            if p < best.1 || (p == best.1 && k < best.0) {
                (k, p)
            } else {
                best
            }
        });
    Ok(BonferroniOutcome {
        reject: min_p <= alpha,
        adjusted,
        selected,
        min_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtOutcome {
    pub reject: bool,
    pub p_value: f64,
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
}

/// F-test of `Y ~ 1 + X + A + A·X_J + A·X_{Jᶜ}` against the model without
/// the `A·X_{Jᶜ}` block.
pub fn lrt_test(data: &Dataset, step: &StepContext, alpha: f64) -> Result<LrtOutcome> {
    let (n, p) = (data.n(), data.p());
    let df1 = step.jc_set().len();
    if df1 == 0 {
        return Err(Error::InfeasibleLrt("no candidates remain".into()));
    }
    if n <= 2 * p + 2 {
        return Err(Error::InfeasibleLrt(format!(
            "n = {n} leaves no residual degrees of freedom for 2p + 2 = {} columns",
            2 * p + 2
        )));
    }
    let df2 = n - 2 * p - 2;
    let a = data.a();
    let inter = |k: usize| -> Vec<f64> { data.column(k).iter().zip(a).map(|(x, a)| x * a).collect() };
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    cols.extend((0..p).map(|k| data.column(k).to_vec()));
    cols.push(a.to_vec());
    cols.extend(step.j_set().iter().map(|&k| inter(k)));
    let null_cols = cols.len();
    cols.extend(step.jc_set().iter().map(|&k| inter(k)));
    let y = DVector::from_column_slice(data.y());
    let full = design(&cols, n);
    let rss1 = rss(&full, &y)?;
    let rss0 = rss(&full.columns(0, null_cols).into_owned(), &y)?;
    if !(rss1 > 0.0) {
        return Err(Error::InfeasibleLrt("the full model fits exactly".into()));
    }
    let f_stat = ((rss0 - rss1).max(0.0) / df1 as f64) / (rss1 / df2 as f64);
    let dist = FisherSnedecor::new(df1 as f64, df2 as f64)
        .map_err(|e| Error::InfeasibleLrt(e.to_string()))?;
    let p_value = dist.sf(f_stat);
    Ok(LrtOutcome {
        reject: p_value <= alpha,
        p_value,
        f_stat,
        df1,
        df2,
    })
}

fn design(cols: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// Residual sum of squares, failing on a rank-deficient design.
fn rss(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= RANK_TOL * diag_max) {
        return Err(Error::InfeasibleLrt("interaction design is rank deficient".into()));
    }
    let q = qr.q();
    let fitted = &q * (q.transpose() * y);
    Ok((y - fitted).norm_squared())
}
