//! Per-candidate interaction statistics.
//!
//! Three constructions share one selector:
//!
//! * marginal: `θ̂ₖ = Pn[W r X̂′ₖ] / Pn[(W X̂′ₖ)²]` with `X̂′ₖ` the
//!   `W²`-weighted centering of `Xₖ`;
//! * conditional: the same statistic on `Uₖ`, the `W²`-weighted projection
//!   residual of `Xₖ` on `X̃_J = [1, X_J]`;
//! * doubly robust: `ψ̂ₖ = Pn[Ŵ r L̂ₖ] / Pn[AŴ L̂ₖ²]` with `L̂ₖ` the
//!   `AŴ`-weighted projection residual.
//!
//! Every candidate carries a `criterion` to minimize, so [`select_candidate`]
//! serves all three.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::StepContext;
use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky};

/// Relative threshold below which a candidate's denominator counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Relative pivot floor for the weighted Gram matrix of `X̃_J`.
const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStat {
    /// Covariate index (0-based, in the caller's column order).
    pub k: usize,
    /// `θ̂ₖ` or `ψ̂ₖ`.
    pub coef: f64,
    pub denom: f64,
    /// Selection objective; smaller is better.
    pub criterion: f64,
    /// Coefficients of the `X̃_J` projection (`γ̂ₖ` or `η̂ₖ`).
    pub projection: Vec<f64>,
}

/// Per-observation influence values, one column per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub e: DMatrix<f64>,
    pub denoms: Vec<f64>,
}

impl InfluenceMatrix {
    /// Centered sample covariance `Σ̂` (divisor `n`).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.e.nrows();
        let q = self.e.ncols();
        let centered: Vec<Vec<f64>> = (0..q)
            .map(|k| {
                let col = self.e.column(k);
                let m = col.mean();
                col.iter().map(|v| v - m).collect()
            })
            .collect();
        let mut s = DMatrix::zeros(q, q);
        for a in 0..q {
            for b in 0..=a {
                let v = dot(&centered[a], &centered[b]) / n as f64;
                s[(a, b)] = v;
                s[(b, a)] = v;
            }
        }
        s
    }

    /// Flips each column so its first clearly nonzero entry is positive.
    ///
    /// A sign change of a covariate negates its influence column; after this
    /// normalization both versions produce the same matrix, so null draws
    /// taken from it do not depend on covariate signs.
    pub fn sign_canonical(&self) -> InfluenceMatrix {
        let mut e = self.e.clone();
        for mut col in e.column_iter_mut() {
            let scale = col.amax();
            if let Some(first) = col.iter().find(|v| v.abs() > 1e-8 * scale) {
                if *first < 0.0 {
                    col.neg_mut();
                }
            }
        }
        InfluenceMatrix {
            e,
            denoms: self.denoms.clone(),
        }
    }
}

/// `xk − (Pn[W²xk]/Pn[W²])·1`.
pub fn center_covariate(xk: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_len("covariate", w.len(), xk.len())?;
    let w2: f64 = w.iter().map(|v| v * v).sum();
    if !(w2 > 0.0) {
        return Err(Error::ZeroWeightMass);
    }
    let shift = w.iter().zip(xk).map(|(w, x)| w * w * x).sum::<f64>() / w2;
    Ok(xk.iter().map(|x| x - shift).collect())
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Reference magnitude for the degeneracy test: `Pn[W²]·Pn[x²]`.
pub(crate) fn degeneracy_scale(w: &[f64], x: &[f64]) -> f64 {
    let n = w.len() as f64;
    (w.iter().map(|v| v * v).sum::<f64>() / n) * (x.iter().map(|v| v * v).sum::<f64>() / n)
}

/// Marginal coefficient and two-column least-squares criterion for `xk`.
///
/// The criterion is `Pn[(r − α̂W − θ̂WXₖ)²]` at the joint minimizer; since
/// `W` and `WX̂′ₖ` are `Pn`-orthogonal it equals
/// `Pn[r²] − Pn[Wr]²/Pn[W²] − θ̂ₖ²·Pn[(WX̂′ₖ)²]`.
pub fn marginal_theta(r: &[f64], w: &[f64], xk: &[f64], k: usize) -> Result<CandidateStat> {
    marginal_theta_with_scale(r, w, xk, k, degeneracy_scale(w, xk))
}

/// [`marginal_theta`] with an explicit degeneracy reference, used when `xk`
/// is already a projection residual and its own magnitude is meaningless.
pub(crate) fn marginal_theta_with_scale(
    r: &[f64],
    w: &[f64],
    xk: &[f64],
    k: usize,
    scale: f64,
) -> Result<CandidateStat> {
    check_len("residual", w.len(), r.len())?;
    let n = w.len() as f64;
    let xc = center_covariate(xk, w)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..w.len() {
        let u = w[i] * xc[i];
        num += u * r[i];
        den += u * u;
    }
    let denom = den / n;
    if !(denom > DEGENERACY_TOL * scale) {
        return Err(Error::DegenerateCandidate { k });
    }
    let coef = num / den;
    let w2 = w.iter().map(|v| v * v).sum::<f64>();
    let wr = dot(w, r);
    let rss = dot(r, r) / n - wr * wr / (w2 * n) - coef * coef * denom;
    Ok(CandidateStat {
        k,
        coef,
        denom,
        criterion: rss,
        projection: Vec::new(),
    })
}

/// Position in `stats` of the smallest criterion; ties go to the smaller
/// covariate index.
pub fn select_candidate(stats: &[CandidateStat]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in stats.iter().enumerate() {
        if !s.criterion.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &stats[b];
                if s.criterion < cur.criterion || (s.criterion == cur.criterion && s.k < cur.k) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or(Error::AllDegenerate)
}

/// Weighted least-squares projection onto the columns of `X̃_J`, with the
/// Gram matrix factored once for all candidates.
#[derive(Debug, Clone)]
pub struct WeightedProjector {
    /// Column-major `n × q`.
    xtilde: Vec<f64>,
    weights: Vec<f64>,
    n: usize,
    q: usize,
    chol: Cholesky,
}

impl WeightedProjector {
    pub fn new(xtilde: &DMatrix<f64>, weights: &[f64]) -> Result<Self> {
        let n = xtilde.nrows();
        let q = xtilde.ncols();
        check_len("projection weights", n, weights.len())?;
        let data = xtilde.as_slice();
        let mut g = vec![0.0; q * q];
        for a in 0..q {
            let ca = &data[a * n..(a + 1) * n];
            for b in 0..=a {
                let cb = &data[b * n..(b + 1) * n];
                let v: f64 = (0..n).map(|i| weights[i] * ca[i] * cb[i]).sum();
                g[a * q + b] = v;
                g[b * q + a] = v;
            }
        }
        let chol = Cholesky::new(g, q, PROJECTION_TOL).ok_or(Error::SingularProjection)?;
        Ok(Self {
            xtilde: data.to_vec(),
            weights: weights.to_vec(),
            n,
            q,
            chol,
        })
    }

    fn column(&self, j: usize) -> &[f64] {
        &self.xtilde[j * self.n..(j + 1) * self.n]
    }

    /// Solves `(Σ wᵢ x̃ᵢx̃ᵢᵀ) c = Σ ωᵢ x̃ᵢ vᵢ`, where `ω` is `rhs_weights` if
    /// given and the projection weights `w` otherwise.
    pub fn coefficients(&self, v: &[f64], rhs_weights: Option<&[f64]>) -> Vec<f64> {
        let mut rhs: Vec<f64> = (0..self.q)
            .map(|j| {
                let c = self.column(j);
                match rhs_weights {
                    None => (0..self.n).map(|i| self.weights[i] * c[i] * v[i]).sum(),
                    Some(e) => (0..self.n).map(|i| e[i] * c[i] * v[i]).sum(),
                }
            })
            .collect();
        self.chol.solve_in_place(&mut rhs);
        rhs
    }

    /// `X̃ c` for coefficient vector `c`.
    pub fn fitted(&self, coefs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (j, &c) in coefs.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.column(j)) {
                *o += c * x;
            }
        }
        out
    }

    pub fn project(&self, xk: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let coefs = self.coefficients(xk, None);
        let fit = self.fitted(&coefs);
        let resid = xk.iter().zip(&fit).map(|(x, f)| x - f).collect();
        (coefs, resid)
    }
}

/// Coefficients and residual of the `weights`-weighted projection of `xk`
/// on the columns of `xtilde`.
pub fn weighted_projection(
    xk: &[f64],
    xtilde: &DMatrix<f64>,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("covariate", xtilde.nrows(), xk.len())?;
    Ok(WeightedProjector::new(xtilde, weights)?.project(xk))
}

/// `A·(A − q̂)`: the doubly robust projection weights.
pub fn dr_weights(a: &[f64], wtil: &[f64]) -> Vec<f64> {
    a.iter().zip(wtil).map(|(a, w)| a * w).collect()
}

/// Doubly robust coefficient for one candidate given its projection
/// residual `lk`.
pub fn dr_psi(r: &[f64], wtil: &[f64], a: &[f64], lk: &[f64], k: usize) -> Result<CandidateStat> {
    dr_psi_with_scale(r, wtil, a, lk, k, None)
}

pub(crate) fn dr_psi_with_scale(
    r: &[f64],
    wtil: &[f64],
    a: &[f64],
    lk: &[f64],
    k: usize,
    scale: Option<f64>,
) -> Result<CandidateStat> {
    let n = r.len();
    check_len("treatment residual", n, wtil.len())?;
    check_len("treatment", n, a.len())?;
    check_len("projection residual", n, lk.len())?;
    let nf = n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        num += wtil[i] * r[i] * lk[i];
        den += a[i] * wtil[i] * lk[i] * lk[i];
    }
    let denom = den / nf;
    let scale = scale.unwrap_or_else(|| {
        let aw: f64 = a.iter().zip(wtil).map(|(a, w)| a * w).sum::<f64>() / nf;
        aw * lk.iter().map(|v| v * v).sum::<f64>() / nf
    });
    if !(denom > 0.0) || !(denom > DEGENERACY_TOL * scale) {
        return Err(Error::DegenerateCandidate { k });
    }
    let coef = num / den;
    Ok(CandidateStat {
        k,
        coef,
        denom,
        criterion: -coef * coef * denom,
        projection: Vec::new(),
    })
}

/// `δ̂` completing `(δ̂, ψ)` as a solution of the empirical estimating
/// equation `Pn[(X̃, Xₖ)ᵀ Ŵ (r − (X̃ᵀδ + Xₖψ)A)] = 0`:
/// `δ̂ = Pn[AŴX̃X̃ᵀ]⁻¹ (Pn[X̃Ŵr] − Pn[AŴX̃Xₖ]ψ)`.
pub fn dr_delta(
    xtilde: &DMatrix<f64>,
    xk: &[f64],
    r: &[f64],
    wtil: &[f64],
    a: &[f64],
    psi: f64,
) -> Result<Vec<f64>> {
    let proj = WeightedProjector::new(xtilde, &dr_weights(a, wtil))?;
    let v: Vec<f64> = (0..r.len()).map(|i| wtil[i] * r[i] - a[i] * wtil[i] * xk[i] * psi).collect();
    let ones = vec![1.0; r.len()];
    Ok(proj.coefficients(&v, Some(&ones)))
}

/// Left-hand side of the empirical estimating equation at `(δ, ψ)`: one
/// entry per column of `X̃`, then the `Xₖ` entry.
pub fn dr_estimating_residual(
    xtilde: &DMatrix<f64>,
    xk: &[f64],
    r: &[f64],
    wtil: &[f64],
    a: &[f64],
    delta: &[f64],
    psi: f64,
) -> Vec<f64> {
    let n = r.len();
    let q = xtilde.ncols();
    let mut out = vec![0.0; q + 1];
    for i in 0..n {
        let fit: f64 = (0..q).map(|j| xtilde[(i, j)] * delta[j]).sum::<f64>() + xk[i] * psi;
        let s = wtil[i] * (r[i] - fit * a[i]);
        for j in 0..q {
            out[j] += xtilde[(i, j)] * s;
        }
        out[q] += xk[i] * s;
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Plug-in influence values for the conditional statistic.
///
/// `e_ik = WᵢUᵢₖ·{rᵢ − θ̂ₖWᵢUᵢₖ − WᵢX̃ᵢᵀ(Pn[W²X̃X̃ᵀ])⁻¹Pn[WX̃r]}`, where
/// `u[k]` holds `Uₖ` for the candidate `stats[k]` and `θ̂ₖ = stats[k].coef`.
pub fn influence_rct(
    step: &StepContext,
    r: &[f64],
    w: &[f64],
    u: &[Vec<f64>],
    stats: &[CandidateStat],
) -> Result<InfluenceMatrix> {
    let n = r.len();
    check_len("candidate residuals", stats.len(), u.len())?;
    let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
    let proj = WeightedProjector::new(step.xtilde(), &w2)?;
    // b = G⁻¹ Pn[W X̃ r]; the common projection term is W·X̃ᵀb.
    let b = proj.coefficients(r, Some(w));
    let xb = proj.fitted(&b);
    let base: Vec<f64> = (0..n).map(|i| r[i] - w[i] * xb[i]).collect();
    let mut e = DMatrix::zeros(n, stats.len());
    for (c, (s, uk)) in stats.iter().zip(u).enumerate() {
        check_len("candidate residual", n, uk.len())?;
        let mut col = e.column_mut(c);
        for i in 0..n {
            let wu = w[i] * uk[i];
            col[i] = wu * (base[i] - s.coef * wu);
        }
    }
    Ok(InfluenceMatrix {
        e,
        denoms: stats.iter().map(|s| s.denom).collect(),
    })
}

/// Conditional statistic for candidate `k` given a projector on `X̃_J` with
/// weights `W²`. Returns the stat and the residual `Uₖ`.
pub(crate) fn conditional_theta(
    proj: &WeightedProjector,
    r: &[f64],
    w: &[f64],
    xk: &[f64],
    k: usize,
) -> Result<(CandidateStat, Vec<f64>)> {
    let (gamma, uk) = proj.project(xk);
    let mut stat = marginal_theta_with_scale(r, w, &uk, k, degeneracy_scale(w, xk))?;
    stat.projection = gamma;
    Ok((stat, uk))
}
