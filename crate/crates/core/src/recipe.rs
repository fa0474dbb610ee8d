//! Statistic recipes: nuisance fits, residualization, candidate statistics
//! and selection for one step, packaged so the bootstrap can rerun the whole
//! pipeline on each resample.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{compute_w, Dataset, ResidualSource, Residualized, StepContext};
use crate::error::{Error, Result};
use crate::interaction::{
    conditional_theta, dr_psi_with_scale, dr_weights, influence_rct, select_candidate,
    CandidateStat, InfluenceMatrix, WeightedProjector,
};
use crate::nuisance::{predict, AdaptiveLassoOptions, NuisanceKind, NuisanceSpec};

/// Penalty used when an unpenalized or lasso propensity fit separates.
pub const SEPARATION_FALLBACK_RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeKind {
    Rct,
    #[serde(alias = "dr")]
    DoublyRobust,
}

/// Which rows the outcome model `ĥ` is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeFitRows {
    /// Regress `Y` on `X` among untreated units.
    Untreated,
    /// Regress `Y` on `(X, A)` over all units and predict at `A = 0`.
    AllWithTreatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub kind: RecipeKind,
    /// `φ̂(X) ≈ E(Y|X)` for the randomized-trial recipe.
    pub phi: NuisanceSpec,
    /// `ĥ(X) ≈ E(Y|X, A=0)` for the doubly robust recipe.
    pub h: NuisanceSpec,
    /// `q̂(X) ≈ P(A=1|X)` for the doubly robust recipe.
    pub q: NuisanceSpec,
    pub h_rows: OutcomeFitRows,
}

impl Recipe {
    pub fn rct() -> Self {
        Self {
            kind: RecipeKind::Rct,
            ..Self::default()
        }
    }

    pub fn doubly_robust() -> Self {
        Self {
            kind: RecipeKind::DoublyRobust,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phi.validate()?;
        self.h.validate()?;
        self.q.validate()?;
        if self.q.link() != crate::nuisance::Link::Logit {
            return Err(Error::InvalidSpec("propensity model must use a logistic family".into()));
        }
        Ok(())
    }
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            kind: RecipeKind::Rct,
            phi: NuisanceSpec::new(NuisanceKind::LeastSquares),
            h: NuisanceSpec::new(NuisanceKind::AdaptiveLasso(AdaptiveLassoOptions::default())),
            q: NuisanceSpec::new(NuisanceKind::LogisticAdaptiveLasso(AdaptiveLassoOptions::default())),
            h_rows: OutcomeFitRows::Untreated,
        }
    }
}

/// Result of running a recipe on one dataset at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Non-degenerate candidates in `Jᶜ` order.
    pub stats: Vec<CandidateStat>,
    /// Candidates skipped as degenerate.
    pub degenerate: Vec<usize>,
    /// Position of the selected candidate in `stats`.
    pub selected: usize,
    pub residualized: Residualized,
    /// `Uₖ` or `L̂ₖ` per entry of `stats`; empty unless requested.
    pub residuals: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn chosen(&self) -> &CandidateStat {
        &self.stats[self.selected]
    }

    /// Selected covariate index.
    pub fn k_hat(&self) -> usize {
        self.chosen().k
    }

    pub fn coef(&self) -> f64 {
        self.chosen().coef
    }
}

fn fit_propensity(spec: &NuisanceSpec, data: &Dataset) -> Result<Vec<f64>> {
    let fitted = match spec.fit(data.x(), data.names(), data.a()) {
        Err(Error::QuasiSeparation) | Err(Error::ConvergenceFailure { .. }) => {
            let fallback = NuisanceSpec {
                kind: NuisanceKind::LogisticRidge {
                    lambda: SEPARATION_FALLBACK_RIDGE,
                },
                ..spec.clone()
            };
            fallback.fit(data.x(), data.names(), data.a())?
        }
        other => other?,
    };
    predict(&fitted, data.x())
}

fn fit_outcome_untreated(spec: &NuisanceSpec, rows: OutcomeFitRows, data: &Dataset) -> Result<Vec<f64>> {
    match rows {
        OutcomeFitRows::Untreated => {
            let idx: Vec<usize> = (0..data.n()).filter(|&i| data.a()[i] == 0.0).collect();
            if idx.len() < 2 {
                return Err(Error::TooFewRows {
                    n: idx.len(),
                    min: 2,
                });
            }
            let sub = data.select_rows(&idx);
            let fitted = spec.fit(sub.x(), sub.names(), sub.y())?;
            predict(&fitted, data.x())
        }
        OutcomeFitRows::AllWithTreatment => {
            let n = data.n();
            let p = data.p();
            let mut xa = DMatrix::zeros(n, p + 1);
            xa.columns_mut(0, p).copy_from(data.x());
            xa.column_mut(p).copy_from_slice(data.a());
            let mut names = data.names().to_vec();
            let treat = unique_name(&names, "treatment");
            names.push(treat.clone());
            let spec = match &spec.covariates {
                Some(c) => {
                    let mut c = c.clone();
                    c.push(treat);
                    spec.clone().with_covariates(c)
                }
                None => spec.clone(),
            };
            let fitted = spec.fit(&xa, &names, data.y())?;
            xa.column_mut(p).fill(0.0);
            predict(&fitted, &xa)
        }
    }
}

fn unique_name(names: &[String], base: &str) -> String {
    let mut s = format!("__{base}");
    while names.contains(&s) {
        s.push('_');
    }
    s
}

impl Recipe {
    /// `(W, r)` for this recipe on `data`.
    pub fn residualize(&self, data: &Dataset) -> Result<Residualized> {
        match self.kind {
            RecipeKind::Rct => {
                let q0 = data.q0().ok_or_else(|| {
                    Error::InvalidSpec("the randomized-trial recipe needs a known propensity".into())
                })?;
                let w = compute_w(data.a(), q0)?;
                let fitted = self.phi.fit(data.x(), data.names(), data.y())?;
                let phi = predict(&fitted, data.x())?;
                let r = data.y().iter().zip(&phi).map(|(y, f)| y - f).collect();
                Ok(Residualized {
                    w,
                    r,
                    source: ResidualSource::Rct,
                })
            }
            RecipeKind::DoublyRobust => {
                let q = fit_propensity(&self.q, data)?;
                let w = compute_w(data.a(), &q)?;
                let h = fit_outcome_untreated(&self.h, self.h_rows, data)?;
                let r = data.y().iter().zip(&h).map(|(y, h)| y - h).collect();
                Ok(Residualized {
                    w,
                    r,
                    source: ResidualSource::DoublyRobust,
                })
            }
        }
    }

    fn projector(&self, data: &Dataset, step: &StepContext, res: &Residualized) -> Result<WeightedProjector> {
        let weights: Vec<f64> = match self.kind {
            RecipeKind::Rct => res.w.iter().map(|w| w * w).collect(),
            RecipeKind::DoublyRobust => dr_weights(data.a(), &res.w),
        };
        WeightedProjector::new(step.xtilde(), &weights)
    }

    /// Computes every candidate statistic on `data` and selects one.
    pub fn evaluate(&self, data: &Dataset, step: &StepContext, keep_residuals: bool) -> Result<Evaluation> {
        let res = self.residualize(data)?;
        self.evaluate_residualized(data, step, res, keep_residuals)
    }

    pub fn evaluate_residualized(
        &self,
        data: &Dataset,
        step: &StepContext,
        res: Residualized,
        keep_residuals: bool,
    ) -> Result<Evaluation> {
        let proj = self.projector(data, step, &res)?;
        let n = data.n() as f64;
        let mut stats = Vec::with_capacity(step.jc_set().len());
        let mut residuals = Vec::new();
        let mut degenerate = Vec::new();
        let aw_mass = match self.kind {
            RecipeKind::Rct => 0.0,
            RecipeKind::DoublyRobust => dr_weights(data.a(), &res.w).iter().sum::<f64>() / n,
        };
        for &k in step.jc_set() {
            let xk = data.column(k);
            let out = match self.kind {
                RecipeKind::Rct => conditional_theta(&proj, &res.r, &res.w, xk, k),
                RecipeKind::DoublyRobust => {
                    let (eta, lk) = proj.project(xk);
                    let scale = aw_mass * xk.iter().map(|v| v * v).sum::<f64>() / n;
                    dr_psi_with_scale(&res.r, &res.w, data.a(), &lk, k, Some(scale)).map(|mut s| {
                        s.projection = eta;
                        (s, lk)
                    })
                }
            };
            match out {
                Ok((s, u)) => {
                    stats.push(s);
                    if keep_residuals {
                        residuals.push(u);
                    }
                }
                Err(Error::DegenerateCandidate { k }) => degenerate.push(k),
                Err(e) => return Err(e),
            }
        }
        let selected = select_candidate(&stats)?;
        Ok(Evaluation {
            stats,
            degenerate,
            selected,
            residualized: res,
            residuals,
        })
    }

    /// Plug-in influence matrix over the non-degenerate candidates. Only
    /// defined for the randomized-trial recipe.
    pub fn influence(&self, step: &StepContext, eval: &Evaluation) -> Result<InfluenceMatrix> {
        if self.kind != RecipeKind::Rct {
            return Err(Error::UnsupportedCalibration(
                "the doubly robust statistic has no plug-in null law; use a bootstrap method".into(),
            ));
        }
        if eval.residuals.len() != eval.stats.len() {
            return Err(Error::Invariant("evaluation was run without residuals".into()));
        }
        let res = &eval.residualized;
        influence_rct(step, &res.r, &res.w, &eval.residuals, &eval.stats)
    }

    /// Plug-in standard deviation of `√n·coef` for the selected candidate.
    ///
    /// Randomized trials: `√Σ̂ₖₖ / dₖ` from the influence matrix. Doubly
    /// robust: the standard deviation of the estimating-function
    /// contribution `ŴL̂ₖ{r − A(X̃ᵀδ̂₀ + L̂ₖψ̂ₖ)} / Pn[AŴL̂ₖ²]`, with
    /// `δ̂₀ = Pn[AŴX̃X̃ᵀ]⁻¹Pn[X̃Ŵr]`.
    pub fn sigma_hat(
        &self,
        data: &Dataset,
        step: &StepContext,
        eval: &Evaluation,
        influence: Option<&InfluenceMatrix>,
    ) -> Result<f64> {
        match self.kind {
            RecipeKind::Rct => {
                let owned;
                let inf = match influence {
                    Some(i) => i,
                    None => {
                        owned = self.influence(step, eval)?;
                        &owned
                    }
                };
                let col = inf.e.column(eval.selected);
                let m = col.mean();
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
                Ok(var.sqrt() / eval.chosen().denom)
            }
            RecipeKind::DoublyRobust => {
                let res = &eval.residualized;
                let lk = eval
                    .residuals
                    .get(eval.selected)
                    .ok_or_else(|| Error::Invariant("evaluation was run without residuals".into()))?;
                let proj = self.projector(data, step, res)?;
                let delta0 = proj.coefficients(&res.r, Some(&res.w));
                let fit = proj.fitted(&delta0);
                let s = eval.chosen();
                let a = data.a();
                let n = data.n();
                let contrib: Vec<f64> = (0..n)
                    .map(|i| {
                        res.w[i] * lk[i] * (res.r[i] - a[i] * (fit[i] + lk[i] * s.coef)) / s.denom
                    })
                    .collect();
                let m = contrib.iter().sum::<f64>() / n as f64;
                Ok((contrib.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt())
            }
        }
    }
}
