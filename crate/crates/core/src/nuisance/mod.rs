//! Nuisance regressions: `φ̂(X) ≈ E(Y|X)`, `ĥ(X) ≈ E(Y|X, A=0)` and
//! `q̂(X) ≈ P(A=1|X)`.
//!
//! Only parametric families are offered (mean, least squares, ridge,
//! adaptive lasso, and their logistic counterparts). These satisfy the
//! smoothness and limit conditions the interaction tests rely on; flexible
//! learners such as trees or kernels are intentionally absent.

mod cd;
mod linear;
mod logistic;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use linear::{fit_adaptive_lasso_linear, fit_mean, fit_ridge};
pub use logistic::{fit_logistic, LogisticPenalty};

/// Lower/upper clip applied to every logit-link prediction.
pub const PROPENSITY_CLIP: f64 = 0.01;

/// Coordinate-descent defaults.
pub const CD_MAX_SWEEPS: usize = 100_000;
pub const CD_TOLERANCE: f64 = 1e-7;
/// IRLS defaults.
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RidgePenalty {
    Fixed(f64),
    /// Generalized cross-validation over a grid of penalties. An empty grid
    /// means [`default_gcv_grid`].
    Gcv(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSelection {
    Bic,
    Cv { folds: usize, seed: u64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveLassoOptions {
    pub gamma: f64,
    pub n_lambda: usize,
    /// Smallest grid value as a fraction of `λ_max`.
    pub lambda_min_ratio: f64,
    pub selection: LambdaSelection,
}

impl Default for AdaptiveLassoOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            n_lambda: 20,
            lambda_min_ratio: 1e-4,
            selection: LambdaSelection::Bic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NuisanceKind {
    ConstantMean,
    LeastSquares,
    Ridge { penalty: RidgePenalty },
    AdaptiveLasso(AdaptiveLassoOptions),
    Logistic,
    LogisticRidge { lambda: f64 },
    LogisticAdaptiveLasso(AdaptiveLassoOptions),
}

/// Estimator family plus preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    #[serde(flatten)]
    pub kind: NuisanceKind,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Restrict the model to these covariates (by name); `None` uses all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
}

fn default_true() -> bool {
    true
}

impl NuisanceSpec {
    pub fn new(kind: NuisanceKind) -> Self {
        Self {
            kind,
            standardize: true,
            covariates: None,
        }
    }

    pub fn with_covariates(mut self, names: Vec<String>) -> Self {
        self.covariates = Some(names);
        self
    }

    pub fn link(&self) -> Link {
        match self.kind {
            NuisanceKind::Logistic
            | NuisanceKind::LogisticRidge { .. }
            | NuisanceKind::LogisticAdaptiveLasso(_) => Link::Logit,
            _ => Link::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let check_al = |o: &AdaptiveLassoOptions| -> Result<()> {
            if !(o.gamma > 0.0) {
                return bad("adaptive lasso gamma must be positive");
            }
            if o.n_lambda == 0 || !(o.lambda_min_ratio > 0.0 && o.lambda_min_ratio < 1.0) {
                return bad("lambda grid must be non-empty and strictly positive");
            }
            match o.selection {
                LambdaSelection::Fixed(l) if !(l >= 0.0) => bad("lambda must be >= 0"),
                LambdaSelection::Cv { folds, .. } if folds < 2 => bad("cv needs at least 2 folds"),
                _ => Ok(()),
            }
        };
        match &self.kind {
            NuisanceKind::Ridge {
                penalty: RidgePenalty::Fixed(l),
            }
            | NuisanceKind::LogisticRidge { lambda: l } => {
                if !(*l >= 0.0) {
                    return bad("ridge lambda must be >= 0");
                }
            }
            NuisanceKind::Ridge {
                penalty: RidgePenalty::Gcv(grid),
            } => {
                if grid.iter().any(|l| !(*l > 0.0)) {
                    return bad("gcv grid must be strictly positive");
                }
            }
            NuisanceKind::AdaptiveLasso(o) | NuisanceKind::LogisticAdaptiveLasso(o) => check_al(o)?,
            _ => {}
        }
        Ok(())
    }

    /// Fits the model to rows of `x` (columns named by `names`) against `y`.
    ///
    /// The returned coefficient vector always has one entry per column of
    /// `x`; covariates outside [`NuisanceSpec::covariates`] get zero.
    pub fn fit(&self, x: &DMatrix<f64>, names: &[String], y: &[f64]) -> Result<FittedNuisance> {
        self.validate()?;
        let cols = match &self.covariates {
            None => None,
            Some(sel) => {
                let mut idx = Vec::with_capacity(sel.len());
                for name in sel {
                    let k = names.iter().position(|n| n == name).ok_or_else(|| {
                        Error::InvalidSpec(format!("unknown nuisance covariate `{name}`"))
                    })?;
                    idx.push(k);
                }
                idx.sort_unstable();
                Some(idx)
            }
        };
        let sub;
        let design = match &cols {
            None => x,
            Some(idx) => {
                sub = x.select_columns(idx.iter());
                &sub
            }
        };
        let mut fitted = match &self.kind {
            NuisanceKind::ConstantMean => {
                let mut f = fit_mean(y)?;
                f.coefficients = vec![0.0; design.ncols()];
                f
            }
            NuisanceKind::LeastSquares => {
                fit_ridge(design, y, &RidgePenalty::Fixed(0.0), self.standardize)?
            }
            NuisanceKind::Ridge { penalty } => fit_ridge(design, y, penalty, self.standardize)?,
            NuisanceKind::AdaptiveLasso(o) => {
                fit_adaptive_lasso_linear(design, y, o, self.standardize)?
            }
            NuisanceKind::Logistic => {
                fit_logistic(design, y, &LogisticPenalty::None, self.standardize)?
            }
            NuisanceKind::LogisticRidge { lambda } => {
                fit_logistic(design, y, &LogisticPenalty::Ridge(*lambda), self.standardize)?
            }
            NuisanceKind::LogisticAdaptiveLasso(o) => fit_logistic(
                design,
                y,
                &LogisticPenalty::AdaptiveLasso(o.clone()),
                self.standardize,
            )?,
        };
        if let Some(idx) = cols {
            let mut full = vec![0.0; x.ncols()];
            for (slot, &k) in idx.iter().enumerate() {
                full[k] = fitted.coefficients[slot];
            }
            fitted.coefficients = full;
        }
        fitted.spec = Some(self.clone());
        Ok(fitted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Identity,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub final_change: f64,
}

/// A fitted nuisance model on the original covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNuisance {
    pub spec: Option<NuisanceSpec>,
    pub intercept: f64,
    /// Empty for a constant fit; otherwise one slope per covariate.
    pub coefficients: Vec<f64>,
    pub link: Link,
    /// Column centering/scaling used while solving.
    pub scaling: Option<Scaling>,
    pub convergence: Convergence,
    /// Selected penalty level, for penalized fits.
    pub lambda: Option<f64>,
    /// Adaptive-lasso weights on the working (scaled) columns; `∞` marks a
    /// coordinate excluded by a vanishing initial estimate.
    pub penalty_weights: Option<Vec<f64>>,
}

impl FittedNuisance {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = x.nrows();
        if self.coefficients.is_empty() {
            return Ok(vec![self.intercept; n]);
        }
        if x.ncols() != self.coefficients.len() {
            return Err(Error::LengthMismatch {
                what: "prediction covariates",
                expected: self.coefficients.len(),
                found: x.ncols(),
            });
        }
        let mut eta = vec![self.intercept; n];
        let data = x.as_slice();
        for (k, &b) in self.coefficients.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (e, v) in eta.iter_mut().zip(&data[k * n..(k + 1) * n]) {
                *e += b * v;
            }
        }
        Ok(eta)
    }
}

/// Predictions on the response scale. Logit-link fits are clipped to
/// `[0.01, 0.99]`.
pub fn predict(f: &FittedNuisance, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut eta = f.linear_predictor(x)?;
    if f.link == Link::Logit {
        for e in eta.iter_mut() {
            *e = expit(*e).clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
        }
    }
    Ok(eta)
}

pub(crate) fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Default GCV grid: 31 log-spaced values of `λ/n` from 1e-4 to 1e2.
pub fn default_gcv_grid(n: usize) -> Vec<f64> {
    (0..31)
        .map(|i| n as f64 * 10f64.powf(-4.0 + 6.0 * i as f64 / 30.0))
        .collect()
}

/// Centers every column and, when `standardize` is set, scales it to unit
/// (population) variance. Constant columns keep scale 1.
pub(crate) fn working_columns(x: &DMatrix<f64>, standardize: bool) -> (Vec<Vec<f64>>, Scaling) {
    let n = x.nrows();
    let data = x.as_slice();
    let mut cols = Vec::with_capacity(x.ncols());
    let mut center = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for k in 0..x.ncols() {
        let col = &data[k * n..(k + 1) * n];
        let mu = col.iter().sum::<f64>() / n as f64;
        let mut z: Vec<f64> = col.iter().map(|v| v - mu).collect();
        let mut s = 1.0;
        if standardize {
            let var = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
            if var > 1e-24 * (1.0 + mu * mu) {
                s = var.sqrt();
                z.iter_mut().for_each(|v| *v /= s);
            } else {
                z.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        cols.push(z);
        center.push(mu);
        scale.push(s);
    }
    (cols, Scaling { center, scale })
}

/// Maps working-scale slopes back to the original covariates.
pub(crate) fn unscale(b0: f64, slopes: &[f64], s: &Scaling) -> (f64, Vec<f64>) {
    let coefs: Vec<f64> = slopes.iter().zip(&s.scale).map(|(b, sc)| b / sc).collect();
    let intercept = b0 - coefs.iter().zip(&s.center).map(|(b, c)| b * c).sum::<f64>();
    (intercept, coefs)
}
