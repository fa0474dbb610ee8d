//! Simulation scenarios, competing tests and the Monte Carlo harness.

mod competitors;
mod study;

pub use competitors::{bonferroni_test, lrt_test, BonferroniOutcome, LrtOutcome};
pub use study::{
    mc_outcomes, mc_study, McMethod, McReport, MethodOutcomes, MethodTable, Rate, StepCell, StepOutcome,
    StepRow, StudyConfig,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{Dataset, MIN_ROWS};
use crate::error::{Error, Result};
use crate::nuisance::expit;
use crate::recipe::Recipe;
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum CovariateLaw {
    /// Independent standard normals.
    Iid,
    /// Unit variances, all correlations `rho`.
    Equicorrelated { rho: f64 },
    /// Unit variances, `corr(X_j, X_k) = rho^|j-k|`.
    Ar1 { rho: f64 },
}

impl CovariateLaw {
    pub fn covariance(&self, p: usize) -> DMatrix<f64> {
        match *self {
            CovariateLaw::Iid => DMatrix::identity(p, p),
            CovariateLaw::Equicorrelated { rho } => {
                DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho })
            }
            CovariateLaw::Ar1 { rho } => {
                DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
            }
        }
    }
}

/// `h₀(X) = intercept + Σ linear_k X_k + Σ quadratic_k X_k²`; coefficient
/// vectors shorter than `p` are zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainEffect {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<f64>,
}

impl MainEffect {
    fn eval(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(b, v)| b * v).sum();
        let quad: f64 = self.quadratic.iter().zip(x).map(|(b, v)| b * v * v).sum();
        self.intercept + lin + quad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum PropensityLaw {
    Constant { q: f64 },
    /// `expit(intercept + Σ coefs_k X_k)`.
    Logistic {
        #[serde(default)]
        intercept: f64,
        coefs: Vec<f64>,
    },
}

impl PropensityLaw {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            PropensityLaw::Constant { q } => *q,
            PropensityLaw::Logistic { intercept, coefs } => {
                expit(intercept + coefs.iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
            }
        }
    }
}

/// Data-generating model `Y = h₀(X) + (α₀ + Xᵀβ₀)A + ε`, `A ~ Bernoulli(q₀(X))`,
/// `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub label: String,
    pub n: usize,
    pub p: usize,
    pub covariates: CovariateLaw,
    pub beta0: Vec<f64>,
    pub alpha0: f64,
    pub h0: MainEffect,
    pub propensity: PropensityLaw,
    pub sigma: f64,
    /// 1-based covariates left out of the fitted propensity model.
    #[serde(default)]
    pub q_fit_omit: Vec<usize>,
}

/// Which canonical design family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Randomized trial, `q₀ = 0.5` known.
    Rct,
    /// Observational; propensity correct, outcome model misses a quadratic term.
    D1,
    /// Observational; propensity model omits a covariate, outcome model correct.
    D2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    Null,
    /// `β₀ = (b, 0, …, 0)`.
    One,
    /// `β₀ = (b, b, 0, …, 0)`.
    Two,
}

/// Target power of the oracle single-covariate z-test used to size `b`.
pub const ORACLE_POWER: f64 = 0.95;
pub const ORACLE_ALPHA: f64 = 0.05;

impl Scenario {
    /// Canonical scenario of the given family and signal. `b` gives the
    /// oracle z-test power [`ORACLE_POWER`] at level [`ORACLE_ALPHA`] and
    /// size `n`.
    pub fn canonical(family: Family, signal: Signal, n: usize, p: usize) -> Result<Self> {
        if p < 3 {
            return Err(Error::InvalidScenario("canonical scenarios need p ≥ 3".into()));
        }
        let (h0, propensity, q_fit_omit) = match family {
            Family::Rct => (
                MainEffect {
                    intercept: 1.0,
                    linear: vec![0.5, 0.5],
                    quadratic: vec![],
                },
                PropensityLaw::Constant { q: 0.5 },
                vec![],
            ),
            Family::D1 => (
                MainEffect {
                    intercept: 1.0,
                    linear: vec![1.0, 0.5, -0.5],
                    quadratic: vec![0.0, 0.4],
                },
                PropensityLaw::Logistic {
                    intercept: 0.0,
                    coefs: vec![0.0, 0.4, -0.4],
                },
                vec![],
            ),
            Family::D2 => (
                MainEffect {
                    intercept: 1.0,
                    linear: vec![1.0, 0.5, -0.5],
                    quadratic: vec![],
                },
                PropensityLaw::Logistic {
                    intercept: 0.0,
                    coefs: vec![0.0, 0.4, 0.8],
                },
                vec![3],
            ),
        };
        let mut s = Scenario {
            label: format!("{}-{}", family_label(family), signal_label(signal)),
            n,
            p,
            covariates: CovariateLaw::Iid,
            beta0: vec![0.0; p],
            alpha0: 0.5,
            h0,
            propensity,
            sigma: 1.0,
            q_fit_omit,
        };
        let b = calibrated_b(n, s.oracle_sd(), ORACLE_ALPHA, ORACLE_POWER);
        match signal {
            Signal::Null => {}
            Signal::One => s.beta0[0] = b,
            Signal::Two => {
                s.beta0[0] = b;
                s.beta0[1] = b;
            }
        }
        Ok(s)
    }

    /// Parses names like `N1`, `S1`, `S2`, `D1-null`, `D1-S1`, `D2-S2`.
    pub fn named(name: &str, n: usize, p: usize) -> Result<Self> {
        let up = name.to_ascii_uppercase();
        let (family, signal) = match up.as_str() {
            "N1" => (Family::Rct, Signal::Null),
            "S1" => (Family::Rct, Signal::One),
            "S2" => (Family::Rct, Signal::Two),
            _ => {
                let (f, s) = up
                    .split_once('-')
                    .ok_or_else(|| Error::InvalidScenario(format!("unknown scenario `{name}`")))?;
                let family = match f {
                    "D1" => Family::D1,
                    "D2" => Family::D2,
                    _ => return Err(Error::InvalidScenario(format!("unknown scenario `{name}`"))),
                };
                let signal = match s {
                    "NULL" | "N1" => Signal::Null,
                    "S1" => Signal::One,
                    "S2" => Signal::Two,
                    _ => return Err(Error::InvalidScenario(format!("unknown scenario `{name}`"))),
                };
                (family, signal)
            }
        };
        let mut s = Self::canonical(family, signal, n, p)?;
        s.label = name.to_string();
        Ok(s)
    }

    /// Multiplies every interaction coefficient by `factor`.
    pub fn scale_interactions(mut self, factor: f64) -> Self {
        for b in &mut self.beta0 {
            *b *= factor;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.n < MIN_ROWS {
            return bad(format!("n must be at least {MIN_ROWS}"));
        }
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.beta0.len() != self.p {
            return bad(format!("beta0 has length {}, expected p = {}", self.beta0.len(), self.p));
        }
        if self.h0.linear.len() > self.p || self.h0.quadratic.len() > self.p {
            return bad("main-effect coefficients exceed p".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        match &self.propensity {
            PropensityLaw::Constant { q } if !(*q > 0.0 && *q < 1.0) => {
                return bad(format!("constant propensity must lie in (0, 1), got {q}"))
            }
            PropensityLaw::Logistic { coefs, .. } if coefs.len() > self.p => {
                return bad("propensity coefficients exceed p".into())
            }
            _ => {}
        }
        if let Some(&k) = self.q_fit_omit.iter().find(|&&k| k == 0 || k > self.p) {
            return bad(format!("omitted propensity covariate {k} is out of range"));
        }
        let rho_ok = match self.covariates {
            CovariateLaw::Iid => true,
            CovariateLaw::Equicorrelated { rho } => {
                rho < 1.0 && (self.p == 1 || rho > -1.0 / (self.p as f64 - 1.0))
            }
            CovariateLaw::Ar1 { rho } => rho.abs() < 1.0,
        };
        if !rho_ok {
            return bad("correlation does not give a positive definite covariance".into());
        }
        Ok(())
    }

    /// Whether the fitted propensity model contains every covariate the true
    /// one uses.
    pub fn q_correct(&self) -> bool {
        match &self.propensity {
            PropensityLaw::Constant { .. } => true,
            PropensityLaw::Logistic { coefs, .. } => coefs
                .iter()
                .enumerate()
                .all(|(k, c)| *c == 0.0 || !self.q_fit_omit.contains(&(k + 1))),
        }
    }

    /// Whether a linear outcome model is correctly specified.
    pub fn h_correct(&self) -> bool {
        self.h0.quadratic.iter().all(|c| *c == 0.0)
    }

    /// 0-based indices of covariates with a non-zero interaction.
    pub fn active(&self) -> Vec<usize> {
        (0..self.p).filter(|&k| self.beta0[k] != 0.0).collect()
    }

    pub fn names(&self) -> Vec<String> {
        covariate_names(self.p)
    }

    /// Doubly robust recipe with the propensity model restricted as the
    /// scenario prescribes.
    pub fn dr_recipe(&self) -> Recipe {
        let mut r = Recipe::doubly_robust();
        if !self.q_fit_omit.is_empty() {
            let keep = self
                .names()
                .into_iter()
                .enumerate()
                .filter(|(k, _)| !self.q_fit_omit.contains(&(k + 1)))
                .map(|(_, n)| n)
                .collect();
            r.q = r.q.with_covariates(keep);
        }
        r
    }

    /// `E[q₀(X)(1 − q₀(X))]`.
    pub fn treatment_variance(&self) -> f64 {
        match &self.propensity {
            PropensityLaw::Constant { q } => q * (1.0 - q),
            PropensityLaw::Logistic { intercept, coefs } => {
                let mut c = DVector::zeros(self.p);
                for (k, v) in coefs.iter().enumerate() {
                    c[k] = *v;
                }
                let var = (c.transpose() * self.covariates.covariance(self.p) * &c)[(0, 0)];
                gaussian_expectation(*intercept, var.sqrt(), |eta| {
                    let q = expit(eta);
                    q * (1.0 - q)
                })
            }
        }
    }

    /// Large-sample standard deviation of `√n·θ̂` for a single covariate
    /// with known nuisances: `σ / √(E[q₀(1 − q₀)]·Var X₁)`.
    pub fn oracle_sd(&self) -> f64 {
        self.sigma / self.treatment_variance().sqrt()
    }
}

fn family_label(f: Family) -> &'static str {
    match f {
        Family::Rct => "rct",
        Family::D1 => "d1",
        Family::D2 => "d2",
    }
}

fn signal_label(s: Signal) -> &'static str {
    match s {
        Signal::Null => "null",
        Signal::One => "one",
        Signal::Two => "two",
    }
}

/// `x1 … xp`, zero-padded so lexical and numeric order agree.
pub fn covariate_names(p: usize) -> Vec<String> {
    let width = p.to_string().len();
    (1..=p).map(|k| format!("x{k:0width$}")).collect()
}

/// `E f(μ + s·Z)` by the trapezoid rule on `±12` standard deviations.
fn gaussian_expectation(mu: f64, s: f64, f: impl Fn(f64) -> f64) -> f64 {
    if s == 0.0 {
        return f(mu);
    }
    let normal = Normal::standard();
    let steps = 4800;
    let h = 24.0 / steps as f64;
    (0..=steps)
        .map(|i| {
            let z = -12.0 + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            w * normal.pdf(z) * f(mu + s * z)
        })
        .sum::<f64>()
        * h
}

/// Non-centrality `μ` at which a two-sided level-`alpha` z-test has the
/// given power: `Φ(μ − z) + Φ(−μ − z) = power`.
pub fn power_noncentrality(alpha: f64, power: f64) -> f64 {
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let f = |mu: f64| normal.cdf(mu - z) + normal.cdf(-mu - z) - power;
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Interaction size `μ·sd/√n` giving the oracle z-test the target power.
pub fn calibrated_b(n: usize, sd: f64, alpha: f64, power: f64) -> f64 {
    power_noncentrality(alpha, power) * sd / (n as f64).sqrt()
}

/// Draws one dataset. The true propensity is attached as the known
/// propensity; recipes that estimate it ignore the column.
pub fn generate(scenario: &Scenario, key: StreamKey) -> Result<Dataset> {
    scenario.validate()?;
    let (n, p) = (scenario.n, scenario.p);
    let chol = scenario
        .covariates
        .covariance(p)
        .cholesky()
        .ok_or_else(|| Error::InvalidScenario("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut rng = key.rng();
    let mut x = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    let mut row = vec![0.0; p];
    let (mut y, mut a, mut q0) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let xi = &l * &z;
        for k in 0..p {
            x[(i, k)] = xi[k];
            row[k] = xi[k];
        }
        let q = scenario.propensity.eval(&row);
        let ai = if rng.random::<f64>() < q { 1.0 } else { 0.0 };
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * scenario.sigma;
        let effect = scenario.alpha0 + scenario.beta0.iter().zip(&row).map(|(b, v)| b * v).sum::<f64>();
        y.push(scenario.h0.eval(&row) + effect * ai + eps);
        a.push(ai);
        q0.push(q);
    }
    Dataset::new(y, a, x, Some(q0), scenario.names())
}
