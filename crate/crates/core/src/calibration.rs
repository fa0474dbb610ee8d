//! Turning a selected statistic into a p-value.
//!
//! Three calibrations are offered: sampling from the plug-in null law of the
//! selected statistic (randomized trials only), the adaptive m-out-of-n
//! bootstrap (pre-test, then Bickel–Sakov choice of `m` when the pre-test
//! does not reject), and the plain n-out-of-n bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, StepContext};
use crate::error::{Error, Result};
use crate::interaction::InfluenceMatrix;
use crate::ks::ks_distance_sorted;
use crate::recipe::{Evaluation, Recipe, RecipeKind};
use crate::rng::{tag, StreamKey};

/// Attempts per bootstrap replicate before giving up on it.
const MAX_REPLICATE_ATTEMPTS: u64 = 25;
/// Fraction of `B` that may be redrawn before a block is abandoned.
const MAX_REDRAW_FRACTION: f64 = 0.10;
/// Eigenvalues below `-tol·trace` count as numerically negative.
const EIGEN_CLIP_TOL: f64 = 1e-10;
/// Largest share of the trace that clipping may discard.
const MAX_CLIPPED_MASS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(alias = "null")]
    NullSampling,
    #[serde(alias = "mboot")]
    MBoot,
    #[serde(alias = "nboot")]
    NBoot,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::NullSampling => "null-sampling",
            Method::MBoot => "m-boot",
            Method::NBoot => "n-boot",
        }
    }
}

/// Which `p` enters the pre-test quantile `z_{α/(2p)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretestCount {
    /// Remaining candidates `|Jᶜ|` at the current step.
    Candidates,
    /// Total covariate count `p`.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapPlan {
    /// Replicates per resample size.
    #[serde(rename = "B", alias = "b")]
    pub b: usize,
    /// Grid ratio for `m_j = ⌈d^j n⌉`.
    pub d: f64,
    /// Pre-test constant.
    pub c: f64,
    pub alpha: f64,
    /// Smallest resample size; `None` means `max(30, ⌈√n⌉)` (capped at `n`).
    pub m_floor: Option<usize>,
    /// Draws for null sampling.
    pub m_null: usize,
    pub seed: u64,
    pub pretest_count: PretestCount,
}

pub const DEFAULT_SEED: u64 = 20_240_601;

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self {
            b: 1000,
            d: 0.8,
            c: 2.0,
            alpha: 0.05,
            m_floor: None,
            m_null: 10_000,
            seed: DEFAULT_SEED,
            pretest_count: PretestCount::Candidates,
        }
    }
}

impl BootstrapPlan {
    pub fn m_floor(&self, n: usize) -> usize {
        self.m_floor
            .unwrap_or_else(|| 30.max((n as f64).sqrt().ceil() as usize).min(n))
    }

    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        if !(self.d > 0.0 && self.d < 1.0) {
            return bad(format!("d must lie in (0, 1), got {}", self.d));
        }
        if self.b < 100 {
            return bad(format!("B must be at least 100, got {}", self.b));
        }
        if !(self.c > 0.0) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.m_null == 0 {
            return bad("the null-sampling draw count must be positive".into());
        }
        if let (Some(n), Some(f)) = (n, self.m_floor) {
            if f == 0 || f > n {
                return bad(format!("m_floor must lie in [1, n = {n}], got {f}"));
            }
        }
        Ok(())
    }
}

/// One point of the Bickel–Sakov distance profile: the KS distance between
/// the draws at `m` and at the next grid value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsPoint {
    pub m: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    /// `√n` times the selected coefficient.
    pub stat_scaled: f64,
    pub sigma_hat: f64,
    pub r_hat: u8,
    pub m_hat: usize,
    pub m_hat_bs: Option<usize>,
    pub ks_path: Vec<KsPoint>,
    pub p_value: f64,
    pub draws_used: usize,
    /// Bootstrap replicates discarded as degenerate and redrawn.
    pub redrawn: usize,
}

/// Upper standard-normal quantile `z_a` with `P(Z > z_a) = a`.
pub fn z_upper(a: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - a)
}

pub fn pretest_threshold(n: usize, p_candidates: usize, plan: &BootstrapPlan) -> f64 {
    let log_term = (plan.c * (n as f64).ln()).sqrt();
    let z = z_upper(plan.alpha / (2.0 * p_candidates.max(1) as f64));
    log_term.max(z)
}

/// `1` when the scaled t-ratio falls strictly below the threshold (the
/// statistic looks null), else `0`.
pub fn pretest_r(stat_scaled: f64, sigma_hat: f64, n: usize, p_candidates: usize, plan: &BootstrapPlan) -> u8 {
    let ratio = if sigma_hat > 0.0 {
        (stat_scaled / sigma_hat).abs()
    } else if stat_scaled == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    u8::from(ratio < pretest_threshold(n, p_candidates, plan))
}

/// `m` rows drawn uniformly with replacement.
pub fn resample(data: &Dataset, m: usize, key: StreamKey) -> Dataset {
    let n = data.n();
    let mut rng = key.rng();
    let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    data.select_rows(&rows)
}

/// `(m_j)` for `j = 0, 1, …` with `m_j ≥ floor`, duplicates collapsed.
pub fn m_grid(n: usize, d: f64, floor: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = Vec::new();
    let mut scale = 1.0;
    loop {
        // Guard the ceiling against products like 0.8²·100 = 64.00000000000001.
        let m = (scale * n as f64 * (1.0 - 1e-12)).ceil() as usize;
        if m < floor.max(1) {
            break;
        }
        if grid.last() != Some(&m) {
            grid.push(m);
        }
        scale *= d;
        if m <= 1 {
            break;
        }
    }
    grid
}

/// Stream for replicate blocks: `(seed, step, m-index)`.
pub fn block_key(seed: u64, step_index: usize, m_index: usize) -> StreamKey {
    StreamKey::new(seed).derive_path(&[tag::BOOTSTRAP, step_index as u64, m_index as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub m: usize,
    pub draws: Vec<f64>,
    pub redrawn: usize,
}

/// `√m (θ̂*_{m,b} − θ̂ₙ)` for `b = 0..B`, rerunning the full recipe (nuisance
/// fits and selection) on every resample.
pub fn bootstrap_draws(
    data: &Dataset,
    step: &StepContext,
    recipe: &Recipe,
    theta_hat: f64,
    m: usize,
    b: usize,
    key: StreamKey,
) -> Result<BootstrapDraws> {
    let sqrt_m = (m as f64).sqrt();
    let results: Vec<Result<(f64, usize)>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let base = key.derive(rep as u64);
            let mut failed = 0usize;
            for attempt in 0..MAX_REPLICATE_ATTEMPTS {
                let k = if attempt == 0 {
                    base
                } else {
                    base.derive(tag::RETRY).derive(attempt)
                };
                let sample = resample(data, m, k);
                let outcome = step
                    .rebind(&sample)
                    .and_then(|s| recipe.evaluate(&sample, &s, false));
                match outcome {
                    Ok(ev) => return Ok((sqrt_m * (ev.coef() - theta_hat), failed)),
                    Err(e) if e.is_replicate_degeneracy() => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::TooManyDegenerateReplicates {
                failed: MAX_REPLICATE_ATTEMPTS as usize,
                requested: 1,
            })
        })
        .collect();
    let mut draws = Vec::with_capacity(b);
    let mut redrawn = 0;
    for r in results {
        match r {
            Ok((v, f)) => {
                draws.push(v);
                redrawn += f;
            }
            Err(Error::TooManyDegenerateReplicates { .. }) => {
                return Err(Error::TooManyDegenerateReplicates {
                    failed: b,
                    requested: b,
                })
            }
            Err(e) => return Err(e),
        }
    }
    if redrawn as f64 > MAX_REDRAW_FRACTION * b as f64 {
        return Err(Error::TooManyDegenerateReplicates {
            failed: redrawn,
            requested: b,
        });
    }
    Ok(BootstrapDraws { m, draws, redrawn })
}

/// Bickel–Sakov choice from precomputed draws: the `m_j` minimizing the KS
/// distance to the draws at `m_{j+1}`, ties to the larger `m`.
pub fn select_m_from_draws(grid: &[usize], draws: &[Vec<f64>]) -> Result<(usize, Vec<KsPoint>)> {
    if grid.len() < 2 {
        return Err(Error::GridTooShort {
            points: grid.len(),
            floor: grid.last().copied().unwrap_or(0),
        });
    }
    if draws.len() != grid.len() {
        return Err(Error::LengthMismatch {
            what: "draw blocks",
            expected: grid.len(),
            found: draws.len(),
        });
    }
    let sorted: Vec<Vec<f64>> = draws
        .iter()
        .map(|d| {
            let mut v = d.clone();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let path: Vec<KsPoint> = (0..grid.len() - 1)
        .map(|j| KsPoint {
            m: grid[j],
            distance: ks_distance_sorted(&sorted[j], &sorted[j + 1]),
        })
        .collect();
    let mut best = 0;
    for j in 1..path.len() {
        if path[j].distance < path[best].distance {
            best = j;
        }
    }
    Ok((path[best].m, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BickelSakov {
    pub m_hat: usize,
    pub ks_path: Vec<KsPoint>,
    pub blocks: Vec<BootstrapDraws>,
}

pub fn bickel_sakov_m(
    data: &Dataset,
    step: &StepContext,
    recipe: &Recipe,
    theta_hat: f64,
    plan: &BootstrapPlan,
    step_index: usize,
) -> Result<BickelSakov> {
    let n = data.n();
    let floor = plan.m_floor(n);
    let grid = m_grid(n, plan.d, floor);
    if grid.len() < 2 {
        return Err(Error::GridTooShort {
            points: grid.len(),
            floor,
        });
    }
    let blocks = grid
        .iter()
        .enumerate()
        .map(|(j, &m)| bootstrap_draws(data, step, recipe, theta_hat, m, plan.b, block_key(plan.seed, step_index, j)))
        .collect::<Result<Vec<_>>>()?;
    let draws: Vec<Vec<f64>> = blocks.iter().map(|b| b.draws.clone()).collect();
    let (m_hat, ks_path) = select_m_from_draws(&grid, &draws)?;
    Ok(BickelSakov {
        m_hat,
        ks_path,
        blocks,
    })
}

pub fn choose_m(r_hat: u8, n: usize, m_hat_bs: usize) -> usize {
    let r = r_hat as usize;
    (1 - r) * n + r * m_hat_bs
}

/// Two-sided, add-one smoothed: `(1 + #{|draw| ≥ |stat|}) / (B + 1)`.
pub fn pvalue_from_draws(stat_scaled: f64, draws: &[f64]) -> f64 {
    let t = stat_scaled.abs();
    let hits = draws.iter().filter(|d| d.abs() >= t).count();
    (1 + hits) as f64 / (draws.len() + 1) as f64
}

/// Draws `Z_K / d_K` with `Z ~ N(0, Σ̂)` and `K = argmax Z_k²/d_k`.
///
/// `Σ̂` is factored through its correlation matrix with a symmetric square
/// root, clipping negative eigenvalues; influence columns are first brought
/// to a canonical sign.
pub fn sample_null(influence: &InfluenceMatrix, m_null: usize, key: StreamKey) -> Result<Vec<f64>> {
    let canon = influence.sign_canonical();
    let sigma = canon.covariance();
    let q = sigma.nrows();
    let d = &canon.denoms;
    if d.len() != q || d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Invariant("null sampling needs positive denominators".into()));
    }
    let sd: Vec<f64> = (0..q).map(|k| sigma[(k, k)].max(0.0).sqrt()).collect();
    let corr = DMatrix::from_fn(q, q, |a, b| {
        if sd[a] > 0.0 && sd[b] > 0.0 {
            if a == b {
                1.0
            } else {
                sigma[(a, b)] / (sd[a] * sd[b])
            }
        } else {
            0.0
        }
    });
    let root = psd_sqrt(&corr)?;
    let mut rng = key.rng();
    let mut out = Vec::with_capacity(m_null);
    let mut xi = DVector::zeros(q);
    for _ in 0..m_null {
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = &root * &xi;
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..q {
            let zk = sd[k] * z[k];
            let v = zk * zk / d[k];
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        out.push(sd[best] * z[best] / d[best]);
    }
    Ok(out)
}

/// Symmetric square root of a PSD matrix, clipping negative eigenvalues.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = m.nrows();
    if q == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let trace: f64 = m.diagonal().iter().sum();
    let eig = m.clone().symmetric_eigen();
    let mut clipped = 0.0;
    let mut roots = DVector::zeros(q);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < 0.0 {
            if l < -EIGEN_CLIP_TOL * trace.max(f64::MIN_POSITIVE) {
                clipped += -l;
            }
        } else {
            roots[i] = l.sqrt();
        }
    }
    if trace > 0.0 && clipped / trace > MAX_CLIPPED_MASS {
        return Err(Error::NonPsdCovariance {
            fraction: clipped / trace,
        });
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Calibrates the statistic selected in `eval` (computed on `data` at
/// `step`, with residuals kept).
pub fn calibrate_step(
    data: &Dataset,
    step: &StepContext,
    recipe: &Recipe,
    eval: &Evaluation,
    method: Method,
    plan: &BootstrapPlan,
    step_index: usize,
) -> Result<CalibrationResult> {
    plan.validate(Some(data.n()))?;
    if method == Method::NullSampling && recipe.kind != RecipeKind::Rct {
        return Err(Error::UnsupportedCalibration(
            "null sampling is only available for the randomized-trial recipe".into(),
        ));
    }
    let n = data.n();
    let theta = eval.coef();
    let stat_scaled = (n as f64).sqrt() * theta;
    let influence = match recipe.kind {
        RecipeKind::Rct => Some(recipe.influence(step, eval)?),
        RecipeKind::DoublyRobust => None,
    };
    let sigma_hat = recipe.sigma_hat(data, step, eval, influence.as_ref())?;
    let p_count = match plan.pretest_count {
        PretestCount::Candidates => step.jc_set().len(),
        PretestCount::Original => data.p(),
    };
    let r_hat = pretest_r(stat_scaled, sigma_hat, n, p_count, plan);
    let mut result = CalibrationResult {
        method,
        stat_scaled,
        sigma_hat,
        r_hat,
        m_hat: n,
        m_hat_bs: None,
        ks_path: Vec::new(),
        p_value: 1.0,
        draws_used: 0,
        redrawn: 0,
    };
    match method {
        Method::NullSampling => {
            let inf = influence.expect("randomized-trial recipe has an influence matrix");
            let key = StreamKey::new(plan.seed).derive_path(&[tag::NULL_SAMPLING, step_index as u64]);
            let draws = sample_null(&inf, plan.m_null, key)?;
            result.p_value = pvalue_from_draws(stat_scaled, &draws);
            result.draws_used = draws.len();
        }
        Method::NBoot => {
            result.r_hat = 0;
            let block = bootstrap_draws(data, step, recipe, theta, n, plan.b, block_key(plan.seed, step_index, 0))?;
            result.p_value = pvalue_from_draws(stat_scaled, &block.draws);
            result.draws_used = block.draws.len();
            result.redrawn = block.redrawn;
        }
        Method::MBoot if r_hat == 0 => {
            let block = bootstrap_draws(data, step, recipe, theta, n, plan.b, block_key(plan.seed, step_index, 0))?;
            result.p_value = pvalue_from_draws(stat_scaled, &block.draws);
            result.draws_used = block.draws.len();
            result.redrawn = block.redrawn;
        }
        Method::MBoot => {
            let bs = bickel_sakov_m(data, step, recipe, theta, plan, step_index)?;
            let m_hat = choose_m(r_hat, n, bs.m_hat);
            let block = bs
                .blocks
                .iter()
                .find(|b| b.m == m_hat)
                .ok_or_else(|| Error::Invariant(format!("no draws at m = {m_hat}")))?;
            result.m_hat = m_hat;
            result.m_hat_bs = Some(bs.m_hat);
            result.p_value = pvalue_from_draws(stat_scaled, &block.draws);
            result.draws_used = bs.blocks.iter().map(|b| b.draws.len()).sum();
            result.redrawn = bs.blocks.iter().map(|b| b.redrawn).sum();
            result.ks_path = bs.ks_path;
        }
    }
    Ok(result)
}
