//! Monte Carlo estimation of per-step rejection rates.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::competitors::{bonferroni_test, lrt_test};
use super::{generate, Scenario};
use crate::calibration::{BootstrapPlan, Method};
use crate::data::{Dataset, StepContext};
use crate::error::{Error, Result};
use crate::recipe::{Recipe, RecipeKind};
use crate::rng::{tag, StreamKey};
use crate::sequential::{run_sequence, SequenceConfig};

/// Largest fraction of repetitions that may fail before a study is abandoned.
const MAX_FAILED_FRACTION: f64 = 0.01;
pub const MIN_REPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McMethod {
    #[serde(alias = "null")]
    NullSampling,
    #[serde(alias = "mboot")]
    MBoot,
    #[serde(alias = "nboot")]
    NBoot,
    #[serde(alias = "mboot-dr")]
    MBootDr,
    #[serde(alias = "nboot-dr")]
    NBootDr,
    #[serde(alias = "bonf")]
    Bonferroni,
    Lrt,
}

impl McMethod {
    pub fn label(self) -> &'static str {
        match self {
            McMethod::NullSampling => "null-sampling",
            McMethod::MBoot => "m-boot",
            McMethod::NBoot => "n-boot",
            McMethod::MBootDr => "m-boot-dr",
            McMethod::NBootDr => "n-boot-dr",
            McMethod::Bonferroni => "bonferroni",
            McMethod::Lrt => "lrt",
        }
    }

    /// Stable stream label, independent of the order methods are listed in.
    fn code(self) -> u64 {
        match self {
            McMethod::NullSampling => 1,
            McMethod::MBoot => 2,
            McMethod::NBoot => 3,
            McMethod::MBootDr => 4,
            McMethod::NBootDr => 5,
            McMethod::Bonferroni => 6,
            McMethod::Lrt => 7,
        }
    }

    fn sequential(self, scenario: &Scenario) -> Option<(Recipe, Method)> {
        match self {
            McMethod::NullSampling => Some((Recipe::rct(), Method::NullSampling)),
            McMethod::MBoot => Some((Recipe::rct(), Method::MBoot)),
            McMethod::NBoot => Some((Recipe::rct(), Method::NBoot)),
            McMethod::MBootDr => Some((scenario.dr_recipe(), Method::MBoot)),
            McMethod::NBootDr => Some((scenario.dr_recipe(), Method::NBoot)),
            McMethod::Bonferroni | McMethod::Lrt => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub methods: Vec<McMethod>,
    pub reps: usize,
    /// Calibration settings shared by all methods; its seed is replaced by a
    /// per-repetition, per-method stream.
    pub plan: BootstrapPlan,
    pub max_steps: usize,
    pub seed: u64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.plan.validate(Some(self.scenario.n))?;
        if self.reps < MIN_REPS {
            return Err(Error::InvalidConfig(format!("at least {MIN_REPS} repetitions are required")));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods requested".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("at least one step is required".into()));
        }
        Ok(())
    }
}

/// One executed step of one method in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// 1-based.
    pub step: usize,
    /// 0-based covariate index.
    pub selected: usize,
    pub p_value: f64,
    pub rejected: bool,
    /// Whether a truly active covariate was still a candidate.
    pub active_remaining: bool,
    pub selected_active: bool,
    pub stat_scaled: Option<f64>,
    pub r_hat: Option<u8>,
    pub m_hat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcomes {
    pub method: McMethod,
    /// Steps per repetition; `None` for a failed repetition.
    pub reps: Vec<Option<Vec<StepOutcome>>>,
    pub failures: Vec<(usize, String)>,
}

struct RawStep {
    selected: usize,
    p_value: f64,
    stat_scaled: Option<f64>,
    r_hat: Option<u8>,
    m_hat: Option<usize>,
}

fn competitor_sequence(data: &Dataset, method: McMethod, alpha: f64, max_steps: usize) -> Result<Vec<RawStep>> {
    let mut step = StepContext::initial(data);
    let mut out = Vec::new();
    while out.len() < max_steps && !step.jc_set().is_empty() {
        let result = match method {
            McMethod::Bonferroni => bonferroni_test(data, &step, alpha).map(|b| (b.selected, b.min_p)),
            McMethod::Lrt => lrt_test(data, &step, alpha).and_then(|l| {
                let k = Recipe::rct().evaluate(data, &step, false)?.k_hat();
                Ok((k, l.p_value))
            }),
            _ => unreachable!("sequential methods are run by the driver"),
        };
        let (k, p) = match result {
            Ok(v) => v,
            Err(Error::AllDegenerate) => break,
            Err(e) => return Err(e),
        };
        out.push(RawStep {
            selected: k,
            p_value: p,
            stat_scaled: None,
            r_hat: None,
            m_hat: None,
        });
        if p > alpha {
            break;
        }
        step = step.advance(data, k)?;
    }
    Ok(out)
}

fn run_method(config: &StudyConfig, data: &Dataset, method: McMethod, rep: usize) -> Result<Vec<RawStep>> {
    let alpha = config.plan.alpha;
    let Some((recipe, cal)) = method.sequential(&config.scenario) else {
        return competitor_sequence(data, method, alpha, config.max_steps);
    };
    let plan = BootstrapPlan {
        seed: StreamKey::new(config.seed)
            .derive_path(&[tag::METHOD, rep as u64, method.code()])
            .value(),
        ..config.plan.clone()
    };
    // Estimated-propensity recipes never see the true propensity.
    let stripped;
    let input = if recipe.kind == RecipeKind::Rct {
        data
    } else {
        stripped = data.clone().with_propensity(None)?;
        &stripped
    };
    let out = run_sequence(input, &SequenceConfig::new(recipe, cal, plan, config.max_steps))?;
    Ok(out
        .steps
        .iter()
        .map(|s| RawStep {
            selected: s.covariate - 1,
            p_value: s.calibration.p_value,
            stat_scaled: Some(s.stat_scaled),
            r_hat: Some(s.calibration.r_hat),
            m_hat: Some(s.calibration.m_hat),
        })
        .collect())
}

fn annotate(raw: Vec<RawStep>, active: &[usize], alpha: f64) -> Vec<StepOutcome> {
    let mut chosen: Vec<usize> = Vec::new();
    raw.into_iter()
        .enumerate()
        .map(|(i, s)| {
            let active_remaining = active.iter().any(|a| !chosen.contains(a));
            chosen.push(s.selected);
            StepOutcome {
                step: i + 1,
                selected: s.selected,
                p_value: s.p_value,
                rejected: s.p_value <= alpha,
                active_remaining,
                selected_active: active.contains(&s.selected),
                stat_scaled: s.stat_scaled,
                r_hat: s.r_hat,
                m_hat: s.m_hat,
            }
        })
        .collect()
}

/// Runs every method on every repetition and keeps the per-step outcomes.
pub fn mc_outcomes(config: &StudyConfig) -> Result<Vec<MethodOutcomes>> {
    config.validate()?;
    let active = config.scenario.active();
    let alpha = config.plan.alpha;
    let per_rep: Vec<Vec<std::result::Result<Vec<StepOutcome>, String>>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(config.seed).derive_path(&[tag::DATA, rep as u64]);
            match generate(&config.scenario, key) {
                Ok(data) => config
                    .methods
                    .iter()
                    .map(|&m| {
                        run_method(config, &data, m, rep)
                            .map(|raw| annotate(raw, &active, alpha))
                            .map_err(|e| e.to_string())
                    })
                    .collect(),
                Err(e) => vec![Err(e.to_string()); config.methods.len()],
            }
        })
        .collect();
    let mut out: Vec<MethodOutcomes> = config
        .methods
        .iter()
        .map(|&method| MethodOutcomes {
            method,
            reps: Vec::with_capacity(config.reps),
            failures: Vec::new(),
        })
        .collect();
    for (rep, row) in per_rep.into_iter().enumerate() {
        for (mo, r) in out.iter_mut().zip(row) {
            match r {
                Ok(steps) => mo.reps.push(Some(steps)),
                Err(e) => {
                    mo.reps.push(None);
                    mo.failures.push((rep, e));
                }
            }
        }
    }
    for mo in &out {
        if mo.failures.len() as f64 > MAX_FAILED_FRACTION * config.reps as f64 {
            return Err(Error::StudyFailed {
                failed: mo.failures.len(),
                reps: config.reps,
                first: format!("{}: {}", mo.method.label(), mo.failures[0].1),
            });
        }
    }
    Ok(out)
}

/// A rate always travels with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
}

impl Rate {
    pub fn new(count: usize, total: usize) -> Option<Self> {
        (total > 0).then(|| {
            let r = count as f64 / total as f64;
            Rate {
                rate: r,
                se: (r * (1.0 - r) / total as f64).sqrt(),
            }
        })
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ({:.3})", self.rate, self.se)
    }
}

/// `count` successes out of `total` eligible repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCell {
    pub count: usize,
    pub total: usize,
    pub rate: Option<Rate>,
}

impl StepCell {
    fn new(count: usize, total: usize) -> Self {
        Self {
            count,
            total,
            rate: Rate::new(count, total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    /// Repetitions that executed this step.
    pub reached: usize,
    /// Rejections among repetitions with an active covariate still a
    /// candidate.
    pub power: StepCell,
    /// Rejections among repetitions with no active covariate left.
    pub null: StepCell,
    /// Selections of an active covariate when one remained.
    pub selection: StepCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub method: McMethod,
    pub completed_reps: usize,
    pub failed_reps: usize,
    pub first_failure: Option<String>,
    pub steps: Vec<StepRow>,
    /// Step-1 repetitions whose pre-test classified the statistic as null.
    pub r_hat_one: usize,
    /// Step-1 repetitions calibrated with `m̂ = n`.
    pub m_hat_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: StudyConfig,
    pub tables: Vec<MethodTable>,
    /// Filled in by front ends that opt into timing.
    pub elapsed_seconds: Option<f64>,
}

impl McReport {
    pub fn table(&self, method: McMethod) -> Option<&MethodTable> {
        self.tables.iter().find(|t| t.method == method)
    }
}

fn tabulate(mo: &MethodOutcomes, max_steps: usize, n: usize) -> MethodTable {
    let done: Vec<&Vec<StepOutcome>> = mo.reps.iter().flatten().collect();
    let steps = (1..=max_steps)
        .map(|s| {
            let at: Vec<&StepOutcome> = done.iter().filter_map(|r| r.get(s - 1)).collect();
            let count = |f: &dyn Fn(&StepOutcome) -> bool| at.iter().filter(|o| f(o)).count();
            let power_total = count(&|o| o.active_remaining);
            StepRow {
                step: s,
                reached: at.len(),
                power: StepCell::new(count(&|o| o.active_remaining && o.rejected), power_total),
                null: StepCell::new(count(&|o| !o.active_remaining && o.rejected), at.len() - power_total),
                selection: StepCell::new(count(&|o| o.active_remaining && o.selected_active), power_total),
            }
        })
        .collect();
    let first: Vec<&StepOutcome> = done.iter().filter_map(|r| r.first()).collect();
    MethodTable {
        method: mo.method,
        completed_reps: done.len(),
        failed_reps: mo.failures.len(),
        first_failure: mo.failures.first().map(|(rep, e)| format!("rep {rep}: {e}")),
        steps,
        r_hat_one: first.iter().filter(|o| o.r_hat == Some(1)).count(),
        m_hat_n: first.iter().filter(|o| o.m_hat == Some(n)).count(),
    }
}

/// Runs the study and tabulates per-step rejection and selection rates.
pub fn mc_study(config: &StudyConfig) -> Result<McReport> {
    let outcomes = mc_outcomes(config)?;
    Ok(McReport {
        config: config.clone(),
        tables: outcomes
            .iter()
            .map(|mo| tabulate(mo, config.max_steps, config.scenario.n))
            .collect(),
        elapsed_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{Family, Signal};

    fn config(family: Family, signal: Signal, methods: Vec<McMethod>, reps: usize) -> StudyConfig {
        StudyConfig {
            scenario: Scenario::canonical(family, signal, 120, 4).unwrap(),
            methods,
            reps,
            plan: BootstrapPlan {
                b: 100,
                m_null: 1000,
                ..Default::default()
            },
            max_steps: 2,
            seed: 17,
        }
    }

    #[test]
    fn bonferroni_level_under_null() {
        let mut c = config(Family::Rct, Signal::Null, vec![McMethod::Bonferroni], 1000);
        c.scenario = Scenario::canonical(Family::Rct, Signal::Null, 250, 10).unwrap();
        let rep = mc_study(&c).unwrap();
        let row = &rep.tables[0].steps[0];
        assert_eq!(row.reached, 1000);
        let r = row.null.rate.unwrap().rate;
        // Bonferroni is conservative; the upper bound is the binding one.
        assert!((0.01..=0.08).contains(&r), "{r}");
        assert_eq!(row.power.total, 0);
    }

    #[test]
    fn study_is_deterministic() {
        let c = config(Family::Rct, Signal::One, vec![McMethod::NullSampling, McMethod::Lrt], 100);
        assert_eq!(mc_study(&c).unwrap(), mc_study(&c).unwrap());
    }

    #[test]
    fn strong_signal_selects_active_covariate() {
        let c = config(Family::Rct, Signal::One, vec![McMethod::NullSampling], 100);
        let c = StudyConfig {
            scenario: c.scenario.clone().scale_interactions(3.0),
            ..c
        };
        let rep = mc_study(&c).unwrap();
        let sel = rep.tables[0].steps[0].selection.rate.unwrap();
        assert!(sel.rate >= 0.95, "{sel}");
    }

    #[test]
    fn rates_carry_standard_errors() {
        let r = Rate::new(5, 100).unwrap();
        assert!((r.se - (0.05f64 * 0.95 / 100.0).sqrt()).abs() < 1e-15);
        assert_eq!(r.to_string(), "0.050 (0.022)");
        assert!(Rate::new(0, 0).is_none());
    }

    #[test]
    fn null_statistics_are_sign_symmetric() {
        let c = config(Family::Rct, Signal::Null, vec![McMethod::NBoot], 400);
        let c = StudyConfig { max_steps: 1, ..c };
        let out = mc_outcomes(&c).unwrap();
        let stats: Vec<f64> = out[0].reps.iter().flatten().map(|s| s[0].stat_scaled.unwrap()).collect();
        let pos = stats.iter().filter(|s| **s > 0.0).count() as f64;
        let n = stats.len() as f64;
        // Sign test at roughly the 0.001 level.
        assert!((pos - n / 2.0).abs() < 3.3 * (n / 4.0).sqrt(), "{pos} of {n}");
    }

    #[test]
    fn too_few_reps_rejected() {
        let c = config(Family::Rct, Signal::Null, vec![McMethod::Bonferroni], 10);
        assert!(matches!(mc_study(&c), Err(Error::InvalidConfig(_))));
    }
}
