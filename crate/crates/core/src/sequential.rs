//! Forward-stepwise driver: select, calibrate, and either move the selected
//! covariate into `J` and continue or stop.
//!
//! Covariates are processed in name-sorted order so that permuting input
//! columns cannot change which random draws a candidate meets; reported
//! indices are 1-based positions in the caller's column order.
//!
//! Covariates are also standardized once up front. The reference laws take
//! the winning candidate of each draw, so mixing covariates on different
//! scales would make p-values depend on units. Coefficients are reported on
//! the original scale; `stat_scaled` is on the standardized one.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_step, BootstrapPlan, CalibrationResult, Method};
use crate::data::{Dataset, StepContext};
use crate::error::{Error, Result};
use crate::recipe::Recipe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub recipe: Recipe,
    pub method: Method,
    /// Replicate counts, grid, pre-test constant, seed and the level `α`
    /// used both for stopping and in the pre-test.
    pub plan: BootstrapPlan,
    pub max_steps: usize,
}

impl SequenceConfig {
    pub fn new(recipe: Recipe, method: Method, plan: BootstrapPlan, max_steps: usize) -> Self {
        Self {
            recipe,
            method,
            plan,
            max_steps,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.plan.alpha
    }

    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidPlan("at least one step is required".into()));
        }
        self.recipe.validate()?;
        self.plan.validate(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    /// `p ≤ α`: the covariate joins `J`.
    Rejected,
    /// `p > α`.
    AcceptedNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// 1-based.
    pub step_index: usize,
    /// 1-based column position in the input dataset.
    pub covariate: usize,
    pub name: String,
    /// Interaction coefficient in the units of the input covariate.
    pub coef: f64,
    pub stat_scaled: f64,
    /// Candidates skipped as degenerate at this step (1-based positions).
    pub degenerate: Vec<usize>,
    pub calibration: CalibrationResult,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    PExceededAlpha,
    MaxSteps,
    CandidatesExhausted,
    AllDegenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub steps: Vec<StepResult>,
    /// Selected covariates in selection order (1-based input positions).
    pub final_j: Vec<usize>,
    pub stop_reason: StopReason,
    /// Whether the α stopping rule was ignored.
    pub exploratory: bool,
    pub config: SequenceConfig,
}

/// Runs the procedure until `p > α`, the candidates run out, or
/// `max_steps` steps have been executed.
pub fn run_sequence(data: &Dataset, config: &SequenceConfig) -> Result<SequenceResult> {
    drive(data, config, config.max_steps, false)
}

/// Executes `fixed_steps` steps regardless of the p-values, stopping early
/// only when the candidates run out or all are degenerate.
pub fn run_sequence_exploratory(
    data: &Dataset,
    config: &SequenceConfig,
    fixed_steps: usize,
) -> Result<SequenceResult> {
    if fixed_steps == 0 {
        return Err(Error::InvalidPlan("at least one step is required".into()));
    }
    drive(data, config, fixed_steps, true)
}

/// The step-1 test on its own: selected covariate (1-based) and its
/// calibration.
pub fn marginal_test(
    data: &Dataset,
    recipe: &Recipe,
    method: Method,
    plan: &BootstrapPlan,
) -> Result<(usize, CalibrationResult)> {
    plan.validate(Some(data.n()))?;
    let order = data.name_order();
    let (canon, _) = data.select_columns(&order).standardized();
    let step = StepContext::initial(&canon);
    let eval = recipe.evaluate(&canon, &step, true)?;
    let cal = calibrate_step(&canon, &step, recipe, &eval, method, plan, 1)?;
    Ok((order[eval.k_hat()] + 1, cal))
}

fn drive(data: &Dataset, config: &SequenceConfig, limit: usize, exploratory: bool) -> Result<SequenceResult> {
    config.validate(Some(data.n()))?;
    let order = data.name_order();
    let (canon, scales) = data.select_columns(&order).standardized();
    let original = |k: usize| order[k] + 1;
    let recipe = &config.recipe;
    // Nuisances are fit once on the full data; replicates refit their own.
    let residualized = recipe.residualize(&canon)?;
    let mut step = StepContext::initial(&canon);
    let mut steps = Vec::new();
    let stop_reason = loop {
        if step.jc_set().is_empty() {
            break StopReason::CandidatesExhausted;
        }
        if steps.len() == limit {
            break StopReason::MaxSteps;
        }
        let step_index = steps.len() + 1;
        let eval = match recipe.evaluate_residualized(&canon, &step, residualized.clone(), true) {
            Ok(e) => e,
            Err(Error::AllDegenerate) => break StopReason::AllDegenerate,
            Err(e) => return Err(e),
        };
        let cal = calibrate_step(&canon, &step, recipe, &eval, config.method, &config.plan, step_index)?;
        let k = eval.k_hat();
        let decision = if cal.p_value <= config.alpha() {
            Decision::Rejected
        } else {
            Decision::AcceptedNull
        };
        steps.push(StepResult {
            step_index,
            covariate: original(k),
            name: canon.names()[k].clone(),
            coef: eval.coef() / scales[k],
            stat_scaled: cal.stat_scaled,
            degenerate: eval.degenerate.iter().map(|&d| original(d)).collect(),
            calibration: cal,
            decision,
        });
        if decision == Decision::AcceptedNull && !exploratory {
            break StopReason::PExceededAlpha;
        }
        step = step.advance(&canon, k)?;
    };
    let final_j = if exploratory {
        step.j_set().iter().map(|&k| original(k)).collect()
    } else {
        steps
            .iter()
            .filter(|s| s.decision == Decision::Rejected)
            .map(|s| s.covariate)
            .collect()
    };
    Ok(SequenceResult {
        steps,
        final_j,
        stop_reason,
        exploratory,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::tests::rct_data;

    fn config(method: Method, max_steps: usize) -> SequenceConfig {
        let plan = BootstrapPlan {
            b: 100,
            m_null: 2000,
            ..Default::default()
        };
        SequenceConfig::new(Recipe::rct(), method, plan, max_steps)
    }

    #[test]
    fn null_data_stops_at_step_one() {
        let d = rct_data(120, 4, 0.0, 3);
        let out = run_sequence(&d, &config(Method::NullSampling, 5)).unwrap();
        assert!(!out.steps.is_empty());
        let last = out.steps.last().unwrap();
        if out.steps.len() == 1 {
            assert!(last.calibration.p_value > 0.05);
            assert_eq!(out.stop_reason, StopReason::PExceededAlpha);
            assert!(out.final_j.is_empty());
        }
        for s in &out.steps[..out.steps.len() - 1] {
            assert_eq!(s.decision, Decision::Rejected);
        }
    }

    #[test]
    fn strong_signal_respects_cap_and_grows_j() {
        let d = rct_data(200, 5, 2.0, 4);
        let out = run_sequence(&d, &config(Method::NullSampling, 1)).unwrap();
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.steps[0].covariate, 1);
        assert_eq!(out.stop_reason, StopReason::MaxSteps);
        assert_eq!(out.final_j, vec![1]);

        let out = run_sequence(&d, &config(Method::NullSampling, 5)).unwrap();
        assert!(out.steps.len() <= 5);
        let mut seen: Vec<usize> = out.steps.iter().map(|s| s.covariate).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), out.steps.len());
    }

    #[test]
    fn single_covariate_exhausts() {
        let d = rct_data(150, 1, 2.0, 5);
        let out = run_sequence(&d, &config(Method::NullSampling, 5)).unwrap();
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.stop_reason, StopReason::CandidatesExhausted);
    }

    #[test]
    fn exploratory_runs_fixed_steps() {
        let d = rct_data(100, 4, 0.0, 6);
        let cfg = config(Method::NBoot, 1);
        let out = run_sequence_exploratory(&d, &cfg, 3).unwrap();
        assert_eq!(out.steps.len(), 3);
        for s in &out.steps {
            let p = s.calibration.p_value;
            assert!((1.0 / 101.0..=1.0).contains(&p));
        }
        let all = run_sequence_exploratory(&d, &cfg, 10).unwrap();
        assert_eq!(all.steps.len(), 4);
        assert_eq!(all.stop_reason, StopReason::CandidatesExhausted);
    }

    #[test]
    fn exploratory_one_step_matches_rejecting_confirmatory_step() {
        let d = rct_data(200, 3, 2.0, 7);
        let cfg = config(Method::NullSampling, 1);
        let a = run_sequence(&d, &cfg).unwrap();
        let b = run_sequence_exploratory(&d, &cfg, 1).unwrap();
        assert_eq!(a.steps[0].decision, Decision::Rejected);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn step_one_equals_marginal_test() {
        let d = rct_data(120, 4, 0.3, 8);
        for method in [Method::NullSampling, Method::MBoot, Method::NBoot] {
            let cfg = config(method, 1);
            let seq = run_sequence(&d, &cfg).unwrap();
            let (k, cal) = marginal_test(&d, &cfg.recipe, method, &cfg.plan).unwrap();
            assert_eq!(seq.steps[0].covariate, k);
            assert_eq!(seq.steps[0].calibration, cal);
        }
    }

    #[test]
    fn column_permutation_permutes_indices_only() {
        let d = rct_data(150, 4, 1.0, 9);
        let perm = [2, 0, 3, 1];
        let pd = d.select_columns(&perm);
        let cfg = config(Method::MBoot, 3);
        let a = run_sequence_exploratory(&d, &cfg, 3).unwrap();
        let b = run_sequence_exploratory(&pd, &cfg, 3).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.name, sb.name);
            assert_eq!(perm[sb.covariate - 1] + 1, sa.covariate);
            assert_eq!(sa.calibration, sb.calibration);
        }
    }

    #[test]
    fn rejects_zero_steps() {
        let d = rct_data(50, 2, 0.0, 1);
        assert!(run_sequence(&d, &config(Method::NBoot, 0)).is_err());
        assert!(run_sequence_exploratory(&d, &config(Method::NBoot, 1), 0).is_err());
    }
}
