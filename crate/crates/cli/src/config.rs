//! Run configuration: a TOML document, overridden by environment variables
//! and then by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqint_core::calibration::DEFAULT_SEED;
use seqint_core::nuisance::NuisanceSpec;
use seqint_core::recipe::OutcomeFitRows;
use seqint_core::simgen::{CovariateLaw, McMethod, Scenario, StudyConfig};
use seqint_core::{BootstrapPlan, Method, PretestCount, Recipe, RecipeKind};

use crate::csv_input::Bindings;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Test,
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub outcome: String,
    pub treatment: String,
    /// Known-propensity column; absent or `"none"` for no such column.
    pub propensity: Option<String>,
    /// Covariate columns; absent means all remaining columns.
    pub covariates: Option<Vec<String>>,
    pub drop_incomplete: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            outcome: "y".into(),
            treatment: "a".into(),
            propensity: None,
            covariates: None,
            drop_incomplete: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub d: f64,
    pub c: f64,
    pub m_floor: Option<usize>,
    pub m_null: usize,
    pub pretest_count: PretestCount,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        let p = BootstrapPlan::default();
        Self {
            b: p.b,
            d: p.d,
            c: p.c,
            m_floor: p.m_floor,
            m_null: p.m_null,
            pretest_count: p.pretest_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    /// `E(Y|X)` for the randomized-trial recipe.
    pub phi: Option<NuisanceSpec>,
    /// `E(Y|X, A=0)` for the doubly robust recipe.
    pub h: Option<NuisanceSpec>,
    /// Propensity model for the doubly robust recipe.
    pub q: Option<NuisanceSpec>,
    pub h_rows: OutcomeFitRows,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            phi: None,
            h: None,
            q: None,
            h_rows: OutcomeFitRows::Untreated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Canonical scenario name (`N1`, `S1`, `S2`, `D1-null`, `D2-S1`, ...).
    pub scenario: Option<String>,
    pub n: usize,
    pub p: usize,
    /// Multiplier on the canonical interaction size.
    pub signal_scale: f64,
    /// Replaces the canonical covariate law.
    pub covariates: Option<CovariateLaw>,
    /// Fully specified scenario, instead of a canonical one.
    pub custom: Option<Scenario>,
    pub reps: usize,
    pub methods: Vec<McMethod>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            n: 250,
            p: 10,
            signal_scale: 1.0,
            covariates: None,
            custom: None,
            reps: 1000,
            methods: vec![McMethod::NullSampling, McMethod::MBoot, McMethod::NBoot],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` uses one per core. Does not affect results.
    pub workers: Option<usize>,
    pub alpha: f64,
    pub recipe: RecipeKind,
    pub method: Method,
    /// Maximum number of steps.
    pub steps: usize,
    /// Run exactly this many steps, ignoring the stopping rule.
    pub fixed_steps: Option<usize>,
    pub out: PathBuf,
    pub format: Format,
    /// Record wall-clock times and worker count in the report.
    pub timestamps: bool,
    pub data: DataConfig,
    pub bootstrap: BootstrapConfig,
    pub nuisance: NuisanceConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            workers: None,
            alpha: 0.05,
            recipe: RecipeKind::Rct,
            method: Method::MBoot,
            steps: 5,
            fixed_steps: None,
            out: PathBuf::from("seqint-report.json"),
            format: Format::Json,
            timestamps: false,
            data: DataConfig::default(),
            bootstrap: BootstrapConfig::default(),
            nuisance: NuisanceConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self, mode: Mode) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        if self.steps == 0 || self.fixed_steps == Some(0) {
            return bad("step counts must be positive");
        }
        let has_scenario = self.simulate.scenario.is_some() || self.simulate.custom.is_some();
        match mode {
            Mode::Test => {
                if self.data.path.is_none() {
                    return bad("a data path is required for `test`");
                }
                if has_scenario {
                    return bad("give either a data path or a scenario, not both");
                }
            }
            Mode::Simulate => {
                if self.data.path.is_some() {
                    return bad("give either a data path or a scenario, not both");
                }
                if self.simulate.scenario.is_some() == self.simulate.custom.is_some() {
                    return bad("`simulate` needs exactly one of a scenario name or a custom scenario");
                }
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> BootstrapPlan {
        BootstrapPlan {
            b: self.bootstrap.b,
            d: self.bootstrap.d,
            c: self.bootstrap.c,
            alpha: self.alpha,
            m_floor: self.bootstrap.m_floor,
            m_null: self.bootstrap.m_null,
            seed: self.seed,
            pretest_count: self.bootstrap.pretest_count,
        }
    }

    pub fn recipe(&self) -> Recipe {
        let mut r = match self.recipe {
            RecipeKind::Rct => Recipe::rct(),
            RecipeKind::DoublyRobust => Recipe::doubly_robust(),
        };
        let nz = &self.nuisance;
        if let Some(s) = &nz.phi {
            r.phi = s.clone();
        }
        if let Some(s) = &nz.h {
            r.h = s.clone();
        }
        if let Some(s) = &nz.q {
            r.q = s.clone();
        }
        r.h_rows = nz.h_rows;
        r
    }

    pub fn bindings(&self) -> Bindings {
        Bindings {
            outcome: self.data.outcome.clone(),
            treatment: self.data.treatment.clone(),
            propensity: self.data.propensity.clone().filter(|p| p != "none"),
            covariates: self.data.covariates.clone(),
        }
    }

    pub fn scenario(&self) -> CliResult<Scenario> {
        let sim = &self.simulate;
        let mut s = match (&sim.scenario, &sim.custom) {
            (Some(name), None) => Scenario::named(name, sim.n, sim.p)?.scale_interactions(sim.signal_scale),
            (None, Some(custom)) => custom.clone(),
            _ => {
                return Err(CliError::Config(
                    "`simulate` needs exactly one of a scenario name or a custom scenario".into(),
                ))
            }
        };
        if let Some(law) = sim.covariates {
            s.covariates = law;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn study(&self) -> CliResult<StudyConfig> {
        Ok(StudyConfig {
            scenario: self.scenario()?,
            methods: self.simulate.methods.clone(),
            reps: self.simulate.reps,
            plan: self.plan(),
            max_steps: self.steps,
            seed: self.seed,
        })
    }

    /// The configuration with fields that cannot change results cleared:
    /// worker count, output location and timing.
    pub fn semantic(&self) -> RunConfig {
        RunConfig {
            workers: None,
            out: PathBuf::new(),
            format: Format::Json,
            timestamps: false,
            ..self.clone()
        }
    }

    /// SHA-256 of the semantic configuration's JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.semantic()).expect("configuration serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 7
            method = "null"
            recipe = "dr"
            [data]
            path = "x.csv"
            propensity = "none"
            [bootstrap]
            B = 200
            [nuisance.phi]
            kind = "ridge"
            penalty = { fixed = 1.0 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.method, Method::NullSampling);
        assert_eq!(cfg.recipe, RecipeKind::DoublyRobust);
        assert_eq!(cfg.bootstrap.b, 200);
        assert_eq!(cfg.bindings().propensity, None);
        assert_eq!(cfg.steps, 5);
        let back = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.workers = Some(8);
        b.out = "elsewhere.json".into();
        b.timestamps = true;
        assert_eq!(a.hash(), b.hash());
        for change in [
            |c: &mut RunConfig| c.seed += 1,
            |c: &mut RunConfig| c.alpha = 0.1,
            |c: &mut RunConfig| c.bootstrap.b = 500,
            |c: &mut RunConfig| c.data.drop_incomplete = true,
            |c: &mut RunConfig| c.simulate.reps = 200,
        ] {
            let mut c = a.clone();
            change(&mut c);
            assert_ne!(a.hash(), c.hash());
        }
    }

    #[test]
    fn mode_requirements() {
        let mut c = RunConfig::default();
        assert!(c.validate(Mode::Test).is_err());
        c.data.path = Some("d.csv".into());
        assert!(c.validate(Mode::Test).is_ok());
        assert!(c.validate(Mode::Simulate).is_err());
        c.data.path = None;
        c.simulate.scenario = Some("N1".into());
        assert!(c.validate(Mode::Simulate).is_ok());
    }

    #[test]
    fn non_pd_correlation_is_an_input_error() {
        let mut c = RunConfig::default();
        c.simulate.scenario = Some("N1".into());
        c.simulate.covariates = Some(CovariateLaw::Equicorrelated { rho: -0.5 });
        let err = c.study().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
