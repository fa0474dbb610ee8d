//! Command-line surface. Flags override environment variables, which
//! override the configuration file.

use std::collections::hash_map::RandomState;
use std::hash::{BuildHasher, Hasher};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqint_core::simgen::{CovariateLaw, McMethod};
use seqint_core::{Method, RecipeKind};

use crate::config::{Format, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "seqint", version, about = "Sequential tests for treatment-effect heterogeneity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sequential procedure on a CSV file.
    Test(TestArgs),
    /// Run a Monte Carlo study on a simulated scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RecipeArg {
    Rct,
    Dr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Null,
    Mboot,
    Nboot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LawArg {
    Iid,
    Equicorrelated,
    Ar1,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub recipe: Option<RecipeArg>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Maximum number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Geometric ratio of the resample-size grid.
    #[arg(long)]
    pub d: Option<f64>,
    /// Pre-test constant.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, env = "SEQINT_SEED")]
    pub seed: Option<u64>,
    /// Draw the seed from operating-system entropy; it is recorded in the report.
    #[arg(long, conflicts_with = "seed")]
    pub entropy_seed: bool,
    #[arg(long, env = "SEQINT_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Record creation time, elapsed time and worker count in the report.
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Known-propensity column, or `none`.
    #[arg(long)]
    pub propensity: Option<String>,
    /// Comma-separated covariate columns (default: all remaining).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Skip rows with a missing bound field instead of failing.
    #[arg(long)]
    pub drop_incomplete: bool,
    /// Run exactly this many steps, ignoring the stopping rule.
    #[arg(long)]
    pub fixed_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Canonical scenario: N1, S1, S2, D1-null, D1-S1, D1-S2, D2-null, ...
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Multiplier on the canonical interaction size.
    #[arg(long)]
    pub signal_scale: Option<f64>,
    /// Comma-separated methods: null, mboot, nboot, mboot-dr, nboot-dr, bonf, lrt.
    #[arg(long, value_delimiter = ',', value_parser = parse_mc_method)]
    pub methods: Option<Vec<McMethod>>,
    /// Covariate law replacing the scenario's own.
    #[arg(long, value_enum, requires = "rho")]
    pub law: Option<LawArg>,
    /// Correlation parameter for `--law`.
    #[arg(long)]
    pub rho: Option<f64>,
}

fn parse_mc_method(s: &str) -> Result<McMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown method `{s}`"))
}

fn base_config(path: Option<&PathBuf>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn entropy_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default(),
    );
    h.finish()
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(r) = self.recipe {
            cfg.recipe = match r {
                RecipeArg::Rct => RecipeKind::Rct,
                RecipeArg::Dr => RecipeKind::DoublyRobust,
            };
        }
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Null => Method::NullSampling,
                MethodArg::Mboot => Method::MBoot,
                MethodArg::Nboot => Method::NBoot,
            };
        }
        if let Some(f) = self.format {
            cfg.format = match f {
                FormatArg::Json => Format::Json,
                FormatArg::Csv => Format::Csv,
            };
        }
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.bootstrap.b, self.b);
        set(&mut cfg.bootstrap.d, self.d);
        set(&mut cfg.bootstrap.c, self.c);
        set(&mut cfg.seed, self.seed);
        if self.entropy_seed {
            cfg.seed = entropy_seed();
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        set(&mut cfg.out, self.out.clone());
        cfg.timestamps |= self.timestamps;
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TestArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = base_config(self.common.config.as_ref())?;
        self.common.apply(&mut cfg);
        if self.data.is_some() {
            cfg.data.path = self.data.clone();
        }
        set(&mut cfg.data.outcome, self.outcome.clone());
        set(&mut cfg.data.treatment, self.treatment.clone());
        if let Some(p) = &self.propensity {
            cfg.data.propensity = (p != "none").then(|| p.clone());
        }
        if self.covariates.is_some() {
            cfg.data.covariates = self.covariates.clone();
        }
        cfg.data.drop_incomplete |= self.drop_incomplete;
        if self.fixed_steps.is_some() {
            cfg.fixed_steps = self.fixed_steps;
        }
        Ok(cfg)
    }
}

impl SimulateArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = base_config(self.common.config.as_ref())?;
        self.common.apply(&mut cfg);
        let sim = &mut cfg.simulate;
        if self.scenario.is_some() {
            sim.scenario = self.scenario.clone();
            sim.custom = None;
        }
        set(&mut sim.n, self.n);
        set(&mut sim.p, self.p);
        set(&mut sim.reps, self.reps);
        set(&mut sim.signal_scale, self.signal_scale);
        set(&mut sim.methods, self.methods.clone());
        if let Some(law) = self.law {
            let rho = self.rho.ok_or_else(|| CliError::Config("--law needs --rho".into()))?;
            sim.covariates = Some(match law {
                LawArg::Iid => CovariateLaw::Iid,
                LawArg::Equicorrelated => CovariateLaw::Equicorrelated { rho },
                LawArg::Ar1 => CovariateLaw::Ar1 { rho },
            });
        } else if let Some(rho) = self.rho {
            sim.covariates = Some(CovariateLaw::Equicorrelated { rho });
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 5\nalpha = 0.1\n[bootstrap]\nB = 300\n").unwrap();
        let cli = parse(&[
            "seqint", "test", "--config", file.to_str().unwrap(), "--data", "d.csv", "--B", "200", "--method", "null",
            "--propensity", "none", "--recipe", "dr",
        ]);
        let Command::Test(t) = cli.command else { panic!() };
        let cfg = t.resolve().unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.bootstrap.b, 200);
        assert_eq!(cfg.method, Method::NullSampling);
        assert_eq!(cfg.recipe, RecipeKind::DoublyRobust);
        assert_eq!(cfg.data.propensity, None);
    }

    #[test]
    fn simulate_flags() {
        let cli = parse(&[
            "seqint", "simulate", "--scenario", "S1", "--reps", "100", "--methods", "null,mboot,lrt", "--law", "ar1",
            "--rho", "0.3", "--format", "csv",
        ]);
        let Command::Simulate(s) = cli.command else { panic!() };
        let cfg = s.resolve().unwrap();
        assert_eq!(cfg.simulate.methods, vec![McMethod::NullSampling, McMethod::MBoot, McMethod::Lrt]);
        assert_eq!(cfg.simulate.covariates, Some(CovariateLaw::Ar1 { rho: 0.3 }));
        assert_eq!(cfg.format, Format::Csv);
        assert!(Cli::try_parse_from(["seqint", "simulate", "--methods", "bogus"]).is_err());
    }
}
