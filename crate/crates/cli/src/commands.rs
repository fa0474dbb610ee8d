//! The `test` and `simulate` commands.

use std::fmt::Write as _;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use seqint_core::simgen::{mc_study, McReport};
use seqint_core::{run_sequence, run_sequence_exploratory, SequenceConfig, SequenceResult};

use crate::config::{Mode, RunConfig};
use crate::csv_input::load_csv;
use crate::error::{CliError, CliResult};
use crate::report::{InputSummary, ReportBody, ReportDocument};

/// Loads the data, runs the sequential procedure and builds the report.
pub fn cmd_test(cfg: &RunConfig) -> CliResult<ReportDocument> {
    cfg.validate(Mode::Test)?;
    let started = Instant::now();
    let path = cfg.data.path.as_deref().ok_or_else(|| CliError::Config("no data path".into()))?;
    let loaded = load_csv(path, &cfg.bindings(), cfg.data.drop_incomplete)?;
    let data = &loaded.dataset;
    let seq = SequenceConfig::new(cfg.recipe(), cfg.method, cfg.plan(), cfg.steps);
    let result = match cfg.fixed_steps {
        Some(k) => run_sequence_exploratory(data, &seq, k)?,
        None => run_sequence(data, &seq)?,
    };
    let input = InputSummary {
        rows_read: loaded.rows_read,
        rows_dropped: loaded.dropped,
        n: data.n(),
        covariates: data.names().to_vec(),
        known_propensity: data.q0().is_some(),
    };
    let mut doc = ReportDocument::new(cfg, Some(input), ReportBody::Test(result));
    stamp(&mut doc, cfg, started);
    Ok(doc)
}

/// Runs the Monte Carlo study described by the configuration.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<ReportDocument> {
    cfg.validate(Mode::Simulate)?;
    let started = Instant::now();
    let study = cfg.study()?;
    let mut report = mc_study(&study)?;
    if cfg.timestamps {
        report.elapsed_seconds = Some(started.elapsed().as_secs_f64());
    }
    let mut doc = ReportDocument::new(cfg, None, ReportBody::Simulate(report));
    stamp(&mut doc, cfg, started);
    Ok(doc)
}

fn stamp(doc: &mut ReportDocument, cfg: &RunConfig, started: Instant) {
    if !cfg.timestamps {
        return;
    }
    let p = &mut doc.provenance;
    p.created_unix = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    p.elapsed_seconds = Some(started.elapsed().as_secs_f64());
    p.workers = Some(rayon::current_num_threads());
}

/// Human-readable summary of a report.
pub fn render(doc: &ReportDocument) -> String {
    match &doc.body {
        ReportBody::Test(res) => render_sequence(res),
        ReportBody::Simulate(rep) => render_study(rep),
    }
}

fn render_sequence(res: &SequenceResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4}  {:<16} {:>11} {:>6} {:>3} {:>8}",
        "step", "covariate", "coefficient", "m_hat", "r", "p"
    );
    for st in &res.steps {
        let c = &st.calibration;
        let _ = writeln!(
            s,
            "{:>4}  {:<16} {:>11.4} {:>6} {:>3} {:>8.4}",
            st.step_index,
            format!("{} ({})", st.name, st.covariate),
            st.coef,
            c.m_hat,
            c.r_hat,
            c.p_value
        );
    }
    let names: Vec<String> = res
        .steps
        .iter()
        .filter(|st| res.final_j.contains(&st.covariate))
        .map(|st| st.name.clone())
        .collect();
    let _ = writeln!(
        s,
        "selected: [{}]  stop: {:?}{}",
        names.join(", "),
        res.stop_reason,
        if res.exploratory { "  (exploratory)" } else { "" }
    );
    s
}

fn render_study(rep: &McReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scenario {} (n = {}, p = {}), {} repetitions",
        rep.config.scenario.label, rep.config.scenario.n, rep.config.scenario.p, rep.config.reps
    );
    let _ = writeln!(
        s,
        "{:<14} {:>4} {:>7} {:>15} {:>15} {:>15}",
        "method", "step", "reached", "power", "null", "selection"
    );
    let cell = |c: &seqint_core::simgen::StepCell| c.rate.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
    for t in &rep.tables {
        for row in &t.steps {
            let _ = writeln!(
                s,
                "{:<14} {:>4} {:>7} {:>15} {:>15} {:>15}",
                t.method.label(),
                row.step,
                row.reached,
                cell(&row.power),
                cell(&row.null),
                cell(&row.selection)
            );
        }
        if t.failed_reps > 0 {
            let _ = writeln!(s, "{:<14} {} repetitions failed", t.method.label(), t.failed_reps);
        }
    }
    s
}
