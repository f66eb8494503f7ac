//! Command-line surface: one `dispatch` entry point mapping argv to an
//! exit code plus rendered text, so the binary stays a thin wrapper
//! and tests can drive the whole command set in-process.
//!
//! Exit codes: 0 success, 2 usage errors (argument parsing; no
//! campaign file is touched), 1 domain errors (the command was
//! understood but refused; the campaign directory is left exactly as
//! it was). One deliberate exception to the last rule: when an
//! objective evaluation fails mid-batch, the losses recorded before
//! the failure are persisted — the failed and later runs stay queued
//! for a retry — and the command still exits 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::campaign::config::{self, CcdParams};
use crate::campaign::store::CampaignDir;
use crate::campaign::{ledger, Campaign, CampaignReport, Config, Phase, RunRecord};
use crate::doe::{self, CcdSpec, DecodedSettings, FactorSpec};
use crate::error::{Error, Result};
use crate::regress::{self, ModelOrder, RegressionFit};
use crate::search::{StationaryAnalysis, SurfaceClass};

/// What a command produced: the process exit code and the text to
/// print (stdout when the code is 0, stderr otherwise).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub output: String,
}

#[derive(Parser)]
#[command(
    name = "rsmtune",
    version,
    about = "Sequential response-surface tuner: factorial screening, steepest descent, \
             central composite designs, canonical analysis"
)]
struct Cli {
    /// Campaign directory to operate on.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a campaign directory from a config file.
    Init {
        /// Config file path; falls back to $RSMTUNE_CONFIG.
        config: Option<PathBuf>,
        /// Directory to create; falls back to --dir.
        target: Option<PathBuf>,
    },
    /// Show phase, factors, queue, and the best run so far.
    Status,
    /// Export the pending queue as a CSV for offline evaluation.
    Design {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate pending runs with the configured objective.
    Run {
        /// Worker threads; falls back to $RSMTUNE_JOBS, then the config.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Record losses from a results CSV (the `design` format with the
    /// loss column filled in).
    Import { results: PathBuf },
    /// Print the regression table for the current phase.
    Fit,
    /// Drop factors from the active set: an explicit list, or every
    /// factor whose screening p-value exceeds a threshold.
    Drop {
        #[arg(long)]
        p_threshold: Option<f64>,
        names: Vec<String>,
    },
    /// Enqueue the path of steepest descent from the current fit.
    Descend {
        /// Number of steps; step i probes distance i from the center.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Re-center on the best descent run and enqueue the central
    /// composite design.
    Ccd {
        /// Per-factor half-width override, NAME=VALUE (repeatable).
        #[arg(long = "half-width", value_name = "NAME=VALUE")]
        half_width: Vec<String>,
    },
    /// Canonical analysis of the fitted second-order surface.
    Analyze,
    /// Enqueue confirmation replicates at the stationary point
    /// (`--replicates 0` finishes with a report instead).
    Confirm {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Budget, best run, and stationary-point summary.
    Report,
    /// Compare the D-criterion of two design description files.
    DCompare {
        design_a: PathBuf,
        design_b: PathBuf,
    },
}

/// Environment lookup, injectable for tests.
pub type EnvLookup<'a> = &'a dyn Fn(&str) -> Option<String>;

pub fn dispatch(argv: &[String]) -> CommandOutcome {
    dispatch_with_env(argv, &|key| std::env::var(key).ok())
}

pub fn dispatch_with_env(argv: &[String], env: EnvLookup) -> CommandOutcome {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let exit_code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            return CommandOutcome {
                exit_code,
                output: e.to_string(),
            };
        }
    };
    match execute(cli, env) {
        Ok(output) => CommandOutcome {
            exit_code: 0,
            output,
        },
        Err(e) => CommandOutcome {
            exit_code: match e {
                Error::Usage(_) => 2,
                _ => 1,
            },
            output: format!("error: {e}\n"),
        },
    }
}

/// Appends ledger rows, then rewrites the state. This order makes a
/// crash between the two recoverable (see the store's reconciliation).
fn persist(store: &CampaignDir, campaign: &Campaign, rows: &[RunRecord]) -> Result<()> {
    store.append_records(&campaign.state, rows)?;
    store.save_state(&campaign.state)
}

fn execute(cli: Cli, env: EnvLookup) -> Result<String> {
    match cli.command {
        Cmd::Init { config, target } => {
            let config_path = config
                .or_else(|| env("RSMTUNE_CONFIG").map(PathBuf::from))
                .ok_or_else(|| {
                    Error::Usage(
                        "init needs a config path (argument or $RSMTUNE_CONFIG)".into(),
                    )
                })?;
            let target = target.unwrap_or(cli.dir);
            let cfg = Config::from_file(&config_path)?;
            let campaign = Campaign::init(cfg)?;
            let _store = CampaignDir::create(&target, &campaign)?;
            Ok(format!(
                "initialized campaign in {} ({} factors, {} screening runs enqueued)\n{}\n",
                target.display(),
                campaign.state.factors.len(),
                campaign.state.pending.len(),
                next_hint(&campaign)
            ))
        }
        Cmd::Status => {
            let (_store, campaign) = CampaignDir::open(&cli.dir)?;
            Ok(render_status(&campaign))
        }
        Cmd::Design { out } => {
            let (_store, campaign) = CampaignDir::open(&cli.dir)?;
            let csv = campaign.pending_csv();
            let n = campaign.state.pending.len();
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    Ok(format!("wrote {} pending runs to {}\n", n, path.display()))
                }
                None => Ok(csv),
            }
        }
        Cmd::Run { jobs } => {
            let env_jobs = match env("RSMTUNE_JOBS") {
                Some(v) => Some(v.parse::<usize>().map_err(|_| {
                    Error::Usage(format!("$RSMTUNE_JOBS must be a positive integer, got `{v}`"))
                })?),
                None => None,
            };
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let jobs = jobs.or(env_jobs).unwrap_or(campaign.state.config.jobs);
            let before = campaign.state.phase;
            let outcome = if campaign.state.config.autopilot {
                campaign.run_autopilot(jobs)?
            } else {
                campaign.evaluate_pending(jobs)?
            };
            persist(&store, &campaign, &outcome.recorded)?;
            if let Some((run_id, detail)) = outcome.failure {
                // The successes above are already durable; surface the
                // failure so the operator can fix the objective and rerun.
                return Err(Error::EvaluationFailed { run_id, detail });
            }
            let mut text = format!(
                "evaluated {} runs with {} worker{}\n",
                outcome.recorded.len(),
                jobs,
                if jobs == 1 { "" } else { "s" }
            );
            if campaign.state.phase != before {
                text.push_str(&format!("phase: {} -> {}\n", before, campaign.state.phase));
            }
            if let Some(best) = campaign.best_record() {
                text.push_str(&format!(
                    "best so far: run {} loss {}\n",
                    best.run_id, best.loss
                ));
            }
            text.push_str(&next_hint(&campaign));
            text.push('\n');
            Ok(text)
        }
        Cmd::Import { results } => {
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let names = campaign.factor_names();
            let pairs = ledger::parse_import(&results, &names)?;
            let total = pairs.len();
            let recorded = campaign.submit(&pairs)?;
            persist(&store, &campaign, &recorded)?;
            let mut text = format!("recorded {} runs from {}", recorded.len(), results.display());
            let duplicates = total - recorded.len();
            if duplicates > 0 {
                text.push_str(&format!(" ({duplicates} rows were already recorded)"));
            }
            text.push('\n');
            text.push_str(&next_hint(&campaign));
            text.push('\n');
            Ok(text)
        }
        Cmd::Fit => {
            let (_store, campaign) = CampaignDir::open(&cli.dir)?;
            let fit = campaign.current_fit()?;
            Ok(render_fit(&fit))
        }
        Cmd::Drop { p_threshold, names } => {
            if p_threshold.is_some() && !names.is_empty() {
                return Err(Error::Usage(
                    "pass either --p-threshold or an explicit factor list, not both".into(),
                ));
            }
            if let Some(t) = p_threshold {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Usage(format!(
                        "--p-threshold must lie in [0, 1], got {t}"
                    )));
                }
            }
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let drops = if names.is_empty() {
                let fit = campaign.screening_fit()?;
                let threshold = p_threshold.unwrap_or(campaign.state.config.drop.p_threshold);
                let factor_names = campaign
                    .active_indices()
                    .iter()
                    .map(|&i| campaign.state.factors[i].original.name.clone())
                    .collect::<Vec<_>>();
                Campaign::select_drops(&fit, &factor_names, threshold)
            } else {
                names
            };
            if drops.is_empty() {
                return Ok("dropped: (none)\n".to_string());
            }
            campaign.drop_factors(&drops)?;
            persist(&store, &campaign, &[])?;
            let held: Vec<String> = campaign
                .state
                .factors
                .iter()
                .filter(|f| drops.contains(&f.original.name))
                .map(|f| {
                    format!(
                        "{}={}",
                        f.original.name,
                        f.held.as_ref().expect("just dropped")
                    )
                })
                .collect();
            Ok(format!(
                "dropped: {}\nheld at: {}\n",
                drops.join(", "),
                held.join(", ")
            ))
        }
        Cmd::Descend { steps } => {
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let steps = steps.unwrap_or(campaign.state.config.descent.steps);
            let schedule: Vec<f64> = (1..=steps).map(|i| -(i as f64)).collect();
            let n = campaign.begin_descent(&schedule)?;
            persist(&store, &campaign, &[])?;
            Ok(format!(
                "enqueued {n} descent runs (t = -1..-{steps})\n{}\n",
                next_hint(&campaign)
            ))
        }
        Cmd::Ccd { half_width } => {
            let mut overrides = BTreeMap::new();
            for pair in &half_width {
                let (name, value) = parse_half_width(pair)?;
                overrides.insert(name, value);
            }
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let n = campaign.recenter_and_ccd(&overrides)?;
            persist(&store, &campaign, &[])?;
            Ok(format!(
                "re-centered; enqueued {n} ccd runs around {}\n{}\n",
                render_settings(&campaign.current_center()),
                next_hint(&campaign)
            ))
        }
        Cmd::Analyze => {
            let (_store, campaign) = CampaignDir::open(&cli.dir)?;
            let analysis = campaign.analysis()?;
            Ok(render_analysis(&analysis))
        }
        Cmd::Confirm { replicates } => {
            let (store, mut campaign) = CampaignDir::open(&cli.dir)?;
            let replicates = replicates.unwrap_or(campaign.state.config.confirm.replicates);
            let n = campaign.confirm(replicates)?;
            persist(&store, &campaign, &[])?;
            if n == 0 {
                Ok(format!(
                    "campaign finished without confirmation runs\n{}\n",
                    next_hint(&campaign)
                ))
            } else {
                let at = campaign
                    .state
                    .pending
                    .first()
                    .map(|run| render_settings(&campaign.pending_settings(run)))
                    .expect("confirm just enqueued replicates");
                Ok(format!(
                    "enqueued {n} confirmation replicates at {at}\n{}\n",
                    next_hint(&campaign)
                ))
            }
        }
        Cmd::Report => {
            let (_store, campaign) = CampaignDir::open(&cli.dir)?;
            Ok(render_report(&campaign.report()))
        }
        Cmd::DCompare { design_a, design_b } => {
            let a = score_design_file(&design_a)?;
            let b = score_design_file(&design_b)?;
            let mut out = format!(
                "design A ({}): {} runs, {} model terms, D = {:.6e}\n\
                 design B ({}): {} runs, {} model terms, D = {:.6e}\n",
                design_a.display(),
                a.runs,
                a.terms,
                a.d,
                design_b.display(),
                b.runs,
                b.terms,
                b.d,
            );
            out.push_str(&if a.d < b.d {
                "design A is the more informative design (smaller D)\n".to_string()
            } else if b.d < a.d {
                "design B is the more informative design (smaller D)\n".to_string()
            } else {
                "the designs are equally informative\n".to_string()
            });
            Ok(out)
        }
    }
}

fn parse_half_width(pair: &str) -> Result<(String, f64)> {
    let (name, value) = pair.split_once('=').ok_or_else(|| {
        Error::Usage(format!("--half-width takes NAME=VALUE, got `{pair}`"))
    })?;
    let d: f64 = value.parse().map_err(|_| {
        Error::Usage(format!("--half-width {name}: `{value}` is not a number"))
    })?;
    Ok((name.to_string(), d))
}

/// A standalone design description for `d-compare`: factors plus CCD
/// parameters, scored on the realized design.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFile {
    factors: Vec<FactorSpec>,
    #[serde(default)]
    ccd: CcdParams,
    /// Model order to score against; defaults to second.
    #[serde(default)]
    order: Option<ModelOrder>,
}

struct DesignScore {
    d: f64,
    runs: usize,
    terms: usize,
}

fn score_design_file(path: &Path) -> Result<DesignScore> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        field: path.display().to_string(),
        reason: format!("cannot read design file: {e}"),
    })?;
    let file: DesignFile = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
        field: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.factors.is_empty() {
        return Err(Error::InvalidConfig {
            field: path.display().to_string(),
            reason: "design needs at least one factor".into(),
        });
    }
    for factor in &file.factors {
        factor.validate()?;
    }
    let names: Vec<String> = file.factors.iter().map(|f| f.name.clone()).collect();
    let generators = config::resolve_generators(&names, &file.ccd.generators)?;
    let spec = CcdSpec {
        p: file.factors.len(),
        n_c: file.ccd.n_c,
        n_s: file.ccd.n_s,
        n_0: file.ccd.n_center,
        alpha: file.ccd.alpha,
        generators,
    };
    spec.validate()?;
    let ideal = doe::ccd(&spec)?;
    let realized = doe::realized_design(&ideal, &file.factors)?;
    let order = file.order.unwrap_or(ModelOrder::Second);
    let d = doe::d_criterion(&realized, order)?;
    Ok(DesignScore {
        d,
        runs: realized.len(),
        terms: regress::n_terms(spec.p, order),
    })
}

fn render_settings(settings: &DecodedSettings) -> String {
    settings
        .iter()
        .map(|(name, value)| format!("{name}={value}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// What the operator would naturally do next, given where the campaign
/// stands.
fn next_hint(campaign: &Campaign) -> String {
    let pending = campaign.state.pending.len();
    match (campaign.state.phase, pending) {
        (Phase::Done, _) => "campaign finished; `report` prints the summary".to_string(),
        (_, n) if n > 0 => format!(
            "next: `run` to evaluate the {n} queued runs, or `design` + `import` for \
             offline evaluation"
        ),
        (Phase::Screening, _) => {
            "next: `fit` to review the screening model, `drop` to prune factors, \
             then `descend`"
                .to_string()
        }
        (Phase::Descent, _) => "next: `ccd` to re-center on the best descent run".to_string(),
        (Phase::Ccd, _) => "next: `analyze`, then `confirm --replicates R`".to_string(),
        (Phase::Confirmation, _) => "next: `report`".to_string(),
    }
}

fn render_status(campaign: &Campaign) -> String {
    let state = &campaign.state;
    let mut out = format!("phase: {}\n", state.phase);
    let active = campaign.active_indices().len();
    let held: Vec<String> = state
        .factors
        .iter()
        .filter(|f| !f.active)
        .map(|f| {
            format!(
                "{}={}",
                f.original.name,
                f.held.as_ref().expect("inactive factor always holds a value")
            )
        })
        .collect();
    out.push_str(&format!(
        "factors: {} declared, {active} active",
        state.factors.len()
    ));
    if !held.is_empty() {
        out.push_str(&format!(" (held: {})", held.join(", ")));
    }
    out.push('\n');
    if state.pending.is_empty() {
        out.push_str("pending: 0 runs\n");
    } else {
        let first = state.pending.first().expect("nonempty").run_id;
        let last = state.pending.last().expect("nonempty").run_id;
        out.push_str(&format!(
            "pending: {} runs (ids {first}..{last})\n",
            state.pending.len()
        ));
    }
    out.push_str(&format!("recorded: {} runs\n", campaign.records.len()));
    if let Some(best) = campaign.best_record() {
        out.push_str(&format!(
            "best: run {} loss {} ({})\n",
            best.run_id,
            best.loss,
            render_settings(&campaign.factor_names().into_iter().zip(best.decoded.clone()).collect())
        ));
    }
    out.push_str(&format!("center: {}\n", render_settings(&campaign.current_center())));
    out.push_str(&next_hint(campaign));
    out.push('\n');
    out
}

fn render_fit(fit: &RegressionFit) -> String {
    const HEADERS: [&str; 5] = ["Variable", "Parameter", "STD Error", "t Value", "P-value"];
    if fit.term_names.is_empty() {
        return format!("{}\n", HEADERS.join("  "));
    }
    let mut table: Vec<[String; 5]> = Vec::with_capacity(fit.term_names.len());
    for (i, name) in fit.term_names.iter().enumerate() {
        let (se, t, p) = match &fit.inference {
            Some(inf) => (
                format!("{:.4}", inf.standard_errors[i]),
                format!("{:.2}", inf.t_values[i]),
                format!("{:.4}", inf.p_values[i]),
            ),
            None => ("-".to_string(), "-".to_string(), "-".to_string()),
        };
        table.push([
            name.clone(),
            format!("{:.4}", fit.coefficients[i]),
            se,
            t,
            p,
        ]);
    }
    let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.len()).collect();
    for row in &table {
        for (j, cell) in row.iter().enumerate() {
            widths[j] = widths[j].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = format!("{:<w$}", HEADERS[0], w = widths[0]);
    for j in 1..5 {
        line.push_str(&format!("  {:>w$}", HEADERS[j], w = widths[j]));
    }
    out.push_str(line.trim_end());
    out.push('\n');
    for row in &table {
        let mut line = format!("{:<w$}", row[0], w = widths[0]);
        for j in 1..5 {
            line.push_str(&format!("  {:>w$}", row[j], w = widths[j]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str(&format!("\nruns: {}   residual dof: {}\n", fit.n_runs, fit.dof));
    if fit.inference.is_none() {
        out.push_str("(saturated fit: no residual degrees of freedom, inference unavailable)\n");
    }
    out
}

fn render_analysis(analysis: &StationaryAnalysis) -> String {
    let mut out = String::new();
    let region = if analysis.out_of_region {
        "outside the fitted region - extrapolating"
    } else {
        "within the fitted region"
    };
    match analysis.classification {
        SurfaceClass::Degenerate => {
            out.push_str("surface: degenerate (a curvature direction is numerically zero)\n")
        }
        c => out.push_str(&format!("surface: {c} ({region})\n")),
    }
    let eigs: Vec<String> = analysis.eigenvalues.iter().map(|e| format!("{e:.6}")).collect();
    out.push_str(&format!("eigenvalues: {}\n", eigs.join(", ")));
    match (&analysis.x_o_coded, &analysis.x_o_decoded) {
        (Some(coded), Some(decoded)) => {
            let coded_text: Vec<String> = coded.iter().map(|c| format!("{c:.6}")).collect();
            out.push_str(&format!(
                "stationary point (coded, active factors): {}\n",
                coded_text.join(", ")
            ));
            out.push_str(&format!(
                "stationary point: {}\n",
                render_settings(decoded)
            ));
        }
        _ => {
            out.push_str(
                "no stationary point; `confirm --replicates 0` finishes with the best \
                 observed run\n",
            );
        }
    }
    if let Some(predicted) = analysis.predicted_response {
        out.push_str(&format!("predicted response at the stationary point: {predicted:.6}\n"));
    }
    out
}

fn render_budget(report: &crate::campaign::BudgetReport) -> String {
    let p = &report.params;
    let mut out = String::from("budget\n");
    out.push_str(&format!(
        "  screening  {} corners x {} + {} centers = {}\n",
        1usize << p.k,
        p.n_c_screening,
        p.n_center_screening,
        report.screening_runs
    ));
    if report.descent_runs > 0 {
        out.push_str(&format!("  descent    {} steps\n", report.descent_runs));
    } else {
        out.push_str("  descent    (not enqueued yet)\n");
    }
    if report.ccd_runs > 0 {
        out.push_str(&format!(
            "  ccd        {} corners + {} stars + {} centers = {}\n",
            (1usize << (p.p - p.f)) * p.n_c_ccd,
            2 * p.p * p.n_s,
            p.n_center_ccd,
            report.ccd_runs
        ));
    } else {
        out.push_str("  ccd        (not enqueued yet)\n");
    }
    out.push_str(&format!("  total      {} runs", report.total));
    if report.confirm_replicates > 0 {
        out.push_str(&format!(
            " (+ {} confirmation replicates)",
            report.confirm_replicates
        ));
    }
    out.push('\n');
    out.push_str(&format!(
        "  exhaustive grids over {} factors: 2-level {}, 3-level {}, 4-level {}\n",
        p.k, report.grid_two_level, report.grid_three_level, report.grid_four_level
    ));
    out
}

fn render_report(report: &CampaignReport) -> String {
    let mut out = format!("phase: {}\n\n", report.phase);
    out.push_str(&render_budget(&report.budget));
    out.push('\n');
    if let Some(best) = &report.best {
        out.push_str(&format!("best observed: run {} loss {}\n", best.run_id, best.loss));
    } else {
        out.push_str("best observed: (no runs recorded)\n");
    }
    if let Some(class) = report.classification {
        let region = if report.out_of_region {
            "outside the fitted region - extrapolating"
        } else {
            "within the fitted region"
        };
        match class {
            SurfaceClass::Degenerate => out.push_str("surface: degenerate\n"),
            c => out.push_str(&format!("surface: {c} ({region})\n")),
        }
    }
    if let Some(stationary) = &report.stationary {
        out.push_str(&format!("stationary point: {}\n", render_settings(stationary)));
    }
    if let Some(predicted) = report.predicted {
        out.push_str(&format!("predicted at stationary point: {predicted:.6}\n"));
    }
    if let Some(mean) = report.confirmation_mean {
        out.push_str(&format!(
            "confirmation mean over {} replicates: {mean:.6}\n",
            report.confirmation_n
        ));
    }
    if let Some(recommended) = &report.recommended {
        out.push_str(&format!("recommended settings: {}\n", render_settings(recommended)));
    }
    out
}
