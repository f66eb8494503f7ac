//! Campaign orchestration: a single-writer state machine that walks
//! screening → steepest descent → central composite design →
//! confirmation, with every completed run recorded in an append-only
//! ledger.
//!
//! The struct split mirrors the on-disk layout: [`CampaignState`] is
//! the `campaign.json` document (config, phase, factor domains, the
//! pending queue, and budget counters), while the completed runs live
//! only in `runs.csv` and are loaded back as [`RunRecord`]s. Fits and
//! canonical analyses are recomputed from the ledger on demand rather
//! than persisted, which is what makes a ledger replay reconstruct the
//! exact state.
//!
//! Phase transitions never happen on their own: recording losses only
//! drains the pending queue, and each advance (dropping factors,
//! starting the descent, re-centering into a CCD, confirming) is a
//! separate operator command. The one exception is the bookkeeping
//! flip to `Done` when the last confirmation run lands. `Confirmation`
//! may also loop back to `Descent` when the fitted surface suggests
//! the optimum lies further out.

pub mod config;
pub mod ledger;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::doe::{
    ccd, full_factorial, CcdSpec, DecodedSettings, DecodedValue, Design, FactorKind, FactorSpec,
    OobPolicy, PointRole,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::objective::Objective;
use crate::regress::{self, ModelOrder, RegressionFit};
use crate::search::{self, StationaryAnalysis, SurfaceClass};

pub use config::Config;
pub use ledger::RunRecord;

/// Where the campaign currently sits in the screening → descent →
/// CCD → confirmation walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Screening,
    Descent,
    Ccd,
    Confirmation,
    Done,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Screening => "screening",
            Phase::Descent => "descent",
            Phase::Ccd => "ccd",
            Phase::Confirmation => "confirmation",
            Phase::Done => "done",
        };
        f.write_str(s)
    }
}

/// Per-factor campaign state: the declared domain, the domain the
/// current phase codes against (re-centered before each CCD), and the
/// held value once a factor has been dropped from the active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub original: FactorSpec,
    pub current: FactorSpec,
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held: Option<DecodedValue>,
}

/// An enqueued run awaiting a loss. `coded` spans the active factors
/// in declared order, in the current coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRun {
    pub run_id: u64,
    pub role: PointRole,
    pub replicate: u32,
    pub coded: Vec<f64>,
}

/// Run-count bookkeeping. Counts accumulate as designs are enqueued,
/// so the budget always reflects runs committed to, not merely
/// completed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub k: usize,
    pub n_c_screening: usize,
    pub n_center_screening: usize,
    /// Total descent runs enqueued (accumulates across loop-backs).
    pub n_t: usize,
    pub p: usize,
    pub f: usize,
    pub n_c_ccd: usize,
    pub n_s: usize,
    pub n_center_ccd: usize,
    /// Total CCD runs enqueued (accumulates across loop-backs).
    pub ccd_runs: usize,
    pub confirm_replicates: usize,
}

impl BudgetParams {
    pub fn screening_runs(&self) -> usize {
        (1usize << self.k) * self.n_c_screening + self.n_center_screening
    }

    /// Sequential-design total: screening + descent + CCD runs.
    /// Confirmation replicates are reported separately.
    pub fn total(&self) -> usize {
        self.screening_runs() + self.n_t + self.ccd_runs
    }
}

/// Budget summary with the grid-search comparators an exhaustive
/// sweep over the original k factors would have cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub params: BudgetParams,
    pub screening_runs: usize,
    pub descent_runs: usize,
    pub ccd_runs: usize,
    pub total: usize,
    pub confirm_replicates: usize,
    pub grid_two_level: u64,
    pub grid_three_level: u64,
    pub grid_four_level: u64,
}

/// The `campaign.json` document: everything needed to continue a
/// campaign apart from the completed runs themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub schema_version: u32,
    pub config: Config,
    pub config_digest: String,
    pub phase: Phase,
    pub factors: Vec<FactorState>,
    pub pending: Vec<PendingRun>,
    pub next_run_id: u64,
    pub budget: BudgetParams,
    /// (run_id, t) for the current descent batch, in schedule order.
    pub descent_ts: Vec<(u64, f64)>,
    /// First run_id of the current CCD batch; fits use only rows at or
    /// beyond it so a loop-back never mixes codings.
    pub ccd_batch_start: u64,
    /// First run_id of the current confirmation batch.
    pub confirm_batch_start: u64,
    /// Ledger file name, relative to the campaign directory.
    pub ledger_file: String,
}

/// Everything the report subcommand prints: budget, best observed run,
/// and (once a CCD has been analyzed) the stationary-point summary with
/// its confirmation comparison.
#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub phase: Phase,
    pub budget: BudgetReport,
    pub best: Option<RunRecord>,
    pub classification: Option<SurfaceClass>,
    pub out_of_region: bool,
    pub predicted: Option<f64>,
    pub stationary: Option<DecodedSettings>,
    pub confirmation_mean: Option<f64>,
    pub confirmation_n: usize,
    /// Settings to hand to the user: the stationary point when it is
    /// trustworthy, otherwise the best run observed so far.
    pub recommended: Option<DecodedSettings>,
}

/// Outcome of evaluating the pending queue: what was recorded, plus the
/// first failure (lowest run_id) if any run could not be evaluated.
/// Completed runs before the failure are kept; later successes are
/// discarded so the ledger stays independent of scheduling order.
#[derive(Debug)]
pub struct EvalOutcome {
    pub recorded: Vec<RunRecord>,
    pub failure: Option<(u64, String)>,
}

/// In-memory campaign: the persistent state plus the ledger contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub state: CampaignState,
    pub records: Vec<RunRecord>,
}

fn phase_err(command: &str, phase: Phase, reason: &str) -> Error {
    Error::PhaseError {
        command: command.to_string(),
        phase: phase.to_string(),
        reason: reason.to_string(),
    }
}

impl Campaign {
    /// Validates the config and enqueues the screening design:
    /// 2^k·n_c factorial corners plus the screening center points.
    pub fn init(config: Config) -> Result<Campaign> {
        config.validate()?;
        let k = config.factors.len();
        let corners = full_factorial(k)?;
        let digest = config.digest();
        let factors = config
            .factors
            .iter()
            .map(|f| FactorState {
                original: f.clone(),
                current: f.clone(),
                active: true,
                held: None,
            })
            .collect();
        let budget = BudgetParams {
            k,
            n_c_screening: config.screening.n_c,
            n_center_screening: config.screening.n_center,
            n_t: 0,
            p: 0,
            f: 0,
            n_c_ccd: 0,
            n_s: 0,
            n_center_ccd: 0,
            ccd_runs: 0,
            confirm_replicates: 0,
        };
        let mut campaign = Campaign {
            state: CampaignState {
                schema_version: 1,
                config,
                config_digest: digest,
                phase: Phase::Screening,
                factors,
                pending: Vec::new(),
                next_run_id: 1,
                budget,
                descent_ts: Vec::new(),
                ccd_batch_start: 0,
                confirm_batch_start: 0,
                ledger_file: "runs.csv".to_string(),
            },
            records: Vec::new(),
        };
        let mut design = Design::new(k);
        for pt in corners.points() {
            for _ in 0..campaign.state.config.screening.n_c {
                design.push(pt.coded.clone(), PointRole::Corner);
            }
        }
        for _ in 0..campaign.state.config.screening.n_center {
            design.push(vec![0.0; k], PointRole::Center);
        }
        campaign.enqueue(&design);
        Ok(campaign)
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.state.factors.iter().map(|f| f.original.name.clone()).collect()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.state
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.active)
            .map(|(i, _)| i)
            .collect()
    }

    fn active_names(&self) -> Vec<String> {
        self.active_indices()
            .iter()
            .map(|&i| self.state.factors[i].original.name.clone())
            .collect()
    }

    fn current_specs(&self) -> Vec<FactorSpec> {
        self.state.factors.iter().map(|f| f.current.clone()).collect()
    }

    /// Assigns run_ids and replicate indices (occurrence count among
    /// identical points of the same role) and appends to the queue.
    fn enqueue(&mut self, design: &Design) {
        let mut seen: HashMap<(PointRole, Vec<u64>), u32> = HashMap::new();
        for pt in design.points() {
            let key = (pt.role, pt.coded.iter().map(|c| c.to_bits()).collect());
            let replicate = *seen
                .entry(key)
                .and_modify(|c| *c += 1)
                .or_insert(0);
            self.state.pending.push(PendingRun {
                run_id: self.state.next_run_id,
                role: pt.role,
                replicate,
                coded: pt.coded.clone(),
            });
            self.state.next_run_id += 1;
        }
    }

    /// Decoded settings and realized (decode → repair → re-encode,
    /// ledger-rounded) coded values for a pending run, covering every
    /// declared factor with held ones at their held values.
    fn realize(&self, run: &PendingRun) -> (Vec<DecodedValue>, Vec<f64>) {
        let active = self.active_indices();
        let k = self.state.factors.len();
        let mut decoded = Vec::with_capacity(k);
        let mut coded = Vec::with_capacity(k);
        for (i, fs) in self.state.factors.iter().enumerate() {
            let value = if fs.active {
                let pos = active.iter().position(|&a| a == i).expect("active index");
                fs.current.decode(run.coded[pos])
            } else {
                fs.held.clone().expect("inactive factor always holds a value")
            };
            coded.push(ledger::ledger_round(fs.current.encode(value.as_f64())));
            decoded.push(value);
        }
        (decoded, coded)
    }

    /// Decoded settings of a pending run as (name, value) pairs, the
    /// form the objective and the export file consume.
    pub fn pending_settings(&self, run: &PendingRun) -> DecodedSettings {
        let (decoded, _) = self.realize(run);
        self.factor_names().into_iter().zip(decoded).collect()
    }

    /// Records completed losses. Batches are recorded in run_id order
    /// regardless of submission order; resubmitting an identical
    /// (run_id, loss) pair is a no-op, a different loss for a recorded
    /// run is a conflict, and non-finite losses are rejected outright.
    pub fn submit(&mut self, completed: &[(u64, f64)]) -> Result<Vec<RunRecord>> {
        let mut batch = completed.to_vec();
        batch.sort_by_key(|&(id, _)| id);
        let mut recorded = Vec::new();
        for (run_id, loss) in batch {
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(run_id));
            }
            if let Some(existing) = self.records.iter().find(|r| r.run_id == run_id) {
                if existing.loss == loss {
                    continue;
                }
                return Err(Error::ConflictingResult {
                    run_id,
                    existing: existing.loss,
                    resubmitted: loss,
                });
            }
            let pos = self
                .state
                .pending
                .iter()
                .position(|p| p.run_id == run_id)
                .ok_or(Error::UnknownRunId(run_id))?;
            let run = self.state.pending.remove(pos);
            let (decoded, coded) = self.realize(&run);
            let record = RunRecord {
                run_id: run.run_id,
                phase: self.state.phase,
                role: run.role,
                replicate: run.replicate,
                decoded,
                coded,
                loss,
                timestamp: ledger::now_timestamp(),
            };
            self.records.push(record.clone());
            recorded.push(record);
        }
        // Bookkeeping flip only: the campaign is finished once the last
        // confirmation run lands, there is no decision left to make.
        if self.state.phase == Phase::Confirmation
            && self.state.pending.is_empty()
            && !recorded.is_empty()
        {
            self.state.phase = Phase::Done;
        }
        Ok(recorded)
    }

    /// First-order fit of the screening rows over the active factors.
    /// Dropping a factor and refitting leaves the other coefficients
    /// unchanged (the factorial columns are orthogonal) but re-buckets
    /// the dropped columns into the residual.
    pub fn screening_fit(&self) -> Result<RegressionFit> {
        if self.state.phase == Phase::Screening && !self.state.pending.is_empty() {
            return Err(phase_err(
                "fit",
                self.state.phase,
                &format!("{} screening runs still pending", self.state.pending.len()),
            ));
        }
        let rows: Vec<&RunRecord> = self
            .records
            .iter()
            .filter(|r| r.phase == Phase::Screening)
            .collect();
        if rows.is_empty() {
            return Err(phase_err("fit", self.state.phase, "no screening runs recorded"));
        }
        let active = self.active_indices();
        let x_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let coded: Vec<f64> = active.iter().map(|&i| r.coded[i]).collect();
                regress::model_row(&coded, ModelOrder::First)
            })
            .collect();
        let x = Mat::from_rows(&x_rows);
        let y: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        let names = regress::term_names(&self.active_names(), ModelOrder::First);
        regress::ols_fit(&x, &y, ModelOrder::First, names)
    }

    /// Second-order fit of the current CCD batch over the active
    /// factors, using the realized coded values the ledger stores.
    pub fn ccd_fit(&self) -> Result<RegressionFit> {
        if self.state.phase == Phase::Ccd && !self.state.pending.is_empty() {
            return Err(phase_err(
                "fit",
                self.state.phase,
                &format!("{} ccd runs still pending", self.state.pending.len()),
            ));
        }
        let rows: Vec<&RunRecord> = self
            .records
            .iter()
            .filter(|r| r.phase == Phase::Ccd && r.run_id >= self.state.ccd_batch_start)
            .collect();
        if rows.is_empty() {
            return Err(phase_err("fit", self.state.phase, "no ccd runs recorded"));
        }
        let active = self.active_indices();
        let x_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let coded: Vec<f64> = active.iter().map(|&i| r.coded[i]).collect();
                regress::model_row(&coded, ModelOrder::Second)
            })
            .collect();
        let x = Mat::from_rows(&x_rows);
        let y: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        let names = regress::term_names(&self.active_names(), ModelOrder::Second);
        regress::ols_fit(&x, &y, ModelOrder::Second, names)
    }

    /// The fit appropriate to the current phase: first-order screening
    /// up to the descent, second-order once a CCD exists.
    pub fn current_fit(&self) -> Result<RegressionFit> {
        match self.state.phase {
            Phase::Screening | Phase::Descent => self.screening_fit(),
            Phase::Ccd | Phase::Confirmation | Phase::Done => self.ccd_fit(),
        }
    }

    /// Factors whose screening p-value strictly exceeds the threshold,
    /// in declared order. `names` must be the fit's factor names.
    pub fn select_drops(fit: &RegressionFit, names: &[String], threshold: f64) -> Vec<String> {
        let Some(inference) = &fit.inference else {
            return Vec::new();
        };
        names
            .iter()
            .enumerate()
            .filter(|(j, _)| inference.p_values[1 + j] > threshold)
            .map(|(_, n)| n.clone())
            .collect()
    }

    /// Drops the named factors from the active set, freezing each at
    /// its held level (the `mid` override if declared, else the domain
    /// midpoint) under the current coding.
    pub fn drop_factors(&mut self, names: &[String]) -> Result<()> {
        // Dropping is legal right after screening (a narrower descent)
        // or right after the descent (a reduced second-order design);
        // once a second-order batch exists its coding is fixed.
        if !matches!(self.state.phase, Phase::Screening | Phase::Descent) {
            return Err(phase_err(
                "drop",
                self.state.phase,
                "factors can only be dropped after screening or after the descent, \
                 before the second-order design",
            ));
        }
        if !self.state.pending.is_empty() {
            return Err(phase_err(
                "drop",
                self.state.phase,
                &format!("{} runs still pending", self.state.pending.len()),
            ));
        }
        let mut indices = Vec::with_capacity(names.len());
        for name in names {
            let idx = self
                .state
                .factors
                .iter()
                .position(|f| f.original.name == *name)
                .ok_or_else(|| Error::InvalidFactor {
                    name: name.clone(),
                    reason: "not a declared factor".into(),
                })?;
            if !self.state.factors[idx].active {
                return Err(Error::InvalidFactor {
                    name: name.clone(),
                    reason: "already dropped".into(),
                });
            }
            if indices.contains(&idx) {
                return Err(Error::InvalidFactor {
                    name: name.clone(),
                    reason: "listed twice".into(),
                });
            }
            indices.push(idx);
        }
        let active_count = self.active_indices().len();
        if indices.len() >= active_count {
            return Err(phase_err(
                "drop",
                self.state.phase,
                "refusing to drop every remaining factor",
            ));
        }
        for idx in indices {
            let fs = &mut self.state.factors[idx];
            let spec = &fs.current;
            fs.held = Some(spec.decode(spec.encode(spec.mid_level())));
            fs.active = false;
        }
        Ok(())
    }

    /// Starts (or, from a finished CCD, restarts) the path of steepest
    /// descent. Step lengths must be strictly negative: the path walks
    /// downhill from the current center at distance |t| per step.
    pub fn begin_descent(&mut self, t_schedule: &[f64]) -> Result<usize> {
        if t_schedule.is_empty() {
            return Err(Error::InvalidConfig {
                field: "t_schedule".into(),
                reason: "at least one step is required".into(),
            });
        }
        for &t in t_schedule {
            if !(t.is_finite() && t < 0.0) {
                return Err(Error::InvalidConfig {
                    field: "t_schedule".into(),
                    reason: format!("steps must be finite and negative for a descent, got {t}"),
                });
            }
        }
        let fit = match self.state.phase {
            Phase::Screening => {
                if !self.state.pending.is_empty() {
                    return Err(phase_err(
                        "descend",
                        self.state.phase,
                        &format!("{} screening runs still pending", self.state.pending.len()),
                    ));
                }
                self.screening_fit()?
            }
            // Loop-back: the gradient of the second-order surface at
            // the current center is its linear coefficients.
            Phase::Confirmation | Phase::Done => {
                if !self.state.pending.is_empty() {
                    return Err(phase_err(
                        "descend",
                        self.state.phase,
                        &format!("{} confirmation runs still pending", self.state.pending.len()),
                    ));
                }
                let second = self.ccd_fit()?;
                let p = self.active_indices().len();
                let mut coefficients = vec![second.coefficients[0]];
                coefficients.extend_from_slice(second.linear_coefficients(p));
                RegressionFit {
                    order: ModelOrder::First,
                    term_names: regress::term_names(&self.active_names(), ModelOrder::First),
                    coefficients,
                    inference: None,
                    n_runs: second.n_runs,
                    dof: 0,
                }
            }
            Phase::Descent | Phase::Ccd => {
                return Err(phase_err(
                    "descend",
                    self.state.phase,
                    "a descent starts from a completed screening or a confirmed ccd",
                ));
            }
        };
        let specs = self.current_specs();
        let active = self.active_indices();
        let steps = search::steepest_path(&fit, &specs, &active, t_schedule)?;
        let first_id = self.state.next_run_id;
        let mut design = Design::new(active.len());
        for step in &steps {
            design.push(step.coded.clone(), PointRole::Descent);
        }
        self.state.phase = Phase::Descent;
        self.enqueue(&design);
        self.state.descent_ts = t_schedule
            .iter()
            .enumerate()
            .map(|(i, &t)| (first_id + i as u64, t))
            .collect();
        self.state.budget.n_t += steps.len();
        Ok(steps.len())
    }

    /// The best recorded run of the current descent batch: lowest loss,
    /// ties broken toward the smaller |t| (the point nearest the
    /// previous center).
    fn best_descent(&self) -> Result<&RunRecord> {
        let mut best: Option<(&RunRecord, f64)> = None;
        for &(run_id, t) in &self.state.descent_ts {
            let Some(rec) = self.records.iter().find(|r| r.run_id == run_id) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((b, bt)) => {
                    rec.loss < b.loss || (rec.loss == b.loss && t.abs() < bt.abs())
                }
            };
            if better {
                best = Some((rec, t));
            }
        }
        best.map(|(r, _)| r).ok_or_else(|| {
            phase_err("ccd", self.state.phase, "no descent runs recorded yet")
        })
    }

    /// Default half-width for a re-centered domain: half the current
    /// coding half-width, floored to at least one level for
    /// integer-valued kinds.
    fn default_half_width(spec: &FactorSpec) -> f64 {
        let half = spec.s() / 2.0;
        match spec.kind {
            FactorKind::Continuous => half,
            FactorKind::Integer | FactorKind::Cyclic { .. } => half.floor().max(1.0),
        }
    }

    /// Re-centers every active factor's domain on the best descent run
    /// (± a half-width d per factor) and enqueues the central composite
    /// design in the new coding. Half-width precedence: argument
    /// override, then config, then the default.
    pub fn recenter_and_ccd(&mut self, overrides: &BTreeMap<String, f64>) -> Result<usize> {
        if self.state.phase != Phase::Descent {
            return Err(phase_err(
                "ccd",
                self.state.phase,
                "a ccd follows a completed descent",
            ));
        }
        if !self.state.pending.is_empty() {
            return Err(phase_err(
                "ccd",
                self.state.phase,
                &format!("{} descent runs still pending", self.state.pending.len()),
            ));
        }
        for name in overrides.keys() {
            if !self.state.factors.iter().any(|f| f.active && f.original.name == *name) {
                return Err(Error::InvalidFactor {
                    name: name.clone(),
                    reason: "not an active factor".into(),
                });
            }
        }
        let best = self.best_descent()?.clone();
        let active = self.active_indices();

        // Validate every factor before mutating any of them.
        let mut new_specs = Vec::with_capacity(active.len());
        for &i in &active {
            let fs = &self.state.factors[i];
            let spec = &fs.current;
            let name = &spec.name;
            let d = overrides
                .get(name)
                .or_else(|| self.state.config.ccd.half_widths.get(name))
                .copied()
                .unwrap_or_else(|| Self::default_half_width(spec));
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidConfig {
                    field: format!("half_widths.{name}"),
                    reason: format!("half-width must be positive, got {d}"),
                });
            }
            if !matches!(spec.kind, FactorKind::Continuous) && d.fract() != 0.0 {
                return Err(Error::InvalidConfig {
                    field: format!("half_widths.{name}"),
                    reason: format!(
                        "integer-valued factor needs an integer half-width, got {d}"
                    ),
                });
            }
            let center = best.decoded[i].as_f64();
            let (low, high) = (center - d, center + d);
            if let FactorKind::Cyclic { modulus } = spec.kind {
                if spec.policy() == OobPolicy::Clamp
                    && (low < 0.0 || high > (modulus - 1) as f64)
                {
                    return Err(Error::InvalidFactor {
                        name: name.clone(),
                        reason: format!(
                            "re-centered domain [{low}, {high}] leaves the label ring \
                             [0, {}] of a clamped cyclic factor",
                            modulus - 1
                        ),
                    });
                }
            }
            let new_spec = FactorSpec {
                name: name.clone(),
                kind: spec.kind,
                low,
                high,
                mid: None,
                oob_policy: spec.oob_policy,
            };
            new_spec.validate()?;
            new_specs.push((i, new_spec));
        }

        // Resolve generators by name against the active factors.
        let active_names = self.active_names();
        let generators =
            config::resolve_generators(&active_names, &self.state.config.ccd.generators)?;
        let spec = CcdSpec {
            p: active.len(),
            n_c: self.state.config.ccd.n_c,
            n_s: self.state.config.ccd.n_s,
            n_0: self.state.config.ccd.n_center,
            alpha: self.state.config.ccd.alpha,
            generators,
        };
        spec.validate()?;
        let design = ccd(&spec)?;

        for (i, new_spec) in new_specs {
            self.state.factors[i].current = new_spec;
        }
        self.state.phase = Phase::Ccd;
        self.state.ccd_batch_start = self.state.next_run_id;
        self.enqueue(&design);
        self.state.budget.p = spec.p;
        self.state.budget.f = spec.f();
        self.state.budget.n_c_ccd = spec.n_c;
        self.state.budget.n_s = spec.n_s;
        self.state.budget.n_center_ccd = spec.n_0;
        self.state.budget.ccd_runs += design.len();
        Ok(design.len())
    }

    /// Canonical analysis of the current CCD fit.
    pub fn analysis(&self) -> Result<StationaryAnalysis> {
        let fit = self.ccd_fit()?;
        let specs = self.current_specs();
        search::stationary_point(&fit, &specs, &self.active_indices())
    }

    /// Enqueues confirmation replicates at the stationary point, or
    /// finishes immediately when zero replicates are requested (report
    /// only). A degenerate surface has no stationary point to confirm;
    /// the report falls back to the best observed run instead.
    pub fn confirm(&mut self, replicates: usize) -> Result<usize> {
        if self.state.phase != Phase::Ccd {
            return Err(phase_err(
                "confirm",
                self.state.phase,
                "confirmation follows a completed ccd",
            ));
        }
        if !self.state.pending.is_empty() {
            return Err(phase_err(
                "confirm",
                self.state.phase,
                &format!("{} ccd runs still pending", self.state.pending.len()),
            ));
        }
        if replicates == 0 {
            self.state.phase = Phase::Done;
            return Ok(0);
        }
        let analysis = self.analysis()?;
        let Some(x_o) = analysis.x_o_coded else {
            return Err(Error::DegenerateSurface(
                "no stationary point to confirm; rerun with --replicates 0 to finish \
                 with the best observed run"
                    .into(),
            ));
        };
        let mut design = Design::new(x_o.len());
        for _ in 0..replicates {
            design.push(x_o.clone(), PointRole::Confirmation);
        }
        self.state.phase = Phase::Confirmation;
        self.state.confirm_batch_start = self.state.next_run_id;
        self.enqueue(&design);
        self.state.budget.confirm_replicates += replicates;
        Ok(replicates)
    }

    /// Lowest-loss recorded run (ties go to the earlier run).
    pub fn best_record(&self) -> Option<&RunRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&RunRecord>, r| match best {
                Some(b) if b.loss <= r.loss => Some(b),
                _ => Some(r),
            })
    }

    pub fn budget(&self) -> BudgetReport {
        let b = &self.state.budget;
        let grid = |levels: u64| levels.checked_pow(b.k as u32).unwrap_or(u64::MAX);
        BudgetReport {
            params: b.clone(),
            screening_runs: b.screening_runs(),
            descent_runs: b.n_t,
            ccd_runs: b.ccd_runs,
            total: b.total(),
            confirm_replicates: b.confirm_replicates,
            grid_two_level: grid(2),
            grid_three_level: grid(3),
            grid_four_level: grid(4),
        }
    }

    /// Current center in natural units: the decoded origin of the
    /// current coding for active factors, held values otherwise.
    pub fn current_center(&self) -> DecodedSettings {
        self.state
            .factors
            .iter()
            .map(|f| {
                let value = if f.active {
                    f.current.decode(0.0)
                } else {
                    f.held.clone().expect("inactive factor always holds a value")
                };
                (f.original.name.clone(), value)
            })
            .collect()
    }

    fn settings_of(&self, record: &RunRecord) -> DecodedSettings {
        self.factor_names()
            .into_iter()
            .zip(record.decoded.iter().cloned())
            .collect()
    }

    pub fn report(&self) -> CampaignReport {
        let analysis = self.analysis().ok();
        let confirmation: Vec<&RunRecord> = self
            .records
            .iter()
            .filter(|r| {
                r.phase == Phase::Confirmation && r.run_id >= self.state.confirm_batch_start
            })
            .collect();
        let confirmation_mean = if confirmation.is_empty() {
            None
        } else {
            Some(confirmation.iter().map(|r| r.loss).sum::<f64>() / confirmation.len() as f64)
        };
        let best = self.best_record().cloned();
        let stationary = analysis.as_ref().and_then(|a| a.x_o_decoded.clone());
        // Recommend the stationary point unless the observed evidence
        // says some earlier run beat it.
        let recommended = match (&stationary, &best) {
            (Some(x_o), Some(b)) => {
                let stationary_beaten = match confirmation_mean {
                    Some(mean) => b.loss < mean,
                    None => false,
                };
                if stationary_beaten {
                    Some(self.settings_of(b))
                } else {
                    Some(x_o.clone())
                }
            }
            (Some(x_o), None) => Some(x_o.clone()),
            (None, Some(b)) => Some(self.settings_of(b)),
            (None, None) => None,
        };
        CampaignReport {
            phase: self.state.phase,
            budget: self.budget(),
            best,
            classification: analysis.as_ref().map(|a| a.classification),
            out_of_region: analysis.as_ref().map(|a| a.out_of_region).unwrap_or(false),
            predicted: analysis.as_ref().and_then(|a| a.predicted_response),
            stationary,
            confirmation_mean,
            confirmation_n: confirmation.len(),
            recommended,
        }
    }

    /// The pending queue in the offline interchange format (the loss
    /// column left empty for the evaluator to fill in).
    pub fn pending_csv(&self) -> String {
        let names = self.factor_names();
        let mut out = ledger::import_header(&names);
        out.push('\n');
        for run in &self.state.pending {
            let (decoded, _) = self.realize(run);
            let mut row = format!(
                "{},{},{},{}",
                run.run_id, self.state.phase, run.role, run.replicate
            );
            for v in &decoded {
                row.push(',');
                row.push_str(&v.to_string());
            }
            row.push(',');
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    /// Evaluates every pending run with the configured objective, using
    /// up to `jobs` worker threads, and records the completed losses in
    /// run_id order. On a failure, successes before the failing run are
    /// kept, later ones are discarded, and the failure is reported in
    /// the outcome — the queue keeps the unevaluated runs for a retry.
    pub fn evaluate_pending(&mut self, jobs: usize) -> Result<EvalOutcome> {
        if jobs == 0 {
            return Err(Error::InvalidConfig {
                field: "jobs".into(),
                reason: "must be >= 1".into(),
            });
        }
        let originals: Vec<FactorSpec> = self
            .state
            .factors
            .iter()
            .map(|f| f.original.clone())
            .collect();
        let objective = Objective::new(self.state.config.objective.clone(), originals)?;
        let tasks: Vec<(u64, DecodedSettings)> = self
            .state
            .pending
            .iter()
            .map(|run| (run.run_id, self.pending_settings(run)))
            .collect();
        if tasks.is_empty() {
            return Ok(EvalOutcome {
                recorded: Vec::new(),
                failure: None,
            });
        }

        let mut results: Vec<(u64, std::result::Result<f64, String>)> =
            if jobs == 1 || tasks.len() == 1 {
                let mut out = Vec::with_capacity(tasks.len());
                for (run_id, settings) in &tasks {
                    let r = objective.evaluate(settings, *run_id);
                    let failed = r.is_err();
                    out.push((*run_id, r.map_err(|e| e.to_string())));
                    if failed {
                        break; // sequential mode stops at the failure
                    }
                }
                out
            } else {
                let next = AtomicUsize::new(0);
                let collected = Mutex::new(Vec::with_capacity(tasks.len()));
                std::thread::scope(|scope| {
                    for _ in 0..jobs.min(tasks.len()) {
                        scope.spawn(|| loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= tasks.len() {
                                break;
                            }
                            let (run_id, settings) = &tasks[i];
                            let r = objective.evaluate(settings, *run_id);
                            collected
                                .lock()
                                .expect("result collection never poisons")
                                .push((*run_id, r.map_err(|e| e.to_string())));
                        });
                    }
                });
                collected.into_inner().expect("threads joined")
            };

        results.sort_by_key(|&(id, _)| id);
        let mut completed = Vec::new();
        let mut failure = None;
        for (run_id, result) in results {
            match result {
                Ok(loss) => completed.push((run_id, loss)),
                Err(detail) => {
                    failure = Some((run_id, detail));
                    break;
                }
            }
        }
        let recorded = self.submit(&completed)?;
        Ok(EvalOutcome { recorded, failure })
    }

    fn default_schedule(steps: usize) -> Vec<f64> {
        (1..=steps).map(|i| -(i as f64)).collect()
    }

    /// One default phase advance, as the autopilot would take it:
    /// drop-and-descend after screening, re-center into a CCD after the
    /// descent, confirm after the CCD (finishing on a degenerate
    /// surface instead of failing).
    fn advance_with_defaults(&mut self) -> Result<()> {
        match self.state.phase {
            Phase::Screening => {
                let fit = self.screening_fit()?;
                let names = self.active_names();
                let drops =
                    Self::select_drops(&fit, &names, self.state.config.drop.p_threshold);
                if !drops.is_empty() && drops.len() < names.len() {
                    self.drop_factors(&drops)?;
                }
                let schedule = Self::default_schedule(self.state.config.descent.steps);
                self.begin_descent(&schedule)?;
            }
            Phase::Descent => {
                self.recenter_and_ccd(&BTreeMap::new())?;
            }
            Phase::Ccd => {
                match self.confirm(self.state.config.confirm.replicates) {
                    Ok(_) => {}
                    Err(Error::DegenerateSurface(_)) => self.state.phase = Phase::Done,
                    Err(e) => return Err(e),
                }
            }
            Phase::Confirmation | Phase::Done => {
                self.state.phase = Phase::Done;
            }
        }
        Ok(())
    }

    /// Runs the whole campaign with the default rules: evaluate, then
    /// advance, until done (or until an evaluation fails, which leaves
    /// the failure in the outcome and the queue ready for a retry).
    pub fn run_autopilot(&mut self, jobs: usize) -> Result<EvalOutcome> {
        let mut recorded = Vec::new();
        loop {
            let outcome = self.evaluate_pending(jobs)?;
            recorded.extend(outcome.recorded);
            if outcome.failure.is_some() {
                return Ok(EvalOutcome {
                    recorded,
                    failure: outcome.failure,
                });
            }
            if self.state.phase == Phase::Done {
                return Ok(EvalOutcome {
                    recorded,
                    failure: None,
                });
            }
            self.advance_with_defaults()?;
        }
    }

    /// Reconstructs a campaign from its config and ledger rows by
    /// re-submitting every loss in order and re-taking the default
    /// phase advances whenever the queue empties. Each replayed row is
    /// cross-checked against the reconstruction, so a ledger that does
    /// not match the config (or was edited) is rejected.
    pub fn replay(config: Config, rows: &[RunRecord]) -> Result<Campaign> {
        let mut campaign = Campaign::init(config)?;
        let mismatch = |i: usize, what: &str| Error::Ledger {
            path: "<replay>".into(),
            line: i + 2, // 1-based, after the header
            reason: format!("row disagrees with the reconstructed campaign: {what}"),
        };
        for (i, row) in rows.iter().enumerate() {
            while !campaign.state.pending.iter().any(|p| p.run_id == row.run_id) {
                if campaign.state.pending.is_empty() && campaign.state.phase != Phase::Done {
                    campaign.advance_with_defaults()?;
                } else {
                    return Err(mismatch(i, &format!("run {} is not pending", row.run_id)));
                }
            }
            let recorded = campaign.submit(&[(row.run_id, row.loss)])?;
            let rec = &recorded[0];
            if rec.phase != row.phase || rec.role != row.role || rec.replicate != row.replicate
            {
                return Err(mismatch(i, "phase, role, or replicate differs"));
            }
            if rec.decoded != row.decoded || rec.coded != row.coded {
                return Err(mismatch(i, "decoded or coded settings differ"));
            }
            let stored = campaign
                .records
                .iter_mut()
                .find(|r| r.run_id == row.run_id)
                .expect("just recorded");
            stored.timestamp = row.timestamp.clone();
        }
        Ok(campaign)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Seven-factor tuning study: a cyclic optimizer label, five plain
    /// integers, and a small integer factor with one awkward width.
    fn seven_factor_specs() -> Vec<FactorSpec> {
        vec![
            FactorSpec::new("Op", FactorKind::Cyclic { modulus: 7 }, 0.0, 6.0).unwrap(),
            FactorSpec::new("N1", FactorKind::Integer, 10.0, 30.0).unwrap(),
            FactorSpec::new("N2", FactorKind::Integer, 5.0, 25.0).unwrap(),
            FactorSpec::new("N3", FactorKind::Integer, 5.0, 15.0).unwrap(),
            FactorSpec::new("Ep", FactorKind::Integer, 100.0, 900.0).unwrap(),
            FactorSpec::new("Bh", FactorKind::Integer, 5000.0, 15000.0).unwrap(),
            FactorSpec::new("Lr", FactorKind::Integer, 2.0, 4.0).unwrap(),
        ]
    }

    fn seven_factor_config() -> Config {
        let mut config: Config = serde_json::from_value(serde_json::json!({
            "factors": [],
            "objective": {"kind": "external", "command": ["/bin/false"]},
        }))
        .unwrap();
        config.factors = seven_factor_specs();
        config.ccd.half_widths.insert("Bh".into(), 2000.0);
        config.validate().unwrap();
        config
    }

    /// First-order coefficients the synthetic screening responses are
    /// built from, in declared-factor order.
    const BETA: [f64; 7] = [-21.8703, -0.5261, -11.0132, -0.9574, -16.005, 9.1987, -7.3396];
    const INTERCEPT: f64 = 46.0791;

    /// Synthetic screening losses: the first-order signal plus a pure
    /// interaction residual. The interaction column is orthogonal to
    /// every model column, so the fit recovers the coefficients exactly
    /// and the residual size is chosen to land the standard error of
    /// each linear term on 2.8777 (132 runs, 124 dof, Σx² = 128):
    /// se = σ̂/√128 with σ̂² = κ²·128/124, so κ = 2.8777·√124.
    fn screening_losses(campaign: &Campaign) -> Vec<(u64, f64)> {
        let kappa = 2.8777 * (124.0f64).sqrt();
        campaign
            .state
            .pending
            .iter()
            .map(|run| {
                let x = &run.coded;
                let mut y = INTERCEPT;
                for (b, xj) in BETA.iter().zip(x) {
                    y += b * xj;
                }
                y += kappa * x[0] * x[1];
                (run.run_id, y)
            })
            .collect()
    }

    fn screened_campaign() -> Campaign {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        let losses = screening_losses(&campaign);
        campaign.submit(&losses).unwrap();
        campaign
    }

    #[test]
    fn init_enqueues_screening_design() {
        let campaign = Campaign::init(seven_factor_config()).unwrap();
        assert_eq!(campaign.state.phase, Phase::Screening);
        assert_eq!(campaign.state.pending.len(), 132);
        let ids: Vec<u64> = campaign.state.pending.iter().map(|r| r.run_id).collect();
        assert_eq!(ids, (1..=132).collect::<Vec<u64>>());
        let corners = campaign
            .state
            .pending
            .iter()
            .filter(|r| r.role == PointRole::Corner)
            .count();
        let centers = campaign
            .state
            .pending
            .iter()
            .filter(|r| r.role == PointRole::Center)
            .count();
        assert_eq!((corners, centers), (128, 4));
        // Center replicates are numbered 0..4.
        let reps: Vec<u32> = campaign.state.pending[128..].iter().map(|r| r.replicate).collect();
        assert_eq!(reps, vec![0, 1, 2, 3]);
    }

    #[test]
    fn submit_validates_ids_and_losses() {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        assert!(matches!(
            campaign.submit(&[(999, 1.0)]),
            Err(Error::UnknownRunId(999))
        ));
        assert!(matches!(
            campaign.submit(&[(1, f64::NAN)]),
            Err(Error::NonFiniteLoss(1))
        ));
        campaign.submit(&[(1, 2.5)]).unwrap();
        // Identical resubmission is a no-op…
        let again = campaign.submit(&[(1, 2.5)]).unwrap();
        assert!(again.is_empty());
        assert_eq!(campaign.records.len(), 1);
        // …but a different loss for the same run is a conflict.
        match campaign.submit(&[(1, 3.0)]) {
            Err(Error::ConflictingResult {
                run_id, existing, ..
            }) => {
                assert_eq!(run_id, 1);
                assert_eq!(existing, 2.5);
            }
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn submit_orders_batches_by_run_id() {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        let recorded = campaign
            .submit(&[(3, 0.3), (1, 0.1), (2, 0.2)])
            .unwrap();
        let ids: Vec<u64> = recorded.iter().map(|r| r.run_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(campaign.records[0].run_id, 1);
    }

    #[test]
    fn screening_rows_realize_to_exact_corner_codes() {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        campaign.submit(&[(1, 1.0)]).unwrap();
        let rec = &campaign.records[0];
        // First corner is all-low.
        assert!(rec.coded.iter().all(|&c| c == -1.0));
        assert_eq!(rec.decoded[0], DecodedValue::Int(0));
        assert_eq!(rec.decoded[4], DecodedValue::Int(100));
    }

    #[test]
    fn screening_fit_recovers_planted_model() {
        let campaign = screened_campaign();
        let fit = campaign.screening_fit().unwrap();
        assert_eq!(fit.n_runs, 132);
        assert_eq!(fit.dof, 124);
        assert!((fit.coefficients[0] - INTERCEPT).abs() < 1e-9);
        for (b, c) in BETA.iter().zip(&fit.coefficients[1..]) {
            assert!((b - c).abs() < 1e-9);
        }
        let inference = fit.inference.as_ref().unwrap();
        for se in &inference.standard_errors[1..] {
            assert!((se - 2.8777).abs() < 1e-9, "se = {se}");
        }
        assert!((inference.standard_errors[0] - 2.8777 * (128.0f64 / 132.0).sqrt()).abs() < 1e-9);
        // Weak factors carry the large p-values the drop rule keys on.
        assert!((inference.p_values[2] - 0.8552).abs() < 5e-5);
        assert!((inference.p_values[4] - 0.7399).abs() < 5e-5);
    }

    #[test]
    fn drop_rule_selects_weak_factors() {
        let mut campaign = screened_campaign();
        let fit = campaign.screening_fit().unwrap();
        let names = campaign.active_names();
        let drops = Campaign::select_drops(&fit, &names, 0.5);
        assert_eq!(drops, vec!["N1".to_string(), "N3".to_string()]);
        campaign.drop_factors(&drops).unwrap();
        assert_eq!(campaign.active_indices(), vec![0, 2, 4, 5, 6]);
        // Held at the domain midpoints under the current coding.
        assert_eq!(campaign.state.factors[1].held, Some(DecodedValue::Int(20)));
        assert_eq!(campaign.state.factors[3].held, Some(DecodedValue::Int(10)));
    }

    #[test]
    fn drop_rejects_unknown_repeat_and_total_drops() {
        let mut campaign = screened_campaign();
        assert!(campaign.drop_factors(&["Nx".into()]).is_err());
        assert!(campaign.drop_factors(&["N1".into(), "N1".into()]).is_err());
        let all = campaign.active_names();
        match campaign.drop_factors(&all) {
            Err(Error::PhaseError { reason, .. }) => {
                assert!(reason.contains("every remaining factor"))
            }
            other => panic!("expected refusal, got {other:?}"),
        }
        // Nothing was mutated by the failures.
        assert_eq!(campaign.active_indices().len(), 7);
    }

    #[test]
    fn drop_requires_completed_screening() {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        assert!(matches!(
            campaign.drop_factors(&["N1".into()]),
            Err(Error::PhaseError { .. })
        ));
    }

    #[test]
    fn descent_reproduces_hand_computed_first_step() {
        let mut campaign = screened_campaign();
        let schedule = Campaign::default_schedule(10);
        assert_eq!(campaign.begin_descent(&schedule).unwrap(), 10);
        assert_eq!(campaign.state.phase, Phase::Descent);
        assert_eq!(campaign.state.pending.len(), 10);
        assert_eq!(campaign.state.budget.n_t, 10);
        // Record the whole batch and inspect the t = −1 run.
        let losses: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .map(|r| (r.run_id, 1.0))
            .collect();
        campaign.submit(&losses).unwrap();
        let first = campaign
            .records
            .iter()
            .find(|r| r.run_id == 133)
            .unwrap();
        let decoded: Vec<i64> = first
            .decoded
            .iter()
            .map(|v| match v {
                DecodedValue::Int(i) => *i,
                DecodedValue::Real(_) => panic!("integer factors expected"),
            })
            .collect();
        assert_eq!(decoded, vec![5, 20, 18, 10, 703, 8542, 3]);
        assert_eq!(first.role, PointRole::Descent);
    }

    #[test]
    fn descent_rejects_non_negative_steps() {
        let mut campaign = screened_campaign();
        assert!(campaign.begin_descent(&[]).is_err());
        assert!(campaign.begin_descent(&[-1.0, 0.0]).is_err());
        assert!(campaign.begin_descent(&[-1.0, 2.0]).is_err());
        assert_eq!(campaign.state.phase, Phase::Screening);
    }

    fn descended_campaign(drop_weak: bool) -> Campaign {
        let mut campaign = screened_campaign();
        if drop_weak {
            campaign.drop_factors(&["N1".into(), "N3".into()]).unwrap();
        }
        campaign.begin_descent(&Campaign::default_schedule(10)).unwrap();
        // Plant the minimum at t = −5, with a tie at t = −6 that the
        // |t| rule must resolve toward −5.
        let losses: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .zip([9.0, 8.0, 7.0, 6.0, 5.0, 5.0, 6.5, 7.5, 8.5, 9.5])
            .map(|(r, l)| (r.run_id, l))
            .collect();
        campaign.submit(&losses).unwrap();
        campaign
    }

    #[test]
    fn recenter_picks_best_run_breaking_ties_toward_small_t() {
        let mut campaign = descended_campaign(false);
        let best = campaign.best_descent().unwrap();
        assert_eq!(best.run_id, 137); // t = −5, not the tied t = −6
        let enqueued = campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        assert_eq!(enqueued, 146); // 2^7 + 14 + 4
        assert_eq!(campaign.state.phase, Phase::Ccd);
        assert_eq!(campaign.state.budget.total(), 288);
    }

    #[test]
    fn dropping_after_the_descent_reduces_the_second_order_design() {
        // The full-width descent walks all seven factors; the weak pair
        // is dropped only afterwards, so the second-order phase spans
        // five factors while the descent itself used the seven-factor
        // gradient.
        let mut campaign = descended_campaign(false);
        campaign
            .drop_factors(&["N1".into(), "N3".into()])
            .unwrap();
        assert_eq!(campaign.state.phase, Phase::Descent);
        let n1 = &campaign.state.factors[1];
        assert_eq!(n1.held, Some(DecodedValue::Int(20)));
        let enqueued = campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        assert_eq!(enqueued, 46); // 2^5 + 10 + 4
        assert_eq!(campaign.state.budget.total(), 188);
        // Every queued point decodes the dropped factors to held values.
        for run in &campaign.state.pending.clone() {
            let (decoded, _) = campaign.realize(run);
            assert_eq!(decoded[1], DecodedValue::Int(20));
            assert_eq!(decoded[3], DecodedValue::Int(10));
        }
    }

    #[test]
    fn recenter_applies_default_and_configured_half_widths() {
        let mut campaign = descended_campaign(false);
        // Best run (t = −5) decodes to these naturals.
        let best = campaign.best_descent().unwrap().clone();
        let center: Vec<f64> = best.decoded.iter().map(|v| v.as_f64()).collect();
        campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        for (i, fs) in campaign.state.factors.iter().enumerate() {
            let spec = &fs.current;
            let d = match spec.name.as_str() {
                "Op" | "Lr" => 1.0,         // max(1, floor(s/2)) with s = 3, 1
                "N1" | "N2" => 5.0,         // s = 10
                "N3" => 2.0,                // s = 5
                "Ep" => 200.0,              // s = 400
                "Bh" => 2000.0,             // configured override of the 2500 default
                other => panic!("unexpected factor {other}"),
            };
            assert_eq!(spec.low, center[i] - d, "{}", spec.name);
            assert_eq!(spec.high, center[i] + d, "{}", spec.name);
        }
    }

    #[test]
    fn reduced_campaign_counts_and_budget() {
        let mut campaign = descended_campaign(true);
        let enqueued = campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        assert_eq!(enqueued, 46); // 2^5 + 10 + 4
        assert_eq!(campaign.state.budget.total(), 188);
        let report = campaign.budget();
        assert_eq!(report.grid_two_level, 128);
        assert_eq!(report.grid_three_level, 2187);
        assert_eq!(report.grid_four_level, 16384);
        // Held factors keep their held values in every enqueued run.
        let run = &campaign.state.pending[0];
        let settings = campaign.pending_settings(run);
        assert_eq!(settings[1], ("N1".to_string(), DecodedValue::Int(20)));
        assert_eq!(settings[3], ("N3".to_string(), DecodedValue::Int(10)));
    }

    #[test]
    fn recenter_validates_half_width_overrides() {
        let mut campaign = descended_campaign(false);
        let mut bad = BTreeMap::new();
        bad.insert("Ep".to_string(), -1.0);
        assert!(campaign.recenter_and_ccd(&bad).is_err());
        let mut fractional = BTreeMap::new();
        fractional.insert("Ep".to_string(), 2.5);
        assert!(campaign.recenter_and_ccd(&fractional).is_err());
        let mut unknown = BTreeMap::new();
        unknown.insert("Nx".to_string(), 1.0);
        assert!(campaign.recenter_and_ccd(&unknown).is_err());
        assert_eq!(campaign.state.phase, Phase::Descent);
        assert!(campaign.state.pending.is_empty());
    }

    #[test]
    fn recenter_keeps_clamped_cyclic_factors_inside_the_ring() {
        let mut config = seven_factor_config();
        config.factors[0] = FactorSpec::new("Op", FactorKind::Cyclic { modulus: 7 }, 0.0, 6.0)
            .unwrap()
            .with_policy(OobPolicy::Clamp)
            .unwrap();
        let mut campaign = Campaign::init(config).unwrap();
        let losses = screening_losses(&campaign);
        campaign.submit(&losses).unwrap();
        campaign.begin_descent(&[-7.0]).unwrap();
        // A long step pushes Op to the clamped boundary 0; the
        // re-centered ring box [−1, 1] would leave the labels.
        let ids: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .map(|r| (r.run_id, 1.0))
            .collect();
        campaign.submit(&ids).unwrap();
        match campaign.recenter_and_ccd(&BTreeMap::new()) {
            Err(Error::InvalidFactor { name, reason }) => {
                assert_eq!(name, "Op");
                assert!(reason.contains("label ring"), "{reason}");
            }
            other => panic!("expected ring violation, got {other:?}"),
        }
    }

    /// Quadratic CCD losses in the current coding with a planted
    /// interior minimum, evaluated from the realized settings the
    /// campaign would hand an objective.
    fn ccd_losses(campaign: &Campaign, x_min: &[f64]) -> Vec<(u64, f64)> {
        let active = campaign.active_indices();
        campaign
            .state
            .pending
            .iter()
            .map(|run| {
                let (_, coded) = campaign.realize(run);
                let y: f64 = active
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let d = coded[i] - x_min[j];
                        (j + 1) as f64 * 0.25 * d * d
                    })
                    .sum();
                (run.run_id, 3.0 + y)
            })
            .collect()
    }

    #[test]
    fn confirm_enqueues_replicates_and_finishes() {
        let mut campaign = descended_campaign(true);
        campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        let x_min = vec![0.2, -0.1, 0.3, 0.15, -0.25];
        let losses = ccd_losses(&campaign, &x_min);
        campaign.submit(&losses).unwrap();

        let analysis = campaign.analysis().unwrap();
        assert_eq!(analysis.classification, SurfaceClass::Minimum);
        let x_o = analysis.x_o_coded.as_ref().unwrap();
        // Integer rounding of the realized design perturbs the fit;
        // the recovered stationary point still sits near the plant.
        for (a, b) in x_o.iter().zip(&x_min) {
            assert!((a - b).abs() < 0.15, "{a} vs {b}");
        }

        assert_eq!(campaign.confirm(3).unwrap(), 3);
        assert_eq!(campaign.state.phase, Phase::Confirmation);
        assert_eq!(campaign.state.pending.len(), 3);
        let reps: Vec<u32> = campaign.state.pending.iter().map(|r| r.replicate).collect();
        assert_eq!(reps, vec![0, 1, 2]);

        let confirmations: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .map(|r| (r.run_id, 3.01))
            .collect();
        campaign.submit(&confirmations).unwrap();
        assert_eq!(campaign.state.phase, Phase::Done);

        let report = campaign.report();
        assert_eq!(report.confirmation_n, 3);
        assert!((report.confirmation_mean.unwrap() - 3.01).abs() < 1e-12);
        assert!(report.predicted.is_some());
        assert!(report.recommended.is_some());
    }

    #[test]
    fn confirm_with_zero_replicates_finishes_immediately() {
        let mut campaign = descended_campaign(true);
        campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        let losses = ccd_losses(&campaign, &[0.0; 5]);
        campaign.submit(&losses).unwrap();
        assert_eq!(campaign.confirm(0).unwrap(), 0);
        assert_eq!(campaign.state.phase, Phase::Done);
    }

    #[test]
    fn phase_guards_reject_out_of_order_commands() {
        let mut campaign = Campaign::init(seven_factor_config()).unwrap();
        assert!(matches!(
            campaign.recenter_and_ccd(&BTreeMap::new()),
            Err(Error::PhaseError { .. })
        ));
        assert!(matches!(campaign.confirm(3), Err(Error::PhaseError { .. })));
        assert!(matches!(
            campaign.screening_fit(),
            Err(Error::PhaseError { .. })
        ));
    }

    #[test]
    fn two_factor_autopilot_recovers_builtin_minimum() {
        let config: Config = serde_json::from_value(serde_json::json!({
            "factors": [
                {"name": "a", "kind": "continuous", "low": 0.0, "high": 10.0},
                {"name": "b", "kind": "continuous", "low": 0.0, "high": 10.0},
            ],
            "objective": {
                "kind": "builtin_quadratic",
                "B": [[0.5, 0.05], [0.05, 0.5]],
                "b": [-0.32, 0.17],
                "c": 1.0,
            },
            "descent": {"steps": 6},
            // The toy surface is mostly curvature, so its first-order
            // lack of fit would push both p-values up; keep the factors.
            "drop": {"p_threshold": 0.99},
            "confirm": {"replicates": 2},
        }))
        .unwrap();
        // Analytic minimizer −½B⁻¹b of the objective, in its coded
        // frame: B⁻¹b = [−0.1685, 0.101]/det with det = 0.2475.
        let x_star = [0.1685 / 0.2475 / 2.0, -0.101 / 0.2475 / 2.0];
        let mut campaign = Campaign::init(config).unwrap();
        let outcome = campaign.run_autopilot(4).unwrap();
        assert!(outcome.failure.is_none());
        assert_eq!(campaign.state.phase, Phase::Done);

        let analysis = campaign.analysis().unwrap();
        assert_eq!(analysis.classification, SurfaceClass::Minimum);
        let decoded = analysis.x_o_decoded.as_ref().unwrap();
        let original = &campaign.state.factors[0].original;
        let a = original.encode(decoded[0].1.as_f64());
        let original_b = &campaign.state.factors[1].original;
        let b = original_b.encode(decoded[1].1.as_f64());
        // The ledger stores coded values at six decimals, which nudges
        // the otherwise-exact quadratic fit at the 1e−6 level.
        assert!((a - x_star[0]).abs() < 1e-5, "a = {a}");
        assert!((b - x_star[1]).abs() < 1e-5, "b = {b}");

        // Ledger accounting: every enqueued run got recorded exactly once.
        let budget = campaign.budget();
        assert_eq!(
            campaign.records.len(),
            budget.total + budget.confirm_replicates
        );
        let mut ids: Vec<u64> = campaign.records.iter().map(|r| r.run_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (1..=campaign.records.len() as u64).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_and_serial_evaluation_match() {
        let config: Config = serde_json::from_value(serde_json::json!({
            "factors": [
                {"name": "a", "kind": "continuous", "low": 0.0, "high": 10.0},
                {"name": "b", "kind": "continuous", "low": 0.0, "high": 10.0},
            ],
            "objective": {
                "kind": "builtin_quadratic",
                "B": [[0.5, 0.0], [0.0, 0.5]],
                "b": [-0.3, 0.2],
                "c": 1.0,
                "noise_sigma": 0.05,
                "seed": 11,
            },
        }))
        .unwrap();
        let mut serial = Campaign::init(config.clone()).unwrap();
        let mut parallel = Campaign::init(config).unwrap();
        serial.evaluate_pending(1).unwrap();
        parallel.evaluate_pending(8).unwrap();
        let strip = |c: &Campaign| {
            c.records
                .iter()
                .map(|r| (r.run_id, r.loss, r.coded.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&serial), strip(&parallel));
    }

    #[test]
    fn evaluation_failure_keeps_prefix_and_pauses() {
        let config: Config = serde_json::from_value(serde_json::json!({
            "factors": [
                {"name": "a", "kind": "continuous", "low": 0.0, "high": 1.0},
            ],
            "objective": {
                // Succeeds for a < 0.5, fails otherwise: the first
                // screening corner passes, the second corner fails.
                "kind": "external",
                "command": ["/bin/sh", "-c",
                    "read line; case \"$line\" in *'\"a\":0'*) echo '{\"loss\": 1.0}';; \
                     *) echo broken >&2; exit 3;; esac"],
            },
            "screening": {"n_center": 1},
        }))
        .unwrap();
        let mut campaign = Campaign::init(config).unwrap();
        assert_eq!(campaign.state.pending.len(), 3);
        let outcome = campaign.evaluate_pending(1).unwrap();
        assert_eq!(outcome.recorded.len(), 1);
        let (failed_id, detail) = outcome.failure.unwrap();
        assert_eq!(failed_id, 2);
        assert!(detail.contains("broken"), "{detail}");
        // The failing and later runs are still pending for a retry.
        assert_eq!(campaign.state.pending.len(), 2);
    }

    #[test]
    fn replay_reconstructs_state_and_rejects_tampering() {
        let config: Config = serde_json::from_value(serde_json::json!({
            "factors": [
                {"name": "a", "kind": "continuous", "low": 0.0, "high": 10.0},
                {"name": "b", "kind": "continuous", "low": 0.0, "high": 10.0},
            ],
            "objective": {
                "kind": "builtin_quadratic",
                "B": [[0.5, 0.05], [0.05, 0.5]],
                "b": [-0.32, 0.17],
                "c": 1.0,
            },
            "confirm": {"replicates": 2},
        }))
        .unwrap();
        let mut live = Campaign::init(config.clone()).unwrap();
        live.run_autopilot(2).unwrap();
        assert_eq!(live.state.phase, Phase::Done);

        let replayed = Campaign::replay(config.clone(), &live.records).unwrap();
        assert_eq!(replayed.state, live.state);
        assert_eq!(replayed.records, live.records);

        let mut tampered = live.records.clone();
        tampered[3].loss += 0.5;
        // A changed loss steers the rebuilt campaign onto a different
        // path, which the row-by-row cross-check then rejects.
        assert!(Campaign::replay(config, &tampered).is_err());
    }

    #[test]
    fn loop_back_descent_from_confirmation() {
        let mut campaign = descended_campaign(true);
        campaign.recenter_and_ccd(&BTreeMap::new()).unwrap();
        // Plant the minimum outside the fitted region so a second
        // descent is warranted.
        let losses = ccd_losses(&campaign, &[0.4, 0.4, 0.4, 0.4, 0.4]);
        campaign.submit(&losses).unwrap();
        campaign.confirm(1).unwrap();
        let pending: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .map(|r| (r.run_id, 2.9))
            .collect();
        campaign.submit(&pending).unwrap();
        assert_eq!(campaign.state.phase, Phase::Done);

        let n = campaign.begin_descent(&[-1.0, -2.0]).unwrap();
        assert_eq!(n, 2);
        assert_eq!(campaign.state.phase, Phase::Descent);
        assert_eq!(campaign.state.budget.n_t, 12);
        // The new path descends in the re-centered coding.
        let ids: Vec<(u64, f64)> = campaign
            .state
            .pending
            .iter()
            .map(|r| (r.run_id, 2.5))
            .collect();
        campaign.submit(&ids).unwrap();
        assert!(campaign.recenter_and_ccd(&BTreeMap::new()).is_ok());
        assert_eq!(campaign.state.phase, Phase::Ccd);
    }

    #[test]
    fn budget_formula_matches_small_cases() {
        let params = BudgetParams {
            k: 1,
            n_c_screening: 1,
            n_center_screening: 1,
            n_t: 0,
            p: 1,
            f: 0,
            n_c_ccd: 1,
            n_s: 1,
            n_center_ccd: 1,
            ccd_runs: 2 + 2 + 1,
            confirm_replicates: 0,
        };
        assert_eq!(params.screening_runs(), 3);
        assert_eq!(params.total(), 8);
    }

    #[test]
    fn pending_csv_round_trips_through_import_parser() {
        let campaign = Campaign::init(seven_factor_config()).unwrap();
        let csv = campaign.pending_csv();
        let first = csv.lines().nth(1).unwrap();
        assert_eq!(first, "1,screening,corner,0,0,10,5,5,100,5000,2,");
        // The exported header is exactly what import expects.
        let names = campaign.factor_names();
        assert!(csv.starts_with(&ledger::import_header(&names)));
    }

    #[test]
    fn state_serialization_is_stable() {
        let campaign = Campaign::init(seven_factor_config()).unwrap();
        let a = serde_json::to_string_pretty(&campaign.state).unwrap();
        let b = serde_json::to_string_pretty(
            &serde_json::from_str::<CampaignState>(&a).unwrap(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
