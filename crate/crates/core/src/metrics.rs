//! Before/after comparison metrics and figure-ready tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{IoError, MarketError};
use crate::games::{run_supplier_game, EquilibriumResult, RunStatus};
use crate::market::{
    agent_economics, aggregate_loads, market_state, AgentEconomics, BidMatrix, MarketState,
    Scenario,
};
use crate::real::{ordered_sum, Real};
use crate::scenario_io::write_csv;

/// Peak-to-average ratio `max(L)/mean(L)`.
pub fn par<S: Real>(loads: &[S]) -> Result<S, MarketError> {
    if loads.is_empty() {
        return Err(MarketError::Domain("PAR of an empty load profile".into()));
    }
    if let Some(v) = loads.iter().find(|v| !(**v >= S::zero()) || !v.is_finite()) {
        return Err(MarketError::Domain(format!(
            "loads must be finite and >= 0, got {v}"
        )));
    }
    let total = ordered_sum(loads);
    if total == S::zero() {
        return Err(MarketError::Domain(
            "PAR undefined for an all-zero load profile".into(),
        ));
    }
    let peak = loads.iter().copied().fold(S::zero(), S::max);
    Ok(peak * S::from_usize(loads.len()).expect("small count") / total)
}

/// Market outcome with demand frozen at the initial profile and suppliers
/// playing their own game to its fixed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct Baseline<S> {
    pub bids: BidMatrix<S>,
    pub state: MarketState<S>,
    pub economics: AgentEconomics<S>,
    pub status: RunStatus,
    pub iterations: usize,
}

pub fn compute_baseline<S: Real>(scenario: &Scenario<S>) -> Result<Baseline<S>, MarketError> {
    let chi = scenario.initial_demand();
    let loads = aggregate_loads(&chi, &scenario.base_demand)?;
    let game = run_supplier_game(&loads, &scenario.cost_coeffs, &scenario.solver)?;
    if game.status == RunStatus::IterationCapReached {
        log::warn!(
            "baseline supplier game hit the iteration cap ({})",
            game.iterations
        );
    }
    let state = market_state(&game.bids, &chi, &scenario.base_demand)?;
    let economics = agent_economics(scenario, &chi, &state)?;
    Ok(Baseline {
        bids: game.bids,
        state,
        economics,
        status: game.status,
        iterations: game.iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub num_es: usize,
    pub num_te: usize,
    pub num_slots: usize,
    pub te_payout_before: Vec<f64>,
    pub te_payout_after: Vec<f64>,
    pub te_utility_before: Vec<f64>,
    pub te_utility_after: Vec<f64>,
    pub te_payoff_before: Vec<f64>,
    pub te_payoff_after: Vec<f64>,
    pub es_profit_before: Vec<f64>,
    pub es_profit_after: Vec<f64>,
    pub load_before: Vec<f64>,
    pub load_after: Vec<f64>,
    pub peak_before: f64,
    pub peak_after: f64,
    pub par_before: f64,
    pub par_after: f64,
    pub iterations: usize,
    pub status: RunStatus,
    pub baseline_iterations: usize,
    pub baseline_status: RunStatus,
    pub runtime_seconds: f64,
}

fn to_f64<S: Real>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn peak(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl ComparisonReport {
    /// Mean over TEs of the relative payout saving `(before − after)/before`.
    pub fn mean_payout_reduction(&self) -> f64 {
        let (sum, n) = self
            .te_payout_before
            .iter()
            .zip(&self.te_payout_after)
            .filter(|(b, _)| **b > 0.0)
            .fold((0.0, 0usize), |(s, n), (b, a)| (s + (b - a) / b, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Relative peak cut `(peak_before − peak_after)/peak_before`.
    pub fn peak_reduction(&self) -> f64 {
        (self.peak_before - self.peak_after) / self.peak_before
    }

    pub fn total_profit_before(&self) -> f64 {
        self.es_profit_before.iter().sum()
    }

    pub fn total_profit_after(&self) -> f64 {
        self.es_profit_after.iter().sum()
    }
}

/// Assembles the before/after comparison. "Before" is the baseline (initial
/// demand, supplier-equilibrium bids); "after" is the DTOA result.
pub fn build_report<S: Real>(
    scenario: &Scenario<S>,
    baseline: &Baseline<S>,
    result: &EquilibriumResult<S>,
    runtime: Duration,
) -> Result<ComparisonReport, MarketError> {
    let load_before = to_f64(&baseline.state.load);
    let load_after = to_f64(&result.state.load);
    Ok(ComparisonReport {
        num_es: scenario.num_es,
        num_te: scenario.num_te,
        num_slots: scenario.num_slots,
        te_payout_before: to_f64(&baseline.economics.te_daily_payout()),
        te_payout_after: to_f64(&result.economics.te_daily_payout()),
        te_utility_before: to_f64(&baseline.economics.te_daily_utility()),
        te_utility_after: to_f64(&result.economics.te_daily_utility()),
        te_payoff_before: to_f64(&baseline.economics.te_payoff),
        te_payoff_after: to_f64(&result.economics.te_payoff),
        es_profit_before: to_f64(&baseline.economics.es_daily_profit()),
        es_profit_after: to_f64(&result.economics.es_daily_profit()),
        peak_before: peak(&load_before),
        peak_after: peak(&load_after),
        par_before: par(&baseline.state.load)?.as_f64(),
        par_after: par(&result.state.load)?.as_f64(),
        load_before,
        load_after,
        iterations: result.iterations_used,
        status: result.status,
        baseline_iterations: baseline.iterations,
        baseline_status: baseline.status,
        runtime_seconds: runtime.as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// `report.json` only.
    Json,
    /// `report.json` plus the per-figure CSV tables.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParSweepRow {
    pub num_te: usize,
    pub par_before: f64,
    pub par_after: f64,
    pub iterations: usize,
    pub runtime_seconds: f64,
}

impl From<&ComparisonReport> for ParSweepRow {
    fn from(r: &ComparisonReport) -> Self {
        Self {
            num_te: r.num_te,
            par_before: r.par_before,
            par_after: r.par_after,
            iterations: r.iterations,
            runtime_seconds: r.runtime_seconds,
        }
    }
}

#[derive(Serialize)]
struct SlotRow {
    slot: usize,
    load_before: f64,
    load_after: f64,
}

#[derive(Serialize)]
struct TeRow {
    te_id: usize,
    before: f64,
    after: f64,
}

#[derive(Serialize)]
struct EsRow {
    es_id: usize,
    profit_before: f64,
    profit_after: f64,
}

fn te_rows(before: &[f64], after: &[f64]) -> Vec<TeRow> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .map(|(te_id, (&before, &after))| TeRow {
            te_id,
            before,
            after,
        })
        .collect()
}

/// Writes `report.json` and, for [`ReportFormat::Csv`], the figure tables
/// `fig_demand.csv`, `fig_payout.csv`, `fig_payoff.csv`, `fig_profit.csv` and
/// `fig_par.csv`. Returns the written paths.
pub fn emit(
    report: &ComparisonReport,
    dir: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<Vec<PathBuf>, IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| IoError::Malformed {
        path: json.clone(),
        message: e.to_string(),
    })?;
    fs::write(&json, text + "\n").map_err(|source| IoError::Io {
        path: json.clone(),
        source,
    })?;
    let mut written = vec![json];
    if format == ReportFormat::Json {
        return Ok(written);
    }

    let demand: Vec<SlotRow> = (0..report.load_before.len())
        .map(|slot| SlotRow {
            slot,
            load_before: report.load_before[slot],
            load_after: report.load_after[slot],
        })
        .collect();
    let profit: Vec<EsRow> = (0..report.es_profit_before.len())
        .map(|es_id| EsRow {
            es_id,
            profit_before: report.es_profit_before[es_id],
            profit_after: report.es_profit_after[es_id],
        })
        .collect();

    let path = dir.join("fig_demand.csv");
    write_csv(&path, &demand)?;
    written.push(path);
    let path = dir.join("fig_payout.csv");
    write_csv(
        &path,
        &te_rows(&report.te_payout_before, &report.te_payout_after),
    )?;
    written.push(path);
    let path = dir.join("fig_payoff.csv");
    write_csv(
        &path,
        &te_rows(&report.te_payoff_before, &report.te_payoff_after),
    )?;
    written.push(path);
    let path = dir.join("fig_profit.csv");
    write_csv(&path, &profit)?;
    written.push(path);
    written.push(emit_par_sweep(&[ParSweepRow::from(report)], dir)?);
    Ok(written)
}

/// Writes `fig_par.csv` with one row per swept population size.
pub fn emit_par_sweep(rows: &[ParSweepRow], dir: impl AsRef<Path>) -> Result<PathBuf, IoError> {
    let path = dir.as_ref().join("fig_par.csv");
    write_csv(&path, rows)?;
    Ok(path)
}
