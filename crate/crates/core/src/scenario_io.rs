//! Seeded scenario generation and scenario/result persistence.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, MarketError};
use crate::games::{EquilibriumResult, RunStatus};
use crate::market::{CostCoeffs, Scenario, SolverConfig, UtilityCoeffs, SCHEMA_VERSION};
use crate::matrix::Matrix;
use crate::real::{ordered_sum, Real};

/// Name of the keyed stream layout; stored in every generated scenario.
pub const RNG_STREAM: &str = "chacha8-keyed-v1";

const TAG_BASE: u64 = 1;
const TAG_SHIFT: u64 = 2;
const TAG_A2: u64 = 3;
const TAG_W: u64 = 4;

/// Closed interval `[min, max]` for uniform draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct Range<S> {
    pub min: S,
    pub max: S,
}

impl<S: Real> Range<S> {
    pub fn new(min: S, max: S) -> Self {
        Self { min, max }
    }

    pub fn point(v: S) -> Self {
        Self { min: v, max: v }
    }

    fn validate(&self, field: &str) -> Result<(), MarketError> {
        if !(self.min >= S::zero()) || !self.max.is_finite() {
            return Err(MarketError::invalid(
                field,
                format!("lower bound must be >= 0, got {}", self.min),
            ));
        }
        if !(self.min <= self.max) {
            return Err(MarketError::invalid(
                field,
                format!("lower bound {} exceeds upper bound {}", self.min, self.max),
            ));
        }
        Ok(())
    }

    fn sample(&self, u: f64) -> S {
        let (lo, hi) = (self.min.as_f64(), self.max.as_f64());
        S::lit(lo + (hi - lo) * u)
    }
}

/// Knobs for [`generate_scenario`]. Defaults reproduce the reference
/// 10-server, 1000-terminal, 24-slot market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct GenerationParams<S> {
    pub num_es: usize,
    pub num_te: usize,
    pub num_slots: usize,
    pub base_demand: Range<S>,
    /// Initial shiftable demand as a fraction of base demand, per slot.
    pub shiftable_fraction: Range<S>,
    pub a2: Range<S>,
    pub a1: S,
    pub a0: S,
    pub alpha: S,
    pub w: Range<S>,
    pub seed: u64,
    pub solver: SolverConfig<S>,
}

impl<S: Real> Default for GenerationParams<S> {
    fn default() -> Self {
        Self {
            num_es: 10,
            num_te: 1000,
            num_slots: 24,
            base_demand: Range::new(S::lit(9660.0), S::lit(37065.0)),
            shiftable_fraction: Range::new(S::lit(0.10), S::lit(0.12)),
            a2: Range::new(S::lit(4.76e-6), S::lit(4.76e-5)),
            a1: S::lit(0.001),
            a0: S::lit(0.001),
            alpha: S::lit(0.5),
            w: Range::new(S::lit(0.8), S::lit(1.0)),
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl<S: Real> GenerationParams<S> {
    pub fn validate(&self) -> Result<(), MarketError> {
        self.base_demand.validate("base_demand")?;
        self.shiftable_fraction.validate("shiftable_fraction")?;
        self.a2.validate("a2")?;
        self.w.validate("w")?;
        for (field, v) in [("a1", self.a1), ("a0", self.a0)] {
            if !(v >= S::zero()) || !v.is_finite() {
                return Err(MarketError::invalid(
                    field,
                    format!("must be >= 0, got {v}"),
                ));
            }
        }
        if !(self.alpha > S::zero()) || !self.alpha.is_finite() {
            return Err(MarketError::invalid(
                "alpha",
                format!("must be > 0, got {}", self.alpha),
            ));
        }
        self.solver.validate()
    }
}

/// Uniform `[0, 1)` draw keyed by `(seed, tag, entity, slot)`.
///
/// Each key owns its own ChaCha stream position, so a value never depends on
/// which other values were drawn or in what order.
fn keyed_uniform(root: &ChaCha8Rng, tag: u64, entity: usize, slot: usize) -> f64 {
    let mut rng = root.clone();
    rng.set_stream((tag << 48) | entity as u64);
    rng.set_word_pos(slot as u128 * 16);
    rng.random::<f64>()
}

/// Draws a scenario from `params`. Identical params give an identical scenario.
pub fn generate_scenario<S: Real>(
    params: &GenerationParams<S>,
) -> Result<Scenario<S>, MarketError> {
    params.validate()?;
    let (m, n, t) = (params.num_es, params.num_te, params.num_slots);
    let root = ChaCha8Rng::seed_from_u64(params.seed);

    let cost_coeffs = (0..m)
        .map(|j| {
            CostCoeffs::new(
                params.a2.sample(keyed_uniform(&root, TAG_A2, j, 0)),
                params.a1,
                params.a0,
            )
        })
        .collect();
    let base_demand = Matrix::from_fn(n, t, |i, k| {
        params
            .base_demand
            .sample(keyed_uniform(&root, TAG_BASE, i, k))
    });
    let initial_demand = Matrix::from_fn(n, t, |i, k| {
        params
            .shiftable_fraction
            .sample(keyed_uniform(&root, TAG_SHIFT, i, k))
            * base_demand.get(i, k)
    });
    let shiftable_total = (0..n).map(|i| ordered_sum(initial_demand.row(i))).collect();
    let utility = UtilityCoeffs {
        w: Matrix::from_fn(n, t, |i, k| {
            params.w.sample(keyed_uniform(&root, TAG_W, i, k))
        }),
        alpha: Matrix::filled(n, t, params.alpha),
    };

    let scenario = Scenario {
        schema_version: SCHEMA_VERSION,
        num_es: m,
        num_te: n,
        num_slots: t,
        cost_coeffs,
        utility,
        base_demand,
        shiftable_total,
        initial_demand,
        solver: params.solver.clone(),
        seed: params.seed,
        rng_stream: RNG_STREAM.to_string(),
        generation: Some(params.clone()),
    };
    scenario.validate()?;
    Ok(scenario)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses a versioned JSON document, checking `schema_version` before the
/// typed decode so that old files get a version error, not a field error.
fn read_versioned<T: DeserializeOwned>(path: &Path, expected: u32) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        field: String::new(),
        message: e.to_string(),
    })?;
    match raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(v) if v == u64::from(expected) => {}
        Some(found) => {
            return Err(IoError::Version {
                path: path.to_path_buf(),
                found,
                expected,
            })
        }
        None => {
            return Err(IoError::Malformed {
                path: path.to_path_buf(),
                message: "missing integer field `schema_version`".into(),
            })
        }
    }
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        IoError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

pub fn save_scenario<S: Real>(
    path: impl AsRef<Path>,
    scenario: &Scenario<S>,
) -> Result<(), IoError> {
    write_json(path.as_ref(), scenario)
}

/// Loads and validates a scenario file.
pub fn load_scenario<S: Real>(path: impl AsRef<Path>) -> Result<Scenario<S>, IoError> {
    let path = path.as_ref();
    let scenario: Scenario<S> = read_versioned(path, SCHEMA_VERSION)?;
    scenario.validate().map_err(|source| IoError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(scenario)
}

/// Contents of `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct ResultSummary<S> {
    pub schema_version: u32,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_delta: Option<S>,
    pub final_price: Vec<S>,
    pub final_load: Vec<S>,
    pub es_daily_profit: Vec<S>,
    pub te_daily_payout: Vec<S>,
    pub te_daily_utility: Vec<S>,
    pub te_payoff: Vec<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct TraceRow<S> {
    pub iteration: usize,
    pub slot: usize,
    pub price: S,
    pub load: S,
    pub frobenius_delta: S,
    pub eta1: S,
    pub eta2: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct DemandRow<S> {
    pub te_id: usize,
    pub slot: usize,
    pub chi_before: S,
    pub chi_after: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct BidRow<S> {
    pub es_id: usize,
    pub slot: usize,
    pub lambda_final: S,
}

/// Everything persisted for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultBundle<S> {
    pub summary: ResultSummary<S>,
    pub trace: Vec<TraceRow<S>>,
    pub demands: Vec<DemandRow<S>>,
    pub bids: Vec<BidRow<S>>,
}

impl<S: Real> ResultBundle<S> {
    pub fn from_result(scenario: &Scenario<S>, result: &EquilibriumResult<S>) -> Self {
        let summary = ResultSummary {
            schema_version: SCHEMA_VERSION,
            status: result.status,
            iterations: result.iterations_used,
            final_delta: result.trace.last_delta(),
            final_price: result.state.price.clone(),
            final_load: result.state.load.clone(),
            es_daily_profit: result.economics.es_daily_profit(),
            te_daily_payout: result.economics.te_daily_payout(),
            te_daily_utility: result.economics.te_daily_utility(),
            te_payoff: result.economics.te_payoff.clone(),
        };
        let trace = result
            .trace
            .records
            .iter()
            .flat_map(|r| {
                (0..r.price.len()).map(move |t| TraceRow {
                    iteration: r.iteration,
                    slot: t,
                    price: r.price[t],
                    load: r.load[t],
                    frobenius_delta: r.frobenius_delta,
                    eta1: r.eta1,
                    eta2: r.eta2,
                })
            })
            .collect();
        let demands = (0..scenario.num_te)
            .flat_map(|i| {
                (0..scenario.num_slots).map(move |t| DemandRow {
                    te_id: i,
                    slot: t,
                    chi_before: scenario.initial_demand.get(i, t),
                    chi_after: result.demand.chi.get(i, t),
                })
            })
            .collect();
        let bids = (0..result.bids.lambda.rows())
            .flat_map(|j| {
                (0..result.bids.lambda.cols()).map(move |t| BidRow {
                    es_id: j,
                    slot: t,
                    lambda_final: result.bids.lambda.get(j, t),
                })
            })
            .collect();
        Self {
            summary,
            trace,
            demands,
            bids,
        }
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err)
}

/// File names inside a result directory.
pub const RESULT_JSON: &str = "result.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const DEMANDS_CSV: &str = "demands.csv";
pub const BIDS_CSV: &str = "bids.csv";

/// Writes `result.json`, `trace.csv`, `demands.csv` and `bids.csv` into `dir`,
/// creating it if needed. Returns the written paths.
pub fn save_result<S: Real>(
    dir: impl AsRef<Path>,
    scenario: &Scenario<S>,
    result: &EquilibriumResult<S>,
) -> Result<Vec<PathBuf>, IoError> {
    save_bundle(dir, &ResultBundle::from_result(scenario, result))
}

pub fn save_bundle<S: Real>(
    dir: impl AsRef<Path>,
    bundle: &ResultBundle<S>,
) -> Result<Vec<PathBuf>, IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths: Vec<PathBuf> = [RESULT_JSON, TRACE_CSV, DEMANDS_CSV, BIDS_CSV]
        .iter()
        .map(|name| dir.join(name))
        .collect();
    write_json(&paths[0], &bundle.summary)?;
    write_csv(&paths[1], &bundle.trace)?;
    write_csv(&paths[2], &bundle.demands)?;
    write_csv(&paths[3], &bundle.bids)?;
    Ok(paths)
}

pub fn load_result<S: Real>(dir: impl AsRef<Path>) -> Result<ResultBundle<S>, IoError> {
    let dir = dir.as_ref();
    Ok(ResultBundle {
        summary: read_versioned(&dir.join(RESULT_JSON), SCHEMA_VERSION)?,
        trace: read_csv(&dir.join(TRACE_CSV))?,
        demands: read_csv(&dir.join(DEMANDS_CSV))?,
        bids: read_csv(&dir.join(BIDS_CSV))?,
    })
}

/// Rebuilds the final bid and demand matrices stored in a result bundle.
pub fn final_strategies<S: Real>(
    bundle: &ResultBundle<S>,
    scenario: &Scenario<S>,
) -> Result<(crate::market::BidMatrix<S>, crate::market::DemandMatrix<S>), MarketError> {
    let (m, n, t) = (scenario.num_es, scenario.num_te, scenario.num_slots);
    if bundle.bids.len() != m * t || bundle.demands.len() != n * t {
        return Err(MarketError::Dimension(format!(
            "result holds {} bids and {} demands, scenario needs {} and {}",
            bundle.bids.len(),
            bundle.demands.len(),
            m * t,
            n * t
        )));
    }
    let mut lambda = Matrix::zeros(m, t);
    for b in &bundle.bids {
        if b.es_id >= m || b.slot >= t {
            return Err(MarketError::Dimension(format!(
                "bid row ({}, {}) out of range",
                b.es_id, b.slot
            )));
        }
        lambda.set(b.es_id, b.slot, b.lambda_final);
    }
    let mut chi = Matrix::zeros(n, t);
    for d in &bundle.demands {
        if d.te_id >= n || d.slot >= t {
            return Err(MarketError::Dimension(format!(
                "demand row ({}, {}) out of range",
                d.te_id, d.slot
            )));
        }
        chi.set(d.te_id, d.slot, d.chi_after);
    }
    Ok((
        crate::market::BidMatrix { lambda },
        crate::market::DemandMatrix { chi },
    ))
}
