//! The two coupled noncooperative games and the distributed task outsourcing
//! loop (DTOA) that drives them to a bilateral equilibrium.
//!
//! One outer iteration runs in two phases. First every slot's supplier bids
//! take one projected ascent step against the current aggregate load and the
//! clearing price is refreshed. Then every terminal entity takes one
//! projected gradient step on its whole daily profile against the refreshed
//! prices, with the projection keeping the daily shiftable total fixed.
//! Agents inside a phase update simultaneously from the same snapshot, so the
//! result does not depend on how many worker threads run the phases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MarketError;
use crate::market::{
    agent_economics, aggregate_load, es_cost_prime, market_state, te_utility_prime, AgentEconomics,
    BidMatrix, CostCoeffs, DemandMatrix, MarketState, Scenario, SolverConfig, StopMode,
};
use crate::matrix::Matrix;
use crate::real::{ordered_sum, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct IterationRecord<S> {
    pub iteration: usize,
    /// Clearing price per slot after this iteration's bid update.
    pub price: Vec<S>,
    /// Aggregate load per slot the bids responded to.
    pub load: Vec<S>,
    /// `‖χᵍ − χᵍ⁻¹‖_F`.
    pub frobenius_delta: S,
    pub eta1: S,
    pub eta2: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct StrategySnapshot<S> {
    pub iteration: usize,
    pub bids: BidMatrix<S>,
    pub demand: DemandMatrix<S>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct IterationTrace<S> {
    pub records: Vec<IterationRecord<S>>,
    #[serde(default)]
    pub snapshots: Vec<StrategySnapshot<S>>,
}

impl<S: Real> IterationTrace<S> {
    pub fn last_delta(&self) -> Option<S> {
        self.records.last().map(|r| r.frobenius_delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    IterationCapReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct EquilibriumResult<S> {
    pub bids: BidMatrix<S>,
    pub demand: DemandMatrix<S>,
    pub state: MarketState<S>,
    pub economics: AgentEconomics<S>,
    pub trace: IterationTrace<S>,
    pub status: RunStatus,
    pub iterations_used: usize,
}

/// Execution knobs that never change the numerical result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Keep a full strategy snapshot every `k` iterations.
    pub snapshot_stride: Option<usize>,
}

/// Supplier ascent direction: `p − ((L − f_j)/(L − 2f_j))·C'_j(f_j)`.
///
/// Differs from the true `∂P_j/∂λ_j` by the factor `(L − 2f_j)/Σλ`, positive
/// while `f_j < L/2`. Inside the guard band `f_j > (1/2 − guard)·L` the ratio
/// blows up, so the direction is clamped to `−p`.
pub fn es_surrogate_gradient<S: Real>(
    lambda_col: &[S],
    j: usize,
    load: S,
    coeffs: &CostCoeffs<S>,
    guard: S,
) -> Result<S, MarketError> {
    let total = checked_bid_total(lambda_col)?;
    let lj = bid_at(lambda_col, j)?;
    Ok(surrogate_from_total(lj, total, load, coeffs, guard))
}

#[inline]
fn surrogate_from_total<S: Real>(lj: S, total: S, load: S, coeffs: &CostCoeffs<S>, guard: S) -> S {
    let price = load / total;
    let f = lj * load / total;
    let marginal = S::two() * coeffs.a2 * f + coeffs.a1;
    if load == S::zero() {
        // factor -> 1 as L -> 0
        return price - marginal;
    }
    if f <= (S::half() - guard) * load {
        price - (load - f) / (load - S::two() * f) * marginal
    } else {
        -price
    }
}

/// Exact derivative of the supplier profit in its own bid.
pub fn es_profit_derivative<S: Real>(
    lambda_col: &[S],
    j: usize,
    load: S,
    coeffs: &CostCoeffs<S>,
) -> Result<S, MarketError> {
    let total = checked_bid_total(lambda_col)?;
    let lj = bid_at(lambda_col, j)?;
    let price = load / total;
    let f = lj * load / total;
    let marginal = es_cost_prime(coeffs, f)?;
    Ok((price * (load - S::two() * f) - marginal * (load - f)) / total)
}

fn checked_bid_total<S: Real>(lambda_col: &[S]) -> Result<S, MarketError> {
    if lambda_col.iter().any(|&l| !(l >= S::zero())) {
        return Err(MarketError::Domain("bids must be >= 0".into()));
    }
    let total = ordered_sum(lambda_col);
    if total > S::zero() {
        Ok(total)
    } else {
        Err(MarketError::DegenerateMarket {
            slot: None,
            iteration: None,
        })
    }
}

fn bid_at<S: Real>(lambda_col: &[S], j: usize) -> Result<S, MarketError> {
    lambda_col.get(j).copied().ok_or_else(|| {
        MarketError::Dimension(format!("supplier {j} out of range 0..{}", lambda_col.len()))
    })
}

/// One simultaneous projected ascent step for a single slot's bid column.
pub fn es_column_step<S: Real>(
    lambda_col: &[S],
    load: S,
    costs: &[CostCoeffs<S>],
    eta1: S,
    guard: S,
) -> Result<Vec<S>, MarketError> {
    if costs.len() != lambda_col.len() {
        return Err(MarketError::Dimension(format!(
            "{} bids but {} cost functions",
            lambda_col.len(),
            costs.len()
        )));
    }
    let total = checked_bid_total(lambda_col)?;
    Ok(lambda_col
        .iter()
        .zip(costs)
        .map(|(&lj, c)| {
            (lj + eta1 * surrogate_from_total(lj, total, load, c, guard)).max(S::zero())
        })
        .collect())
}

/// Updates column `t` of `bids` against `loads[t]`; returns the new column.
pub fn es_update_step<S: Real>(
    bids: &BidMatrix<S>,
    t: usize,
    loads: &[S],
    scenario: &Scenario<S>,
    eta1: S,
) -> Result<Vec<S>, MarketError> {
    if !(eta1 > S::zero()) {
        return Err(MarketError::Domain(format!(
            "step size must be > 0, got {eta1}"
        )));
    }
    let load = *loads.get(t).ok_or_else(|| {
        MarketError::Dimension(format!("slot {t} out of range 0..{}", loads.len()))
    })?;
    es_column_step(
        &bids.column(t),
        load,
        &scenario.cost_coeffs,
        eta1,
        scenario.solver.singularity_delta,
    )
    .map_err(|e| e.at(t, None))
}

/// Payoff derivative of one TE in one slot, including its own price impact:
/// `U'(x) − (L + x)/Σλ` with `x = χ + r`.
#[inline]
pub fn te_gradient_at<S: Real>(w: S, alpha: S, x: S, load: S, bid_total: S) -> S {
    te_utility_prime(w, alpha, x) - (load + x) / bid_total
}

pub fn te_gradient<S: Real>(
    scenario: &Scenario<S>,
    chi: &DemandMatrix<S>,
    i: usize,
    t: usize,
    lambda_col: &[S],
) -> Result<S, MarketError> {
    let load = aggregate_load(chi, &scenario.base_demand, t)?;
    let total = checked_bid_total(lambda_col)?;
    if i >= scenario.num_te {
        return Err(MarketError::Dimension(format!(
            "TE {i} out of range 0..{}",
            scenario.num_te
        )));
    }
    let x = chi.chi.get(i, t) + scenario.base_demand.get(i, t);
    Ok(te_gradient_at(
        scenario.utility.w.get(i, t),
        scenario.utility.alpha.get(i, t),
        x,
        load,
        total,
    ))
}

/// Euclidean projection onto `{x ≥ 0, Σx = total}` by sort and threshold.
pub fn project_simplex<S: Real>(v: &[S], total: S) -> Result<Vec<S>, MarketError> {
    if !(total >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "simplex total must be >= 0, got {total}"
        )));
    }
    if v.is_empty() {
        return Err(MarketError::Dimension(
            "cannot project an empty vector".into(),
        ));
    }
    let mut out = v.to_vec();
    project_simplex_in_place(&mut out, total);
    Ok(out)
}

pub(crate) fn project_simplex_in_place<S: Real>(v: &mut [S], total: S) {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite demand"));
    let mut cumulative = S::zero();
    let mut theta = None;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative = cumulative + u;
        let candidate = (cumulative - total) / S::from_usize(k + 1).expect("small count");
        if u - candidate > S::zero() {
            theta = Some(candidate);
        }
    }
    match theta {
        Some(theta) => v.iter_mut().for_each(|x| *x = (*x - theta).max(S::zero())),
        // only reachable when total == 0
        None => v.iter_mut().for_each(|x| *x = S::zero()),
    }
}

/// One projected gradient step on TE `i`'s daily profile at the prices
/// implied by `bids` and the current demand.
pub fn te_update_step<S: Real>(
    scenario: &Scenario<S>,
    chi: &DemandMatrix<S>,
    i: usize,
    bids: &BidMatrix<S>,
    eta2: S,
) -> Result<Vec<S>, MarketError> {
    if !(eta2 > S::zero()) {
        return Err(MarketError::Domain(format!(
            "step size must be > 0, got {eta2}"
        )));
    }
    if i >= scenario.num_te {
        return Err(MarketError::Dimension(format!(
            "TE {i} out of range 0..{}",
            scenario.num_te
        )));
    }
    let mut row = chi.chi.row(i).to_vec();
    let mut grads = Vec::with_capacity(row.len());
    for t in 0..row.len() {
        let col = bids.column(t);
        grads.push(te_gradient(scenario, chi, i, t, &col).map_err(|e| e.at(t, None))?);
    }
    for (x, g) in row.iter_mut().zip(&grads) {
        *x = *x + eta2 * *g;
    }
    project_simplex_in_place(&mut row, scenario.shiftable_total[i]);
    Ok(row)
}

fn with_pool<R: Send>(threads: Option<usize>, job: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(job),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                job()
            }
        },
        None => job(),
    }
}

fn column_loads<S: Real>(chi: &Matrix<S>, base: &Matrix<S>) -> Vec<S> {
    let mut loads = vec![S::zero(); chi.cols()];
    for i in 0..chi.rows() {
        for (t, l) in loads.iter_mut().enumerate() {
            *l = *l + (chi.get(i, t) + base.get(i, t));
        }
    }
    loads
}

fn stop_metric<S: Real>(mode: StopMode, delta: S, previous: &Matrix<S>) -> S {
    match mode {
        StopMode::Absolute => delta,
        StopMode::Relative => {
            let norm = previous.frobenius_norm();
            if norm > S::zero() {
                delta / norm
            } else {
                delta
            }
        }
    }
}

/// Runs DTOA on the global thread pool.
pub fn run_dtoa<S: Real>(scenario: &Scenario<S>) -> Result<EquilibriumResult<S>, MarketError> {
    run_dtoa_with(scenario, &RunOptions::default())
}

pub fn run_dtoa_with<S: Real>(
    scenario: &Scenario<S>,
    options: &RunOptions,
) -> Result<EquilibriumResult<S>, MarketError> {
    scenario.validate()?;
    with_pool(options.threads, || {
        dtoa_loop(scenario, options.snapshot_stride)
    })
}

fn dtoa_loop<S: Real>(
    scenario: &Scenario<S>,
    snapshot_stride: Option<usize>,
) -> Result<EquilibriumResult<S>, MarketError> {
    let cfg = &scenario.solver;
    let slots = scenario.num_slots;
    let base = &scenario.base_demand;
    let costs = &scenario.cost_coeffs;
    let mut chi = scenario.initial_demand.clone();
    let mut bids = scenario.initial_bids();
    let mut eta1 = cfg.eta1_init;
    let mut eta2 = cfg.eta2_init;
    let mut trace = IterationTrace::default();
    let mut status = RunStatus::IterationCapReached;
    let mut used = 0;

    for g in 1..=cfg.max_iterations {
        let loads = column_loads(&chi, base);

        let columns = (0..slots)
            .into_par_iter()
            .map(|t| {
                es_column_step(
                    &bids.column(t),
                    loads[t],
                    costs,
                    eta1,
                    cfg.singularity_delta,
                )
                .map_err(|e| e.at(t, Some(g)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut bid_totals = Vec::with_capacity(slots);
        for (t, col) in columns.iter().enumerate() {
            bids.lambda.set_column(t, col);
            let total = ordered_sum(col);
            if !(total > S::zero()) {
                return Err(MarketError::DegenerateMarket {
                    slot: Some(t),
                    iteration: Some(g),
                });
            }
            bid_totals.push(total);
        }
        let prices: Vec<S> = loads
            .iter()
            .zip(&bid_totals)
            .map(|(&l, &s)| l / s)
            .collect();

        let mut next = chi.clone();
        let w = &scenario.utility.w;
        let alpha = &scenario.utility.alpha;
        let q = &scenario.shiftable_total;
        let squared: Vec<S> = next
            .as_mut_slice()
            .par_chunks_mut(slots)
            .enumerate()
            .map(|(i, row)| {
                let old = row.to_vec();
                for t in 0..slots {
                    let x = old[t] + base.get(i, t);
                    let grad =
                        te_gradient_at(w.get(i, t), alpha.get(i, t), x, loads[t], bid_totals[t]);
                    row[t] = old[t] + eta2 * grad;
                }
                project_simplex_in_place(row, q[i]);
                row.iter()
                    .zip(&old)
                    .fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            })
            .collect();
        let delta = ordered_sum(&squared).sqrt();
        let metric = stop_metric(cfg.stop_mode, delta, &chi);

        trace.records.push(IterationRecord {
            iteration: g,
            price: prices,
            load: loads,
            frobenius_delta: delta,
            eta1,
            eta2,
        });
        chi = next;
        used = g;
        if let Some(stride) = snapshot_stride.filter(|&s| s > 0) {
            if g % stride == 0 {
                trace.snapshots.push(StrategySnapshot {
                    iteration: g,
                    bids: bids.clone(),
                    demand: DemandMatrix { chi: chi.clone() },
                });
            }
        }
        log::debug!("iteration {g}: delta {delta}, eta1 {eta1}, eta2 {eta2}");

        eta1 = eta1 * cfg.eta1_decay;
        eta2 = eta2 * cfg.eta2_decay;
        if metric < cfg.epsilon {
            status = RunStatus::Converged;
            break;
        }
    }

    let demand = DemandMatrix { chi };
    let state = market_state(&bids, &demand, base)?;
    let economics = agent_economics(scenario, &demand, &state)?;
    log::info!("DTOA finished after {used} iterations: {status:?}");
    Ok(EquilibriumResult {
        bids,
        demand,
        state,
        economics,
        trace,
        status,
        iterations_used: used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct SupplierGameOutcome<S> {
    pub bids: BidMatrix<S>,
    pub status: RunStatus,
    pub iterations: usize,
    /// Stopping metric at the last iteration.
    pub final_delta: S,
}

/// Runs the supplier game alone against fixed per-slot loads, with the same
/// step schedule as DTOA and a stopping rule on `‖λᵍ − λᵍ⁻¹‖_F`.
pub fn run_supplier_game<S: Real>(
    loads: &[S],
    costs: &[CostCoeffs<S>],
    config: &SolverConfig<S>,
) -> Result<SupplierGameOutcome<S>, MarketError> {
    config.validate()?;
    let mut bids = BidMatrix::uniform(costs.len(), loads.len(), config.lambda_init);
    let mut eta1 = config.eta1_init;
    let mut status = RunStatus::IterationCapReached;
    let mut used = 0;
    let mut metric = S::infinity();
    for g in 1..=config.max_iterations {
        let previous = bids.lambda.clone();
        for (t, &load) in loads.iter().enumerate() {
            let col = es_column_step(&bids.column(t), load, costs, eta1, config.singularity_delta)
                .map_err(|e| e.at(t, Some(g)))?;
            bids.lambda.set_column(t, &col);
        }
        let delta = bids.lambda.frobenius_distance(&previous);
        metric = stop_metric(config.stop_mode, delta, &previous);
        used = g;
        eta1 = eta1 * config.eta1_decay;
        if metric < config.epsilon {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(SupplierGameOutcome {
        bids,
        status,
        iterations: used,
        final_delta: metric,
    })
}

/// Dominance bound `λ_j < Σ_{r≠j} λ_r` for every supplier and slot.
pub fn satisfies_dominance_bound<S: Real>(bids: &BidMatrix<S>) -> bool {
    (0..bids.lambda.cols()).all(|t| {
        let col = bids.column(t);
        let total = ordered_sum(&col);
        col.iter().all(|&l| l < total - l)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{
        clearing_price_affine, es_profit, te_payoff, UtilityCoeffs, SCHEMA_VERSION,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_cost(a1: f64) -> CostCoeffs<f64> {
        CostCoeffs::new(0.0, a1, 0.0)
    }

    #[test]
    fn surrogate_vanishes_at_symmetric_point() {
        let g = es_surrogate_gradient(&[5.0, 5.0, 5.0], 0, 30.0, &linear_cost(1.0), 1e-6).unwrap();
        assert!(g.abs() < 1e-14, "{g}");
    }

    #[test]
    fn surrogate_clamps_in_guard_band() {
        let col = [10.0, 1.0, 1.0];
        let g = es_surrogate_gradient(&col, 0, 12.0, &linear_cost(1.0), 1e-6).unwrap();
        assert_eq!(g, -clearing_price_affine(&col, 12.0).unwrap());
        assert!(matches!(
            es_surrogate_gradient(&[0.0, 0.0], 0, 1.0, &linear_cost(1.0), 1e-6),
            Err(MarketError::DegenerateMarket { .. })
        ));
    }

    fn central_difference(col: &[f64], j: usize, load: f64, c: &CostCoeffs<f64>) -> f64 {
        let h = 1e-6 * col[j];
        let mut up = col.to_vec();
        let mut down = col.to_vec();
        up[j] += h;
        down[j] -= h;
        (es_profit(&up, j, load, c).unwrap() - es_profit(&down, j, load, c).unwrap()) / (2.0 * h)
    }

    #[test]
    fn surrogate_sign_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..500 {
            let m = rng.random_range(3..8);
            let col: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..5.0)).collect();
            let load = rng.random_range(1.0..100.0);
            let c = CostCoeffs::new(
                rng.random_range(1e-3..0.2),
                rng.random_range(0.0..1.0),
                0.001,
            );
            let j = rng.random_range(0..m);
            let f = col[j] * load / col.iter().sum::<f64>();
            if f >= 0.5 * load {
                continue;
            }
            let g = es_surrogate_gradient(&col, j, load, &c, 1e-6).unwrap();
            let fd = central_difference(&col, j, load, &c);
            let exact = es_profit_derivative(&col, j, load, &c).unwrap();
            if fd.abs() > 1e-7 * (1.0 + exact.abs()) {
                assert_eq!(g.signum(), fd.signum(), "col {col:?} load {load}");
                checked += 1;
            }
            assert!((exact - fd).abs() <= 1e-6 * exact.abs().max(1e-3));
        }
        assert!(checked > 300);
    }

    fn scenario(
        num_es: usize,
        base: Vec<Vec<f64>>,
        chi0: Vec<Vec<f64>>,
        costs: Vec<CostCoeffs<f64>>,
    ) -> Scenario<f64> {
        let base = Matrix::from_rows(base).unwrap();
        let chi0 = Matrix::from_rows(chi0).unwrap();
        let (n, t) = (base.rows(), base.cols());
        Scenario {
            schema_version: SCHEMA_VERSION,
            num_es,
            num_te: n,
            num_slots: t,
            cost_coeffs: costs,
            utility: UtilityCoeffs {
                w: Matrix::filled(n, t, 1.0),
                alpha: Matrix::filled(n, t, 0.5),
            },
            shiftable_total: chi0.iter_rows().map(|r| r.iter().sum()).collect(),
            base_demand: base,
            initial_demand: chi0,
            solver: SolverConfig::default(),
            seed: 0,
            rng_stream: "test".into(),
            generation: None,
        }
    }

    #[test]
    fn es_step_fixed_point_and_clamp() {
        let mut s = scenario(
            3,
            vec![vec![30.0]],
            vec![vec![0.0]],
            vec![linear_cost(1.0); 3],
        );
        s.cost_coeffs = vec![CostCoeffs::new(1e-12, 1.0, 0.0); 3];
        let bids = BidMatrix::uniform(3, 1, 5.0);
        let col = es_update_step(&bids, 0, &[30.0], &s, 0.05).unwrap();
        for v in col {
            assert!((v - 5.0).abs() < 1e-9);
        }
        // λ_0 = 1 with a steep marginal cost: ascent direction ≈ −99
        s.cost_coeffs = vec![linear_cost(100.0); 3];
        let mut bids = BidMatrix::uniform(3, 1, 1000.0);
        bids.lambda.set(0, 0, 1.0);
        let g = es_surrogate_gradient(&bids.column(0), 0, 2001.0, &s.cost_coeffs[0], 1e-6).unwrap();
        assert!(g < -20.0);
        let col = es_update_step(&bids, 0, &[2001.0], &s, 0.05).unwrap();
        assert_eq!(col[0], 0.0);
        assert!(matches!(
            es_update_step(&bids, 0, &[2001.0], &s, 0.0),
            Err(MarketError::Domain(_))
        ));
    }

    #[test]
    fn te_gradient_single_entity() {
        let mut s = scenario(
            2,
            vec![vec![0.5]],
            vec![vec![0.0]],
            vec![linear_cost(1.0); 2],
        );
        s.utility.w = Matrix::filled(1, 1, 1.0);
        let chi = s.initial_demand();
        let g = te_gradient(&s, &chi, 0, 0, &[1.0, 1.0]).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
        // saturated demand with a huge bid total
        let mut s2 = s.clone();
        s2.base_demand = Matrix::filled(1, 1, 10.0);
        let g2 = te_gradient(&s2, &chi, 0, 0, &[1e15, 1e15]).unwrap();
        assert!(g2.abs() < 1e-13);
    }

    fn payoff_with_prices(
        s: &Scenario<f64>,
        chi: &Matrix<f64>,
        bids: &BidMatrix<f64>,
        i: usize,
    ) -> f64 {
        let loads = column_loads(chi, &s.base_demand);
        let prices: Vec<f64> = (0..s.num_slots)
            .map(|t| clearing_price_affine(&bids.column(t), loads[t]).unwrap())
            .collect();
        te_payoff(
            chi.row(i),
            s.base_demand.row(i),
            &prices,
            s.utility.w.row(i),
            s.utility.alpha.row(i),
        )
        .unwrap()
    }

    #[test]
    fn te_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(1..5);
            let t = rng.random_range(1..5);
            let base: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..t).map(|_| rng.random_range(0.1..1.5)).collect())
                .collect();
            let chi0: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..t).map(|_| rng.random_range(0.0..0.5)).collect())
                .collect();
            let mut s = scenario(3, base, chi0, vec![CostCoeffs::new(0.05, 0.001, 0.001); 3]);
            s.utility.w = Matrix::from_fn(n, t, |_, _| rng.random_range(0.8..1.0));
            let bids = BidMatrix {
                lambda: Matrix::from_fn(3, t, |_, _| rng.random_range(0.5..3.0)),
            };
            let (i, k) = (rng.random_range(0..n), rng.random_range(0..t));
            let x = s.initial_demand.get(i, k) + s.base_demand.get(i, k);
            let knee = s.utility.w.get(i, k) / s.utility.alpha.get(i, k);
            let h = 1e-7;
            if (x - knee).abs() < 10.0 * h {
                continue;
            }
            let mut up = s.initial_demand.clone();
            let mut down = s.initial_demand.clone();
            up.set(i, k, up.get(i, k) + h);
            down.set(i, k, down.get(i, k) - h);
            let fd = (payoff_with_prices(&s, &up, &bids, i)
                - payoff_with_prices(&s, &down, &bids, i))
                / (2.0 * h);
            let g = te_gradient(&s, &s.initial_demand(), i, k, &bids.column(k)).unwrap();
            assert!(
                (g - fd).abs() <= 1e-6 * g.abs().max(1.0),
                "analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(project_simplex(&[0.5, 0.5], 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            project_simplex(&[1.0, 1.0, 1.0], 3.0).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert_eq!(project_simplex(&[4.0, -2.0], 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_simplex(&[-7.0], 2.5).unwrap(), vec![2.5]);
        assert!(matches!(
            project_simplex(&[1.0], -1.0),
            Err(MarketError::Domain(_))
        ));
    }

    #[test]
    fn simplex_two_point_grid_oracle() {
        // minimize (x - 2)² + (1 - x - 0)² over x ∈ [0, 1]
        let (mut best, mut best_d) = (0.0, f64::INFINITY);
        for k in 0..=100_000 {
            let x = k as f64 / 100_000.0;
            let d = (x - 2.0).powi(2) + (1.0 - x).powi(2);
            if d < best_d {
                best_d = d;
                best = x;
            }
        }
        let p = project_simplex(&[2.0, 0.0], 1.0).unwrap();
        assert!((p[0] - best).abs() < 1e-5 && (p[1] - (1.0 - best)).abs() < 1e-5);
    }

    /// Exact projection by enumerating every support set.
    fn brute_force_projection(v: &[f64], total: f64) -> Vec<f64> {
        let n = v.len();
        let mut best = vec![0.0; n];
        let mut best_d = f64::INFINITY;
        for mask in 1u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
            let theta = (members.iter().map(|&k| v[k]).sum::<f64>() - total) / members.len() as f64;
            let mut x = vec![0.0; n];
            let mut feasible = true;
            for &k in &members {
                x[k] = v[k] - theta;
                if x[k] < 0.0 {
                    feasible = false;
                }
            }
            if !feasible {
                continue;
            }
            let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = x;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn simplex_matches_brute_force(v in prop::collection::vec(-5.0f64..5.0, 1..7), total in 0.0f64..10.0) {
            let p = project_simplex(&v, total).unwrap();
            let oracle = brute_force_projection(&v, total);
            for (a, b) in p.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-9);
                prop_assert!(*a >= 0.0);
            }
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - total).abs() <= 1e-9 * total.max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn te_step_uniform_gradient_is_a_fixed_point() {
        // identical slots -> identical gradients -> projection undoes the step
        let s = scenario(
            3,
            vec![vec![1.0; 4], vec![2.0; 4]],
            vec![vec![0.25; 4], vec![0.5; 4]],
            vec![CostCoeffs::new(0.05, 0.001, 0.001); 3],
        );
        let bids = BidMatrix::uniform(3, 4, 2.0);
        for i in 0..2 {
            let row = te_update_step(&s, &s.initial_demand(), i, &bids, 0.3).unwrap();
            for (a, b) in row.iter().zip(s.initial_demand.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn te_step_preserves_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(0.5..2.0)).collect())
            .collect();
        let chi0: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..0.3)).collect())
            .collect();
        let s = scenario(3, base, chi0, vec![CostCoeffs::new(0.05, 0.001, 0.001); 3]);
        let bids = BidMatrix::uniform(3, 5, 1.0);
        let mut chi = s.initial_demand();
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|i| te_update_step(&s, &chi, i, &bids, 0.5).unwrap())
                .collect();
            chi.chi = Matrix::from_rows(rows).unwrap();
            for i in 0..6 {
                let sum: f64 = chi.chi.row(i).iter().sum();
                assert!((sum - s.shiftable_total[i]).abs() <= 1e-9 * s.shiftable_total[i]);
                assert!(chi.chi.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn single_slot_run_converges_immediately() {
        let s = scenario(
            2,
            vec![vec![3.0]],
            vec![vec![1.5]],
            vec![CostCoeffs::new(0.01, 0.001, 0.001); 2],
        );
        let res = run_dtoa(&s).unwrap();
        assert_eq!(res.status, RunStatus::Converged);
        assert!(res.iterations_used <= 2);
        assert_eq!(res.demand.chi.get(0, 0), 1.5);
    }

    #[test]
    fn iteration_cap_is_a_status() {
        let mut s = scenario(
            3,
            vec![vec![1.0, 2.0, 3.0]],
            vec![vec![0.1, 0.2, 0.3]],
            vec![CostCoeffs::new(0.01, 0.001, 0.001); 3],
        );
        s.solver.max_iterations = 1;
        s.solver.epsilon = 1e-300;
        let res = run_dtoa(&s).unwrap();
        assert_eq!(res.status, RunStatus::IterationCapReached);
        assert_eq!(res.iterations_used, 1);
        assert_eq!(res.trace.records.len(), 1);
    }

    #[test]
    fn snapshots_follow_stride() {
        let mut s = scenario(
            3,
            vec![vec![1.0, 2.0, 3.0]],
            vec![vec![0.1, 0.2, 0.3]],
            vec![CostCoeffs::new(0.01, 0.001, 0.001); 3],
        );
        s.solver.max_iterations = 10;
        s.solver.epsilon = 1e-300;
        let res = run_dtoa_with(
            &s,
            &RunOptions {
                threads: Some(2),
                snapshot_stride: Some(3),
            },
        )
        .unwrap();
        let iters: Vec<usize> = res.trace.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![3, 6, 9]);
    }

    #[test]
    fn dominance_bound_check() {
        assert!(satisfies_dominance_bound(&BidMatrix::uniform(3, 2, 1.0)));
        assert!(!satisfies_dominance_bound(&BidMatrix::uniform(2, 2, 1.0)));
    }
}
