//! Market model: domain types and the pure economics of the resource market.
//!
//! Edge servers (suppliers) submit affine supply functions `f = λ·p`; the
//! scheduler clears each slot at the price where total supply meets the
//! aggregate terminal-entity load. Every function here is pure; derived
//! quantities (loads, prices, supplies) are never cached in [`Scenario`].

use serde::{Deserialize, Serialize};

use crate::error::MarketError;
use crate::matrix::Matrix;
use crate::real::{ordered_sum, Real};
use crate::scenario_io::GenerationParams;

/// Current scenario file schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Quadratic server cost `a2·f² + a1·f + a0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct CostCoeffs<S> {
    pub a2: S,
    pub a1: S,
    pub a0: S,
}

impl<S: Real> CostCoeffs<S> {
    pub fn new(a2: S, a1: S, a0: S) -> Self {
        Self { a2, a1, a0 }
    }
}

/// Per-TE, per-slot quadratic utility coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct UtilityCoeffs<S> {
    /// Marginal utility at zero demand, N×T.
    pub w: Matrix<S>,
    /// Curvature, N×T.
    pub alpha: Matrix<S>,
}

/// How the demand-change stopping metric is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// `‖χᵍ − χᵍ⁻¹‖_F < ε`
    #[default]
    Absolute,
    /// `‖χᵍ − χᵍ⁻¹‖_F / ‖χᵍ⁻¹‖_F < ε`
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct SolverConfig<S> {
    pub eta1_init: S,
    pub eta1_decay: S,
    pub eta2_init: S,
    pub eta2_decay: S,
    pub epsilon: S,
    pub lambda_init: S,
    pub max_iterations: usize,
    /// Relative guard band below `f = L/2` for the supplier ascent direction.
    pub singularity_delta: S,
    #[serde(default)]
    pub stop_mode: StopMode,
}

impl<S: Real> Default for SolverConfig<S> {
    fn default() -> Self {
        Self {
            eta1_init: S::lit(0.05),
            eta1_decay: S::lit(0.985),
            eta2_init: S::lit(0.01),
            eta2_decay: S::lit(0.98),
            epsilon: S::lit(0.3),
            lambda_init: S::lit(20000.0),
            max_iterations: 5000,
            singularity_delta: S::lit(1e-6),
            stop_mode: StopMode::Absolute,
        }
    }
}

impl<S: Real> SolverConfig<S> {
    pub fn validate(&self) -> Result<(), MarketError> {
        let positive = [
            ("solver.eta1_init", self.eta1_init),
            ("solver.eta2_init", self.eta2_init),
            ("solver.epsilon", self.epsilon),
            ("solver.lambda_init", self.lambda_init),
        ];
        for (field, v) in positive {
            if !(v > S::zero()) || !v.is_finite() {
                return Err(MarketError::invalid(field, format!("must be > 0, got {v}")));
            }
        }
        for (field, v) in [
            ("solver.eta1_decay", self.eta1_decay),
            ("solver.eta2_decay", self.eta2_decay),
        ] {
            if !(v > S::zero() && v <= S::one()) {
                return Err(MarketError::invalid(
                    field,
                    format!("must lie in (0, 1], got {v}"),
                ));
            }
        }
        if self.max_iterations < 1 {
            return Err(MarketError::invalid(
                "solver.max_iterations",
                "must be >= 1",
            ));
        }
        if !(self.singularity_delta >= S::zero() && self.singularity_delta < S::half()) {
            return Err(MarketError::invalid(
                "solver.singularity_delta",
                format!("must lie in [0, 0.5), got {}", self.singularity_delta),
            ));
        }
        Ok(())
    }
}

/// Immutable market description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct Scenario<S> {
    pub schema_version: u32,
    pub num_es: usize,
    pub num_te: usize,
    pub num_slots: usize,
    pub cost_coeffs: Vec<CostCoeffs<S>>,
    pub utility: UtilityCoeffs<S>,
    /// Non-shiftable demand `r[i][t]`, N×T.
    pub base_demand: Matrix<S>,
    /// Daily shiftable total `Q_i`.
    pub shiftable_total: Vec<S>,
    /// Starting shiftable profile `χ⁰`; also the "before" profile in reports.
    pub initial_demand: Matrix<S>,
    pub solver: SolverConfig<S>,
    pub seed: u64,
    /// Identifier of the keyed random stream layout used to draw the scenario.
    pub rng_stream: String,
    #[serde(default)]
    pub generation: Option<GenerationParams<S>>,
}

impl<S: Real> Scenario<S> {
    /// Checks every invariant, naming the offending field on failure.
    pub fn validate(&self) -> Result<(), MarketError> {
        if self.num_es < 2 {
            return Err(MarketError::invalid(
                "num_es",
                format!("M >= 2 required, got {}", self.num_es),
            ));
        }
        if self.num_te < 1 {
            return Err(MarketError::invalid(
                "num_te",
                format!("N >= 1 required, got {}", self.num_te),
            ));
        }
        if self.num_slots < 1 {
            return Err(MarketError::invalid(
                "num_slots",
                format!("T >= 1 required, got {}", self.num_slots),
            ));
        }
        let (n, t) = (self.num_te, self.num_slots);
        if self.cost_coeffs.len() != self.num_es {
            return Err(MarketError::invalid(
                "cost_coeffs",
                format!(
                    "expected {} entries, got {}",
                    self.num_es,
                    self.cost_coeffs.len()
                ),
            ));
        }
        for (j, c) in self.cost_coeffs.iter().enumerate() {
            if !(c.a2 > S::zero()) || !c.a2.is_finite() {
                return Err(MarketError::invalid(
                    format!("cost_coeffs[{j}].a2"),
                    format!("must be > 0, got {}", c.a2),
                ));
            }
            if !(c.a1 >= S::zero()) || !c.a1.is_finite() {
                return Err(MarketError::invalid(
                    format!("cost_coeffs[{j}].a1"),
                    format!("must be >= 0, got {}", c.a1),
                ));
            }
            if !(c.a0 >= S::zero()) || !c.a0.is_finite() {
                return Err(MarketError::invalid(
                    format!("cost_coeffs[{j}].a0"),
                    format!("must be >= 0, got {}", c.a0),
                ));
            }
        }
        for (name, m) in [
            ("utility.w", &self.utility.w),
            ("utility.alpha", &self.utility.alpha),
            ("base_demand", &self.base_demand),
            ("initial_demand", &self.initial_demand),
        ] {
            if m.rows() != n || m.cols() != t {
                return Err(MarketError::invalid(
                    name,
                    format!("expected {n}x{t} matrix, got {}x{}", m.rows(), m.cols()),
                ));
            }
        }
        check_entries("utility.w", &self.utility.w, |v| v > S::zero(), "> 0")?;
        check_entries(
            "utility.alpha",
            &self.utility.alpha,
            |v| v > S::zero(),
            "> 0",
        )?;
        check_entries("base_demand", &self.base_demand, |v| v >= S::zero(), ">= 0")?;
        check_entries(
            "initial_demand",
            &self.initial_demand,
            |v| v >= S::zero(),
            ">= 0",
        )?;
        if self.shiftable_total.len() != n {
            return Err(MarketError::invalid(
                "shiftable_total",
                format!("expected {n} entries, got {}", self.shiftable_total.len()),
            ));
        }
        for (i, &q) in self.shiftable_total.iter().enumerate() {
            if !(q >= S::zero()) || !q.is_finite() {
                return Err(MarketError::invalid(
                    format!("shiftable_total[{i}]"),
                    format!("must be >= 0, got {q}"),
                ));
            }
            let row_sum = ordered_sum(self.initial_demand.row(i));
            if (row_sum - q).abs() > S::lit(1e-9) * q.max(S::one()) {
                return Err(MarketError::invalid(
                    format!("initial_demand[{i}]"),
                    format!("row sums to {row_sum}, expected shiftable_total {q}"),
                ));
            }
        }
        self.solver.validate()
    }

    pub fn initial_bids(&self) -> BidMatrix<S> {
        BidMatrix::uniform(self.num_es, self.num_slots, self.solver.lambda_init)
    }

    pub fn initial_demand(&self) -> DemandMatrix<S> {
        DemandMatrix {
            chi: self.initial_demand.clone(),
        }
    }
}

fn check_entries<S: Real>(
    field: &str,
    m: &Matrix<S>,
    ok: impl Fn(S) -> bool,
    what: &str,
) -> Result<(), MarketError> {
    for i in 0..m.rows() {
        for t in 0..m.cols() {
            let v = m.get(i, t);
            if !ok(v) || !v.is_finite() {
                return Err(MarketError::invalid(
                    format!("{field}[{i}][{t}]"),
                    format!("must be {what}, got {v}"),
                ));
            }
        }
    }
    Ok(())
}

/// Supplier strategies: affine supply slopes `λ[j][t]`, M×T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct BidMatrix<S> {
    pub lambda: Matrix<S>,
}

impl<S: Real> BidMatrix<S> {
    pub fn uniform(num_es: usize, num_slots: usize, value: S) -> Self {
        Self {
            lambda: Matrix::filled(num_es, num_slots, value),
        }
    }

    pub fn column(&self, t: usize) -> Vec<S> {
        self.lambda.column(t)
    }
}

/// Piecewise-linear supply bids sharing one set of price breakpoints.
///
/// Segment `k` covers `(p_{k-1}, p_k]` (the first covers `[0, p_1]`); the last
/// breakpoint may be `+∞` for an unbounded final segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct PiecewiseBid<S> {
    pub breakpoints: Vec<S>,
    /// `slopes[j][k]` is the slope of supplier `j` on segment `k`.
    pub slopes: Vec<Vec<S>>,
}

impl<S: Real> PiecewiseBid<S> {
    pub fn validate(&self) -> Result<(), MarketError> {
        if self.breakpoints.is_empty() {
            return Err(MarketError::invalid(
                "breakpoints",
                "at least one breakpoint required",
            ));
        }
        if self.slopes.is_empty() {
            return Err(MarketError::invalid(
                "slopes",
                "at least one supplier required",
            ));
        }
        if !(self.breakpoints[0] > S::zero()) {
            return Err(MarketError::invalid("breakpoints[0]", "must be > 0"));
        }
        for k in 1..self.breakpoints.len() {
            if !(self.breakpoints[k] > self.breakpoints[k - 1]) {
                return Err(MarketError::invalid(
                    format!("breakpoints[{k}]"),
                    "must be strictly increasing",
                ));
            }
        }
        for (j, s) in self.slopes.iter().enumerate() {
            if s.len() != self.breakpoints.len() {
                return Err(MarketError::invalid(
                    format!("slopes[{j}]"),
                    format!(
                        "expected {} slopes, got {}",
                        self.breakpoints.len(),
                        s.len()
                    ),
                ));
            }
            if let Some(k) = s.iter().position(|&v| !(v >= S::zero())) {
                return Err(MarketError::invalid(
                    format!("slopes[{j}][{k}]"),
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }
}

/// Customer strategies: shiftable demand `χ[i][t]`, N×T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct DemandMatrix<S> {
    pub chi: Matrix<S>,
}

/// Per-slot quantities derived from a strategy profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct MarketState<S> {
    pub load: Vec<S>,
    pub price: Vec<S>,
    /// `f[j][t]`, M×T.
    pub supply: Matrix<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct AgentEconomics<S> {
    pub es_profit: Matrix<S>,
    pub es_revenue: Matrix<S>,
    pub es_cost: Matrix<S>,
    pub te_utility: Matrix<S>,
    pub te_payout: Matrix<S>,
    /// Daily payoff `u_i`.
    pub te_payoff: Vec<S>,
}

impl<S: Real> AgentEconomics<S> {
    pub fn es_daily_profit(&self) -> Vec<S> {
        self.es_profit.iter_rows().map(ordered_sum).collect()
    }

    pub fn te_daily_payout(&self) -> Vec<S> {
        self.te_payout.iter_rows().map(ordered_sum).collect()
    }

    pub fn te_daily_utility(&self) -> Vec<S> {
        self.te_utility.iter_rows().map(ordered_sum).collect()
    }
}

fn bid_sum<S: Real>(lambda_col: &[S]) -> Result<S, MarketError> {
    if let Some(j) = lambda_col.iter().position(|&l| !(l >= S::zero())) {
        return Err(MarketError::Domain(format!(
            "bid of supplier {j} is negative or NaN"
        )));
    }
    let s = ordered_sum(lambda_col);
    if s > S::zero() {
        Ok(s)
    } else {
        Err(MarketError::DegenerateMarket {
            slot: None,
            iteration: None,
        })
    }
}

/// Aggregate load `L_t = Σ_i (χ[i][t] + r[i][t])`.
pub fn aggregate_load<S: Real>(
    chi: &DemandMatrix<S>,
    base: &Matrix<S>,
    t: usize,
) -> Result<S, MarketError> {
    if !chi.chi.same_shape(base) {
        return Err(MarketError::Dimension(format!(
            "demand is {}x{}, base demand is {}x{}",
            chi.chi.rows(),
            chi.chi.cols(),
            base.rows(),
            base.cols()
        )));
    }
    if t >= base.cols() {
        return Err(MarketError::Dimension(format!(
            "slot {t} out of range 0..{}",
            base.cols()
        )));
    }
    Ok((0..base.rows()).fold(S::zero(), |acc, i| {
        acc + (chi.chi.get(i, t) + base.get(i, t))
    }))
}

/// Loads for every slot.
pub fn aggregate_loads<S: Real>(
    chi: &DemandMatrix<S>,
    base: &Matrix<S>,
) -> Result<Vec<S>, MarketError> {
    (0..base.cols())
        .map(|t| aggregate_load(chi, base, t))
        .collect()
}

/// Clearing price for affine bids, `p = L / Σ_j λ_j`.
pub fn clearing_price_affine<S: Real>(lambda_col: &[S], load: S) -> Result<S, MarketError> {
    let s = bid_sum(lambda_col)?;
    Ok(load / s)
}

/// Clearing price for piecewise-linear bids.
///
/// Segments are tried from the lowest price upward and the first segment
/// whose candidate price lies inside it wins. The supply curve jumps at each
/// breakpoint, so a load can fall into a gap with no consistent price.
pub fn clearing_price_piecewise<S: Real>(
    bids: &PiecewiseBid<S>,
    load: S,
) -> Result<S, MarketError> {
    bids.validate()?;
    if !(load >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "load must be >= 0, got {load}"
        )));
    }
    let k_count = bids.breakpoints.len();
    let mut gap_at = bids.breakpoints[0];
    for k in 0..k_count {
        let slope_sum = bids.slopes.iter().fold(S::zero(), |acc, s| acc + s[k]);
        let (lower, offset) = if k == 0 {
            (S::zero(), S::zero())
        } else {
            let p_prev = bids.breakpoints[k - 1];
            let off = bids
                .slopes
                .iter()
                .fold(S::zero(), |acc, s| acc + s[k - 1] * p_prev);
            (p_prev, off)
        };
        let upper = bids.breakpoints[k];
        if slope_sum > S::zero() {
            let p = (load - offset) / slope_sum;
            let inside = if k == 0 {
                p >= lower && p <= upper
            } else {
                p > lower && p <= upper
            };
            if inside {
                return Ok(p);
            }
            if p > upper {
                gap_at = upper;
            }
        }
    }
    Err(MarketError::NoClearingPrice {
        load: load.as_f64(),
        breakpoint: gap_at.as_f64(),
    })
}

/// Load served by supplier `j`: `λ_j·L / Σ_r λ_r`.
pub fn supply_share<S: Real>(lambda_col: &[S], j: usize, load: S) -> Result<S, MarketError> {
    let s = bid_sum(lambda_col)?;
    let lj = *lambda_col.get(j).ok_or_else(|| {
        MarketError::Dimension(format!("supplier {j} out of range 0..{}", lambda_col.len()))
    })?;
    Ok(lj * load / s)
}

pub fn es_cost<S: Real>(coeffs: &CostCoeffs<S>, f: S) -> Result<S, MarketError> {
    if !(f >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "supplied load must be >= 0, got {f}"
        )));
    }
    Ok(coeffs.a2 * f * f + coeffs.a1 * f + coeffs.a0)
}

pub fn es_cost_prime<S: Real>(coeffs: &CostCoeffs<S>, f: S) -> Result<S, MarketError> {
    if !(f >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "supplied load must be >= 0, got {f}"
        )));
    }
    Ok(S::two() * coeffs.a2 * f + coeffs.a1)
}

/// Supplier profit written directly in the bids:
/// `λ_j L² / (Σλ)² − C_j(λ_j L / Σλ)`.
pub fn es_profit<S: Real>(
    lambda_col: &[S],
    j: usize,
    load: S,
    coeffs: &CostCoeffs<S>,
) -> Result<S, MarketError> {
    let s = bid_sum(lambda_col)?;
    let lj = *lambda_col.get(j).ok_or_else(|| {
        MarketError::Dimension(format!("supplier {j} out of range 0..{}", lambda_col.len()))
    })?;
    let revenue = lj * load * load / (s * s);
    Ok(revenue - es_cost(coeffs, lj * load / s)?)
}

/// Quadratic utility, saturating at `x = w/α`.
pub fn te_utility<S: Real>(w: S, alpha: S, x: S) -> Result<S, MarketError> {
    if !(x >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "served demand must be >= 0, got {x}"
        )));
    }
    Ok(if x <= w / alpha {
        w * x - alpha / S::two() * x * x
    } else {
        w * w / (S::two() * alpha)
    })
}

/// Derivative of [`te_utility`]; zero on the saturated branch.
#[inline]
pub fn te_utility_prime<S: Real>(w: S, alpha: S, x: S) -> S {
    if x <= w / alpha {
        w - alpha * x
    } else {
        S::zero()
    }
}

pub fn te_payout<S: Real>(chi: S, r: S, price: S) -> Result<S, MarketError> {
    if !(chi >= S::zero() && r >= S::zero() && price >= S::zero()) {
        return Err(MarketError::Domain(format!(
            "payout inputs must be >= 0 (chi {chi}, r {r}, price {price})"
        )));
    }
    Ok((chi + r) * price)
}

/// Daily payoff `Σ_t [U(χ+r) − (χ+r)·p_t]` at fixed prices.
pub fn te_payoff<S: Real>(
    chi_row: &[S],
    r_row: &[S],
    prices: &[S],
    w_row: &[S],
    alpha_row: &[S],
) -> Result<S, MarketError> {
    let t = chi_row.len();
    if [r_row.len(), prices.len(), w_row.len(), alpha_row.len()]
        .iter()
        .any(|&l| l != t)
    {
        return Err(MarketError::Dimension(
            "payoff rows must all have length T".into(),
        ));
    }
    let mut total = S::zero();
    for k in 0..t {
        let x = chi_row[k] + r_row[k];
        total = total + te_utility(w_row[k], alpha_row[k], x)?
            - te_payout(chi_row[k], r_row[k], prices[k])?;
    }
    Ok(total)
}

/// Loads, clearing prices and supply shares for a full strategy profile.
pub fn market_state<S: Real>(
    bids: &BidMatrix<S>,
    chi: &DemandMatrix<S>,
    base: &Matrix<S>,
) -> Result<MarketState<S>, MarketError> {
    let loads = aggregate_loads(chi, base)?;
    if bids.lambda.cols() != loads.len() {
        return Err(MarketError::Dimension(format!(
            "bids cover {} slots, demand covers {}",
            bids.lambda.cols(),
            loads.len()
        )));
    }
    let m = bids.lambda.rows();
    let mut supply = Matrix::zeros(m, loads.len());
    let mut price = Vec::with_capacity(loads.len());
    for (t, &load) in loads.iter().enumerate() {
        let col = bids.column(t);
        price.push(clearing_price_affine(&col, load).map_err(|e| e.at(t, None))?);
        for j in 0..m {
            supply.set(j, t, supply_share(&col, j, load)?);
        }
    }
    Ok(MarketState {
        load: loads,
        price,
        supply,
    })
}

/// Profits, revenues, utilities, payouts and payoffs at a market state.
pub fn agent_economics<S: Real>(
    scenario: &Scenario<S>,
    chi: &DemandMatrix<S>,
    state: &MarketState<S>,
) -> Result<AgentEconomics<S>, MarketError> {
    let (m, n, t_count) = (scenario.num_es, scenario.num_te, scenario.num_slots);
    let mut es_profit = Matrix::zeros(m, t_count);
    let mut es_revenue = Matrix::zeros(m, t_count);
    let mut es_cost_m = Matrix::zeros(m, t_count);
    for j in 0..m {
        for t in 0..t_count {
            let f = state.supply.get(j, t);
            let revenue = f * state.price[t];
            let cost = es_cost(&scenario.cost_coeffs[j], f)?;
            es_revenue.set(j, t, revenue);
            es_cost_m.set(j, t, cost);
            es_profit.set(j, t, revenue - cost);
        }
    }
    let mut te_utility_m = Matrix::zeros(n, t_count);
    let mut te_payout_m = Matrix::zeros(n, t_count);
    let mut te_payoff_v = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = S::zero();
        for t in 0..t_count {
            let (c, r) = (chi.chi.get(i, t), scenario.base_demand.get(i, t));
            let util = te_utility(
                scenario.utility.w.get(i, t),
                scenario.utility.alpha.get(i, t),
                c + r,
            )?;
            let pay = te_payout(c, r, state.price[t])?;
            te_utility_m.set(i, t, util);
            te_payout_m.set(i, t, pay);
            u = u + (util - pay);
        }
        te_payoff_v.push(u);
    }
    Ok(AgentEconomics {
        es_profit,
        es_revenue,
        es_cost: es_cost_m,
        te_utility: te_utility_m,
        te_payout: te_payout_m,
        te_payoff: te_payoff_v,
    })
}
