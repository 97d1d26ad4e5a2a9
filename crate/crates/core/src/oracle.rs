//! Independent equilibrium computation and verification.
//!
//! The supplier game in one slot is solved through its convex potential
//! characterization: the equilibrium supplies maximize `−Σ_j Ψ_j(f_j)` subject
//! to `Σ_j f_j = L`, whose stationarity condition is
//! `((L − f_j)/(L − 2f_j))·C'_j(f_j) = φ` for a common multiplier `φ` (the
//! clearing price). Nothing here reuses the iterative DTOA code path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MarketError, OracleError};
use crate::games::{es_profit_derivative, es_surrogate_gradient, te_gradient};
use crate::market::{
    aggregate_loads, clearing_price_affine, es_cost, es_profit, te_payoff, te_utility_prime,
    BidMatrix, CostCoeffs, DemandMatrix, Scenario,
};
use crate::matrix::Matrix;
use crate::numeric::{adaptive_simpson, bisect_nondecreasing};
use crate::real::{ordered_sum, Real};

const BISECTION_STEPS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct SupplierEquilibrium<S> {
    pub price: S,
    pub supplies: Vec<S>,
    pub implied_bids: Vec<S>,
    /// Max of the relative stationarity gaps and the relative clearing gap.
    pub residual: S,
}

/// `((L − f)/(L − 2f))·C'(f)`, increasing on `[0, L/2)` for convex increasing cost.
#[inline]
fn stationarity<S: Real>(f: S, load: S, c: &CostCoeffs<S>) -> S {
    (load - f) / (load - S::two() * f) * (S::two() * c.a2 * f + c.a1)
}

fn assert_increasing<S: Real>(load: S, c: &CostCoeffs<S>, j: usize) -> Result<(), OracleError> {
    let half = load * S::half();
    let mut prev = stationarity(S::zero(), load, c);
    for k in 1..9 {
        let f = half * S::lit(k as f64 / 9.0);
        let v = stationarity(f, load, c);
        if !(v > prev) {
            return Err(OracleError::NonMonotone { supplier: j });
        }
        prev = v;
    }
    Ok(())
}

/// Supply of one server at multiplier `phi`: root of the stationarity map on
/// `[0, L/2)`, or the corner `0` when even zero supply is too expensive.
fn supply_at<S: Real>(phi: S, load: S, c: &CostCoeffs<S>) -> S {
    if stationarity(S::zero(), load, c) >= phi {
        return S::zero();
    }
    bisect_nondecreasing(
        |f| stationarity(f, load, c),
        phi,
        S::zero(),
        load * S::half(),
        BISECTION_STEPS,
    )
    .min(load * S::half())
}

/// Solves the per-slot supplier game exactly by nested bisection.
pub fn solve_supplier_equilibrium<S: Real>(
    load: S,
    costs: &[CostCoeffs<S>],
    tol: S,
) -> Result<SupplierEquilibrium<S>, OracleError> {
    let m = costs.len();
    if m < 2 {
        return Err(
            MarketError::Domain(format!("supplier equilibrium needs M >= 2, got {m}")).into(),
        );
    }
    if m == 2 {
        return Err(OracleError::TwoSupplierDegenerate);
    }
    if !(load > S::zero()) || !load.is_finite() {
        return Err(MarketError::Domain(format!("load must be > 0, got {load}")).into());
    }
    for (j, c) in costs.iter().enumerate() {
        if !(c.a2 >= S::zero() && c.a1 >= S::zero() && c.a0 >= S::zero()) {
            return Err(MarketError::Domain(format!(
                "cost coefficients of supplier {j} must be >= 0"
            ))
            .into());
        }
        assert_increasing(load, c, j)?;
    }

    let total_at = |phi: S| {
        costs
            .iter()
            .fold(S::zero(), |acc, c| acc + supply_at(phi, load, c))
    };
    let even = load / S::from_usize(m).expect("small count");
    let mut phi_hi = costs
        .iter()
        .map(|c| stationarity(even, load, c))
        .fold(S::zero(), S::max)
        .max(S::min_positive_value());
    while total_at(phi_hi) < load {
        phi_hi = phi_hi * S::two();
        if !phi_hi.is_finite() {
            return Err(OracleError::NoEquilibrium {
                load: load.as_f64(),
            });
        }
    }
    let phi = bisect_nondecreasing(total_at, load, S::zero(), phi_hi, BISECTION_STEPS);
    let supplies: Vec<S> = costs.iter().map(|c| supply_at(phi, load, c)).collect();

    let clearing_gap = (ordered_sum(&supplies) - load).abs() / load;
    let stationarity_gap = supplies
        .iter()
        .zip(costs)
        .map(|(&f, c)| {
            let g = stationarity(f, load, c);
            if f > S::zero() {
                (g - phi).abs() / phi
            } else {
                (phi - g).max(S::zero()) / phi
            }
        })
        .fold(S::zero(), S::max);
    let residual = clearing_gap.max(stationarity_gap);
    if residual > tol {
        log::warn!("supplier equilibrium residual {residual} exceeds tolerance {tol}");
    }
    Ok(SupplierEquilibrium {
        price: phi,
        implied_bids: supplies.iter().map(|&f| f / phi).collect(),
        supplies,
        residual,
    })
}

/// Potential `Ψ_j(f) = ((L − f)/(L − 2f))·C_j(f) − ∫₀^f L·C_j(π)/(L − 2π)² dπ`.
pub fn psi<S: Real>(f: S, load: S, coeffs: &CostCoeffs<S>) -> Result<S, OracleError> {
    if !(f >= S::zero()) {
        return Err(MarketError::Domain(format!("supply must be >= 0, got {f}")).into());
    }
    if !(f < load * S::half()) {
        return Err(MarketError::Domain(format!(
            "supply {f} is not below L/2 = {}",
            load * S::half()
        ))
        .into());
    }
    let cost_at = |x: S| coeffs.a2 * x * x + coeffs.a1 * x + coeffs.a0;
    let leading = (load - f) / (load - S::two() * f) * cost_at(f);
    let integrand = |x: S| {
        let d = load - S::two() * x;
        load * cost_at(x) / (d * d)
    };
    let tol = S::lit(1e-10) * (S::one() + leading.abs());
    Ok(leading - adaptive_simpson(&integrand, S::zero(), f, tol, 60))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplierVerification {
    /// `−Σ_j Ψ_j` at the candidate equilibrium.
    pub objective: f64,
    /// Largest objective gain of any feasible probe over the candidate.
    pub max_excess: f64,
    pub probes: usize,
    pub violations: usize,
    pub tolerance: f64,
    pub residual: f64,
    pub passed: bool,
}

fn potential_objective<S: Real>(
    supplies: &[S],
    load: S,
    costs: &[CostCoeffs<S>],
) -> Result<S, OracleError> {
    let mut total = S::zero();
    for (f, c) in supplies.iter().zip(costs) {
        total = total - psi(*f, load, c)?;
    }
    Ok(total)
}

/// Probes load transfers between supplier pairs and reports whether any of
/// them increases the potential objective.
///
/// Each random transfer is tried in both directions, so a candidate that is
/// off the optimum along a probed pair is always caught.
pub fn verify_supplier_equilibrium<S: Real>(
    eq: &SupplierEquilibrium<S>,
    costs: &[CostCoeffs<S>],
    load: S,
    n_probes: usize,
    seed: u64,
) -> Result<SupplierVerification, OracleError> {
    let m = costs.len();
    let base = potential_objective(&eq.supplies, load, costs)?;
    let tolerance = S::lit(1e-8) * base.abs();
    let half = load * S::half();
    let span = S::lit(0.05) * load / S::from_usize(m.max(1)).expect("small count");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_excess = S::zero();
    let mut probes = 1; // the candidate itself, excess 0
    let mut violations = 0;
    for _ in 0..n_probes {
        if m < 2 {
            break;
        }
        let a = rng.random_range(0..m);
        let mut b = rng.random_range(0..m - 1);
        if b >= a {
            b += 1;
        }
        let size = span * S::lit(rng.random_range(1e-3..1.0));
        for direction in [S::one(), -S::one()] {
            let delta = size * direction;
            let mut probe = eq.supplies.clone();
            probe[a] = probe[a] - delta;
            probe[b] = probe[b] + delta;
            if probe[a] < S::zero() || probe[b] < S::zero() || probe[a] >= half || probe[b] >= half
            {
                continue;
            }
            let excess = potential_objective(&probe, load, costs)? - base;
            probes += 1;
            if excess > max_excess {
                max_excess = excess;
            }
            if excess > tolerance {
                violations += 1;
            }
        }
    }
    Ok(SupplierVerification {
        objective: base.as_f64(),
        max_excess: max_excess.as_f64(),
        probes,
        violations,
        tolerance: tolerance.as_f64(),
        residual: eq.residual.as_f64(),
        passed: violations == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Real", deserialize = "S: Real"))]
pub struct BestResponse<S> {
    pub row: Vec<S>,
    pub payoff_current: S,
    pub payoff_best: S,
    pub gain: S,
}

/// Payoff of TE `i` playing `row` against everyone else's current demand and
/// fixed bids, with clearing prices recomputed from the changed loads.
fn payoff_with_row<S: Real>(
    scenario: &Scenario<S>,
    other_loads: &[S],
    bid_totals: &[S],
    i: usize,
    row: &[S],
) -> Result<S, MarketError> {
    let base = scenario.base_demand.row(i);
    let prices: Vec<S> = (0..row.len())
        .map(|t| (other_loads[t] + row[t] + base[t]) / bid_totals[t])
        .collect();
    te_payoff(
        row,
        base,
        &prices,
        scenario.utility.w.row(i),
        scenario.utility.alpha.row(i),
    )
}

/// TE `i`'s exact best response with everyone else held fixed.
///
/// The payoff is separable across slots and strictly concave in each slot's
/// demand, so the optimum on the simplex is a water-filling solution: find
/// the multiplier `ν` at which the per-slot demands solving
/// `∂u/∂χ_t = ν` (clamped at zero) add up to the daily total.
pub fn best_response<S: Real>(
    scenario: &Scenario<S>,
    chi: &DemandMatrix<S>,
    i: usize,
    bids: &BidMatrix<S>,
) -> Result<BestResponse<S>, MarketError> {
    if i >= scenario.num_te {
        return Err(MarketError::Dimension(format!(
            "TE {i} out of range 0..{}",
            scenario.num_te
        )));
    }
    let slots = scenario.num_slots;
    let loads = aggregate_loads(chi, &scenario.base_demand)?;
    let mut bid_totals = Vec::with_capacity(slots);
    for (t, &load) in loads.iter().enumerate() {
        let col = bids.column(t);
        clearing_price_affine(&col, load).map_err(|e| e.at(t, None))?;
        bid_totals.push(ordered_sum(&col));
    }
    let current = chi.chi.row(i).to_vec();
    let base = scenario.base_demand.row(i);
    let other: Vec<S> = (0..slots)
        .map(|t| loads[t] - (current[t] + base[t]))
        .collect();
    let total = scenario.shiftable_total[i];
    let w = scenario.utility.w.row(i);
    let alpha = scenario.utility.alpha.row(i);

    // marginal payoff of putting c units in slot t; strictly decreasing in c
    let marginal = |t: usize, c: S| {
        let x = c + base[t];
        te_utility_prime(w[t], alpha[t], x) - (other[t] + S::two() * x) / bid_totals[t]
    };
    let demand_at = |t: usize, nu: S| {
        if marginal(t, S::zero()) <= nu {
            S::zero()
        } else if marginal(t, total) >= nu {
            total
        } else {
            bisect_nondecreasing(|c| -marginal(t, c), -nu, S::zero(), total, BISECTION_STEPS)
        }
    };

    let mut row = if total > S::zero() {
        let nu_hi = (0..slots)
            .map(|t| marginal(t, S::zero()))
            .fold(S::neg_infinity(), S::max);
        let nu_lo = (0..slots)
            .map(|t| marginal(t, total))
            .fold(S::infinity(), S::min);
        // allocated total is nonincreasing in ν, so bisect on −ν
        let allocated = |mu: S| (0..slots).fold(S::zero(), |acc, t| acc + demand_at(t, -mu));
        let mu = bisect_nondecreasing(allocated, total, -nu_hi, -nu_lo, BISECTION_STEPS);
        (0..slots).map(|t| demand_at(t, -mu)).collect::<Vec<S>>()
    } else {
        vec![S::zero(); slots]
    };
    // absorb the last rounding residue so the row is exactly feasible
    let residue = total - ordered_sum(&row);
    if let Some(k) = (0..slots).max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite")) {
        row[k] = (row[k] + residue).max(S::zero());
    }

    let payoff_current = payoff_with_row(scenario, &other, &bid_totals, i, &current)?;
    let payoff_best = payoff_with_row(scenario, &other, &bid_totals, i, &row)?;
    Ok(BestResponse {
        row,
        payoff_current,
        payoff_best,
        gain: payoff_best - payoff_current,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub samples: usize,
    pub te_max_rel_error: f64,
    pub es_max_rel_error: f64,
    /// Interior supplier samples whose sign was compared.
    pub sign_checked: usize,
    pub sign_agreements: usize,
    pub sign_agreement_rate: f64,
    /// Supplier samples with `f_j ≥ L/2`, excluded from the sign check.
    pub guard_region_samples: usize,
    /// TE samples skipped because the finite-difference stencil straddles the
    /// utility saturation point.
    pub kink_excluded: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic derivatives against central finite differences at
/// random interior states drawn around the scenario's initial point.
///
/// Relative errors are taken against `max(|analytic|, |fd|, floor)`, with
/// floors `1e-3·p²` for the supplier derivative and `1e-3·p` for the customer
/// one (`p` the slot price), the natural magnitudes of each derivative.
pub fn check_gradients<S: Real>(
    scenario: &Scenario<S>,
    n_samples: usize,
    seed: u64,
) -> Result<GradientReport, MarketError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = scenario.num_es;
    let slots = scenario.num_slots;
    let guard = scenario.solver.singularity_delta;
    let init_loads = aggregate_loads(&scenario.initial_demand(), &scenario.base_demand)?;
    let mut report = GradientReport {
        samples: n_samples,
        te_max_rel_error: 0.0,
        es_max_rel_error: 0.0,
        sign_checked: 0,
        sign_agreements: 0,
        sign_agreement_rate: 1.0,
        guard_region_samples: 0,
        kink_excluded: 0,
        tolerance: 1e-6,
        passed: true,
    };

    for _ in 0..n_samples {
        let t = rng.random_range(0..slots);
        let bids = BidMatrix {
            lambda: Matrix::from_fn(m, slots, |_, _| {
                scenario.solver.lambda_init * S::lit(rng.random_range(0.5..1.5))
            }),
        };

        // supplier side
        let j = rng.random_range(0..m);
        let mut col = bids.column(t);
        if rng.random_bool(0.1) {
            let others = ordered_sum(&col) - col[j];
            col[j] = others * S::lit(rng.random_range(1.0..2.0));
        }
        let mut load = init_loads[t] * S::lit(rng.random_range(0.8..1.2));
        if !(load > S::zero()) {
            load = S::one();
        }
        let c = &scenario.cost_coeffs[j];
        let analytic = es_profit_derivative(&col, j, load, c)?;
        let h = S::lit(1e-6) * col[j];
        let (mut up, mut down) = (col.clone(), col.clone());
        up[j] = up[j] + h;
        down[j] = down[j] - h;
        let fd = (es_profit(&up, j, load, c)? - es_profit(&down, j, load, c)?) / (S::two() * h);
        let price = clearing_price_affine(&col, load)?;
        let floor = S::lit(1e-3) * price * price;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        report.es_max_rel_error = report.es_max_rel_error.max(rel.as_f64());

        let share = col[j] * load / ordered_sum(&col);
        if share >= load * S::half() {
            report.guard_region_samples += 1;
        } else if fd.abs() > S::lit(1e-9) * price * price {
            let surrogate = es_surrogate_gradient(&col, j, load, c, guard)?;
            report.sign_checked += 1;
            if surrogate.signum() == fd.signum() {
                report.sign_agreements += 1;
            }
        }

        // customer side: random feasible profile for TE i
        let i = rng.random_range(0..scenario.num_te);
        let mut chi = scenario.initial_demand.clone();
        let weights: Vec<f64> = (0..slots).map(|_| rng.random_range(0.05..1.0)).collect();
        let wsum: f64 = weights.iter().sum();
        for (k, wk) in weights.iter().enumerate() {
            chi.set(i, k, scenario.shiftable_total[i] * S::lit(wk / wsum));
        }
        let demand = DemandMatrix { chi };
        let x = demand.chi.get(i, t) + scenario.base_demand.get(i, t);
        let h = S::lit(1e-6) * x.max(S::one());
        let knee = scenario.utility.w.get(i, t) / scenario.utility.alpha.get(i, t);
        if (x - knee).abs() <= S::lit(10.0) * h || demand.chi.get(i, t) < h {
            report.kink_excluded += 1;
            continue;
        }
        let analytic = te_gradient(scenario, &demand, i, t, &bids.column(t))?;
        let payoff = |delta: S| -> Result<S, MarketError> {
            let mut probe = demand.chi.clone();
            probe.set(i, t, probe.get(i, t) + delta);
            let probe = DemandMatrix { chi: probe };
            let loads = aggregate_loads(&probe, &scenario.base_demand)?;
            let prices = (0..slots)
                .map(|k| clearing_price_affine(&bids.column(k), loads[k]))
                .collect::<Result<Vec<_>, _>>()?;
            te_payoff(
                probe.chi.row(i),
                scenario.base_demand.row(i),
                &prices,
                scenario.utility.w.row(i),
                scenario.utility.alpha.row(i),
            )
        };
        let fd = (payoff(h)? - payoff(-h)?) / (S::two() * h);
        let loads = aggregate_loads(&demand, &scenario.base_demand)?;
        let price = clearing_price_affine(&bids.column(t), loads[t])?;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(S::lit(1e-3) * price);
        report.te_max_rel_error = report.te_max_rel_error.max(rel.as_f64());
    }

    report.sign_agreement_rate = if report.sign_checked > 0 {
        report.sign_agreements as f64 / report.sign_checked as f64
    } else {
        1.0
    };
    report.passed = report.te_max_rel_error < report.tolerance
        && report.es_max_rel_error < report.tolerance
        && report.sign_agreements == report.sign_checked;
    Ok(report)
}

/// Supplier cost at the equilibrium supplies; used by reports.
pub fn equilibrium_costs<S: Real>(
    eq: &SupplierEquilibrium<S>,
    costs: &[CostCoeffs<S>],
) -> Result<Vec<S>, MarketError> {
    eq.supplies
        .iter()
        .zip(costs)
        .map(|(&f, c)| es_cost(c, f))
        .collect()
}
