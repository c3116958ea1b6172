//! Agent-based simulator of the lowest-quality housing market.
//!
//! Agents hold incomes and bid for units of the minimum marketed quality.
//! The utility function is `U(H, x) = (1 + a*H) * sqrt(x)`: it is strictly
//! increasing in both arguments, strictly concave in the numeraire
//! (`U_xx = -(1+aH)/(4 x^{3/2}) < 0`), and its marginal utility of the
//! numeraire `(1+aH)/(2 sqrt(x))` is nondecreasing in `H`, so housing and
//! consumption are complements. This form gives closed-form bid-rents; a
//! generic bisection solver over the same indifference equations is kept
//! alongside as the oracle for any alternative utility.
//!
//! Homelessness scars: agents homeless in period `t` draw down their period
//! `t+1` income by `delta < 0`, which pivots the lower tail of the demand
//! curve inward and makes the homeless count respond asymmetrically to
//! supply shifts.
//!
//! Two conventions worth knowing: `P(H)` is read as the total price of a
//! unit of quality `H` (so the budget is `P(H) + x = Y`), and an agent's
//! willingness to pay for a minimum-quality unit is always measured by the
//! indifference condition against homelessness, `U(h_min, Y - B) = U(0, Y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::ols::{self, EstimateReport};
use crate::panel::{build_panel, Panel, RawSeries, SpecConfig, VariableSpec};

/// Utility parameters and the price schedule over marketed qualities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityParams {
    /// Complementarity strength `a` in `U(H,x) = (1+aH) sqrt(x)`.
    pub complementarity: f64,
    pub h_min: f64,
    pub h_next: f64,
    /// (quality, price) pairs, strictly increasing in both coordinates.
    pub prices: Vec<(f64, f64)>,
}

impl UtilityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.complementarity > 0.0) {
            return Err(AtlasError::InvalidInput("complementarity must be > 0".into()));
        }
        if !(self.h_min > 0.0) || !(self.h_next > self.h_min) {
            return Err(AtlasError::InvalidInput(
                "need 0 < h_min < h_next in the quality ladder".into(),
            ));
        }
        if self.prices.is_empty() {
            return Err(AtlasError::InvalidInput("empty price schedule".into()));
        }
        for w in self.prices.windows(2) {
            if !(w[1].0 > w[0].0) || !(w[1].1 > w[0].1) {
                return Err(AtlasError::InvalidInput(
                    "price schedule must be strictly increasing in quality and price".into(),
                ));
            }
        }
        self.price(self.h_min)?;
        self.price(self.h_next)?;
        Ok(())
    }

    pub fn utility(&self, h: f64, x: f64) -> f64 {
        (1.0 + self.complementarity * h) * x.max(0.0).sqrt()
    }

    /// Price of a marketed quality (exact lookup).
    pub fn price(&self, h: f64) -> Result<f64> {
        self.prices
            .iter()
            .find(|(q, _)| *q == h)
            .map(|(_, p)| *p)
            .ok_or_else(|| AtlasError::InvalidInput(format!("quality {h} is not marketed")))
    }
}

/// Bisection on a decreasing function over `[lo, hi]` with `f(lo) >= 0`.
fn bisect_decreasing(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    if f(lo) < 0.0 {
        return Err(AtlasError::NoRoot(format!(
            "function already negative at lower bound {lo}"
        )));
    }
    if f(hi) > 0.0 {
        return Err(AtlasError::NoRoot(format!(
            "function still positive at upper bound {hi}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Payment that leaves an agent indifferent between housing quality `h` and
/// homelessness: `U(h, y - B) = U(0, y)`. Closed form under the chosen
/// utility: `B = y (1 - (1+ah)^-2)`.
pub fn bid_rent_homeless(params: &UtilityParams, income: f64, h: f64) -> Result<f64> {
    if !(income > 0.0) {
        return Err(AtlasError::InvalidInput(format!(
            "income must be positive, got {income}"
        )));
    }
    if h < 0.0 {
        return Err(AtlasError::InvalidInput(format!("quality must be >= 0, got {h}")));
    }
    let scale = 1.0 + params.complementarity * h;
    Ok(income * (1.0 - 1.0 / (scale * scale)))
}

/// Bisection counterpart of [`bid_rent_homeless`], solving the indifference
/// equation directly.
pub fn bid_rent_homeless_bisect(params: &UtilityParams, income: f64, h: f64) -> Result<f64> {
    if !(income > 0.0) {
        return Err(AtlasError::InvalidInput(format!(
            "income must be positive, got {income}"
        )));
    }
    let target = params.utility(0.0, income);
    bisect_decreasing(|b| params.utility(h, income - b) - target, 0.0, income)
}

/// Payment that leaves a low-end participant indifferent between `h_min` and
/// their next-preferred quality bought at its listed price:
/// `U(h_min, y - B1) = U(h_next, y - P(h_next))`. Closed form:
/// `B1 = y - (y - P(h_next)) * rho^2` with `rho = (1+a*h_next)/(1+a*h_min)`.
///
/// Errors when the agent cannot afford the alternative or when the bid has
/// no root in `[0, y)` (the agent never demands `h_min`).
pub fn bid_rent_marginal(params: &UtilityParams, income: f64) -> Result<f64> {
    let p_next = params.price(params.h_next)?;
    if !(income > p_next) {
        return Err(AtlasError::NoRoot(format!(
            "income {income} cannot afford the next-preferred quality at {p_next}"
        )));
    }
    let rho = (1.0 + params.complementarity * params.h_next)
        / (1.0 + params.complementarity * params.h_min);
    let bid = income - (income - p_next) * rho * rho;
    if bid < 0.0 {
        return Err(AtlasError::NoRoot(format!(
            "marginal bid {bid} is negative; the agent never demands the minimum quality"
        )));
    }
    Ok(bid)
}

/// Bisection counterpart of [`bid_rent_marginal`].
pub fn bid_rent_marginal_bisect(params: &UtilityParams, income: f64) -> Result<f64> {
    let p_next = params.price(params.h_next)?;
    if !(income > p_next) {
        return Err(AtlasError::NoRoot(format!(
            "income {income} cannot afford the next-preferred quality at {p_next}"
        )));
    }
    let target = params.utility(params.h_next, income - p_next);
    bisect_decreasing(
        |b| params.utility(params.h_min, income - b) - target,
        0.0,
        income,
    )
}

/// Income at which the homeless-type bid for `h_min` exactly meets its
/// price; below it an agent cannot afford the minimum marketed quality.
pub fn cutoff_income(params: &UtilityParams) -> Result<f64> {
    let p_min = params.price(params.h_min)?;
    if p_min == 0.0 {
        return Ok(0.0);
    }
    let scale = 1.0 + params.complementarity * params.h_min;
    Ok(p_min / (1.0 - 1.0 / (scale * scale)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agent {
    pub id: u32,
    pub income: f64,
    pub homeless: bool,
}

/// One entry of the demand curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bid {
    pub agent_id: u32,
    pub bid: f64,
}

/// Every agent's bid for an `h_min` unit, sorted nonincreasing with ties
/// broken by agent id.
///
/// Marginal-quality participants (who can afford `h_next` and whose marginal
/// bid is well defined and nonnegative) contribute that bid; everyone else
/// contributes the homeless-type bid for `h_min`, their willingness to pay
/// measured against homelessness.
pub fn demand_curve(agents: &[Agent], params: &UtilityParams) -> Result<Vec<Bid>> {
    if agents.is_empty() {
        return Err(AtlasError::InvalidInput("no agents".into()));
    }
    let mut bids = Vec::with_capacity(agents.len());
    for agent in agents {
        let bid = match bid_rent_marginal(params, agent.income) {
            Ok(b1) => b1,
            Err(AtlasError::NoRoot(_)) => bid_rent_homeless(params, agent.income, params.h_min)?,
            Err(e) => return Err(e),
        };
        bids.push(Bid {
            agent_id: agent.id,
            bid,
        });
    }
    bids.sort_by(|a, b| {
        b.bid
            .partial_cmp(&a.bid)
            .expect("finite bids")
            .then(a.agent_id.cmp(&b.agent_id))
    });
    Ok(bids)
}

/// Supply of `h_min` units: quantity as a nondecreasing piecewise-linear
/// function of price, clamped flat beyond its endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupplyCurve {
    /// (price, quantity) breakpoints with strictly increasing prices.
    pub points: Vec<(f64, f64)>,
}

impl SupplyCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(AtlasError::InvalidInput("empty supply curve".into()));
        }
        for (p, q) in &points {
            if !p.is_finite() || !q.is_finite() || *p < 0.0 || *q < 0.0 {
                return Err(AtlasError::InvalidInput(
                    "supply breakpoints must be finite and nonnegative".into(),
                ));
            }
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(AtlasError::InvalidInput(
                    "supply prices must be strictly increasing".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(AtlasError::InvalidInput(
                    "supply quantity must be nondecreasing in price".into(),
                ));
            }
        }
        Ok(SupplyCurve { points })
    }

    /// Perfectly inelastic stock: the same quantity at every price.
    pub fn vertical(quantity: f64) -> Self {
        SupplyCurve {
            points: vec![(0.0, quantity)],
        }
    }

    pub fn quantity_at(&self, price: f64) -> f64 {
        let pts = &self.points;
        if price <= pts[0].0 {
            return pts[0].1;
        }
        if price >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        for w in pts.windows(2) {
            let ((p0, q0), (p1, q1)) = (w[0], w[1]);
            if price <= p1 {
                return q0 + (q1 - q0) * (price - p0) / (p1 - p0);
            }
        }
        pts[pts.len() - 1].1
    }

    /// Price interval over which the curve delivers exactly `q`, or None
    /// when `q` is below the minimum or above the maximum quantity. The
    /// upper end is infinite when `q` equals the terminal quantity.
    pub fn prices_for_quantity(&self, q: f64) -> Option<(f64, f64)> {
        let q_min = self.points[0].1;
        let q_max = self.points[self.points.len() - 1].1;
        if q < q_min || q > q_max {
            return None;
        }
        // Smallest price reaching q.
        let lo = if q <= q_min {
            0.0
        } else {
            let mut found = self.points[self.points.len() - 1].0;
            for w in self.points.windows(2) {
                let ((p0, q0), (p1, q1)) = (w[0], w[1]);
                if q > q0 && q <= q1 {
                    found = if q1 > q0 { p0 + (p1 - p0) * (q - q0) / (q1 - q0) } else { p1 };
                    break;
                }
            }
            found
        };
        // Largest price not exceeding q.
        let hi = if q >= q_max {
            f64::INFINITY
        } else {
            let mut found = 0.0;
            for w in self.points.windows(2) {
                let ((p0, q0), (p1, q1)) = (w[0], w[1]);
                if q >= q0 && q < q1 {
                    found = if q1 > q0 { p0 + (p1 - p0) * (q - q0) / (q1 - q0) } else { p0 };
                    break;
                }
            }
            found
        };
        Some((lo, hi.max(lo)))
    }

    /// Scale every quantity by `factor` (a supply shift in or out).
    pub fn scaled(&self, factor: f64) -> Result<SupplyCurve> {
        if !(factor >= 0.0) || !factor.is_finite() {
            return Err(AtlasError::InvalidInput(format!(
                "supply scale factor must be finite and >= 0, got {factor}"
            )));
        }
        SupplyCurve::new(self.points.iter().map(|(p, q)| (*p, q * factor)).collect())
    }
}

/// Market-clearing outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub price: f64,
    pub quantity: f64,
    pub housed_ids: Vec<u32>,
    pub homeless_ids: Vec<u32>,
    /// Supply covered every agent at zero price.
    pub degenerate_zero_price: bool,
}

const QTY_EPS: f64 = 1e-9;

/// Clear the market: walk the sorted bid staircase against the supply curve.
///
/// The housed set is the largest prefix of bids the supply can serve at the
/// marginal bid. The price is that marginal bid when supply passes exactly
/// through it (the perfectly-inelastic case included); when supply crosses
/// strictly inside the gap down to the next bid, the price is the crossing
/// point, and a vertical overlap inside the gap resolves to its midpoint.
pub fn equilibrium(demand: &[Bid], supply: &SupplyCurve) -> Result<Equilibrium> {
    if demand.is_empty() {
        return Err(AtlasError::InvalidInput("empty demand".into()));
    }
    for w in demand.windows(2) {
        if w[1].bid > w[0].bid {
            return Err(AtlasError::InvalidInput("demand is not sorted nonincreasing".into()));
        }
    }
    let n = demand.len();

    // Degenerate: supply at zero price strictly exceeds everyone.
    if supply.quantity_at(0.0) > n as f64 {
        return Ok(Equilibrium {
            price: 0.0,
            quantity: n as f64,
            housed_ids: demand.iter().map(|b| b.agent_id).collect(),
            homeless_ids: Vec::new(),
            degenerate_zero_price: true,
        });
    }

    // Largest prefix j with supply at the j-th bid covering j units.
    let mut q_star = 0usize;
    for (j, bid) in demand.iter().enumerate() {
        if supply.quantity_at(bid.bid) + QTY_EPS >= (j + 1) as f64 {
            q_star = j + 1;
        } else {
            break;
        }
    }

    if q_star == 0 {
        // Nobody is served; the price that would call forth one unit sits
        // above every bid.
        let price = supply
            .prices_for_quantity(1.0)
            .map(|(lo, _)| lo)
            .unwrap_or(f64::INFINITY);
        return Ok(Equilibrium {
            price,
            quantity: 0.0,
            housed_ids: Vec::new(),
            homeless_ids: demand.iter().map(|b| b.agent_id).collect(),
            degenerate_zero_price: false,
        });
    }

    let marginal_bid = demand[q_star - 1].bid;
    let next_bid = if q_star < n { demand[q_star].bid } else { 0.0 };
    let supply_at_marginal = supply.quantity_at(marginal_bid);
    let price = if (supply_at_marginal - q_star as f64).abs() <= QTY_EPS * (1.0 + q_star as f64) {
        marginal_bid
    } else {
        // Excess supply at the marginal bid: the clearing price sits in the
        // gap between the marginal bid and the next one.
        match supply.prices_for_quantity(q_star as f64) {
            Some((lo, hi)) => {
                let lo = lo.max(next_bid);
                let hi = hi.min(marginal_bid);
                if lo >= hi {
                    hi
                } else {
                    0.5 * (lo + hi)
                }
            }
            // Supply never equals q_star exactly (a flat fractional stock):
            // the walk first touches the next bid's step; that agent is
            // rationed, not served.
            None => next_bid,
        }
    };

    Ok(Equilibrium {
        price,
        quantity: q_star as f64,
        housed_ids: demand[..q_star].iter().map(|b| b.agent_id).collect(),
        homeless_ids: demand[q_star..].iter().map(|b| b.agent_id).collect(),
        degenerate_zero_price: false,
    })
}

/// Simulation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketConfig {
    pub utility: UtilityParams,
    pub n_agents: usize,
    /// Lognormal income draw: ln Y ~ Normal(log_mean, log_sd).
    pub income_log_mean: f64,
    pub income_log_sd: f64,
    pub supply: SupplyCurve,
    /// Scarring shock applied next period to currently homeless agents.
    /// Must be <= 0.
    pub scarring: f64,
    /// Half-width of the zero-mean uniform income noise.
    pub noise_width: f64,
    /// Incomes never fall below this (keeps sqrt and logs defined under
    /// repeated scarring).
    pub income_floor: f64,
    pub seed: u64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        self.utility.validate()?;
        if self.n_agents == 0 {
            return Err(AtlasError::InvalidInput("need at least one agent".into()));
        }
        if self.scarring > 0.0 {
            return Err(AtlasError::InvalidInput(format!(
                "scarring must be <= 0, got {}",
                self.scarring
            )));
        }
        if self.noise_width < 0.0 || !(self.income_floor > 0.0) {
            return Err(AtlasError::InvalidInput(
                "noise width must be >= 0 and income floor positive".into(),
            ));
        }
        if !(self.income_log_sd >= 0.0) {
            return Err(AtlasError::InvalidInput("income log-sd must be >= 0".into()));
        }
        Ok(())
    }

    /// Reasonable default market for demos and the asymmetry experiment.
    ///
    /// Supply slopes upward (the flat-supply limit makes the housed count
    /// track the stock one-for-one, which would mute the asymmetry), and the
    /// next-preferred quality is priced far above the income distribution so
    /// the homeless margin is populated by homeless-type bids.
    pub fn default_market(seed: u64) -> MarketConfig {
        MarketConfig {
            utility: UtilityParams {
                complementarity: 1.0,
                h_min: 1.0,
                h_next: 2.0,
                prices: vec![(1.0, 30.0), (2.0, 400.0)],
            },
            n_agents: 10_000,
            income_log_mean: 4.0,
            income_log_sd: 0.55,
            supply: SupplyCurve::new(vec![(11.5, 7_000.0), (31.5, 10_000.0)])
                .expect("static breakpoints"),
            scarring: -6.0,
            noise_width: 0.5,
            income_floor: 1e-6,
            seed,
        }
    }

    pub fn draw_agents(&self, rng: &mut ChaCha8Rng) -> Vec<Agent> {
        use rand_distr::{Distribution, LogNormal};
        let dist = LogNormal::new(self.income_log_mean, self.income_log_sd)
            .expect("validated sd >= 0");
        (0..self.n_agents)
            .map(|i| Agent {
                id: i as u32,
                income: dist.sample(rng).max(self.income_floor),
                homeless: false,
            })
            .collect()
    }
}

/// Advance incomes one period: homeless agents take the scarring shock, and
/// everyone takes an independent bounded noise draw. Incomes are floored.
pub fn step_dynamics(agents: &mut [Agent], config: &MarketConfig, rng: &mut ChaCha8Rng) {
    for agent in agents.iter_mut() {
        let eps = if config.noise_width > 0.0 {
            rng.gen_range(-config.noise_width..=config.noise_width)
        } else {
            0.0
        };
        let shock = if agent.homeless { config.scarring } else { 0.0 };
        agent.income = (agent.income + shock + eps).max(config.income_floor);
    }
}

/// Per-period record of the simulated market.
#[derive(Debug, Clone, Serialize)]
pub struct PeriodRecord {
    pub t: usize,
    pub price: f64,
    pub quantity: f64,
    pub homeless_count: usize,
    pub mean_income_homeless: f64,
    pub mean_income_housed: f64,
}

/// One branch of the two-sided supply-shift experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ShockBranch {
    pub supply_factor: f64,
    pub price: f64,
    pub homeless_count: usize,
    pub d_price: f64,
    pub d_homeless: i64,
}

/// Responses to an equal inward and outward supply shift from the same
/// state.
#[derive(Debug, Clone, Serialize)]
pub struct AsymmetryReport {
    pub shift_fraction: f64,
    pub base_price: f64,
    pub base_homeless: usize,
    pub inward: ShockBranch,
    pub outward: ShockBranch,
    /// |inward homeless change| / |outward homeless change|; None when the
    /// outward branch moves nobody.
    pub homeless_response_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationResult {
    pub periods: Vec<PeriodRecord>,
    pub asymmetry: AsymmetryReport,
}

fn mean_income(agents: &[Agent], ids: &[u32]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let lookup: std::collections::BTreeMap<u32, f64> =
        agents.iter().map(|a| (a.id, a.income)).collect();
    ids.iter().map(|id| lookup[id]).sum::<f64>() / ids.len() as f64
}

/// Run `t_max` periods of demand -> equilibrium -> scarring dynamics, then
/// branch the final state under supply shifted in and out by
/// `shift_fraction`.
///
/// `shock_schedule` entries (t, factor) rescale supply before period t
/// clears.
pub fn simulate(
    config: &MarketConfig,
    shock_schedule: &[(usize, f64)],
    t_max: usize,
    shift_fraction: f64,
) -> Result<SimulationResult> {
    config.validate()?;
    if t_max < 2 {
        return Err(AtlasError::InvalidInput("need at least 2 periods".into()));
    }
    if !(0.0 < shift_fraction && shift_fraction < 1.0) {
        return Err(AtlasError::InvalidInput(
            "shift fraction must be in (0, 1)".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut agents = config.draw_agents(&mut rng);
    let mut supply = config.supply.clone();
    let mut periods = Vec::with_capacity(t_max);

    for t in 0..t_max {
        for &(shock_t, factor) in shock_schedule {
            if shock_t == t {
                supply = supply.scaled(factor)?;
            }
        }
        let demand = demand_curve(&agents, &config.utility)?;
        let eq = equilibrium(&demand, &supply)?;
        let homeless_set: std::collections::BTreeSet<u32> =
            eq.homeless_ids.iter().copied().collect();
        for agent in agents.iter_mut() {
            agent.homeless = homeless_set.contains(&agent.id);
        }
        periods.push(PeriodRecord {
            t,
            price: eq.price,
            quantity: eq.quantity,
            homeless_count: eq.homeless_ids.len(),
            mean_income_homeless: mean_income(&agents, &eq.homeless_ids),
            mean_income_housed: mean_income(&agents, &eq.housed_ids),
        });
        step_dynamics(&mut agents, config, &mut rng);
    }

    // Two-branch experiment from the post-dynamics final state.
    let demand = demand_curve(&agents, &config.utility)?;
    let base = equilibrium(&demand, &supply)?;
    let inward_eq = equilibrium(&demand, &supply.scaled(1.0 - shift_fraction)?)?;
    let outward_eq = equilibrium(&demand, &supply.scaled(1.0 + shift_fraction)?)?;
    let inward = ShockBranch {
        supply_factor: 1.0 - shift_fraction,
        price: inward_eq.price,
        homeless_count: inward_eq.homeless_ids.len(),
        d_price: inward_eq.price - base.price,
        d_homeless: inward_eq.homeless_ids.len() as i64 - base.homeless_ids.len() as i64,
    };
    let outward = ShockBranch {
        supply_factor: 1.0 + shift_fraction,
        price: outward_eq.price,
        homeless_count: outward_eq.homeless_ids.len(),
        d_price: outward_eq.price - base.price,
        d_homeless: outward_eq.homeless_ids.len() as i64 - base.homeless_ids.len() as i64,
    };
    let ratio = if outward.d_homeless != 0 {
        Some(inward.d_homeless.unsigned_abs() as f64 / outward.d_homeless.unsigned_abs() as f64)
    } else {
        None
    };
    Ok(SimulationResult {
        periods,
        asymmetry: AsymmetryReport {
            shift_fraction,
            base_price: base.price,
            base_homeless: base.homeless_ids.len(),
            inward,
            outward,
            homeless_response_ratio: ratio,
        },
    })
}

/// Configuration of the simulate -> estimate bridge: many independent
/// markets, each burned in to a scarred steady state and then hit by one
/// random supply shock per measured transition, pooled into a piecewise
/// panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub market: MarketConfig,
    pub n_markets: usize,
    /// Measured periods (>= 2; the first is the pre-shock state).
    pub n_periods: usize,
    /// Scarring periods simulated before measurement starts. These carry no
    /// shocks: they carve out the depressed demand segment below the price
    /// while the price itself stays at the edge of the unscarred segment.
    pub burn_in: usize,
    /// Supply factor per measured transition, drawn uniformly from
    /// [1 - shock_width, 1 + shock_width].
    pub shock_width: f64,
    pub seed: u64,
}

impl BridgeConfig {
    pub fn default_bridge(seed: u64) -> BridgeConfig {
        let mut market = MarketConfig::default_market(seed);
        market.n_agents = 800;
        market.supply =
            SupplyCurve::new(vec![(11.5, 560.0), (31.5, 800.0)]).expect("static breakpoints");
        BridgeConfig {
            market,
            n_markets: 150,
            n_periods: 2,
            burn_in: 3,
            shock_width: 0.06,
            seed,
        }
    }
}

/// Simulate the ensemble and regress the change in the log homeless rate on
/// the piecewise split of the change in log price.
pub fn run_bridge(config: &BridgeConfig) -> Result<(Panel, EstimateReport)> {
    config.market.validate()?;
    if config.n_periods < 2 {
        return Err(AtlasError::InvalidInput(
            "bridge needs at least 2 measured periods".into(),
        ));
    }
    // Markets are independent seeded simulations; run them in parallel and
    // merge by market index so the panel is schedule-independent.
    use rayon::prelude::*;
    let per_market: Vec<Vec<(String, i32, &'static str, f64)>> = (0..config.n_markets)
        .into_par_iter()
        .map(|m| -> Result<Vec<(String, i32, &'static str, f64)>> {
            let market_seed = config
                .seed
                .wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut cfg = config.market.clone();
            cfg.seed = market_seed;

            // One random supply factor per measured transition.
            let mut shock_rng = ChaCha8Rng::seed_from_u64(market_seed ^ 0xA5A5_5A5A);
            let total_periods = config.burn_in + config.n_periods;
            let schedule: Vec<(usize, f64)> = (config.burn_in + 1..total_periods)
                .map(|t| {
                    (
                        t,
                        1.0 + shock_rng.gen_range(-config.shock_width..=config.shock_width),
                    )
                })
                .collect();
            let sim = simulate(&cfg, &schedule, total_periods, 0.1)?;
            let msa = format!("mkt{m:04}");
            let mut rows = Vec::new();
            for record in sim.periods.iter().skip(config.burn_in) {
                let year = (record.t - config.burn_in) as i32;
                let rate = record.homeless_count as f64 / cfg.n_agents as f64;
                rows.push((msa.clone(), year, "homeless_rate", rate));
                rows.push((msa.clone(), year, "price", record.price));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut series = RawSeries::new();
    for rows in per_market {
        for (msa, year, variable, value) in rows {
            series.insert(msa, year, variable, value)?;
        }
    }

    let periods: Vec<(i32, i32)> = (0..config.n_periods as i32 - 1)
        .map(|t| (t, t + 1))
        .collect();
    let spec = SpecConfig {
        label: "bridge".into(),
        outcome: VariableSpec::log("homeless_rate"),
        split: Some(VariableSpec::log("price")),
        covariates: Vec::new(),
        periods,
    };
    let panel = build_panel(&series, &spec)?;
    let design = ols::design_from_panel(&panel)?;
    let report = ols::fit_labeled(&design, "bridge", panel.drops.summary())?;
    Ok((panel, report))
}

/// Numeric audit of the utility assumptions on a grid (increasing in both
/// arguments, concave in the numeraire, complementarity).
pub fn utility_assumptions_hold(params: &UtilityParams) -> bool {
    let h_grid: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
    let x_grid: Vec<f64> = (1..20).map(|i| i as f64 * 5.0).collect();
    let du_dx = |h: f64, x: f64| (params.utility(h, x + 1e-5) - params.utility(h, x - 1e-5)) / 2e-5;
    for &h in &h_grid {
        for &x in &x_grid {
            // Strictly increasing in x and (for x > 0) in h.
            if params.utility(h, x + 1e-5) <= params.utility(h, x) {
                return false;
            }
            if params.utility(h + 0.5, x) <= params.utility(h, x) {
                return false;
            }
            // Concavity in x.
            let second = (params.utility(h, x + 1e-4) - 2.0 * params.utility(h, x)
                + params.utility(h, x - 1e-4))
                / 1e-8;
            if second >= 0.0 {
                return false;
            }
            // Marginal utility of x nondecreasing in h.
            if du_dx(h + 0.5, x) < du_dx(h, x) - 1e-9 {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> UtilityParams {
        UtilityParams {
            complementarity: 1.0,
            h_min: 1.0,
            h_next: 2.0,
            prices: vec![(1.0, 30.0), (2.0, 90.0)],
        }
    }

    #[test]
    fn utility_assumptions_audit() {
        assert!(utility_assumptions_hold(&params()));
    }

    #[test]
    fn homeless_bid_trivial_cases() {
        let p = params();
        assert_eq!(bid_rent_homeless(&p, 100.0, 0.0).unwrap(), 0.0);
        // a=1, H=1, Y=100: B = 100 * (1 - 1/4) = 75.
        assert!((bid_rent_homeless(&p, 100.0, 1.0).unwrap() - 75.0).abs() < 1e-12);
        // Monotone in income.
        assert!((bid_rent_homeless(&p, 200.0, 1.0).unwrap() - 150.0).abs() < 1e-12);
        assert!(bid_rent_homeless(&p, 0.0, 1.0).is_err());
        assert!(bid_rent_homeless(&p, -5.0, 1.0).is_err());
    }

    #[test]
    fn homeless_bid_bisection_agrees_with_closed_form() {
        use rand::{Rng, SeedableRng};
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = rng.gen_range(1.0..500.0);
            let h = rng.gen_range(0.0..4.0);
            let closed = bid_rent_homeless(&p, y, h).unwrap();
            let numeric = bid_rent_homeless_bisect(&p, y, h).unwrap();
            assert!(
                (closed - numeric).abs() < 1e-10 * y.max(1.0),
                "y={y} h={h}: {closed} vs {numeric}"
            );
        }
    }

    #[test]
    fn marginal_bid_constructed_indifference() {
        // Choose P(h_next) so the marginal bid lands exactly on P(h_min):
        // B1 = p_min requires y - (y - p_next) rho^2 = p_min.
        let mut p = params();
        let rho: f64 = (1.0 + 2.0) / (1.0 + 1.0); // 1.5
        let y = 120.0;
        let p_min = 30.0;
        let p_next = y - (y - p_min) / (rho * rho);
        p.prices = vec![(1.0, p_min), (2.0, p_next)];
        let b1 = bid_rent_marginal(&p, y).unwrap();
        assert!((b1 - p_min).abs() < 1e-10);
    }

    #[test]
    fn marginal_bid_no_root_for_high_income() {
        // a=1, h_min=1, h_next=2, P(h_next)=40, y=100:
        // B1 = 100 - 60 * 2.25 = -35 -> no root.
        let mut p = params();
        p.prices = vec![(1.0, 30.0), (2.0, 40.0)];
        match bid_rent_marginal(&p, 100.0).unwrap_err() {
            AtlasError::NoRoot(msg) => assert!(msg.contains("never demands")),
            other => panic!("unexpected error {other:?}"),
        }
        // Cannot afford the alternative at all.
        assert!(matches!(
            bid_rent_marginal(&p, 35.0).unwrap_err(),
            AtlasError::NoRoot(_)
        ));
    }

    #[test]
    fn marginal_bid_bisection_agrees_with_closed_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = rng.gen_range(0.2..2.0);
            let h_min = rng.gen_range(0.5..1.5);
            let h_next = h_min + rng.gen_range(0.2..1.0);
            let p_min = rng.gen_range(5.0..20.0);
            let p_next = p_min + rng.gen_range(1.0..20.0);
            let p = UtilityParams {
                complementarity: a,
                h_min,
                h_next,
                prices: vec![(h_min, p_min), (h_next, p_next)],
            };
            // Keep income in the range where the bid exists.
            let rho = (1.0 + a * h_next) / (1.0 + a * h_min);
            let y_max = p_next * rho * rho / (rho * rho - 1.0);
            if y_max <= p_next * 1.01 {
                continue;
            }
            let y = rng.gen_range(p_next * 1.01..y_max * 0.99);
            let closed = bid_rent_marginal(&p, y).unwrap();
            let numeric = bid_rent_marginal_bisect(&p, y).unwrap();
            assert!(
                (closed - numeric).abs() < 1e-10 * y.max(1.0),
                "y={y}: {closed} vs {numeric}"
            );
        }
    }

    #[test]
    fn cutoff_income_cases() {
        let p = params();
        // P(h_min)=30, a=1, h_min=1: cutoff = 30 / (3/4) = 40.
        let cutoff = cutoff_income(&p).unwrap();
        assert!((cutoff - 40.0).abs() < 1e-12);

        // Root-finder cross-check: the homeless bid at the cutoff equals the
        // price.
        let bid = bid_rent_homeless_bisect(&p, cutoff, p.h_min).unwrap();
        assert!((bid - 30.0).abs() < 1e-9);

        let mut free = params();
        free.prices = vec![(1.0, 0.0), (2.0, 60.0)];
        assert_eq!(cutoff_income(&free).unwrap(), 0.0);
    }

    #[test]
    fn cutoff_classifies_agents() {
        let p = params();
        let cutoff = cutoff_income(&p).unwrap();
        let below = bid_rent_homeless(&p, cutoff * 0.999, p.h_min).unwrap();
        let above = bid_rent_homeless(&p, cutoff * 1.001, p.h_min).unwrap();
        let price = p.price(p.h_min).unwrap();
        assert!(below < price);
        assert!(above > price);
    }

    #[test]
    fn bid_rent_slope_strictly_between_zero_and_one() {
        let p = params();
        for i in 1..=50 {
            let y = 4.0 * i as f64;
            let h = 1e-4 * y;
            let slope = (bid_rent_homeless(&p, y + h, p.h_min).unwrap()
                - bid_rent_homeless(&p, y, p.h_min).unwrap())
                / h;
            assert!(slope > 0.0 && slope < 1.0, "slope {slope} at y={y}");
        }
    }

    #[test]
    fn demand_curve_is_flat_for_identical_agents() {
        let p = params();
        let agents: Vec<Agent> = (0..5)
            .map(|i| Agent {
                id: i,
                income: 35.0,
                homeless: false,
            })
            .collect();
        let bids = demand_curve(&agents, &p).unwrap();
        assert!(bids.windows(2).all(|w| (w[0].bid - w[1].bid).abs() < 1e-12));
        // Ties resolve by agent id.
        let ids: Vec<u32> = bids.iter().map(|b| b.agent_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn demand_bids_track_income_below_participation_margin() {
        let p = params();
        // All incomes below P(h_next) = 90, so every bid is the homeless type
        // and strictly increasing in income.
        let agents: Vec<Agent> = (0..20)
            .map(|i| Agent {
                id: i,
                income: 20.0 + 3.0 * i as f64,
                homeless: false,
            })
            .collect();
        let bids = demand_curve(&agents, &p).unwrap();
        for w in bids.windows(2) {
            assert!(w[0].bid > w[1].bid);
        }
        // Sorted descending bid means descending income here.
        assert_eq!(bids[0].agent_id, 19);
        assert_eq!(bids.last().unwrap().agent_id, 0);

        // Raising an income never lowers the agent's homeless-type bid.
        let before = bid_rent_homeless(&p, 50.0, p.h_min).unwrap();
        let after = bid_rent_homeless(&p, 100.0, p.h_min).unwrap();
        assert!(after > before);
    }

    #[test]
    fn demand_curve_nonincreasing_always() {
        use rand::{Rng, SeedableRng};
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let agents: Vec<Agent> = (0..200)
            .map(|i| Agent {
                id: i,
                income: rng.gen_range(5.0..400.0),
                homeless: false,
            })
            .collect();
        let bids = demand_curve(&agents, &p).unwrap();
        for w in bids.windows(2) {
            assert!(w[0].bid >= w[1].bid);
        }
    }

    fn hand_bids() -> Vec<Bid> {
        [10.0, 8.0, 6.0, 4.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, b)| Bid {
                agent_id: i as u32,
                bid: *b,
            })
            .collect()
    }

    #[test]
    fn equilibrium_vertical_supply_for_everyone() {
        let eq = equilibrium(&hand_bids(), &SupplyCurve::vertical(5.0)).unwrap();
        assert_eq!(eq.price, 2.0);
        assert!(eq.homeless_ids.is_empty());
        assert_eq!(eq.quantity, 5.0);
    }

    #[test]
    fn equilibrium_zero_supply_all_homeless() {
        let eq = equilibrium(&hand_bids(), &SupplyCurve::vertical(0.0)).unwrap();
        assert_eq!(eq.homeless_ids.len(), 5);
        assert_eq!(eq.quantity, 0.0);
        assert!(eq.price.is_infinite());
    }

    #[test]
    fn equilibrium_hand_fixture_prices_marginal_bid() {
        let eq = equilibrium(&hand_bids(), &SupplyCurve::vertical(3.0)).unwrap();
        assert_eq!(eq.price, 6.0);
        assert_eq!(eq.quantity, 3.0);
        // The bid-6 agent is housed; bids 4 and 2 are homeless.
        assert_eq!(eq.housed_ids, vec![0, 1, 2]);
        assert_eq!(eq.homeless_ids, vec![3, 4]);
    }

    #[test]
    fn equilibrium_sloped_supply_crosses_inside_gap() {
        // S(p) = p - 1.5 between the fixture bids: delivers exactly 3 units
        // at p = 4.5, inside the (4, 6) gap.
        let supply = SupplyCurve::new(vec![(1.5, 0.0), (11.5, 10.0)]).unwrap();
        let eq = equilibrium(&hand_bids(), &supply).unwrap();
        assert_eq!(eq.quantity, 3.0);
        assert!((eq.price - 4.5).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_vertical_overlap_resolves_to_midpoint() {
        // Supply is flat at 3 units for p in [4.5, 5.5] strictly inside the
        // (4, 6) gap: any price there clears, so take the midpoint 5.0.
        let supply =
            SupplyCurve::new(vec![(0.0, 2.5), (4.5, 3.0), (5.5, 3.0), (9.0, 6.0)]).unwrap();
        let eq = equilibrium(&hand_bids(), &supply).unwrap();
        assert_eq!(eq.quantity, 3.0);
        assert!((eq.price - 5.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_exact_diagonal_crossing() {
        // S(p) = p: crossing at (4, 4) exactly on the 4th bid.
        let supply = SupplyCurve::new(vec![(0.0, 0.0), (100.0, 100.0)]).unwrap();
        let eq = equilibrium(&hand_bids(), &supply).unwrap();
        assert_eq!(eq.quantity, 4.0);
        assert!((eq.price - 4.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_degenerate_excess_supply_is_flagged() {
        let eq = equilibrium(&hand_bids(), &SupplyCurve::vertical(10.0)).unwrap();
        assert!(eq.degenerate_zero_price);
        assert_eq!(eq.price, 0.0);
        assert_eq!(eq.homeless_ids.len(), 0);
    }

    #[test]
    fn dynamics_scarring_and_fixed_point() {
        let mut config = MarketConfig::default_market(1);
        config.noise_width = 0.0;
        let mut agents = vec![
            Agent {
                id: 0,
                income: 50.0,
                homeless: false,
            },
            Agent {
                id: 1,
                income: 20.0,
                homeless: true,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        step_dynamics(&mut agents, &config, &mut rng);
        assert_eq!(agents[0].income, 50.0);
        assert_eq!(agents[1].income, 20.0 + config.scarring);

        // delta = 0, eps = 0: nothing moves.
        config.scarring = 0.0;
        let before = agents.clone();
        step_dynamics(&mut agents, &config, &mut rng);
        assert_eq!(
            agents.iter().map(|a| a.income).collect::<Vec<_>>(),
            before.iter().map(|a| a.income).collect::<Vec<_>>()
        );
    }

    #[test]
    fn seeded_runs_are_bit_reproducible() {
        let config = MarketConfig::default_market(77);
        let a = simulate(&config, &[], 4, 0.1).unwrap();
        let b = simulate(&config, &[], 4, 0.1).unwrap();
        let ser_a = serde_json::to_string(&a.periods).unwrap();
        let ser_b = serde_json::to_string(&b.periods).unwrap();
        assert_eq!(ser_a, ser_b);
    }

    #[test]
    fn zero_shock_zero_noise_is_constant() {
        let mut config = MarketConfig::default_market(5);
        config.noise_width = 0.0;
        config.scarring = 0.0;
        let sim = simulate(&config, &[], 4, 0.1).unwrap();
        let first = &sim.periods[0];
        for r in &sim.periods {
            assert_eq!(r.price, first.price);
            assert_eq!(r.homeless_count, first.homeless_count);
        }
    }

    #[test]
    fn negative_supply_shock_increases_homelessness() {
        let mut config = MarketConfig::default_market(6);
        config.n_agents = 2_000;
        config.supply = SupplyCurve::vertical(1_760.0);
        let sim = simulate(&config, &[(2, 0.9)], 4, 0.1).unwrap();
        assert!(
            sim.periods[2].homeless_count > sim.periods[1].homeless_count,
            "{} vs {}",
            sim.periods[2].homeless_count,
            sim.periods[1].homeless_count
        );
        assert!(sim.periods[2].price > sim.periods[1].price);
    }

    #[test]
    fn scarring_kinks_the_demand_curve() {
        let mut config = MarketConfig::default_market(9);
        config.n_agents = 500;
        config.supply = SupplyCurve::vertical(420.0);
        config.noise_width = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut agents = config.draw_agents(&mut rng);
        let demand_t = demand_curve(&agents, &config.utility).unwrap();
        let eq = equilibrium(&demand_t, &config.supply).unwrap();
        assert!(!eq.homeless_ids.is_empty());
        let homeless: std::collections::BTreeSet<u32> = eq.homeless_ids.iter().copied().collect();
        for a in agents.iter_mut() {
            a.homeless = homeless.contains(&a.id);
        }
        step_dynamics(&mut agents, &config, &mut rng);
        let demand_t1 = demand_curve(&agents, &config.utility).unwrap();

        let bid_by_id = |bids: &[Bid]| -> std::collections::BTreeMap<u32, f64> {
            bids.iter().map(|b| (b.agent_id, b.bid)).collect()
        };
        let before = bid_by_id(&demand_t);
        let after = bid_by_id(&demand_t1);
        for (id, b_after) in &after {
            let b_before = before[id];
            if homeless.contains(id) {
                assert!(*b_after < b_before, "homeless agent {id} bid did not fall");
            } else {
                assert!((b_after - b_before).abs() < 1e-12, "housed agent {id} moved");
            }
        }
    }

    #[test]
    fn asymmetry_inward_exceeds_outward() {
        let config = MarketConfig::default_market(11);
        let sim = simulate(&config, &[], 6, 0.05).unwrap();
        let asym = &sim.asymmetry;
        assert!(asym.inward.d_homeless > 0);
        assert!(asym.outward.d_homeless <= 0);
        assert!(
            asym.inward.d_homeless > -asym.outward.d_homeless,
            "inward {} vs outward {}",
            asym.inward.d_homeless,
            asym.outward.d_homeless
        );
        assert!(asym.inward.d_price > 0.0);
        assert!(asym.outward.d_price < 0.0);
    }

    #[test]
    fn mass_balance_every_period() {
        let mut config = MarketConfig::default_market(13);
        config.n_agents = 1_000;
        config.supply = SupplyCurve::vertical(880.0);
        let sim = simulate(&config, &[(1, 0.95), (3, 1.05)], 5, 0.1).unwrap();
        for r in &sim.periods {
            assert_eq!(r.quantity as usize + r.homeless_count, config.n_agents);
        }
    }

    #[test]
    fn bridge_recovers_asymmetric_elasticity() {
        let mut cfg = BridgeConfig::default_bridge(17);
        cfg.n_markets = 60;
        let (panel, report) = run_bridge(&cfg).unwrap();
        assert!(!panel.observations.is_empty());
        let plus = report.coefficient("price_plus").unwrap();
        let minus = report.coefficient("price_minus").unwrap();
        assert!(plus > 0.0, "upward elasticity {plus}");
        assert!(
            minus.abs() < 0.5 * plus,
            "downward response {minus} too large vs {plus}"
        );
    }
}
