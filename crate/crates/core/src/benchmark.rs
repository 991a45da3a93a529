//! The complete-information social planner and the reference quantities
//! built on it: cost ratios, structure checks, the zero-cost closed form,
//! a worst-case instance and a brute-force oracle.
//!
//! Within an outcome the supply cost depends on charging only through the
//! aggregate shift `S`. It is a quadratic in `S` with curvature
//! `kappa = 2 alpha (1/H_p + 1/H_o)` and unconstrained minimiser
//! `S* = (H_o D_p - H_p D_o) / (H_p + H_o)`. Capacity limits the shift to
//! `U = sum_i min(c_i, D_i)`, so the planner's objective is
//! `sum theta_i c_i + E[h(S+) + kappa/2 ((S+ - U)+)^2]` with `S+ = max(S*, 0)`.

use serde::{Deserialize, Serialize};

use crate::cost_model::{social_cost, supply_cost_period, SocialCostBreakdown, SupplyCostParams};
use crate::demand::{Grouping, PeriodStructure, ScenarioSet};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::stage1::Market;
use crate::stage2::{ResponseProfile, StorageSpec};

/// Relative tolerance for the cost ordering PT >= PI >= SO.
pub const ORDERING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Relative objective change below which a sweep counts as stalled.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Capacity grid spacing used by the brute-force oracle.
    pub capacity_grid_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 10_000,
            capacity_grid_step: 0.01,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 || !(self.capacity_grid_step > 0.0) {
            return Err(Error::invalid(format!("solver settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialPlan {
    pub capacities: Vec<f64>,
    /// `charges[i][w]`.
    pub charges: Vec<Vec<f64>>,
    pub social_cost: SocialCostBreakdown,
}

impl SocialPlan {
    pub fn total_capacity(&self) -> f64 {
        self.capacities.iter().sum()
    }
}

/// Per-outcome data of the planner's reduced objective.
struct Reduced {
    probs: Vec<f64>,
    /// `S+` per outcome.
    target: Vec<f64>,
    /// `h(S+)` per outcome.
    base: Vec<f64>,
    kappa: f64,
}

impl Reduced {
    fn new(s: &ScenarioSet, periods: &PeriodStructure, c: &SupplyCostParams) -> Self {
        let (h_p, h_o) = (periods.h_peak(), periods.h_offpeak());
        let mut target = Vec::with_capacity(s.n_outcomes());
        let mut base = Vec::with_capacity(s.n_outcomes());
        for w in 0..s.n_outcomes() {
            let (d_p, d_o) = (s.aggregate_peak(w), s.aggregate_offpeak(w));
            let shift = unconstrained_shift(d_p, d_o, h_p, h_o).max(0.0);
            target.push(shift);
            base.push(period_pair_cost(d_p, d_o, shift, h_p, h_o, c));
        }
        Self {
            probs: s.probabilities(),
            target,
            base,
            kappa: 2.0 * c.alpha * (1.0 / h_p + 1.0 / h_o),
        }
    }

    fn objective(&self, thetas: &[f64], served: &[Vec<f64>], caps: &[f64]) -> f64 {
        let mut acc = CompensatedSum::new();
        for (t, c) in thetas.iter().zip(caps) {
            acc.add(t * c);
        }
        for w in 0..self.probs.len() {
            let u: f64 = served.iter().map(|m| m[w]).sum();
            let gap = (self.target[w] - u).max(0.0);
            acc.add(self.probs[w] * (self.base[w] + 0.5 * self.kappa * gap * gap));
        }
        acc.value()
    }
}

fn unconstrained_shift(d_p: f64, d_o: f64, h_p: f64, h_o: f64) -> f64 {
    (h_o * d_p - h_p * d_o) / (h_p + h_o)
}

fn period_pair_cost(d_p: f64, d_o: f64, shift: f64, h_p: f64, h_o: f64, c: &SupplyCostParams) -> f64 {
    supply_cost_period(d_p - shift, h_p, c) + supply_cost_period(d_o + shift, h_o, c)
}

/// Exact minimiser over `c` in `[0, cap_max]` of
/// `theta c + kappa/2 sum_w p_w ((r_w - min(c, d_w))+)^2`.
/// The function is convex and piecewise quadratic with breakpoints at `d_w`
/// and `r_w`.
fn coordinate_minimum(theta: f64, kappa: f64, probs: &[f64], demand: &[f64], residual: &[f64], cap_max: f64) -> f64 {
    let mut points: Vec<f64> = demand
        .iter()
        .chain(residual)
        .copied()
        .filter(|x| *x > 0.0 && *x < cap_max)
        .collect();
    points.push(0.0);
    points.push(cap_max);
    points.sort_by(f64::total_cmp);
    points.dedup();
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        // active outcomes keep a positive marginal value over the whole segment
        let mut mass = 0.0;
        let mut weighted = 0.0;
        for w in 0..probs.len() {
            if demand[w] >= b && residual[w] >= b {
                mass += probs[w];
                weighted += probs[w] * residual[w];
            }
        }
        if mass == 0.0 {
            return a;
        }
        let root = (kappa * weighted - theta) / (kappa * mass);
        if root <= a {
            return a;
        }
        if root < b {
            return root;
        }
    }
    cap_max
}

/// One-sided derivatives of the reduced objective along coordinate `i`.
fn directional_derivatives(theta: f64, kappa: f64, probs: &[f64], demand: &[f64], residual: &[f64], c: f64) -> (f64, f64) {
    let mut right = theta;
    let mut left = theta;
    for w in 0..probs.len() {
        let gap = (residual[w] - c.min(demand[w])).max(0.0);
        if c < demand[w] {
            right -= kappa * probs[w] * gap;
        }
        if c <= demand[w] {
            left -= kappa * probs[w] * gap;
        }
    }
    (right, left)
}

/// Splits each outcome's aggregate shift over users in ascending index order.
fn split_charges(reduced: &Reduced, served: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_outcomes = reduced.probs.len();
    let mut charges = vec![vec![0.0; n_outcomes]; served.len()];
    for w in 0..n_outcomes {
        let total: f64 = served.iter().map(|m| m[w]).sum();
        let mut remaining = reduced.target[w].min(total);
        for (i, m) in served.iter().enumerate() {
            let s = remaining.min(m[w]).max(0.0);
            charges[i][w] = s;
            remaining -= s;
        }
    }
    charges
}

fn plan_from(
    users: &ScenarioSet,
    thetas: &[f64],
    periods: &PeriodStructure,
    supply: &SupplyCostParams,
    reduced: &Reduced,
    caps: Vec<f64>,
) -> Result<SocialPlan> {
    let served: Vec<Vec<f64>> = caps
        .iter()
        .enumerate()
        .map(|(i, c)| users.peak_of(i).iter().map(|d| c.min(*d)).collect())
        .collect();
    let charges = split_charges(reduced, &served);
    let specs: Vec<StorageSpec> = thetas.iter().map(|t| StorageSpec::lossless(*t)).collect();
    let responses: Vec<ResponseProfile> = caps
        .iter()
        .zip(&charges)
        .map(|(c, s)| ResponseProfile {
            capacity: *c,
            charge: s.clone(),
            shifted: vec![0.0; s.len()],
        })
        .collect();
    let sc = social_cost(users, &specs, &responses, periods, supply)?;
    Ok(SocialPlan {
        capacities: caps,
        charges,
        social_cost: sc,
    })
}

fn check_thetas(users: &ScenarioSet, thetas: &[f64]) -> Result<()> {
    if thetas.len() != users.n_entities() {
        return Err(Error::invalid(format!(
            "{} capacity costs for {} users",
            thetas.len(),
            users.n_entities()
        )));
    }
    if thetas.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("capacity costs must be finite and >= 0"));
    }
    Ok(())
}

/// Social planner's optimum over user capacities by exact cyclic coordinate
/// minimisation. Stops when a sweep no longer lowers the objective and no
/// coordinate has a descent direction. Because the kinks of the objective
/// are separable across users, that certificate implies global optimality.
pub fn solve_so(
    users: &ScenarioSet,
    thetas: &[f64],
    periods: &PeriodStructure,
    supply: &SupplyCostParams,
    settings: &SolverSettings,
) -> Result<SocialPlan> {
    check_thetas(users, thetas)?;
    supply.validate()?;
    settings.validate()?;
    let reduced = Reduced::new(users, periods, supply);
    let n = users.n_entities();
    let demand: Vec<Vec<f64>> = (0..n).map(|i| users.peak_of(i)).collect();
    let cap_max: Vec<f64> = demand
        .iter()
        .map(|d| d.iter().copied().fold(0.0, f64::max))
        .collect();
    let mut caps = vec![0.0; n];
    let mut served: Vec<Vec<f64>> = demand.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut objective = reduced.objective(thetas, &served, &caps);
    let derivative_scale = thetas.iter().copied().fold(0.0, f64::max)
        + reduced.kappa * reduced.target.iter().copied().fold(0.0, f64::max);
    let derivative_tol = 1e-9 * (1.0 + derivative_scale);

    for _ in 0..settings.max_iterations {
        for i in 0..n {
            let residual: Vec<f64> = (0..reduced.probs.len())
                .map(|w| {
                    let others: f64 = (0..n).filter(|j| *j != i).map(|j| served[j][w]).sum();
                    reduced.target[w] - others
                })
                .collect();
            let c = coordinate_minimum(thetas[i], reduced.kappa, &reduced.probs, &demand[i], &residual, cap_max[i]);
            caps[i] = c;
            for (m, d) in served[i].iter_mut().zip(&demand[i]) {
                *m = c.min(*d);
            }
        }
        let next = reduced.objective(thetas, &served, &caps);
        let stalled = objective - next <= settings.tolerance * (1.0 + next.abs());
        objective = next;
        if stalled && certified(&reduced, thetas, &demand, &served, &caps, &cap_max, derivative_tol) {
            return plan_from(users, thetas, periods, supply, &reduced, caps);
        }
    }
    Err(Error::NotConverged {
        iterations: settings.max_iterations,
        best_objective: objective,
        best_capacities: caps,
    })
}

fn certified(
    reduced: &Reduced,
    thetas: &[f64],
    demand: &[Vec<f64>],
    served: &[Vec<f64>],
    caps: &[f64],
    cap_max: &[f64],
    tol: f64,
) -> bool {
    let n = caps.len();
    (0..n).all(|i| {
        let residual: Vec<f64> = (0..reduced.probs.len())
            .map(|w| {
                let others: f64 = (0..n).filter(|j| *j != i).map(|j| served[j][w]).sum();
                reduced.target[w] - others
            })
            .collect();
        let (right, left) =
            directional_derivatives(thetas[i], reduced.kappa, &reduced.probs, &demand[i], &residual, caps[i]);
        (caps[i] >= cap_max[i] || right >= -tol) && (caps[i] <= 0.0 || left <= tol)
    })
}

/// Planner's optimum when storage is free and unlimited: per-outcome shift
/// `max(S*, 0)` and the resulting expected cost.
pub fn so_zero_cost(s: &ScenarioSet, periods: &PeriodStructure, supply: &SupplyCostParams) -> (Vec<f64>, f64) {
    let (h_p, h_o) = (periods.h_peak(), periods.h_offpeak());
    let mut shifts = Vec::with_capacity(s.n_outcomes());
    let mut acc = CompensatedSum::new();
    for (w, o) in s.outcomes().iter().enumerate() {
        let (d_p, d_o) = (s.aggregate_peak(w), s.aggregate_offpeak(w));
        let shift = unconstrained_shift(d_p, d_o, h_p, h_o).max(0.0);
        acc.add(o.probability * period_pair_cost(d_p, d_o, shift, h_p, h_o, supply));
        shifts.push(shift);
    }
    (shifts, acc.value())
}

fn grid_points(max: f64, step: f64, extra: &[f64]) -> Vec<f64> {
    let n = (max / step).floor() as usize;
    let mut pts: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    pts.extend(extra.iter().copied().filter(|x| *x <= max));
    pts.push(max);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Direct evaluation: per outcome clamp the optimal shift into `[0, U]` and
/// price both periods.
fn direct_objective(users: &ScenarioSet, thetas: &[f64], periods: &PeriodStructure, supply: &SupplyCostParams, caps: &[f64]) -> f64 {
    let (h_p, h_o) = (periods.h_peak(), periods.h_offpeak());
    let mut total: f64 = thetas.iter().zip(caps).map(|(t, c)| t * c).sum();
    for (w, o) in users.outcomes().iter().enumerate() {
        let (d_p, d_o) = (users.aggregate_peak(w), users.aggregate_offpeak(w));
        let u: f64 = caps.iter().zip(&o.peak).map(|(c, d)| c.min(*d)).sum();
        let shift = unconstrained_shift(d_p, d_o, h_p, h_o).clamp(0.0, u);
        total += o.probability * period_pair_cost(d_p, d_o, shift, h_p, h_o, supply);
    }
    total
}

const BRUTE_FORCE_MAX_USERS: usize = 3;
const BRUTE_FORCE_MAX_OUTCOMES: usize = 4;
const BRUTE_FORCE_MAX_POINTS: f64 = 5e7;

fn brute_force_caps(
    users: &ScenarioSet,
    thetas: &[f64],
    periods: &PeriodStructure,
    supply: &SupplyCostParams,
    axes: &[Vec<f64>],
) -> (Vec<f64>, f64) {
    let n = axes.len();
    let mut idx = vec![0usize; n];
    let mut caps: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    let mut best = (caps.clone(), f64::INFINITY);
    loop {
        for i in 0..n {
            caps[i] = axes[i][idx[i]];
        }
        let f = direct_objective(users, thetas, periods, supply, &caps);
        if f < best.1 {
            best = (caps.clone(), f);
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn brute_force_check(users: &ScenarioSet, thetas: &[f64], grid_step: f64) -> Result<Vec<f64>> {
    check_thetas(users, thetas)?;
    if users.n_entities() > BRUTE_FORCE_MAX_USERS || users.n_outcomes() > BRUTE_FORCE_MAX_OUTCOMES {
        return Err(Error::TooLarge(format!(
            "{} users x {} outcomes",
            users.n_entities(),
            users.n_outcomes()
        )));
    }
    if !(grid_step > 0.0) {
        return Err(Error::invalid(format!("grid step {grid_step} must be > 0")));
    }
    let maxima: Vec<f64> = (0..users.n_entities())
        .map(|i| users.peak_support(i).1)
        .collect();
    let points: f64 = maxima.iter().map(|m| m / grid_step + 2.0 + users.n_outcomes() as f64).product();
    if points > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::TooLarge(format!("{points:.0} grid points")));
    }
    Ok(maxima)
}

/// Exhaustive search over per-user capacity grids `{0, step, 2 step, ..}`
/// plus every peak-demand value, up to each user's largest peak demand.
pub fn brute_force_so(
    users: &ScenarioSet,
    thetas: &[f64],
    periods: &PeriodStructure,
    supply: &SupplyCostParams,
    grid_step: f64,
) -> Result<SocialPlan> {
    let maxima = brute_force_check(users, thetas, grid_step)?;
    let axes: Vec<Vec<f64>> = maxima
        .iter()
        .enumerate()
        .map(|(i, m)| grid_points(*m, grid_step, &users.peak_of(i)))
        .collect();
    let (caps, _) = brute_force_caps(users, thetas, periods, supply, &axes);
    plan_from(users, thetas, periods, supply, &Reduced::new(users, periods, supply), caps)
}

/// `brute_force_so` followed by `levels` rounds of local grid search, each
/// on a window of one previous step around the incumbent with a tenth of the
/// spacing.
pub fn brute_force_so_refined(
    users: &ScenarioSet,
    thetas: &[f64],
    periods: &PeriodStructure,
    supply: &SupplyCostParams,
    grid_step: f64,
    levels: usize,
) -> Result<SocialPlan> {
    let maxima = brute_force_check(users, thetas, grid_step)?;
    let axes: Vec<Vec<f64>> = maxima
        .iter()
        .enumerate()
        .map(|(i, m)| grid_points(*m, grid_step, &users.peak_of(i)))
        .collect();
    let (mut caps, mut best) = brute_force_caps(users, thetas, periods, supply, &axes);
    let mut step = grid_step;
    for _ in 0..levels {
        let fine = step / 10.0;
        let axes: Vec<Vec<f64>> = caps
            .iter()
            .zip(&maxima)
            .map(|(c, m)| {
                let mut pts: Vec<f64> = (-10..=10)
                    .map(|k| (c + k as f64 * fine).clamp(0.0, *m))
                    .collect();
                pts.sort_by(f64::total_cmp);
                pts.dedup();
                pts
            })
            .collect();
        let (next, f) = brute_force_caps(users, thetas, periods, supply, &axes);
        if f < best {
            caps = next;
            best = f;
        }
        step = fine;
    }
    plan_from(users, thetas, periods, supply, &Reduced::new(users, periods, supply), caps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub sc_pt: f64,
    pub sc_pi: f64,
    pub sc_so: f64,
    pub sc_no: f64,
    pub kappa_pt: f64,
    pub kappa_pi: f64,
    pub kappa_no: f64,
}

/// Ratios to the planner's cost. An ordering violation beyond tolerance is
/// reported as an invariant violation.
pub fn compute_ratios(sc_pt: f64, sc_pi: f64, sc_so: f64, sc_no: f64) -> Result<RatioReport> {
    if !(sc_so > 0.0) {
        return Err(Error::Undefined(format!("planner cost {sc_so} must be > 0")));
    }
    let slack = |a: f64, b: f64| ORDERING_TOLERANCE * a.abs().max(b.abs()).max(1.0);
    if sc_pt < sc_pi - slack(sc_pt, sc_pi) {
        return Err(Error::InvariantViolation(format!("PT cost {sc_pt} below PI cost {sc_pi}")));
    }
    if sc_pi < sc_so - slack(sc_pi, sc_so) {
        return Err(Error::InvariantViolation(format!("PI cost {sc_pi} below planner cost {sc_so}")));
    }
    if sc_no < sc_so - slack(sc_no, sc_so) {
        return Err(Error::InvariantViolation(format!(
            "no-storage cost {sc_no} below planner cost {sc_so}"
        )));
    }
    Ok(RatioReport {
        sc_pt,
        sc_pi,
        sc_so,
        sc_no,
        kappa_pt: sc_pt / sc_so,
        kappa_pi: sc_pi / sc_so,
        kappa_no: sc_no / sc_so,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureReport {
    pub violations: Vec<String>,
}

impl StructureReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvariantViolation(self.violations.join("; ")))
        }
    }
}

fn structure_common(capacities: &[f64], thetas: &[f64], supports: &[(f64, f64)], tol: f64) -> StructureReport {
    let mut report = StructureReport::default();
    let n = capacities.len();
    for j in 0..n {
        if capacities[j] > supports[j].1 + tol {
            report.violations.push(format!(
                "user {j}: capacity {} above largest peak demand {}",
                capacities[j], supports[j].1
            ));
        }
        if capacities[j] <= tol {
            continue;
        }
        for i in 0..n {
            if thetas[i] < thetas[j] && capacities[i] < supports[i].0 - tol {
                report.violations.push(format!(
                    "user {i} (cost {}) holds {} below its smallest peak demand {} while costlier user {j} invests",
                    thetas[i], capacities[i], supports[i].0
                ));
            }
        }
    }
    report
}

/// Planner structure: a costlier user invests only if every cheaper user
/// covers at least its smallest peak demand, and nobody exceeds its largest
/// peak demand. One boundary user may hold any capacity in between.
pub fn validate_structure_so(plan: &SocialPlan, thetas: &[f64], supports: &[(f64, f64)], tol: f64) -> StructureReport {
    structure_common(&plan.capacities, thetas, supports, tol)
}

/// Pricing structure: as for the planner, and additionally every investor's
/// capacity lies within its peak-demand support.
pub fn validate_structure_pricing(
    responses: &[ResponseProfile],
    thetas: &[f64],
    supports: &[(f64, f64)],
    tol: f64,
) -> StructureReport {
    let caps: Vec<f64> = responses.iter().map(|r| r.capacity).collect();
    let mut report = structure_common(&caps, thetas, supports, tol);
    for (i, c) in caps.iter().enumerate() {
        if *c > tol && *c < supports[i].0 - tol {
            report.violations.push(format!(
                "user {i}: capacity {c} strictly inside (0, {}) under pricing",
                supports[i].0
            ));
        }
    }
    report
}

/// Per-user peak-demand support `(min, max)`.
pub fn peak_supports(users: &ScenarioSet) -> Vec<(f64, f64)> {
    (0..users.n_entities()).map(|i| users.peak_support(i)).collect()
}

/// Worst case for type-based pricing: `k` single-user types and `k`
/// equiprobable outcomes, with type `j` demanding `d` at peak only in outcome
/// `j`. Supply cost is purely quadratic and storage nearly free.
pub fn tightness_instance(k: usize, d: f64, periods: PeriodStructure, theta0: f64) -> Result<Market> {
    if k == 0 || !(d > 0.0) || !(theta0 > 0.0) {
        return Err(Error::invalid(format!("tightness instance with K={k}, d={d}, theta0={theta0}")));
    }
    let outcomes = (0..k)
        .map(|w| {
            let peak = (0..k).map(|j| if j == w { d } else { 0.0 }).collect();
            (peak, vec![0.0; k])
        })
        .collect();
    let users = ScenarioSet::equiprobable((0..k).map(|j| format!("u{j}")).collect(), outcomes)?;
    let specs = (0..k)
        .map(|j| StorageSpec::lossless(theta0 * (j + 1) as f64))
        .collect();
    Market::new(
        users,
        Grouping::identity(k),
        specs,
        periods,
        SupplyCostParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        },
    )
}
