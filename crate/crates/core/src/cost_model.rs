//! Storage annuities, quadratic supply costs and the social-cost evaluator.

use serde::{Deserialize, Serialize};

use crate::demand::{HourlyLoadTable, PeriodStructure, ScenarioSet, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::stage2::{ResponseProfile, StorageSpec};

/// Relative slack allowed when checking charge feasibility.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnuityParams {
    /// Annual interest rate.
    pub rate: f64,
    /// Horizon in years.
    pub years: f64,
    #[serde(default = "default_days_per_year")]
    pub days_per_year: f64,
}

fn default_days_per_year() -> f64 {
    365.0
}

impl Default for AnnuityParams {
    fn default() -> Self {
        Self {
            rate: 0.05,
            years: 10.0,
            days_per_year: 365.0,
        }
    }
}

impl AnnuityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(Error::invalid(format!("interest rate {} must be >= 0", self.rate)));
        }
        if !(self.years >= 1.0 && self.years.is_finite()) {
            return Err(Error::invalid(format!("horizon {} must be >= 1 year", self.years)));
        }
        if !(self.days_per_year >= 1.0 && self.days_per_year.is_finite()) {
            return Err(Error::invalid(format!(
                "days per year {} must be >= 1",
                self.days_per_year
            )));
        }
        Ok(())
    }
}

/// Converts an up-front capital cost into an equivalent daily payment.
pub fn daily_cost_factor(p: &AnnuityParams) -> f64 {
    if p.rate == 0.0 {
        return 1.0 / (p.years * p.days_per_year);
    }
    let growth = (1.0 + p.rate).powf(p.years);
    p.rate * growth / (growth - 1.0) / p.days_per_year
}

/// Quadratic generation cost coefficients shared by both periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupplyCostParams {
    /// $/MWh² per hour.
    pub alpha: f64,
    /// $/MWh.
    #[serde(default)]
    pub beta: f64,
    /// $ per hour.
    #[serde(default)]
    pub gamma: f64,
}

impl SupplyCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// Cost of serving `load` MWh spread evenly over `hours` hours.
pub fn supply_cost_period(load: f64, hours: f64, c: &SupplyCostParams) -> f64 {
    c.alpha / hours * load * load + c.beta * load + c.gamma * hours
}

/// Daily social cost split into its parts. `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SocialCostBreakdown {
    pub investment_cost: f64,
    pub degradation_cost: f64,
    pub expected_supply_cost: f64,
    /// Inconvenience cost of elastic demand moved off-peak.
    #[serde(default)]
    pub shift_cost: f64,
    pub total: f64,
}

impl SocialCostBreakdown {
    fn from_parts(investment: f64, degradation: f64, supply: f64, shift: f64) -> Self {
        let total: CompensatedSum = [investment, degradation, supply, shift].into_iter().collect();
        Self {
            investment_cost: investment,
            degradation_cost: degradation,
            expected_supply_cost: supply,
            shift_cost: shift,
            total: total.value(),
        }
    }
}

fn check_feasible(
    s: &ScenarioSet,
    specs: &[StorageSpec],
    responses: &[ResponseProfile],
) -> Result<()> {
    if specs.len() != s.n_entities() || responses.len() != s.n_entities() {
        return Err(Error::invalid(format!(
            "{} entities but {} specs and {} responses",
            s.n_entities(),
            specs.len(),
            responses.len()
        )));
    }
    let n = s.n_outcomes();
    for (k, (spec, r)) in specs.iter().zip(responses).enumerate() {
        if r.charge.len() != n || r.shifted.len() != n {
            return Err(Error::invalid(format!("response {k} does not cover {n} outcomes")));
        }
        let infeasible = |w, reason: String| Error::Infeasible {
            entity: k,
            outcome: w,
            reason,
        };
        if !(r.capacity.is_finite() && r.capacity >= 0.0) {
            return Err(infeasible(0, format!("capacity {}", r.capacity)));
        }
        let eta = spec.round_trip();
        for (w, o) in s.outcomes().iter().enumerate() {
            let (charge, shifted, peak) = (r.charge[w], r.shifted[w], o.peak[k]);
            if !(charge.is_finite() && charge >= 0.0 && shifted.is_finite() && shifted >= 0.0) {
                return Err(infeasible(w, format!("charge {charge}, shift {shifted}")));
            }
            let slack = FEASIBILITY_TOLERANCE * (1.0 + r.capacity.max(peak));
            if spec.eta_c * charge > r.capacity + slack {
                return Err(infeasible(
                    w,
                    format!("stored {} exceeds capacity {}", spec.eta_c * charge, r.capacity),
                ));
            }
            if eta * charge + shifted > peak + slack {
                return Err(infeasible(
                    w,
                    format!("served {} exceeds peak demand {peak}", eta * charge + shifted),
                ));
            }
        }
    }
    Ok(())
}

/// Daily social cost of the given responses: capacity annuities, expected
/// degradation, expected elastic-shift cost and the expected two-period
/// supply cost of the residual aggregate load.
pub fn social_cost(
    s: &ScenarioSet,
    specs: &[StorageSpec],
    responses: &[ResponseProfile],
    periods: &PeriodStructure,
    c: &SupplyCostParams,
) -> Result<SocialCostBreakdown> {
    check_feasible(s, specs, responses)?;
    let (h_p, h_o) = (periods.h_peak(), periods.h_offpeak());
    let investment: CompensatedSum = specs
        .iter()
        .zip(responses)
        .map(|(spec, r)| spec.theta * r.capacity)
        .collect();
    let mut degradation = CompensatedSum::new();
    let mut shift = CompensatedSum::new();
    let mut supply = CompensatedSum::new();
    for (w, o) in s.outcomes().iter().enumerate() {
        let mut peak = CompensatedSum::new();
        let mut off = CompensatedSum::new();
        for (k, (spec, r)) in specs.iter().zip(responses).enumerate() {
            let eta = spec.round_trip();
            let (charge, q) = (r.charge[w], r.shifted[w]);
            peak.add(o.peak[k]);
            peak.add(-eta * charge);
            peak.add(-q);
            off.add(o.offpeak[k]);
            off.add(charge);
            off.add(q);
            degradation.add(o.probability * spec.tau * charge * (1.0 + eta));
            if let Some(e) = spec.elastic {
                shift.add(o.probability * e.cost * q);
            }
        }
        // rounding can push a fully served peak a hair below zero
        let peak = peak.value().max(0.0);
        supply.add(
            o.probability
                * (supply_cost_period(peak, h_p, c) + supply_cost_period(off.value(), h_o, c)),
        );
    }
    Ok(SocialCostBreakdown::from_parts(
        investment.value(),
        degradation.value(),
        supply.value(),
        shift.value(),
    ))
}

/// Expected supply cost when nobody invests or shifts.
pub fn no_storage_cost(s: &ScenarioSet, periods: &PeriodStructure, c: &SupplyCostParams) -> f64 {
    let (h_p, h_o) = (periods.h_peak(), periods.h_offpeak());
    (0..s.n_outcomes())
        .map(|w| {
            s.outcomes()[w].probability
                * (supply_cost_period(s.aggregate_peak(w), h_p, c)
                    + supply_cost_period(s.aggregate_offpeak(w), h_o, c))
        })
        .collect::<CompensatedSum>()
        .value()
}

/// Relative error of the two-period constant-power approximation against
/// hour-by-hour supply costs of the aggregate net load, over all days.
pub fn approximation_gap(
    table: &HourlyLoadTable,
    periods: &PeriodStructure,
    c: &SupplyCostParams,
) -> Result<f64> {
    let days = table.aggregate_net_by_day()?;
    let mut hourly = CompensatedSum::new();
    let mut two_period = CompensatedSum::new();
    for day in &days {
        let mut peak = CompensatedSum::new();
        let mut off = CompensatedSum::new();
        for (h, load) in day.iter().enumerate().take(HOURS_PER_DAY) {
            hourly.add(supply_cost_period(*load, 1.0, c));
            if periods.is_peak(h) {
                peak.add(*load);
            } else {
                off.add(*load);
            }
        }
        two_period.add(supply_cost_period(peak.value(), periods.h_peak(), c));
        two_period.add(supply_cost_period(off.value(), periods.h_offpeak(), c));
    }
    let hourly = hourly.value();
    if hourly == 0.0 {
        return Err(Error::Undefined("hourly supply cost is zero".into()));
    }
    Ok((two_period.value() - hourly).abs() / hourly)
}
