//! The utility's tariff choice.
//!
//! Social cost as a function of the price difference is piecewise constant
//! with jumps only at the storage owners' thresholds, so the optimum is
//! found by evaluating one point just above each threshold.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{no_storage_cost, social_cost, SocialCostBreakdown, SupplyCostParams};
use crate::demand::{aggregate_by_type, Grouping, PeriodStructure, ScenarioSet};
use crate::error::{Error, Result};
use crate::numeric::linspace;
use crate::stage2::{respond, response_thresholds, ResponseProfile, StorageSpec, ThresholdSet};

/// Largest offset used above each threshold.
pub const EPSILON_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouPrice {
    pub p_peak: f64,
    pub p_offpeak: f64,
}

impl TouPrice {
    pub fn new(p_peak: f64, p_offpeak: f64) -> Result<Self> {
        if !(p_offpeak.is_finite() && p_peak.is_finite() && p_offpeak >= 0.0 && p_peak >= p_offpeak) {
            return Err(Error::invalid(format!(
                "prices must satisfy p_peak >= p_offpeak >= 0, got {p_peak}, {p_offpeak}"
            )));
        }
        Ok(Self { p_peak, p_offpeak })
    }

    pub fn from_difference(p_delta: f64, p_offpeak: f64) -> Self {
        Self {
            p_peak: p_offpeak + p_delta,
            p_offpeak,
        }
    }

    pub fn p_delta(&self) -> f64 {
        self.p_peak - self.p_offpeak
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Prices designed from per-type aggregate demand.
    Pt,
    /// Prices designed from every user's own demand.
    Pi,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Pt => "pt",
            Scheme::Pi => "pi",
        })
    }
}

/// Users, their grouping into storage types, and the system around them.
#[derive(Debug, Clone)]
pub struct Market {
    users: ScenarioSet,
    grouping: Grouping,
    types: ScenarioSet,
    type_specs: Vec<StorageSpec>,
    user_specs: Vec<StorageSpec>,
    periods: PeriodStructure,
    supply: SupplyCostParams,
}

impl Market {
    pub fn new(
        users: ScenarioSet,
        grouping: Grouping,
        type_specs: Vec<StorageSpec>,
        periods: PeriodStructure,
        supply: SupplyCostParams,
    ) -> Result<Self> {
        if type_specs.len() != grouping.n_types() {
            return Err(Error::invalid(format!(
                "{} storage specs for {} types",
                type_specs.len(),
                grouping.n_types()
            )));
        }
        for spec in &type_specs {
            spec.validate()?;
        }
        supply.validate()?;
        let types = aggregate_by_type(&users, &grouping)?;
        let user_specs = (0..users.n_entities())
            .map(|i| type_specs[grouping.type_of(i)])
            .collect();
        Ok(Self {
            users,
            grouping,
            types,
            type_specs,
            user_specs,
            periods,
            supply,
        })
    }

    pub fn users(&self) -> &ScenarioSet {
        &self.users
    }

    pub fn types(&self) -> &ScenarioSet {
        &self.types
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    pub fn type_specs(&self) -> &[StorageSpec] {
        &self.type_specs
    }

    /// Each user carries its type's storage technology.
    pub fn user_specs(&self) -> &[StorageSpec] {
        &self.user_specs
    }

    pub fn user_thetas(&self) -> Vec<f64> {
        self.user_specs.iter().map(|s| s.theta).collect()
    }

    pub fn periods(&self) -> &PeriodStructure {
        &self.periods
    }

    pub fn supply(&self) -> &SupplyCostParams {
        &self.supply
    }

    pub fn no_storage_cost(&self) -> f64 {
        no_storage_cost(&self.users, &self.periods, &self.supply)
    }

    /// Same market with every type's capacity cost multiplied by `factor`.
    pub fn with_theta_scale(&self, factor: f64) -> Result<Self> {
        let specs = self
            .type_specs
            .iter()
            .map(|s| s.with_theta(s.theta * factor))
            .collect();
        Self::new(
            self.users.clone(),
            self.grouping.clone(),
            specs,
            self.periods.clone(),
            self.supply,
        )
    }

    fn level(&self, scheme: Scheme) -> (&ScenarioSet, &[StorageSpec]) {
        match scheme {
            Scheme::Pt => (&self.types, &self.type_specs),
            Scheme::Pi => (&self.users, &self.user_specs),
        }
    }

    /// Every entity's response at the given prices.
    pub fn respond_all(&self, scheme: Scheme, prices: TouPrice) -> Result<Vec<ResponseProfile>> {
        let (set, specs) = self.level(scheme);
        let probs = set.probabilities();
        (0..set.n_entities())
            .map(|k| respond(&specs[k], prices, &probs, &set.peak_of(k)))
            .collect()
    }

    /// Social cost of the users' own responses at the given prices.
    pub fn user_social_cost(&self, prices: TouPrice) -> Result<(SocialCostBreakdown, Vec<ResponseProfile>)> {
        let responses = self.respond_all(Scheme::Pi, prices)?;
        let sc = social_cost(&self.users, &self.user_specs, &responses, &self.periods, &self.supply)?;
        Ok((sc, responses))
    }

    /// Social cost as seen by the scheme: type-level for PT, user-level for PI.
    pub fn scheme_social_cost(&self, scheme: Scheme, prices: TouPrice) -> Result<SocialCostBreakdown> {
        let (set, specs) = self.level(scheme);
        let responses = self.respond_all(scheme, prices)?;
        social_cost(set, specs, &responses, &self.periods, &self.supply)
    }

    /// Union of the response thresholds of every entity the scheme sees.
    pub fn threshold_union(&self, scheme: Scheme, p_offpeak: f64) -> Result<ThresholdSet> {
        let (set, specs) = self.level(scheme);
        let probs = set.probabilities();
        let sets = (0..set.n_entities())
            .map(|k| response_thresholds(&specs[k], &probs, &set.peak_of(k), p_offpeak))
            .collect::<Result<Vec<_>>>()?;
        Ok(ThresholdSet::union(&sets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub candidate_pdelta: f64,
    pub social_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResult {
    pub scheme: Scheme,
    pub best_price: TouPrice,
    /// Cost of the users' realized responses at `best_price`.
    pub social_cost: SocialCostBreakdown,
    /// Per-user responses at `best_price`.
    pub responses: Vec<ResponseProfile>,
    pub epsilon: f64,
    /// Candidates and the cost the scheme minimized at each (type-level for PT).
    pub trace: Vec<ScanPoint>,
}

impl PricingResult {
    pub fn total_capacity(&self) -> f64 {
        self.responses.iter().map(|r| r.capacity).sum()
    }
}

/// Writes the scan trace as `candidate_pdelta,social_cost`.
pub fn write_trace_csv<W: Write>(writer: W, trace: &[ScanPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let ctx = |e| Error::Csv {
        context: "writing scan trace".into(),
        source: e,
    };
    wtr.write_record(["candidate_pdelta", "social_cost"]).map_err(ctx)?;
    for p in trace {
        wtr.write_record([format!("{:?}", p.candidate_pdelta), format!("{:?}", p.social_cost)])
            .map_err(ctx)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        context: "writing scan trace".into(),
        source: e,
    })
}

/// `min(EPSILON_MAX, smallest positive gap / 2)`.
pub fn scan_epsilon(thresholds: &ThresholdSet) -> f64 {
    thresholds
        .min_gap()
        .map_or(EPSILON_MAX, |g| (g / 2.0).min(EPSILON_MAX))
}

fn scan(market: &Market, scheme: Scheme, p_offpeak: f64) -> Result<PricingResult> {
    let thresholds = market.threshold_union(scheme, p_offpeak)?;
    let epsilon = scan_epsilon(&thresholds);
    let candidates: Vec<f64> = if thresholds.is_empty() {
        vec![epsilon]
    } else {
        thresholds.values().iter().map(|p| p + epsilon).collect()
    };
    let trace = candidates
        .par_iter()
        .map(|p| {
            let prices = TouPrice::from_difference(*p, p_offpeak);
            market
                .scheme_social_cost(scheme, prices)
                .map(|sc| ScanPoint {
                    candidate_pdelta: *p,
                    social_cost: sc.total,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, point) in trace.iter().enumerate() {
        if point.social_cost < trace[best].social_cost {
            best = i;
        }
    }
    let best_price = TouPrice::from_difference(trace[best].candidate_pdelta, p_offpeak);
    let (sc, responses) = market.user_social_cost(best_price)?;
    Ok(PricingResult {
        scheme,
        best_price,
        social_cost: sc,
        responses,
        epsilon,
        trace,
    })
}

/// Threshold scan at a fixed reference off-peak price (irrelevant to the
/// outcome for lossless storage).
pub fn optimize_price_difference(market: &Market, scheme: Scheme, p_offpeak: f64) -> Result<PricingResult> {
    if !(p_offpeak.is_finite() && p_offpeak >= 0.0) {
        return Err(Error::invalid(format!("reference off-peak price {p_offpeak} must be >= 0")));
    }
    scan(market, scheme, p_offpeak)
}

/// Grid search over the off-peak price with a threshold scan at each grid
/// point. Ties keep the lowest off-peak price.
pub fn optimize_prices_extended(
    market: &Market,
    scheme: Scheme,
    p_o_range: (f64, f64),
    p_o_steps: usize,
) -> Result<PricingResult> {
    let (lo, hi) = p_o_range;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo) || p_o_steps == 0 {
        return Err(Error::invalid(format!(
            "off-peak range [{lo}, {hi}] with {p_o_steps} steps"
        )));
    }
    let results = linspace(lo, hi, p_o_steps)
        .into_par_iter()
        .map(|p_o| scan(market, scheme, p_o))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<PricingResult> = None;
    for r in results {
        let better = best.as_ref().is_none_or(|b| selection_cost(&r) < selection_cost(b));
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one grid point"))
}

/// The cost the scan selected on. Read from the trace minimum because
/// `p_peak - p_offpeak` need not reproduce the candidate bit for bit.
fn selection_cost(r: &PricingResult) -> f64 {
    r.trace.iter().map(|t| t.social_cost).fold(f64::INFINITY, f64::min)
}

/// `lambda[i][j]`: users' social cost at `p_delta_grid[i]` with type costs
/// rescaled so their mean is `theta_bar_grid[j]`, over the no-storage cost.
pub fn evaluate_lambda(market: &Market, p_delta_grid: &[f64], theta_bar_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if p_delta_grid.is_empty() || theta_bar_grid.is_empty() {
        return Err(Error::invalid("lambda grids must be non-empty"));
    }
    let base = market.no_storage_cost();
    if base <= 0.0 {
        return Err(Error::Undefined("no-storage social cost is zero".into()));
    }
    let mean_theta =
        market.type_specs.iter().map(|s| s.theta).sum::<f64>() / market.type_specs.len() as f64;
    let scaled = theta_bar_grid
        .iter()
        .map(|t| market.with_theta_scale(t / mean_theta))
        .collect::<Result<Vec<_>>>()?;
    p_delta_grid
        .par_iter()
        .map(|p| {
            scaled
                .iter()
                .map(|m| {
                    let (sc, _) = m.user_social_cost(TouPrice::from_difference(*p, 0.0))?;
                    Ok(sc.total / base)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::generate_synthetic;
    use crate::stage2::ElasticShift;
    use proptest::prelude::*;

    fn market(n_types: usize, per_type: usize, n_outcomes: usize, seed: u64, theta: &[f64]) -> Market {
        let users = generate_synthetic(n_types, per_type, n_outcomes, 10.0, seed).unwrap();
        Market::new(
            users,
            Grouping::blocks(n_types, per_type),
            theta.iter().map(|t| StorageSpec::lossless(*t)).collect(),
            PeriodStructure::window(12, 12).unwrap(),
            SupplyCostParams { alpha: 1.0, beta: 0.0, gamma: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn price_validation() {
        assert!(TouPrice::new(1.0, 2.0).is_err());
        assert!(TouPrice::new(1.0, -1.0).is_err());
        assert_eq!(TouPrice::new(5.0, 2.0).unwrap().p_delta(), 3.0);
    }

    #[test]
    fn prohibitive_costs_give_no_storage() {
        let m = market(2, 2, 3, 1, &[1e9, 2e9]);
        for scheme in [Scheme::Pt, Scheme::Pi] {
            let r = optimize_price_difference(&m, scheme, 0.0).unwrap();
            assert_eq!(r.total_capacity(), 0.0);
            assert!((r.social_cost.total - m.no_storage_cost()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_user_schemes_coincide() {
        let m = market(1, 1, 4, 3, &[0.2]);
        let pt = optimize_price_difference(&m, Scheme::Pt, 0.0).unwrap();
        let pi = optimize_price_difference(&m, Scheme::Pi, 0.0).unwrap();
        assert_eq!(pt.best_price, pi.best_price);
        assert_eq!(pt.social_cost, pi.social_cost);
        assert_eq!(pt.responses, pi.responses);
    }

    #[test]
    fn candidate_count_bounded() {
        let m = market(3, 2, 4, 7, &[0.1, 0.2, 0.3]);
        let r = optimize_price_difference(&m, Scheme::Pt, 0.0).unwrap();
        assert!(r.trace.len() <= 3 * 4 + 1);
    }

    #[test]
    fn lossless_extended_matches_plain() {
        let m = market(2, 2, 3, 11, &[0.05, 0.3]);
        let plain = optimize_price_difference(&m, Scheme::Pt, 0.0).unwrap();
        let ext = optimize_prices_extended(&m, Scheme::Pt, (0.0, 50.0), 6).unwrap();
        assert_eq!(plain, ext);
    }

    #[test]
    fn lambda_examples() {
        // a short peak makes moving load off-peak worthwhile
        let users = generate_synthetic(1, 2, 4, 10.0, 5).unwrap();
        let m = Market::new(
            users,
            Grouping::blocks(1, 2),
            vec![StorageSpec::lossless(0.5)],
            PeriodStructure::evening_peak(),
            SupplyCostParams { alpha: 1.0, beta: 0.0, gamma: 0.0 },
        )
        .unwrap();
        let lam = evaluate_lambda(&m, &[0.0, 0.2, 1e3, 1e7], &[1e-3, 0.5, 1e3]).unwrap();
        assert!(lam[0].iter().all(|l| *l == 1.0));
        // 0.2 sits below the lowest threshold of θ̄ = 0.5 and 1e3
        assert_eq!(lam[1][1], 1.0);
        assert_eq!(lam[1][2], 1.0);
        assert!(lam[2][0] < 1.0);
        assert!(lam[3][2] > 1.0);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[ScanPoint { candidate_pdelta: 1.0, social_cost: 2.0 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "candidate_pdelta,social_cost\n1.0,2.0\n");
    }

    #[test]
    fn elastic_thresholds_scanned() {
        let users = generate_synthetic(2, 1, 3, 10.0, 2).unwrap();
        let specs = vec![
            StorageSpec { elastic: Some(ElasticShift { cost: 0.05, fraction: 0.3 }), ..StorageSpec::lossless(0.2) };
            2
        ];
        let m = Market::new(
            users,
            Grouping::identity(2),
            specs,
            PeriodStructure::window(12, 12).unwrap(),
            SupplyCostParams { alpha: 1.0, beta: 0.0, gamma: 0.0 },
        )
        .unwrap();
        let r = optimize_price_difference(&m, Scheme::Pi, 0.0).unwrap();
        assert!(r.trace.iter().any(|p| (p.candidate_pdelta - 0.05).abs() < 2e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn offpeak_level_is_neutral_for_lossless(seed in 0u64..1000, p_delta in 0.0f64..3.0, p_o in 0.0f64..100.0) {
            let m = market(2, 2, 3, seed, &[0.1, 0.4]);
            let a = m.user_social_cost(TouPrice::from_difference(p_delta, 0.0)).unwrap();
            let b = m.user_social_cost(TouPrice::from_difference(p_delta, p_o)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pt_never_beats_pi(seed in 0u64..1000) {
            let m = market(2, 2, 4, seed, &[0.05, 0.2]);
            let pt = optimize_price_difference(&m, Scheme::Pt, 0.0).unwrap();
            let pi = optimize_price_difference(&m, Scheme::Pi, 0.0).unwrap();
            prop_assert!(pt.social_cost.total >= pi.social_cost.total - 1e-9);
        }
    }
}
