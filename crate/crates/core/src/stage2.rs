//! Best responses of a storage owner (a type or an individual user) to a
//! two-period tariff.
//!
//! The capacity decision is a newsvendor problem: investing one more MWh
//! costs `theta` per day and saves the price difference on every day whose
//! peak demand exceeds the capacity. With a discrete peak distribution the
//! optimal capacity is a step function of the price difference, jumping at
//! `theta / tail_mass(m)`. Efficiency losses, degradation and elastic load
//! shifting are folded in by shifting and scaling those steps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::stage1::TouPrice;

/// Elastic peak demand that can be moved to the off-peak period at a linear
/// inconvenience cost. The elastic part of each outcome's peak demand is
/// `fraction * peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticShift {
    /// $/MWh shifted.
    pub cost: f64,
    pub fraction: f64,
}

/// Storage technology and load-shifting parameters of a type or user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageSpec {
    /// Daily capacity cost, $/MWh/day.
    pub theta: f64,
    #[serde(default = "one")]
    pub eta_c: f64,
    #[serde(default = "one")]
    pub eta_d: f64,
    /// Degradation cost per MWh charged and per MWh discharged.
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub elastic: Option<ElasticShift>,
}

fn one() -> f64 {
    1.0
}

impl StorageSpec {
    pub fn lossless(theta: f64) -> Self {
        Self {
            theta,
            eta_c: 1.0,
            eta_d: 1.0,
            tau: 0.0,
            elastic: None,
        }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self { theta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::invalid(format!("theta {} must be > 0", self.theta)));
        }
        for (name, eta) in [("eta_c", self.eta_c), ("eta_d", self.eta_d)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::invalid(format!("{name} {eta} outside (0, 1]")));
            }
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::invalid(format!("tau {} must be >= 0", self.tau)));
        }
        if let Some(e) = self.elastic {
            if !(e.cost >= 0.0 && e.cost < self.theta) {
                return Err(Error::invalid(format!(
                    "elastic shift cost {} must lie in [0, theta={})",
                    e.cost, self.theta
                )));
            }
            if !(0.0..=1.0).contains(&e.fraction) {
                return Err(Error::invalid(format!(
                    "elastic fraction {} outside [0, 1]",
                    e.fraction
                )));
            }
        }
        Ok(())
    }

    /// Round-trip efficiency `eta_c * eta_d`.
    pub fn round_trip(&self) -> f64 {
        self.eta_c * self.eta_d
    }

    /// Price-difference offset `A` below which storage never pays off,
    /// whatever the demand distribution.
    pub fn offset(&self, p_offpeak: f64) -> f64 {
        let eta = self.round_trip();
        (self.tau * (1.0 + eta) + p_offpeak * (1.0 - eta)) / eta
    }

    /// Investment cost per unit of delivered peak energy capacity.
    fn delivered_theta(&self) -> f64 {
        self.theta / self.eta_d
    }
}

/// Stage-II decisions of one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseProfile {
    /// Invested capacity, MWh.
    pub capacity: f64,
    /// Energy purchased off-peak for charging, per outcome (MWh).
    pub charge: Vec<f64>,
    /// Elastic demand moved to the off-peak period, per outcome (MWh).
    pub shifted: Vec<f64>,
}

impl ResponseProfile {
    pub fn idle(n_outcomes: usize) -> Self {
        Self {
            capacity: 0.0,
            charge: vec![0.0; n_outcomes],
            shifted: vec![0.0; n_outcomes],
        }
    }

    /// Peak energy served from storage in outcome `w`.
    pub fn delivered(&self, spec: &StorageSpec, w: usize) -> f64 {
        spec.round_trip() * self.charge[w]
    }
}

/// Writes `entity,capacity_mwh,outcome,charge_mwh,shift_mwh`.
pub fn write_responses_csv<W: Write>(
    writer: W,
    entities: &[String],
    responses: &[ResponseProfile],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let ctx = |e| Error::Csv {
        context: "writing responses".into(),
        source: e,
    };
    wtr.write_record(["entity", "capacity_mwh", "outcome", "charge_mwh", "shift_mwh"])
        .map_err(ctx)?;
    for (name, r) in entities.iter().zip(responses) {
        for (w, (s, q)) in r.charge.iter().zip(&r.shifted).enumerate() {
            wtr.write_record([
                name.clone(),
                format!("{:?}", r.capacity),
                w.to_string(),
                format!("{s:?}"),
                format!("{q:?}"),
            ])
            .map_err(ctx)?;
        }
    }
    wtr.flush().map_err(|e| Error::Io {
        context: "writing responses".into(),
        source: e,
    })
}

/// Relative distance below which two thresholds are treated as one.
pub const MERGE_TOLERANCE: f64 = 1e-12;

/// Sorted list of price differences at which a step function may jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    /// Sorts, drops non-finite values and merges values closer than
    /// `MERGE_TOLERANCE` (relative) into the largest of them. Without the merge
    /// two copies of one threshold that differ by rounding would drive the scan
    /// offset below one ulp.
    pub fn new(mut values: Vec<f64>) -> Self {
        values.retain(|v| v.is_finite());
        values.sort_by(f64::total_cmp);
        let mut out: Vec<f64> = Vec::with_capacity(values.len());
        for v in values {
            match out.last_mut() {
                Some(last) if v - *last <= MERGE_TOLERANCE * last.abs().max(1.0) => *last = v,
                _ => out.push(v),
            }
        }
        Self(out)
    }

    pub fn union<'a, I: IntoIterator<Item = &'a ThresholdSet>>(sets: I) -> Self {
        Self::new(sets.into_iter().flat_map(|s| s.0.iter().copied()).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Smallest positive gap between consecutive thresholds.
    pub fn min_gap(&self) -> Option<f64> {
        self.0
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|g| *g > 0.0)
            .min_by(f64::total_cmp)
    }
}

/// Generalized inverse CDF `inf { x : F(x) >= z }`.
pub trait InverseCdf {
    fn quantile(&self, z: f64) -> f64;
}

/// Discrete peak-demand distribution of one entity, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
    /// `tail[m]` = probability of outcomes `m..` in sorted order; `tail[0] == 1`.
    tail: Vec<f64>,
}

impl PeakDistribution {
    pub fn new(values: &[f64], probs: &[f64]) -> Result<Self> {
        if values.len() != probs.len() || values.is_empty() {
            return Err(Error::invalid("peak distribution needs matching non-empty vectors"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("peak distribution probabilities must be > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("peak distribution value".into()));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
        let values: Vec<f64> = order.iter().map(|i| values[*i]).collect();
        let probs: Vec<f64> = order.iter().map(|i| probs[*i]).collect();
        let mut suffix = vec![0.0; probs.len()];
        let mut acc = CompensatedSum::new();
        for m in (0..probs.len()).rev() {
            acc.add(probs[m]);
            suffix[m] = acc.value();
        }
        let total = suffix[0];
        let tail = suffix.iter().map(|s| s / total).collect();
        Ok(Self { values, probs, tail })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn tail_mass(&self, m: usize) -> f64 {
        self.tail[m]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Price difference above which capacity reaches at least the `m`-th
    /// sorted value: `unit_cost / tail(m) + offset`.
    fn step_threshold(&self, m: usize, unit_cost: f64, offset: f64) -> f64 {
        unit_cost / self.tail[m] + offset
    }

    /// Largest sorted index whose threshold lies strictly below `p_delta`.
    fn step_index(&self, unit_cost: f64, offset: f64, p_delta: f64) -> Option<usize> {
        // thresholds increase with m because tail mass decreases
        let mut lo = 0;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if p_delta > self.step_threshold(mid, unit_cost, offset) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo.checked_sub(1)
    }

    fn thresholds(&self, unit_cost: f64, offset: f64) -> Vec<f64> {
        (0..self.len())
            .map(|m| self.step_threshold(m, unit_cost, offset))
            .collect()
    }
}

impl InverseCdf for PeakDistribution {
    fn quantile(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return self.values[0];
        }
        // F(values[m]) = 1 - tail[m + 1]
        for m in 0..self.len() {
            let cdf = if m + 1 < self.len() { 1.0 - self.tail[m + 1] } else { 1.0 };
            if cdf >= z {
                return self.values[m];
            }
        }
        self.max()
    }
}

/// Continuous CDF given by linear interpolation between knots `(x, F(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearCdf {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinearCdf {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("piecewise-linear CDF needs at least two knots"));
        }
        let ok = knots.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1)
            && knots[0].1 == 0.0
            && knots[knots.len() - 1].1 == 1.0;
        if !ok {
            return Err(Error::invalid(
                "knots must have increasing x, non-decreasing F, F from 0 to 1",
            ));
        }
        Ok(Self { knots })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, 0.0), (hi, 1.0)])
    }
}

impl InverseCdf for PiecewiseLinearCdf {
    fn quantile(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return self.knots[0].0;
        }
        for w in self.knots.windows(2) {
            let ((x0, f0), (x1, f1)) = (w[0], w[1]);
            if f1 >= z {
                if f1 == f0 {
                    return x0;
                }
                return x0 + (x1 - x0) * (z - f0) / (f1 - f0);
            }
        }
        self.knots[self.knots.len() - 1].0
    }
}

/// Optimal capacity for a general distribution: zero unless the price
/// difference exceeds `theta`, then the `(p_delta - theta) / p_delta` quantile.
pub fn optimal_capacity_continuous<D: InverseCdf + ?Sized>(
    inverse_cdf: &D,
    theta: f64,
    p_delta: f64,
) -> f64 {
    if p_delta <= theta {
        return 0.0;
    }
    inverse_cdf.quantile((p_delta - theta) / p_delta)
}

/// Optimal capacity for a discrete peak distribution. At an exact threshold
/// the lower end of the optimal interval is returned.
pub fn optimal_capacity_discrete(dist: &PeakDistribution, theta: f64, p_delta: f64) -> f64 {
    dist.step_index(theta, 0.0, p_delta)
        .map_or(0.0, |m| dist.values[m])
}

pub fn optimal_charge(capacity: f64, peak_demand: f64) -> f64 {
    capacity.min(peak_demand)
}

/// `{0} ∪ { theta / tail(m) }` over the sorted outcomes.
pub fn threshold_set(dist: &PeakDistribution, theta: f64) -> ThresholdSet {
    let mut values = dist.thresholds(theta, 0.0);
    values.push(0.0);
    ThresholdSet::new(values)
}

/// Result of the elastic-shift decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticResponse {
    pub shifted: Vec<f64>,
    pub residual_peak: Vec<f64>,
}

/// Elastic demand is shifted entirely once the price difference strictly
/// exceeds the shift cost, and not at all otherwise.
pub fn respond_elastic(
    spec: &StorageSpec,
    peak: &[f64],
    elastic_demand: &[f64],
    p_delta: f64,
) -> ElasticResponse {
    let active = spec.elastic.is_some_and(|e| p_delta > e.cost);
    let shifted: Vec<f64> = if active {
        elastic_demand.to_vec()
    } else {
        vec![0.0; peak.len()]
    };
    let residual_peak = peak.iter().zip(&shifted).map(|(d, q)| d - q).collect();
    ElasticResponse {
        shifted,
        residual_peak,
    }
}

/// Change of variables mapping a lossy, degrading storage onto the lossless
/// capacity rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalentTransform {
    /// Net saving per MWh purchased for charging.
    pub p_delta: f64,
    /// Capacity cost per MWh of purchasable charge.
    pub theta: f64,
    /// Multiplier mapping peak demand to purchased-energy units.
    pub peak_scale: f64,
    /// Offset `A` of the thresholds in the original price difference.
    pub offset: f64,
}

pub fn equivalent_transform(spec: &StorageSpec, p_offpeak: f64, p_delta: f64) -> EquivalentTransform {
    let eta = spec.round_trip();
    EquivalentTransform {
        p_delta: p_delta * eta - p_offpeak * (1.0 - eta) - spec.tau * (1.0 + eta),
        theta: spec.eta_c * spec.theta,
        peak_scale: 1.0 / eta,
        offset: spec.offset(p_offpeak),
    }
}

/// `{A} ∪ { theta / eta_d / tail(m) + A }`.
pub fn threshold_set_extended(spec: &StorageSpec, dist: &PeakDistribution, p_offpeak: f64) -> ThresholdSet {
    let offset = spec.offset(p_offpeak);
    let mut values = dist.thresholds(spec.delivered_theta(), offset);
    values.push(offset);
    ThresholdSet::new(values)
}

/// Every price difference at which this entity's response can change at the
/// given off-peak price: the storage steps with and without the elastic
/// shift, the elastic shift cost itself, and zero.
pub fn response_thresholds(
    spec: &StorageSpec,
    probs: &[f64],
    peak: &[f64],
    p_offpeak: f64,
) -> Result<ThresholdSet> {
    let mut sets = vec![ThresholdSet::new(vec![0.0])];
    let plain = PeakDistribution::new(peak, probs)?;
    sets.push(threshold_set_extended(spec, &plain, p_offpeak));
    if let Some(e) = spec.elastic {
        let residual: Vec<f64> = peak.iter().map(|d| d - e.fraction * d).collect();
        let shifted = PeakDistribution::new(&residual, probs)?;
        sets.push(threshold_set_extended(spec, &shifted, p_offpeak));
        sets.push(ThresholdSet::new(vec![e.cost]));
    }
    Ok(ThresholdSet::union(&sets))
}

/// Full Stage-II response: elastic shift first, then the capacity step rule on
/// the residual peak demand (in delivered-energy units, with thresholds
/// shifted by the efficiency and degradation offset), then per-outcome
/// charging. Charges are purchased energy.
pub fn respond(spec: &StorageSpec, prices: TouPrice, probs: &[f64], peak: &[f64]) -> Result<ResponseProfile> {
    let p_delta = prices.p_delta();
    let elastic_demand: Vec<f64> = match spec.elastic {
        Some(e) => peak.iter().map(|d| e.fraction * d).collect(),
        None => vec![0.0; peak.len()],
    };
    let ElasticResponse {
        shifted,
        residual_peak,
    } = respond_elastic(spec, peak, &elastic_demand, p_delta);

    let dist = PeakDistribution::new(&residual_peak, probs)?;
    let level = dist
        .step_index(spec.delivered_theta(), spec.offset(prices.p_offpeak), p_delta)
        .map(|m| dist.values[m]);
    let Some(level) = level else {
        return Ok(ResponseProfile {
            capacity: 0.0,
            charge: vec![0.0; peak.len()],
            shifted,
        });
    };
    let eta = spec.round_trip();
    let charge = residual_peak
        .iter()
        .map(|r| optimal_charge(level, *r) / eta)
        .collect();
    Ok(ResponseProfile {
        capacity: level / spec.eta_d,
        charge,
        shifted,
    })
}

/// Stage-II objective of an entity (daily): capacity cost, shift cost,
/// degradation and the expected bill.
pub fn stage2_cost(
    spec: &StorageSpec,
    prices: TouPrice,
    probs: &[f64],
    peak: &[f64],
    offpeak: &[f64],
    response: &ResponseProfile,
) -> f64 {
    let eta = spec.round_trip();
    let shift_cost = spec.elastic.map_or(0.0, |e| e.cost);
    let mut acc = CompensatedSum::new();
    acc.add(spec.theta * response.capacity);
    for w in 0..probs.len() {
        let s = response.charge[w];
        let q = response.shifted[w];
        let bill = prices.p_peak * (peak[w] - q - eta * s)
            + prices.p_offpeak * (offpeak[w] + q + s)
            + spec.tau * s * (1.0 + eta)
            + shift_cost * q;
        acc.add(probs[w] * bill);
    }
    acc.value()
}
