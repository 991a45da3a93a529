//! Discrete joint demand distributions: construction from hourly load data,
//! per-type aggregation, variance scaling, synthetic generation and scenario
//! reduction.
//!
//! All energies are in MWh. A [`ScenarioSet`] holds one row per joint outcome
//! with the per-entity peak and off-peak daily demand of that outcome, so the
//! cross-entity correlation structure is kept intact by every transformation.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, pearson};

pub const HOURS_PER_DAY: usize = 24;

/// Tolerance on the probability normalization of a [`ScenarioSet`].
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Split of the 24 hours of a day into a peak and an off-peak period.
///
/// The peak window need not be contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PeriodStructure {
    peak: [bool; HOURS_PER_DAY],
}

impl PeriodStructure {
    pub fn new<I: IntoIterator<Item = usize>>(peak_hours: I) -> Result<Self> {
        let mut peak = [false; HOURS_PER_DAY];
        for h in peak_hours {
            if h >= HOURS_PER_DAY {
                return Err(Error::invalid(format!("peak hour {h} outside 0..24")));
            }
            peak[h] = true;
        }
        let n_peak = peak.iter().filter(|p| **p).count();
        if n_peak == 0 || n_peak == HOURS_PER_DAY {
            return Err(Error::invalid(
                "both periods need at least one hour".to_string(),
            ));
        }
        Ok(Self { peak })
    }

    /// Peak window of `len` hours starting at `start`, wrapping past midnight.
    pub fn window(start: usize, len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| (start + i) % HOURS_PER_DAY))
    }

    /// 18:00 to 01:00 (7 peak hours), 01:00 to 18:00 off-peak.
    pub fn evening_peak() -> Self {
        Self::window(18, 7).expect("static period structure")
    }

    /// A structure with the given hour counts; only the counts matter for
    /// the two-period cost model.
    pub fn with_counts(peak_hours: usize) -> Result<Self> {
        Self::window(0, peak_hours)
    }

    pub fn is_peak(&self, hour: usize) -> bool {
        self.peak[hour]
    }

    pub fn peak_hours(&self) -> Vec<usize> {
        (0..HOURS_PER_DAY).filter(|h| self.peak[*h]).collect()
    }

    /// Number of peak hours, `H^p`.
    pub fn h_peak(&self) -> f64 {
        self.peak.iter().filter(|p| **p).count() as f64
    }

    /// Number of off-peak hours, `H^o`.
    pub fn h_offpeak(&self) -> f64 {
        HOURS_PER_DAY as f64 - self.h_peak()
    }
}

impl Default for PeriodStructure {
    fn default() -> Self {
        Self::evening_peak()
    }
}

impl TryFrom<Vec<usize>> for PeriodStructure {
    type Error = Error;
    fn try_from(hours: Vec<usize>) -> Result<Self> {
        Self::new(hours)
    }
}

impl From<PeriodStructure> for Vec<usize> {
    fn from(p: PeriodStructure) -> Self {
        p.peak_hours()
    }
}

/// One joint outcome of daily demand across all entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub probability: f64,
    pub peak: Vec<f64>,
    pub offpeak: Vec<f64>,
}

/// Discrete joint distribution of (peak, off-peak) daily demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    entities: Vec<String>,
    outcomes: Vec<Outcome>,
}

impl ScenarioSet {
    pub fn new(entities: Vec<String>, outcomes: Vec<Outcome>) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::invalid("scenario set without entities"));
        }
        if outcomes.is_empty() {
            return Err(Error::invalid("scenario set without outcomes"));
        }
        let unique: HashSet<&String> = entities.iter().collect();
        if unique.len() != entities.len() {
            return Err(Error::invalid("duplicate entity ids"));
        }
        for (w, o) in outcomes.iter().enumerate() {
            if !(o.probability.is_finite() && o.probability > 0.0) {
                return Err(Error::invalid(format!(
                    "outcome {w} has non-positive probability {}",
                    o.probability
                )));
            }
            if o.peak.len() != entities.len() || o.offpeak.len() != entities.len() {
                return Err(Error::invalid(format!(
                    "outcome {w} does not cover every entity"
                )));
            }
            if let Some(v) = o.peak.iter().chain(&o.offpeak).find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("outcome {w} demand {v}")));
            }
            if let Some(v) = o.peak.iter().chain(&o.offpeak).find(|v| **v < 0.0) {
                return Err(Error::invalid(format!("outcome {w} has negative demand {v}")));
            }
        }
        let total = compensated_sum(outcomes.iter().map(|o| o.probability));
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { entities, outcomes })
    }

    /// Equiprobable outcomes from per-outcome (peak, off-peak) vectors.
    pub fn equiprobable(
        entities: Vec<String>,
        demands: Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let p = 1.0 / demands.len().max(1) as f64;
        let outcomes = demands
            .into_iter()
            .map(|(peak, offpeak)| Outcome {
                probability: p,
                peak,
                offpeak,
            })
            .collect();
        Self::new(entities, outcomes)
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.probability).collect()
    }

    pub fn peak_of(&self, entity: usize) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.peak[entity]).collect()
    }

    pub fn offpeak_of(&self, entity: usize) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.offpeak[entity]).collect()
    }

    /// Aggregate peak demand `D_a^p` of outcome `w`.
    pub fn aggregate_peak(&self, w: usize) -> f64 {
        compensated_sum(self.outcomes[w].peak.iter().copied())
    }

    pub fn aggregate_offpeak(&self, w: usize) -> f64 {
        compensated_sum(self.outcomes[w].offpeak.iter().copied())
    }

    /// `(min, max)` of the entity's peak demand over outcomes.
    pub fn peak_support(&self, entity: usize) -> (f64, f64) {
        self.outcomes.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), o| {
            (lo.min(o.peak[entity]), hi.max(o.peak[entity]))
        })
    }

    pub fn mean_peak(&self, entity: usize) -> f64 {
        compensated_sum(self.outcomes.iter().map(|o| o.probability * o.peak[entity]))
    }

    pub fn mean_offpeak(&self, entity: usize) -> f64 {
        compensated_sum(
            self.outcomes
                .iter()
                .map(|o| o.probability * o.offpeak[entity]),
        )
    }

    /// Writes `outcome,prob,entity,peak_mwh,offpeak_mwh`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let ctx = |e| Error::Csv {
            context: "writing scenario set".into(),
            source: e,
        };
        wtr.write_record(["outcome", "prob", "entity", "peak_mwh", "offpeak_mwh"])
            .map_err(ctx)?;
        for (w, o) in self.outcomes.iter().enumerate() {
            for (k, name) in self.entities.iter().enumerate() {
                wtr.write_record([
                    w.to_string(),
                    format!("{:?}", o.probability),
                    name.clone(),
                    format!("{:?}", o.peak[k]),
                    format!("{:?}", o.offpeak[k]),
                ])
                .map_err(ctx)?;
            }
        }
        wtr.flush().map_err(|e| Error::Io {
            context: "writing scenario set".into(),
            source: e,
        })
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            outcome: usize,
            prob: f64,
            entity: String,
            peak_mwh: f64,
            offpeak_mwh: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entities: Vec<String> = Vec::new();
        let mut entity_index: HashMap<String, usize> = HashMap::new();
        let mut rows: Vec<Row> = Vec::new();
        for (line, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| Error::Csv {
                context: format!("scenario CSV record {}", line + 1),
                source: e,
            })?;
            if !entity_index.contains_key(&row.entity) {
                entity_index.insert(row.entity.clone(), entities.len());
                entities.push(row.entity.clone());
            }
            rows.push(row);
        }
        let n_outcomes = rows.iter().map(|r| r.outcome + 1).max().unwrap_or(0);
        let mut outcomes: Vec<Option<Outcome>> = vec![None; n_outcomes];
        let mut seen = HashSet::new();
        for r in rows {
            let k = entity_index[&r.entity];
            if !seen.insert((r.outcome, k)) {
                return Err(Error::invalid(format!(
                    "duplicate row for outcome {} entity {}",
                    r.outcome, r.entity
                )));
            }
            let o = outcomes[r.outcome].get_or_insert_with(|| Outcome {
                probability: r.prob,
                peak: vec![f64::NAN; entities.len()],
                offpeak: vec![f64::NAN; entities.len()],
            });
            if o.probability != r.prob {
                return Err(Error::invalid(format!(
                    "outcome {} has inconsistent probabilities",
                    r.outcome
                )));
            }
            o.peak.resize(entities.len(), f64::NAN);
            o.offpeak.resize(entities.len(), f64::NAN);
            o.peak[k] = r.peak_mwh;
            o.offpeak[k] = r.offpeak_mwh;
        }
        let outcomes = outcomes
            .into_iter()
            .enumerate()
            .map(|(w, o)| {
                let mut o = o.ok_or_else(|| Error::invalid(format!("outcome {w} missing")))?;
                o.peak.resize(entities.len(), f64::NAN);
                o.offpeak.resize(entities.len(), f64::NAN);
                if o.peak.iter().any(|v| v.is_nan()) {
                    return Err(Error::invalid(format!(
                        "outcome {w} does not cover every entity"
                    )));
                }
                Ok(o)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entities, outcomes)
    }
}

/// One (day, entity) row of hourly data in MWh.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadRow {
    pub day: String,
    pub entity: String,
    pub load: [f64; HOURS_PER_DAY],
    pub solar: [f64; HOURS_PER_DAY],
}

impl LoadRow {
    /// Hourly net load `max(load - scale * solar, 0)`; surplus solar is curtailed.
    pub fn net(&self, solar_scale: f64) -> [f64; HOURS_PER_DAY] {
        std::array::from_fn(|h| (self.load[h] - solar_scale * self.solar[h]).max(0.0))
    }

    fn is_finite(&self) -> bool {
        self.load.iter().chain(&self.solar).all(|v| v.is_finite())
    }
}

/// Hourly load and solar table keyed by (day, entity).
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyLoadTable {
    rows: Vec<LoadRow>,
    solar_scale: f64,
}

impl HourlyLoadTable {
    pub fn new(rows: Vec<LoadRow>, solar_scale: f64) -> Result<Self> {
        if !(solar_scale.is_finite() && solar_scale >= 0.0) {
            return Err(Error::invalid(format!("solar scale {solar_scale} must be >= 0")));
        }
        let mut keys = HashSet::new();
        for r in &rows {
            if !keys.insert((r.day.as_str(), r.entity.as_str())) {
                return Err(Error::invalid(format!(
                    "duplicate row for day `{}`, entity `{}`",
                    r.day, r.entity
                )));
            }
        }
        Ok(Self { rows, solar_scale })
    }

    /// Parses `day,entity,h0..h23[,s0..s23]`. Values are multiplied by
    /// `unit_scale` (e.g. 1e-3 for kWh input); missing solar columns read as 0.
    pub fn from_csv<R: Read>(reader: R, unit_scale: f64, solar_scale: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Csv {
                context: "load CSV header".into(),
                source: e,
            })?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let day_col = col("day").ok_or_else(|| Error::invalid("load CSV lacks `day` column"))?;
        let entity_col =
            col("entity").ok_or_else(|| Error::invalid("load CSV lacks `entity` column"))?;
        let load_cols = (0..HOURS_PER_DAY)
            .map(|h| col(&format!("h{h}")).ok_or_else(|| Error::invalid(format!("load CSV lacks `h{h}`"))))
            .collect::<Result<Vec<_>>>()?;
        let solar_cols: Vec<Option<usize>> =
            (0..HOURS_PER_DAY).map(|h| col(&format!("s{h}"))).collect();

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Csv {
                context: format!("load CSV line {line}"),
                source: e,
            })?;
            let field = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                raw.parse::<f64>().map(|v| v * unit_scale).map_err(|_| {
                    Error::invalid(format!(
                        "load CSV line {line}, column `{}`: cannot parse `{raw}`",
                        &headers[c]
                    ))
                })
            };
            let mut load = [0.0; HOURS_PER_DAY];
            let mut solar = [0.0; HOURS_PER_DAY];
            for h in 0..HOURS_PER_DAY {
                load[h] = field(load_cols[h])?;
                if let Some(c) = solar_cols[h] {
                    solar[h] = field(c)?;
                }
            }
            rows.push(LoadRow {
                day: rec.get(day_col).unwrap_or("").to_string(),
                entity: rec.get(entity_col).unwrap_or("").to_string(),
                load,
                solar,
            });
        }
        Self::new(rows, solar_scale)
    }

    pub fn rows(&self) -> &[LoadRow] {
        &self.rows
    }

    pub fn solar_scale(&self) -> f64 {
        self.solar_scale
    }

    /// Day ids in order of first appearance.
    pub fn days(&self) -> Vec<String> {
        ordered_unique(self.rows.iter().map(|r| r.day.as_str()))
    }

    /// Entity ids in order of first appearance.
    pub fn entities(&self) -> Vec<String> {
        ordered_unique(self.rows.iter().map(|r| r.entity.as_str()))
    }

    /// Drops every day that lacks a row for some entity or holds a non-finite
    /// value, for all entities at once. Returns the cleaned table and the
    /// dropped day ids.
    pub fn drop_incomplete_days(&self) -> (Self, Vec<String>) {
        let entities = self.entities();
        let mut by_day: HashMap<&str, Vec<&LoadRow>> = HashMap::new();
        for r in &self.rows {
            by_day.entry(r.day.as_str()).or_default().push(r);
        }
        let mut dropped = Vec::new();
        let mut keep = HashSet::new();
        for day in self.days() {
            let rows = &by_day[day.as_str()];
            if rows.len() == entities.len() && rows.iter().all(|r| r.is_finite()) {
                keep.insert(day);
            } else {
                dropped.push(day);
            }
        }
        let rows = self
            .rows
            .iter()
            .filter(|r| keep.contains(&r.day))
            .cloned()
            .collect();
        (
            Self {
                rows,
                solar_scale: self.solar_scale,
            },
            dropped,
        )
    }

    fn lookup(&self) -> HashMap<(&str, &str), &LoadRow> {
        self.rows
            .iter()
            .map(|r| ((r.day.as_str(), r.entity.as_str()), r))
            .collect()
    }

    /// Aggregate net load per day and hour, summed over entities after
    /// per-entity clamping.
    pub fn aggregate_net_by_day(&self) -> Result<Vec<[f64; HOURS_PER_DAY]>> {
        let lookup = self.lookup();
        let entities = self.entities();
        self.days()
            .iter()
            .map(|day| {
                let mut total = [0.0; HOURS_PER_DAY];
                for e in &entities {
                    let row = lookup.get(&(day.as_str(), e.as_str())).ok_or_else(|| {
                        Error::MissingCell {
                            day: day.clone(),
                            entity: e.clone(),
                        }
                    })?;
                    for (t, v) in row.net(self.solar_scale).iter().enumerate() {
                        total[t] += v;
                    }
                }
                Ok(total)
            })
            .collect()
    }
}

fn ordered_unique<'a, I: Iterator<Item = &'a str>>(iter: I) -> Vec<String> {
    let mut seen = HashSet::new();
    iter.filter(|s| seen.insert(*s)).map(str::to_string).collect()
}

/// One equiprobable outcome per day; per-entity period demand is the sum of
/// the clamped hourly net load over the period's hours.
pub fn ingest_hourly_loads(
    table: &HourlyLoadTable,
    periods: &PeriodStructure,
) -> Result<ScenarioSet> {
    if table.rows.is_empty() {
        return Err(Error::invalid("empty load table"));
    }
    if let Some(r) = table.rows.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!(
            "load data for day `{}`, entity `{}`",
            r.day, r.entity
        )));
    }
    let lookup = table.lookup();
    let entities = table.entities();
    let days = table.days();
    let mut demands = Vec::with_capacity(days.len());
    for day in &days {
        let mut peak = Vec::with_capacity(entities.len());
        let mut offpeak = Vec::with_capacity(entities.len());
        for e in &entities {
            let row = lookup
                .get(&(day.as_str(), e.as_str()))
                .ok_or_else(|| Error::MissingCell {
                    day: day.clone(),
                    entity: e.clone(),
                })?;
            let net = row.net(table.solar_scale);
            let (mut p, mut o) = (0.0, 0.0);
            for (h, v) in net.iter().enumerate() {
                if periods.is_peak(h) {
                    p += v;
                } else {
                    o += v;
                }
            }
            peak.push(p);
            offpeak.push(o);
        }
        demands.push((peak, offpeak));
    }
    ScenarioSet::equiprobable(entities, demands)
}

/// Assignment of entities to types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    type_of: Vec<usize>,
    n_types: usize,
}

impl Grouping {
    pub fn new(type_of: Vec<usize>) -> Result<Self> {
        let n_types = type_of.iter().map(|t| t + 1).max().unwrap_or(0);
        let mut sizes = vec![0usize; n_types];
        for t in &type_of {
            sizes[*t] += 1;
        }
        if let Some(k) = sizes.iter().position(|s| *s == 0) {
            return Err(Error::InvalidGrouping(format!("type {k} has no members")));
        }
        Ok(Self { type_of, n_types })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            type_of: (0..n).collect(),
            n_types: n,
        }
    }

    /// `n_types` consecutive blocks of `per_type` entities.
    pub fn blocks(n_types: usize, per_type: usize) -> Self {
        Self {
            type_of: (0..n_types * per_type).map(|i| i / per_type).collect(),
            n_types,
        }
    }

    /// Random assignment into `n_types` types of equal size (sizes differ by
    /// at most one when `n_entities` is not a multiple of `n_types`).
    pub fn random_equal(n_entities: usize, n_types: usize, seed: u64) -> Result<Self> {
        if n_types == 0 || n_types > n_entities {
            return Err(Error::InvalidGrouping(format!(
                "cannot split {n_entities} entities into {n_types} non-empty types"
            )));
        }
        let mut order: Vec<usize> = (0..n_entities).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut type_of = vec![0; n_entities];
        for (pos, e) in order.into_iter().enumerate() {
            type_of[e] = pos * n_types / n_entities;
        }
        Self::new(type_of)
    }

    pub fn type_of(&self, entity: usize) -> usize {
        self.type_of[entity]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.type_of
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn n_entities(&self) -> usize {
        self.type_of.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.type_of.len())
            .filter(|i| self.type_of[*i] == k)
            .collect()
    }
}

/// Per-type demand as the outcome-by-outcome sum of member demands.
pub fn aggregate_by_type(s: &ScenarioSet, grouping: &Grouping) -> Result<ScenarioSet> {
    if grouping.n_entities() != s.n_entities() {
        return Err(Error::InvalidGrouping(format!(
            "grouping covers {} entities, scenario set has {}",
            grouping.n_entities(),
            s.n_entities()
        )));
    }
    let k = grouping.n_types();
    let names = (0..k)
        .map(|t| {
            let members = grouping.members(t);
            if members.len() == 1 {
                s.entities[members[0]].clone()
            } else {
                format!("type{t}")
            }
        })
        .collect();
    let outcomes = s
        .outcomes
        .iter()
        .map(|o| {
            let mut peak = vec![0.0; k];
            let mut offpeak = vec![0.0; k];
            for (i, t) in grouping.type_of.iter().enumerate() {
                peak[*t] += o.peak[i];
                offpeak[*t] += o.offpeak[i];
            }
            Outcome {
                probability: o.probability,
                peak,
                offpeak,
            }
        })
        .collect();
    ScenarioSet::new(names, outcomes)
}

/// Scales each entity's deviation from its mean by `delta_d`, separately for
/// peak and off-peak demand. Negative results are clamped to zero, in which
/// case the mean is no longer preserved exactly.
pub fn adjust_variance(s: &ScenarioSet, delta_d: f64) -> Result<ScenarioSet> {
    if !(delta_d.is_finite() && delta_d >= 0.0) {
        return Err(Error::invalid(format!("delta_d {delta_d} must be finite and >= 0")));
    }
    let n = s.n_entities();
    let mean_p: Vec<f64> = (0..n).map(|k| s.mean_peak(k)).collect();
    let mean_o: Vec<f64> = (0..n).map(|k| s.mean_offpeak(k)).collect();
    let scale = |d: f64, m: f64| (d - (1.0 - delta_d) * (d - m)).max(0.0);
    let outcomes = s
        .outcomes
        .iter()
        .map(|o| Outcome {
            probability: o.probability,
            peak: o.peak.iter().zip(&mean_p).map(|(d, m)| scale(*d, *m)).collect(),
            offpeak: o.offpeak.iter().zip(&mean_o).map(|(d, m)| scale(*d, *m)).collect(),
        })
        .collect();
    ScenarioSet::new(s.entities.clone(), outcomes)
}

/// Synthetic users with i.i.d. uniform peak demand on `[0, range_hi]` and zero
/// off-peak demand over equiprobable outcomes. Users `t*users_per_type ..
/// (t+1)*users_per_type` belong to type `t` (see [`Grouping::blocks`]).
pub fn generate_synthetic(
    n_types: usize,
    users_per_type: usize,
    n_outcomes: usize,
    range_hi: f64,
    seed: u64,
) -> Result<ScenarioSet> {
    if n_types == 0 || users_per_type == 0 || n_outcomes == 0 {
        return Err(Error::invalid("synthetic counts must be >= 1"));
    }
    if !(range_hi.is_finite() && range_hi >= 0.0) {
        return Err(Error::invalid(format!("range {range_hi} must be >= 0")));
    }
    let n_users = n_types * users_per_type;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = (0..n_users).map(|i| format!("u{i}")).collect();
    let demands = (0..n_outcomes)
        .map(|_| {
            let peak = (0..n_users)
                .map(|_| range_hi * rng.gen::<f64>())
                .collect();
            (peak, vec![0.0; n_users])
        })
        .collect();
    ScenarioSet::equiprobable(entities, demands)
}

/// Second user's demand `e * base[perm[w]]` together with its Pearson
/// correlation to `base`.
pub fn permute_second_user(base: &[f64], e: f64, perm: &[usize]) -> Result<(Vec<f64>, f64)> {
    if perm.len() != base.len() {
        return Err(Error::invalid("permutation length differs from demand vector"));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("not a permutation of outcome indices"));
        }
    }
    let second: Vec<f64> = perm.iter().map(|&p| e * base[p]).collect();
    let rho = pearson(base, &second)?;
    Ok((second, rho))
}

/// Forward-selection scenario reduction.
///
/// Scenarios are compared by Euclidean distance over the full joint demand
/// vector (all entities, both periods). Each step keeps the scenario that
/// most reduces the probability-weighted distance of the discarded scenarios
/// to their nearest kept one; at the end every discarded scenario hands its
/// probability to its nearest kept scenario. Kept outcomes stay in their
/// original order.
pub fn reduce_scenarios(s: &ScenarioSet, target: usize) -> Result<ScenarioSet> {
    let n = s.n_outcomes();
    if target == 0 || target > n {
        return Err(Error::invalid(format!(
            "reduction target {target} outside 1..={n}"
        )));
    }
    if target == n {
        return Ok(s.clone());
    }
    let vectors: Vec<Vec<f64>> = s
        .outcomes
        .iter()
        .map(|o| o.peak.iter().chain(&o.offpeak).copied().collect())
        .collect();
    let dist = |a: usize, b: usize| -> f64 {
        vectors[a]
            .iter()
            .zip(&vectors[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let d: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| dist(a, b)).collect()).collect();
    let prob = s.probabilities();

    let mut selected = vec![false; n];
    // distance from each scenario to the nearest selected one
    let mut nearest = vec![f64::INFINITY; n];
    for _ in 0..target {
        let mut best: Option<(usize, f64)> = None;
        for u in (0..n).filter(|u| !selected[*u]) {
            let score = compensated_sum((0..n).filter(|k| !selected[*k] && *k != u).map(|k| {
                let dk = nearest[k].min(d[k][u]);
                prob[k] * dk
            }));
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((u, score));
            }
        }
        let (u, _) = best.expect("target <= n leaves a candidate");
        selected[u] = true;
        for k in 0..n {
            nearest[k] = nearest[k].min(d[k][u]);
        }
    }

    let kept: Vec<usize> = (0..n).filter(|u| selected[*u]).collect();
    let mut mass = vec![0.0; n];
    for k in 0..n {
        let to = if selected[k] {
            k
        } else {
            *kept
                .iter()
                .min_by(|a, b| d[k][**a].total_cmp(&d[k][**b]))
                .expect("at least one kept scenario")
        };
        mass[to] += prob[k];
    }
    let total: f64 = compensated_sum(kept.iter().map(|u| mass[*u]));
    let outcomes = kept
        .iter()
        .map(|u| Outcome {
            probability: mass[*u] / total,
            peak: s.outcomes[*u].peak.clone(),
            offpeak: s.outcomes[*u].offpeak.clone(),
        })
        .collect();
    ScenarioSet::new(s.entities.clone(), outcomes)
}
