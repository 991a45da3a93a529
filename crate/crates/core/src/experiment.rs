//! Study configuration and orchestration: building markets from synthetic
//! or recorded demand, running both pricing schemes and the planner on each,
//! and sweeping one parameter at a time.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{
    compute_ratios, peak_supports, solve_so, tightness_instance, validate_structure_pricing,
    validate_structure_so, RatioReport, SolverSettings,
};
use crate::cost_model::{daily_cost_factor, AnnuityParams, SupplyCostParams};
use crate::demand::{
    adjust_variance, generate_synthetic, ingest_hourly_loads, reduce_scenarios, Grouping,
    HourlyLoadTable, PeriodStructure, ScenarioSet,
};
use crate::error::{Error, Result};
use crate::numeric::mean_std;
use crate::stage1::{optimize_price_difference, optimize_prices_extended, Market, PricingResult, Scheme};
use crate::stage2::{ElasticShift, StorageSpec};

/// Capacity tolerance used by the structure checks.
pub const STRUCTURE_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
    Tightness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Hourly load CSV, relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Multiplier turning file units into MWh (1e-3 for kWh).
    pub unit_scale: f64,
    pub solar_scale: f64,
    pub drop_incomplete_days: bool,
    pub reduce_to: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            unit_scale: 1e-3,
            solar_scale: 1.0,
            drop_incomplete_days: false,
            reduce_to: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_outcomes: usize,
    /// Upper end of the uniform peak demand, MWh.
    pub range_hi: f64,
    /// One joint distribution per seed.
    pub seeds: Vec<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 16,
            n_outcomes: 7,
            range_hi: 0.01,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TightnessConfig {
    pub k: usize,
    pub d: f64,
    pub theta0: f64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self {
            k: 2,
            d: 1.0,
            theta0: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeriodsConfig {
    pub peak_hours: Vec<usize>,
}

impl Default for PeriodsConfig {
    fn default() -> Self {
        Self {
            peak_hours: PeriodStructure::evening_peak().peak_hours(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageConfig {
    /// Mean daily capacity cost over types, $/MWh/day.
    pub theta_bar: f64,
    /// Capital cost per MWh; when set, `theta_bar` is derived from it and the
    /// annuity parameters.
    pub capex_per_mwh: Option<f64>,
    pub delta_s: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub tau: f64,
    pub elastic_cost: f64,
    pub elastic_fraction: f64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            theta_bar: 10.0,
            capex_per_mwh: None,
            delta_s: 1.0 / 3.0,
            eta_c: 1.0,
            eta_d: 1.0,
            tau: 0.0,
            elastic_cost: 1.0,
            elastic_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    /// Consecutive equal blocks.
    #[default]
    Fixed,
    /// One random equal-size grouping per seed.
    Random,
    /// Every user is its own type.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub mode: GroupingMode,
    pub n_types: usize,
    pub seeds: Vec<u64>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            mode: GroupingMode::Fixed,
            n_types: 4,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub theta_bar: Vec<f64>,
    pub delta_s: Vec<f64>,
    pub delta_d: Vec<f64>,
    /// Price differences of the lambda map (`theta_bar` supplies the other axis).
    pub p_delta: Vec<f64>,
    pub tau: Vec<f64>,
    pub eta: Vec<f64>,
    pub elastic_fraction: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            theta_bar: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0, 150.0, 200.0, 400.0],
            delta_s: vec![0.0, 0.1, 0.2, 1.0 / 3.0, 0.5, 0.6],
            delta_d: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
            p_delta: vec![0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 320.0, 640.0],
            tau: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            eta: vec![0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0],
            elastic_fraction: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        }
    }
}

/// Off-peak price grid searched when storage is lossy or degrades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendedConfig {
    pub p_o_lo: f64,
    pub p_o_hi: f64,
    pub p_o_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingConfig {
    /// Off-peak price reported with the optimal difference for lossless storage.
    pub reference_p_offpeak: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            reference_p_offpeak: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub tightness: TightnessConfig,
    pub periods: PeriodsConfig,
    pub supply: SupplyCostParams,
    pub annuity: AnnuityParams,
    pub storage: StorageConfig,
    pub grouping: GroupingConfig,
    pub pricing: PricingConfig,
    pub sweep: SweepConfig,
    pub extended: Option<ExtendedConfig>,
    pub solver: SolverSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            tightness: TightnessConfig::default(),
            periods: PeriodsConfig::default(),
            supply: SupplyCostParams {
                alpha: 1000.0,
                beta: 0.0,
                gamma: 0.0,
            },
            annuity: AnnuityParams::default(),
            storage: StorageConfig::default(),
            grouping: GroupingConfig::default(),
            pricing: PricingConfig::default(),
            sweep: SweepConfig::default(),
            extended: None,
            solver: SolverSettings::default(),
        }
    }
}

/// Parameters varied by a sweep; `None` keeps the configured value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub theta_bar: Option<f64>,
    pub delta_s: Option<f64>,
    pub delta_d: Option<f64>,
    pub tau: Option<f64>,
    /// Sets both charge and discharge efficiency.
    pub eta: Option<f64>,
    pub elastic_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ThetaBar,
    DeltaS,
    DeltaD,
    Lambda,
    Tau,
    Eta,
    ElasticFraction,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ThetaBar => "theta_bar",
            SweepAxis::DeltaS => "delta_s",
            SweepAxis::DeltaD => "delta_d",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Tau => "tau",
            SweepAxis::Eta => "eta",
            SweepAxis::ElasticFraction => "elastic_fraction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "theta_bar" => SweepAxis::ThetaBar,
            "delta_s" => SweepAxis::DeltaS,
            "delta_d" => SweepAxis::DeltaD,
            "lambda" => SweepAxis::Lambda,
            "tau" => SweepAxis::Tau,
            "eta" => SweepAxis::Eta,
            "elastic_fraction" => SweepAxis::ElasticFraction,
            other => return Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        })
    }

    fn grid<'a>(&self, s: &'a SweepConfig) -> &'a [f64] {
        match self {
            SweepAxis::ThetaBar => &s.theta_bar,
            SweepAxis::DeltaS => &s.delta_s,
            SweepAxis::DeltaD => &s.delta_d,
            SweepAxis::Lambda => &s.p_delta,
            SweepAxis::Tau => &s.tau,
            SweepAxis::Eta => &s.eta,
            SweepAxis::ElasticFraction => &s.elastic_fraction,
        }
    }

    fn overrides(&self, value: f64) -> Overrides {
        let mut o = Overrides::default();
        match self {
            SweepAxis::ThetaBar => o.theta_bar = Some(value),
            SweepAxis::DeltaS => o.delta_s = Some(value),
            SweepAxis::DeltaD => o.delta_d = Some(value),
            SweepAxis::Tau => o.tau = Some(value),
            SweepAxis::Eta => o.eta = Some(value),
            SweepAxis::ElasticFraction => o.elastic_fraction = Some(value),
            SweepAxis::Lambda => {}
        }
        o
    }
}

/// One demand distribution under one grouping.
#[derive(Debug, Clone)]
pub struct Instance {
    pub label: String,
    pub users: ScenarioSet,
    pub grouping: Grouping,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative data path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: e,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    /// Full config with all defaults spelled out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every seed list with the single given seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synthetic.seeds = vec![seed];
        self.grouping.seeds = vec![seed];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.supply.validate()?;
        self.annuity.validate()?;
        self.solver.validate()?;
        self.period_structure()?;
        let s = &self.storage;
        if !(s.theta_bar > 0.0) && s.capex_per_mwh.is_none() {
            return cfg_err(format!("storage.theta_bar {} must be > 0", s.theta_bar));
        }
        if self.grouping.n_types == 0 {
            return cfg_err("grouping.n_types must be >= 1".into());
        }
        self.check_delta_s(s.delta_s)?;
        if self.grouping.mode == GroupingMode::Random && self.grouping.seeds.is_empty() {
            return cfg_err("grouping.seeds must be non-empty for random grouping".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                let syn = &self.synthetic;
                if syn.seeds.is_empty() {
                    return cfg_err("synthetic.seeds must be non-empty".into());
                }
                if syn.n_users == 0 || syn.n_outcomes == 0 || !(syn.range_hi > 0.0) {
                    return cfg_err("synthetic counts and range must be positive".into());
                }
            }
            DataSource::Csv => {
                if self.data.path.is_none() {
                    return cfg_err("data.path is required for csv input".into());
                }
                if !(self.data.unit_scale > 0.0) {
                    return cfg_err("data.unit_scale must be > 0".into());
                }
            }
            DataSource::Tightness => {
                let t = &self.tightness;
                if t.k == 0 || !(t.d > 0.0) || !(t.theta0 > 0.0) {
                    return cfg_err("tightness.k, d and theta0 must be positive".into());
                }
            }
        }
        for (name, grid) in [
            ("theta_bar", &self.sweep.theta_bar),
            ("delta_s", &self.sweep.delta_s),
            ("delta_d", &self.sweep.delta_d),
            ("p_delta", &self.sweep.p_delta),
            ("tau", &self.sweep.tau),
            ("eta", &self.sweep.eta),
            ("elastic_fraction", &self.sweep.elastic_fraction),
        ] {
            if grid.is_empty() {
                return cfg_err(format!("sweep.{name} must be non-empty"));
            }
        }
        for d in &self.sweep.delta_s {
            self.check_delta_s(*d)?;
        }
        if let Some(e) = self.extended {
            if !(e.p_o_lo >= 0.0 && e.p_o_hi >= e.p_o_lo) || e.p_o_steps == 0 {
                return cfg_err(format!("extended range {e:?}"));
            }
        }
        Ok(())
    }

    /// The lowest type cost stays positive while `delta_s < 2 / (K - 1)`.
    fn check_delta_s(&self, delta_s: f64) -> Result<()> {
        let k = self.grouping.n_types;
        let limit = if k > 1 { 2.0 / (k as f64 - 1.0) } else { f64::INFINITY };
        if !(delta_s >= 0.0 && delta_s < limit) {
            return Err(Error::Config(format!(
                "delta_s {delta_s} outside [0, {limit}) for {k} types"
            )));
        }
        Ok(())
    }

    pub fn period_structure(&self) -> Result<PeriodStructure> {
        PeriodStructure::new(self.periods.peak_hours.iter().copied())
    }

    pub fn theta_bar(&self) -> f64 {
        match self.storage.capex_per_mwh {
            Some(capex) => capex * daily_cost_factor(&self.annuity),
            None => self.storage.theta_bar,
        }
    }

    /// `theta_bar (1 + (k - (K-1)/2) delta_s)` for `k = 0..K`.
    pub fn type_thetas(theta_bar: f64, delta_s: f64, n_types: usize) -> Vec<f64> {
        let mid = (n_types as f64 - 1.0) / 2.0;
        (0..n_types)
            .map(|k| theta_bar * (1.0 + (k as f64 - mid) * delta_s))
            .collect()
    }

    fn spec(&self, theta: f64, o: &Overrides) -> StorageSpec {
        let s = &self.storage;
        let (eta_c, eta_d) = o.eta.map_or((s.eta_c, s.eta_d), |e| (e, e));
        let fraction = o.elastic_fraction.unwrap_or(s.elastic_fraction);
        StorageSpec {
            theta,
            eta_c,
            eta_d,
            tau: o.tau.unwrap_or(s.tau),
            elastic: (fraction > 0.0).then_some(ElasticShift {
                cost: s.elastic_cost,
                fraction,
            }),
        }
    }

    /// Demand distributions before variance adjustment and grouping.
    pub fn base_distributions(&self) -> Result<Vec<(String, ScenarioSet)>> {
        match self.data.source {
            DataSource::Synthetic => {
                let syn = &self.synthetic;
                syn.seeds
                    .iter()
                    .map(|seed| {
                        let s = generate_synthetic(1, syn.n_users, syn.n_outcomes, syn.range_hi, *seed)?;
                        Ok((format!("dist{seed}"), s))
                    })
                    .collect()
            }
            DataSource::Csv => Ok(vec![("data".into(), self.ingest()?.0)]),
            DataSource::Tightness => {
                let m = tightness_instance(
                    self.tightness.k,
                    self.tightness.d,
                    self.period_structure()?,
                    self.tightness.theta0,
                )?;
                Ok(vec![("tightness".into(), m.users().clone())])
            }
        }
    }

    /// Loads the configured CSV into one outcome per day. Returns the
    /// scenario set and the days dropped for missing data.
    pub fn ingest(&self) -> Result<(ScenarioSet, Vec<String>)> {
        let path = self
            .data
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("data.path is required for csv input".into()))?;
        let file = File::open(path).map_err(|e| Error::Io {
            context: format!("opening {}", path.display()),
            source: e,
        })?;
        let table = HourlyLoadTable::from_csv(file, self.data.unit_scale, self.data.solar_scale).map_err(|e| {
            match e {
                Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
                other => other,
            }
        })?;
        let (table, dropped) = if self.data.drop_incomplete_days {
            table.drop_incomplete_days()
        } else {
            (table, Vec::new())
        };
        let mut s = ingest_hourly_loads(&table, &self.period_structure()?)?;
        if let Some(target) = self.data.reduce_to {
            if target < s.n_outcomes() {
                s = reduce_scenarios(&s, target)?;
            }
        }
        Ok((s, dropped))
    }

    fn groupings(&self, n_users: usize) -> Result<Vec<(String, Grouping)>> {
        if self.data.source == DataSource::Tightness {
            return Ok(vec![("individual".into(), Grouping::identity(n_users))]);
        }
        let k = self.grouping.n_types;
        match self.grouping.mode {
            GroupingMode::Individual => Ok(vec![("individual".into(), Grouping::identity(n_users))]),
            GroupingMode::Fixed => {
                if k > n_users {
                    return Err(Error::InvalidGrouping(format!("{k} types for {n_users} users")));
                }
                let type_of = (0..n_users).map(|i| i * k / n_users).collect();
                Ok(vec![("fixed".into(), Grouping::new(type_of)?)])
            }
            GroupingMode::Random => self
                .grouping
                .seeds
                .iter()
                .map(|seed| Ok((format!("group{seed}"), Grouping::random_equal(n_users, k, *seed)?)))
                .collect(),
        }
    }

    /// Every (distribution, grouping) pair with variance scaled by `delta_d`.
    pub fn instances(&self, delta_d: Option<f64>) -> Result<Vec<Instance>> {
        let mut out = Vec::new();
        for (dist_label, base) in self.base_distributions()? {
            let users = match delta_d {
                Some(d) => adjust_variance(&base, d)?,
                None => base,
            };
            for (group_label, grouping) in self.groupings(users.n_entities())? {
                out.push(Instance {
                    label: format!("{dist_label}/{group_label}"),
                    users: users.clone(),
                    grouping,
                });
            }
        }
        Ok(out)
    }

    /// Market for an instance with the overrides applied.
    pub fn market(&self, inst: &Instance, o: &Overrides) -> Result<Market> {
        let periods = self.period_structure()?;
        if self.data.source == DataSource::Tightness {
            let m = tightness_instance(self.tightness.k, self.tightness.d, periods, self.tightness.theta0)?;
            let specs = m.type_specs().iter().map(|s| self.spec(s.theta, o)).collect();
            return Market::new(inst.users.clone(), inst.grouping.clone(), specs, m.periods().clone(), *m.supply());
        }
        let theta_bar = o.theta_bar.unwrap_or_else(|| self.theta_bar());
        let delta_s = o.delta_s.unwrap_or(self.storage.delta_s);
        let n_types = inst.grouping.n_types();
        let thetas = if self.grouping.mode == GroupingMode::Individual {
            // users take the configured class costs in consecutive blocks
            let classes = Self::type_thetas(theta_bar, delta_s, self.grouping.n_types);
            (0..n_types).map(|i| classes[i * classes.len() / n_types]).collect()
        } else {
            Self::type_thetas(theta_bar, delta_s, n_types)
        };
        let specs = thetas.iter().map(|t| self.spec(*t, o)).collect();
        Market::new(inst.users.clone(), inst.grouping.clone(), specs, periods, self.supply)
    }
}

fn is_lossless(specs: &[StorageSpec]) -> bool {
    specs.iter().all(|s| s.eta_c == 1.0 && s.eta_d == 1.0 && s.tau == 0.0)
}

/// Pricing for one scheme: the threshold scan for lossless storage, the
/// off-peak grid search otherwise.
pub fn price(cfg: &ExperimentConfig, market: &Market, scheme: Scheme) -> Result<PricingResult> {
    if is_lossless(market.type_specs()) {
        return optimize_price_difference(market, scheme, cfg.pricing.reference_p_offpeak);
    }
    let e = cfg.extended.ok_or_else(|| {
        Error::Config("lossy or degrading storage needs an [extended] off-peak price range".into())
    })?;
    optimize_prices_extended(market, scheme, (e.p_o_lo, e.p_o_hi), e.p_o_steps)
}

/// Headline numbers of one scheme on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub p_delta: f64,
    pub p_offpeak: f64,
    pub capacity: f64,
    pub social_cost: f64,
}

impl From<&PricingResult> for SchemeSummary {
    fn from(r: &PricingResult) -> Self {
        Self {
            p_delta: r.best_price.p_delta(),
            p_offpeak: r.best_price.p_offpeak,
            capacity: r.total_capacity(),
            social_cost: r.social_cost.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub label: String,
    pub pt: SchemeSummary,
    pub pi: SchemeSummary,
    pub sc_no: f64,
    /// Planner capacity and ratios, only for lossless storage without elastic demand.
    pub so_capacity: Option<f64>,
    pub ratios: Option<RatioReport>,
}

/// Runs PT, PI and (where defined) the planner on one instance, checking the
/// cost ordering and both investment structures.
pub fn evaluate_instance(cfg: &ExperimentConfig, inst: &Instance, o: &Overrides) -> Result<InstanceOutcome> {
    let market = cfg.market(inst, o)?;
    let pt = price(cfg, &market, Scheme::Pt)?;
    let pi = price(cfg, &market, Scheme::Pi)?;
    let sc_no = market.no_storage_cost();
    let plain = is_lossless(market.type_specs()) && market.type_specs().iter().all(|s| s.elastic.is_none());
    let (so_capacity, ratios) = if plain {
        let thetas = market.user_thetas();
        let plan = solve_so(market.users(), &thetas, market.periods(), market.supply(), &cfg.solver)?;
        let supports = peak_supports(market.users());
        validate_structure_so(&plan, &thetas, &supports, STRUCTURE_TOLERANCE)
            .into_result()
            .map_err(|e| annotate(e, &inst.label, "planner"))?;
        for r in [&pt, &pi] {
            validate_structure_pricing(&r.responses, &thetas, &supports, STRUCTURE_TOLERANCE)
                .into_result()
                .map_err(|e| annotate(e, &inst.label, &r.scheme.to_string()))?;
        }
        let ratios = compute_ratios(pt.social_cost.total, pi.social_cost.total, plan.social_cost.total, sc_no)
            .map_err(|e| annotate(e, &inst.label, "ratios"))?;
        (Some(plan.total_capacity()), Some(ratios))
    } else {
        if pt.social_cost.total < pi.social_cost.total - 1e-9 * pi.social_cost.total.abs().max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "{}: PT cost {} below PI cost {}",
                inst.label, pt.social_cost.total, pi.social_cost.total
            )));
        }
        (None, None)
    };
    Ok(InstanceOutcome {
        label: inst.label.clone(),
        pt: (&pt).into(),
        pi: (&pi).into(),
        sc_no,
        so_capacity,
        ratios,
    })
}

fn annotate(e: Error, label: &str, what: &str) -> Error {
    match e {
        Error::InvariantViolation(m) => Error::InvariantViolation(format!("{label} ({what}): {m}")),
        other => other,
    }
}

/// Mean and population standard deviation over instances at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: f64,
    pub kappa_pt: f64,
    pub kappa_pi: f64,
    pub kappa_no: f64,
    pub kappa_pt_std: f64,
    pub kappa_pi_std: f64,
    pub kappa_no_std: f64,
    pub pdelta_pt: f64,
    pub pdelta_pt_std: f64,
    pub pdelta_pi: f64,
    pub pdelta_pi_std: f64,
    pub capacity_pt: f64,
    pub capacity_pi: f64,
    pub capacity_so: f64,
    pub sc_pt: f64,
    pub sc_pi: f64,
    pub sc_so: f64,
    pub sc_no: f64,
}

fn summarize(axis: f64, outcomes: &[InstanceOutcome]) -> SweepRow {
    let stat = |f: &dyn Fn(&InstanceOutcome) -> Option<f64>| -> (f64, f64) {
        let v: Option<Vec<f64>> = outcomes.iter().map(f).collect();
        v.map_or((f64::NAN, f64::NAN), |v| mean_std(&v))
    };
    let (kappa_pt, kappa_pt_std) = stat(&|o| o.ratios.map(|r| r.kappa_pt));
    let (kappa_pi, kappa_pi_std) = stat(&|o| o.ratios.map(|r| r.kappa_pi));
    let (kappa_no, kappa_no_std) = stat(&|o| o.ratios.map(|r| r.kappa_no));
    let (pdelta_pt, pdelta_pt_std) = stat(&|o| Some(o.pt.p_delta));
    let (pdelta_pi, pdelta_pi_std) = stat(&|o| Some(o.pi.p_delta));
    SweepRow {
        axis,
        kappa_pt,
        kappa_pi,
        kappa_no,
        kappa_pt_std,
        kappa_pi_std,
        kappa_no_std,
        pdelta_pt,
        pdelta_pt_std,
        pdelta_pi,
        pdelta_pi_std,
        capacity_pt: stat(&|o| Some(o.pt.capacity)).0,
        capacity_pi: stat(&|o| Some(o.pi.capacity)).0,
        capacity_so: stat(&|o| o.so_capacity).0,
        sc_pt: stat(&|o| Some(o.pt.social_cost)).0,
        sc_pi: stat(&|o| Some(o.pi.social_cost)).0,
        sc_so: stat(&|o| o.ratios.map(|r| r.sc_so)).0,
        sc_no: stat(&|o| Some(o.sc_no)).0,
    }
}

/// Runs every instance at every grid point of `axis` (not `Lambda`).
/// Rows come back in grid order.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    if axis == SweepAxis::Lambda {
        return Err(Error::invalid("the lambda map has its own runner"));
    }
    let grid = axis.grid(&cfg.sweep).to_vec();
    let mut jobs = Vec::new();
    for (g, value) in grid.iter().enumerate() {
        let o = axis.overrides(*value);
        for inst in cfg.instances(o.delta_d)? {
            jobs.push((g, o, inst));
        }
    }
    let outcomes = jobs
        .par_iter()
        .map(|(g, o, inst)| evaluate_instance(cfg, inst, o).map(|r| (*g, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, value)| {
            let at: Vec<InstanceOutcome> = outcomes
                .iter()
                .filter(|(i, _)| *i == g)
                .map(|(_, r)| r.clone())
                .collect();
            summarize(*value, &at)
        })
        .collect())
}

pub fn write_sweep_csv<W: Write>(writer: W, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let ctx = |e| Error::Csv {
        context: "writing sweep".into(),
        source: e,
    };
    wtr.write_record([
        axis.name(),
        "kappa_pt",
        "kappa_pi",
        "kappa_no",
        "kappa_pt_std",
        "kappa_pi_std",
        "kappa_no_std",
        "pdelta_pt",
        "pdelta_pt_std",
        "pdelta_pi",
        "pdelta_pi_std",
        "capacity_pt",
        "capacity_pi",
        "capacity_so",
        "sc_pt",
        "sc_pi",
        "sc_so",
        "sc_no",
    ])
    .map_err(ctx)?;
    for r in rows {
        let values = [
            r.axis,
            r.kappa_pt,
            r.kappa_pi,
            r.kappa_no,
            r.kappa_pt_std,
            r.kappa_pi_std,
            r.kappa_no_std,
            r.pdelta_pt,
            r.pdelta_pt_std,
            r.pdelta_pi,
            r.pdelta_pi_std,
            r.capacity_pt,
            r.capacity_pi,
            r.capacity_so,
            r.sc_pt,
            r.sc_pi,
            r.sc_so,
            r.sc_no,
        ];
        wtr.write_record(values.iter().map(|v| format!("{v:?}"))).map_err(ctx)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        context: "writing sweep".into(),
        source: e,
    })
}

/// Mean lambda over instances, `[p_delta][theta_bar]` on the configured grids.
pub fn run_lambda(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let instances = cfg.instances(None)?;
    let maps = instances
        .par_iter()
        .map(|inst| {
            let market = cfg.market(inst, &Overrides::default())?;
            crate::stage1::evaluate_lambda(&market, &cfg.sweep.p_delta, &cfg.sweep.theta_bar)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = maps.len() as f64;
    Ok((0..cfg.sweep.p_delta.len())
        .map(|i| {
            (0..cfg.sweep.theta_bar.len())
                .map(|j| maps.iter().map(|m| m[i][j]).sum::<f64>() / n)
                .collect()
        })
        .collect())
}

pub fn write_lambda_csv<W: Write>(writer: W, p_delta: &[f64], theta_bar: &[f64], map: &[Vec<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let ctx = |e| Error::Csv {
        context: "writing lambda map".into(),
        source: e,
    };
    wtr.write_record(["p_delta", "theta_bar", "lambda"]).map_err(ctx)?;
    for (i, p) in p_delta.iter().enumerate() {
        for (j, t) in theta_bar.iter().enumerate() {
            wtr.write_record([format!("{p:?}"), format!("{t:?}"), format!("{:?}", map[i][j])])
                .map_err(ctx)?;
        }
    }
    wtr.flush().map_err(|e| Error::Io {
        context: "writing lambda map".into(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub label: String,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Runs the invariant checks on one instance at the configured parameters.
/// With `grid_points`, each scheme's scan is also compared against a uniform
/// price-difference grid reaching past the largest threshold.
pub fn verify_instance(cfg: &ExperimentConfig, inst: &Instance, grid_points: Option<usize>) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        label: inst.label.clone(),
        checks: Vec::new(),
    };
    let o = Overrides::default();
    match evaluate_instance(cfg, inst, &o) {
        Ok(_) => report.push("ordering_and_structure", true, String::new()),
        Err(Error::InvariantViolation(m)) => report.push("ordering_and_structure", false, m),
        Err(e) => return Err(e),
    }
    let market = cfg.market(inst, &o)?;
    let lossless = is_lossless(market.type_specs());
    let p_ref = cfg.pricing.reference_p_offpeak;
    for scheme in [Scheme::Pt, Scheme::Pi] {
        let r = price(cfg, &market, scheme)?;
        let set = match scheme {
            Scheme::Pt => market.types(),
            Scheme::Pi => market.users(),
        };
        let plain = lossless && market.type_specs().iter().all(|s| s.elastic.is_none());
        if plain {
            let bound = set.n_entities() * set.n_outcomes() + 1;
            report.push(
                &format!("{scheme}_candidate_bound"),
                r.trace.len() <= bound,
                format!("{} candidates, bound {bound}", r.trace.len()),
            );
        }
        if lossless {
            let ext = optimize_prices_extended(&market, scheme, (p_ref, p_ref + 10.0), 3)?;
            report.push(&format!("{scheme}_extended_reduction"), ext == r, String::new());
            let shifted = crate::stage1::TouPrice::from_difference(r.best_price.p_delta(), p_ref + 37.0);
            let (a, _) = market.user_social_cost(r.best_price)?;
            let (b, _) = market.user_social_cost(shifted)?;
            report.push(&format!("{scheme}_price_level_neutral"), a == b, String::new());
        }
        if let Some(n) = grid_points {
            let best = r
                .trace
                .iter()
                .map(|t| t.social_cost)
                .fold(f64::INFINITY, f64::min);
            let top = market.threshold_union(scheme, r.best_price.p_offpeak)?;
            let hi = 1.5 * top.values().last().copied().unwrap_or(1.0).max(1e-9);
            let grid_min = crate::numeric::linspace(0.0, hi, n)
                .par_iter()
                .map(|p| {
                    market
                        .scheme_social_cost(scheme, crate::stage1::TouPrice::from_difference(*p, r.best_price.p_offpeak))
                        .map(|sc| sc.total)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            report.push(
                &format!("{scheme}_grid_oracle"),
                best <= grid_min + 1e-9,
                format!("scan {best}, grid {grid_min}"),
            );
        }
    }
    Ok(report)
}
