//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the lines print under a plain `cargo test`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tou_core::benchmark::{
    brute_force_so_refined, compute_ratios, peak_supports, so_zero_cost, solve_so, validate_structure_pricing,
    validate_structure_so, SolverSettings,
};
use tou_core::cost_model::{daily_cost_factor, AnnuityParams, SupplyCostParams};
use tou_core::demand::{generate_synthetic, Grouping, PeriodStructure, ScenarioSet};
use tou_core::experiment::{
    evaluate_instance, run_lambda, run_sweep, DataSource, ExperimentConfig, ExtendedConfig, GroupingMode,
    Overrides, SweepAxis, SweepRow,
};
use tou_core::stage1::{optimize_price_difference, optimize_prices_extended, Market, Scheme, TouPrice};
use tou_core::stage2::{optimal_capacity_discrete, threshold_set, PeakDistribution, StorageSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 annuity factor", c1, None),
        ("2 stage-two oracle", c2, Some(Duration::from_secs(10))),
        ("3 threshold scan optimality", c3, Some(Duration::from_secs(30))),
        ("4 cost ordering", c4, Some(Duration::from_secs(60))),
        ("5 planner oracle", c5, Some(Duration::from_secs(60))),
        ("6 tightness", c6, None),
        ("7 no-investment regime", c7, None),
        ("8 structure validators", c8, None),
        ("9 qualitative shapes", c9, None),
        ("10 extended reduction", c10, None),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let mut result = f();
        let took = start.elapsed();
        if let (Ok(_), Some(b)) = (&result, budget) {
            if took > b {
                result = Err(format!("took {took:.1?}, budget {b:?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({took:.2?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({took:.2?}) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn c1() -> Outcome {
    let rf = daily_cost_factor(&AnnuityParams::default());
    ensure!((rf - 3.55e-4).abs() <= 1e-6, "r_f = {rf}");
    // battery price over usable energy, $/kWh/day
    let theta = rf * 6500.0 / 13.5;
    ensure!((theta - 0.171).abs() <= 0.001, "theta = {theta}");
    Ok(format!("r_f = {rf:.6e}, theta = {theta:.4}"))
}

fn random_distribution(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(1..=6);
    let values: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 2.0 } else { rng.gen_range(0.0..10.0) })
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    (values, raw.iter().map(|p| p / total).collect())
}

fn newsvendor(values: &[f64], probs: &[f64], theta: f64, p: f64, c: f64) -> f64 {
    theta * c - p * values.iter().zip(probs).map(|(d, q)| q * c.min(*d)).sum::<f64>()
}

fn c2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (values, probs) = random_distribution(&mut rng);
        let dist = PeakDistribution::new(&values, &probs).map_err(|e| e.to_string())?;
        let theta = rng.gen_range(0.01..5.0);
        let p = rng.gen_range(0.0..30.0);
        let c = optimal_capacity_discrete(&dist, theta, p);
        let closed = newsvendor(&values, &probs, theta, p, c);
        let oracle = std::iter::once(0.0)
            .chain(values.iter().copied())
            .map(|c| newsvendor(&values, &probs, theta, p, c))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((closed - oracle).abs());
        ensure!((closed - oracle).abs() <= 1e-9, "instance {i}: closed form {closed}, oracle {oracle}");

        // capacity is constant strictly between consecutive thresholds
        let th = threshold_set(&dist, theta);
        let mut edges = vec![0.0];
        edges.extend(th.values().iter().copied().filter(|t| *t > 0.0));
        edges.push(edges.last().unwrap() * 2.0 + 1.0);
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let first = optimal_capacity_discrete(&dist, theta, lo + (hi - lo) / 1001.0);
            for k in 2..=1000 {
                let q = lo + (hi - lo) * k as f64 / 1001.0;
                let cap = optimal_capacity_discrete(&dist, theta, q);
                ensure!(cap == first, "instance {i}: capacity changes inside ({lo}, {hi}) at {q}");
            }
        }
    }
    Ok(format!("1000 instances, max gap {worst:.1e}"))
}

fn random_market(rng: &mut ChaCha8Rng, max_types: usize, max_outcomes: usize) -> Market {
    let k = rng.gen_range(1..=max_types);
    let per_type = rng.gen_range(1..=2);
    let n_out = rng.gen_range(1..=max_outcomes);
    let n = k * per_type;
    let demands = (0..n_out)
        .map(|_| {
            let peak = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let off = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
            (peak, off)
        })
        .collect();
    let users = ScenarioSet::equiprobable((0..n).map(|i| format!("u{i}")).collect(), demands).unwrap();
    let specs = (0..k).map(|_| StorageSpec::lossless(rng.gen_range(0.1..20.0))).collect();
    let supply = SupplyCostParams {
        alpha: rng.gen_range(0.5..5.0),
        beta: rng.gen_range(0.0..2.0),
        gamma: rng.gen_range(0.0..1.0),
    };
    Market::new(users, Grouping::blocks(k, per_type), specs, PeriodStructure::evening_peak(), supply).unwrap()
}

fn c3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..200 {
        let m = random_market(&mut rng, 3, 4);
        for scheme in [Scheme::Pt, Scheme::Pi] {
            let r = optimize_price_difference(&m, scheme, 0.0).map_err(|e| e.to_string())?;
            let set = match scheme {
                Scheme::Pt => m.types(),
                Scheme::Pi => m.users(),
            };
            let bound = set.n_entities() * set.n_outcomes() + 1;
            ensure!(r.trace.len() <= bound, "instance {i} {scheme}: {} candidates > {bound}", r.trace.len());
            let best = r.trace.iter().map(|t| t.social_cost).fold(f64::INFINITY, f64::min);
            let top = m.threshold_union(scheme, 0.0).map_err(|e| e.to_string())?;
            let hi = 1.5 * top.values().last().copied().unwrap_or(1.0).max(1.0);
            let mut grid = f64::INFINITY;
            for k in 0..10_000 {
                let p = hi * k as f64 / 9999.0;
                let sc = m
                    .scheme_social_cost(scheme, TouPrice::from_difference(p, 0.0))
                    .map_err(|e| e.to_string())?;
                grid = grid.min(sc.total);
            }
            worst = worst.max(best - grid);
            ensure!(best <= grid + 1e-9, "instance {i} {scheme}: scan {best} > grid {grid}");
        }
    }
    Ok(format!("200 instances x 2 schemes, max(scan - grid) {worst:.1e}"))
}

fn c4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let settings = SolverSettings::default();
    for i in 0..200 {
        let m = random_market(&mut rng, 3, 4);
        let pt = optimize_price_difference(&m, Scheme::Pt, 0.0).map_err(|e| e.to_string())?;
        let pi = optimize_price_difference(&m, Scheme::Pi, 0.0).map_err(|e| e.to_string())?;
        let so = solve_so(m.users(), &m.user_thetas(), m.periods(), m.supply(), &settings)
            .map_err(|e| e.to_string())?;
        let (a, b, c) = (pt.social_cost.total, pi.social_cost.total, so.social_cost.total);
        ensure!(a >= b - 1e-9 && b >= c - 1e-9, "instance {i}: PT {a}, PI {b}, SO {c}");
        compute_ratios(a, b, c, m.no_storage_cost()).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok("200 instances".into())
}

fn c5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = SolverSettings::default();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.gen_range(1..=2);
        let n_out = rng.gen_range(1..=3);
        let demands = (0..n_out)
            .map(|_| {
                let peak = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
                let off = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
                (peak, off)
            })
            .collect();
        let users = ScenarioSet::equiprobable((0..n).map(|i| format!("u{i}")).collect(), demands).unwrap();
        let thetas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..10.0)).collect();
        let supply = SupplyCostParams {
            alpha: rng.gen_range(0.5..5.0),
            beta: rng.gen_range(0.0..2.0),
            gamma: rng.gen_range(0.0..1.0),
        };
        let periods = PeriodStructure::evening_peak();
        let so = solve_so(&users, &thetas, &periods, &supply, &settings).map_err(|e| e.to_string())?;
        let bf = brute_force_so_refined(&users, &thetas, &periods, &supply, 0.01, 6).map_err(|e| e.to_string())?;
        let (a, b) = (so.social_cost.total, bf.social_cost.total);
        let rel = (a - b).abs() / b.abs().max(1e-12);
        worst = worst.max(rel);
        ensure!(rel <= 1e-6, "instance {i}: solver {a}, brute force {b}");

        let zero = solve_so(&users, &vec![0.0; n], &periods, &supply, &settings).map_err(|e| e.to_string())?;
        let (_, sc0) = so_zero_cost(&users, &periods, &supply);
        let z = zero.social_cost.total;
        ensure!((sc0 - z).abs() <= 1e-6 * z.abs().max(1.0), "instance {i}: zero-cost {sc0} vs solver {z}");
    }
    Ok(format!("100 instances, max relative gap {worst:.1e}"))
}

fn tightness_kappa(peak_hours: usize) -> Result<f64, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.source = DataSource::Tightness;
    cfg.tightness.k = 2;
    cfg.periods.peak_hours = (0..peak_hours).collect();
    cfg.validate().map_err(|e| e.to_string())?;
    let inst = cfg.instances(None).map_err(|e| e.to_string())?.remove(0);
    let out = evaluate_instance(&cfg, &inst, &Overrides::default()).map_err(|e| e.to_string())?;
    Ok(out.ratios.ok_or("no ratios")?.kappa_pt)
}

fn c6() -> Outcome {
    let even = tightness_kappa(12)?;
    ensure!((even - 2.0).abs() <= 0.04, "equal periods: kappa_pt = {even}");
    let short = tightness_kappa(6)?;
    ensure!((short - 4.0 / 3.0).abs() <= 0.03, "6/18 periods: kappa_pt = {short}");
    Ok(format!("kappa_pt = {even:.4} (12/12), {short:.4} (6/18)"))
}

fn c7() -> Outcome {
    let cfg = ExperimentConfig::default();
    let rows = run_sweep(&cfg, SweepAxis::ThetaBar).map_err(|e| e.to_string())?;
    let flat = rows.iter().find(|r| {
        r.kappa_pt == 1.0
            && r.kappa_pi == 1.0
            && r.capacity_pt == 0.0
            && r.capacity_pi == 0.0
            && r.capacity_so == 0.0
    });
    match flat {
        Some(r) => {
            let tail_flat = rows.iter().filter(|x| x.axis >= r.axis).all(|x| x.kappa_pt == 1.0 && x.kappa_pi == 1.0);
            ensure!(tail_flat, "kappa leaves 1 again above theta_bar = {}", r.axis);
            Ok(format!("kappa = 1 exactly from theta_bar = {}", r.axis))
        }
        None => Err("no theta_bar reaches zero capacity under every scheme".into()),
    }
}

fn c8() -> Outcome {
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.grouping.mode = GroupingMode::Random;
        cfg.synthetic.n_users = 8;
        cfg.synthetic.n_outcomes = 5;
        let theta_bar = [2.0, 10.0, 40.0][seed as usize % 3];
        for inst in cfg.instances(None).map_err(|e| e.to_string())? {
            let m = cfg
                .market(&inst, &Overrides { theta_bar: Some(theta_bar), ..Default::default() })
                .map_err(|e| e.to_string())?;
            let thetas = m.user_thetas();
            let supports = peak_supports(m.users());
            let so = solve_so(m.users(), &thetas, m.periods(), m.supply(), &cfg.solver).map_err(|e| e.to_string())?;
            let rep = validate_structure_so(&so, &thetas, &supports, 1e-7);
            ensure!(rep.is_valid(), "seed {seed} planner: {:?}", rep.violations);
            for scheme in [Scheme::Pt, Scheme::Pi] {
                let r = optimize_price_difference(&m, scheme, 0.0).map_err(|e| e.to_string())?;
                let rep = validate_structure_pricing(&r.responses, &thetas, &supports, 1e-7);
                ensure!(rep.is_valid(), "seed {seed} {scheme}: {:?}", rep.violations);
            }
            checked += 1;
        }
    }

    // two users, the cheaper one idle while the costlier one invests
    let users = ScenarioSet::equiprobable(
        vec!["a".into(), "b".into()],
        vec![(vec![2.0, 3.0], vec![0.0, 0.0]), (vec![4.0, 5.0], vec![0.0, 0.0])],
    )
    .map_err(|e| e.to_string())?;
    let thetas = [1.0, 2.0];
    let periods = PeriodStructure::evening_peak();
    let supply = SupplyCostParams { alpha: 100.0, beta: 0.0, gamma: 0.0 };
    let mut plan = solve_so(&users, &thetas, &periods, &supply, &SolverSettings::default()).map_err(|e| e.to_string())?;
    plan.capacities = vec![0.0, 4.0];
    let supports = peak_supports(&users);
    ensure!(!validate_structure_so(&plan, &thetas, &supports, 1e-7).is_valid(), "swapped plan not flagged");
    plan.capacities = vec![9.0, 0.0];
    ensure!(!validate_structure_so(&plan, &thetas, &supports, 1e-7).is_valid(), "oversized plan not flagged");
    Ok(format!("{checked} instances over 100 seeds, corrupted plans flagged"))
}

fn column(rows: &[SweepRow], f: fn(&SweepRow) -> f64) -> Vec<f64> {
    rows.iter().map(f).collect()
}

/// Strictly above both ends at some interior point.
fn rises_then_falls(v: &[f64]) -> bool {
    let n = v.len();
    n >= 3 && v[1..n - 1].iter().any(|x| *x > v[0] && *x > v[n - 1])
}

fn falls_then_rises(v: &[f64]) -> bool {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    rises_then_falls(&neg)
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn c9() -> Outcome {
    let base = ExperimentConfig::default();

    // (a) optimal price difference against mean storage cost
    let rows = run_sweep(&base, SweepAxis::ThetaBar).map_err(|e| e.to_string())?;
    let pd = column(&rows, |r| r.pdelta_pt);
    ensure!(rises_then_falls(&pd) && pd[1] > pd[0], "(a) p_delta vs theta_bar {pd:?}");

    // (b) three lambda regions
    let map = run_lambda(&base).map_err(|e| e.to_string())?;
    let (p, t) = (&base.sweep.p_delta, &base.sweep.theta_bar);
    ensure!(map[0].iter().all(|l| *l == 1.0), "(b) lambda at zero price difference {:?}", map[0]);
    let below = map.iter().flatten().any(|l| *l < 1.0);
    let above = (p.len() / 2..p.len()).any(|i| (t.len() / 2..t.len()).any(|j| map[i][j] > 1.0));
    ensure!(below && above, "(b) lambda map lacks a region: below {below}, above {above}");

    // (c) kappa against demand variance
    let rows = run_sweep(&base, SweepAxis::DeltaD).map_err(|e| e.to_string())?;
    let k = column(&rows, |r| r.kappa_pt);
    ensure!(falls_then_rises(&k), "(c) kappa_pt vs delta_d {k:?}");

    // (d) elastic demand crowds out storage
    let mut ind = base.clone();
    ind.grouping.mode = GroupingMode::Individual;
    let rows = run_sweep(&ind, SweepAxis::ElasticFraction).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("p_delta", column(&rows, |r| r.pdelta_pi)),
        ("capacity", column(&rows, |r| r.capacity_pi)),
        ("social cost", column(&rows, |r| r.sc_pi)),
    ] {
        ensure!(non_increasing(&v) && v[v.len() - 1] < v[0], "(d) {name} vs elastic fraction {v:?}");
    }

    // (e) round-trip efficiency
    let mut eff = ind.clone();
    eff.storage.theta_bar = 30.0;
    eff.extended = Some(ExtendedConfig { p_o_lo: 0.0, p_o_hi: 100.0, p_o_steps: 11 });
    eff.sweep.eta = (0..=20).map(|i| 0.6 + 0.02 * i as f64).collect();
    let rows = run_sweep(&eff, SweepAxis::Eta).map_err(|e| e.to_string())?;
    let cap = column(&rows, |r| r.capacity_pi);
    ensure!(cap[0] == 0.0 && *cap.last().unwrap() > 0.0, "(e) capacity vs eta {cap:?}");
    let invest: Vec<f64> = rows.iter().filter(|r| r.capacity_pi > 0.0).map(|r| r.pdelta_pi).collect();
    ensure!(rises_then_falls(&invest), "(e) p_delta over the investing range {invest:?}");

    Ok("(a)-(e) hold".into())
}

fn c10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..50 {
        let m = if i % 2 == 0 {
            random_market(&mut rng, 3, 4)
        } else {
            let users = generate_synthetic(1, 8, 5, 0.01, i).map_err(|e| e.to_string())?;
            let specs = (0..4).map(|k| StorageSpec::lossless(5.0 + 5.0 * k as f64)).collect();
            let supply = SupplyCostParams { alpha: 1000.0, beta: 0.0, gamma: 0.0 };
            Market::new(users, Grouping::blocks(4, 2), specs, PeriodStructure::evening_peak(), supply)
                .map_err(|e| e.to_string())?
        };
        let p_o = rng.gen_range(0.0..20.0);
        for scheme in [Scheme::Pt, Scheme::Pi] {
            let plain = optimize_price_difference(&m, scheme, p_o).map_err(|e| e.to_string())?;
            let ext = optimize_prices_extended(&m, scheme, (p_o, p_o + 50.0), 6).map_err(|e| e.to_string())?;
            ensure!(plain == ext, "instance {i} {scheme}: extended result differs");
        }
    }
    Ok("50 instances x 2 schemes bit-identical".into())
}
