//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail.
//!
//! `CLUSTORD_ACCEPTANCE_REPS` overrides the 200 Monte Carlo replications
//! for quick local runs; the verdicts are only meaningful at the default.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;

use clustord::cwgee::{cwgee_solve, multinomial_cov, CwgeeOptions, Weighting};
use clustord::data::{Cluster, ClusteredDataset, ParamVector};
use clustord::datagen::{bridge_density, gen_ordinal_outcome, sample_bridge_cluster, simulate_dataset, GenConfig};
use clustord::harness::{run_replication, run_scenario, Method, ScenarioConfig, ScenarioRun};
use clustord::impute::{FcsSpec, JmSpec};
use clustord::missingness::{Mechanism, MissingnessSet};
use clustord::pool::{rubin_pool, MetricsRow};
use clustord::rng::seeded;
use clustord::sampling::expit;

const SEED: u64 = 20240601;
const M: usize = 5;
const BURN_IN: usize = 300;
const BETWEEN: usize = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

/// Collects individual checks, remembering the failures.
#[derive(Default)]
struct Checks {
    notes: Vec<String>,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: String) {
        if ok {
            self.notes.push(what);
        } else {
            self.failed.push(what);
        }
    }

    fn verdict(self) -> Verdict {
        if self.failed.is_empty() {
            Verdict::new(true, self.notes.join("; "))
        } else {
            Verdict::new(false, format!("failed: {}", self.failed.join("; ")))
        }
    }
}

fn reps() -> usize {
    std::env::var("CLUSTORD_ACCEPTANCE_REPS").ok().and_then(|s| s.parse().ok()).unwrap_or(200)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn base_config(name: &str, methods: &[Method]) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        name: name.into(),
        n_replications: reps(),
        master_seed: SEED,
        methods: methods.to_vec(),
        ..ScenarioConfig::default()
    };
    cfg.analysis.jm = JmSpec { m_imputations: M, burn_in: BURN_IN, between: BETWEEN, ..JmSpec::default() };
    cfg.analysis.fcs = FcsSpec { m_imputations: M, burn_in: BURN_IN, between: BETWEEN, ..FcsSpec::default() };
    cfg
}

fn scenario(mechanism: Mechanism, methods: &[Method]) -> ScenarioConfig {
    let mut cfg = base_config(mechanism.as_str(), methods);
    cfg.missingness = MissingnessSet::reference(mechanism, 0.2);
    cfg
}

fn run(cfg: &ScenarioConfig) -> Result<(ScenarioRun, Duration), String> {
    let start = Instant::now();
    let run = run_scenario(cfg, jobs()).map_err(|e| format!("{}: {e}", cfg.name))?;
    Ok((run, start.elapsed()))
}

fn row<'a>(run: &'a ScenarioRun, parameter: &str, method: Method) -> Result<&'a MetricsRow, String> {
    run.table.row(parameter, method.as_str()).ok_or_else(|| format!("no {parameter} row for {method}"))
}

fn abs_bias(run: &ScenarioRun, parameter: &str, method: Method) -> Result<f64, String> {
    Ok(row(run, parameter, method)?.rel_bias_pct.abs())
}

/// Lazily runs and caches the shared Monte Carlo scenarios.
#[derive(Default)]
struct Scenarios {
    mar: Option<Result<(ScenarioRun, Duration), String>>,
    mnar: Option<Result<(ScenarioRun, Duration), String>>,
}

impl Scenarios {
    fn mar(&mut self) -> Result<&(ScenarioRun, Duration), String> {
        self.mar.get_or_insert_with(|| run(&scenario(Mechanism::Mar, &Method::ALL))).as_ref().map_err(Clone::clone)
    }

    fn mnar(&mut self) -> Result<&(ScenarioRun, Duration), String> {
        self.mnar.get_or_insert_with(|| run(&scenario(Mechanism::Mnar, &Method::ALL))).as_ref().map_err(Clone::clone)
    }
}

const MISSING_DATA_METHODS: [Method; 5] = [Method::Cca, Method::Fcs, Method::FcsCs, Method::Jm, Method::JmCs];

fn criterion_1() -> Result<Verdict, String> {
    let cfg = scenario(Mechanism::Mar, &[Method::Full]);
    let (run, elapsed) = run(&cfg)?;
    let truth = cfg.generator.true_params.to_vec();
    let mut checks = Checks::default();
    for (name, &theta) in cfg.parameter_names().iter().zip(&truth) {
        let r = row(&run, name, Method::Full)?;
        let mc_se = r.empirical_se / (r.n_reps_used as f64).sqrt();
        let z = (r.mean_est - theta) / mc_se;
        checks.check(z.abs() <= 3.0, format!("{name} mean {:.4} vs {theta} ({z:+.2} MC SE)", r.mean_est));
        checks.check((91.0..=99.0).contains(&r.cov_prob_pct), format!("{name} cov {:.1}%", r.cov_prob_pct));
        let ratio = r.mean_se / r.empirical_se;
        checks.check((ratio - 1.0).abs() <= 0.25, format!("{name} se/emp {ratio:.3}"));
    }
    checks.check(elapsed < Duration::from_secs(300), format!("{:.1}s", elapsed.as_secs_f64()));
    Ok(checks.verdict())
}

fn criterion_2() -> Result<Verdict, String> {
    let (run, _) = run(&scenario(Mechanism::Mcar, &Method::ALL))?;
    let mut checks = Checks::default();
    for method in Method::ALL {
        for p in ["eta1", "beta1"] {
            let b = abs_bias(&run, p, method)?;
            checks.check(b < 10.0, format!("{method} {p} {b:.2}%"));
        }
    }
    Ok(checks.verdict())
}

fn criterion_3(s: &mut Scenarios) -> Result<Verdict, String> {
    let (run, elapsed) = s.mar()?;
    let b = |m| row(run, "eta1", m).map(|r| r.rel_bias_pct);
    let (cca, fcs, fcs_cs, jm) = (b(Method::Cca)?, b(Method::Fcs)?, b(Method::FcsCs)?, b(Method::Jm)?);
    let mut checks = Checks::default();
    checks.check(fcs_cs.abs() <= fcs.abs() + 5.0, format!("|fcs_cs| {:.2} <= |fcs| {:.2} + 5", fcs_cs.abs(), fcs.abs()));
    checks.check(
        fcs.abs() < jm.abs() && jm.abs() < cca.abs(),
        format!("|fcs| {:.2} < |jm| {:.2} < |cca| {:.2}", fcs.abs(), jm.abs(), cca.abs()),
    );
    checks.check((35.0..=70.0).contains(&cca), format!("cca {cca:.2}% in [35, 70]"));
    checks.check((0.0..=20.0).contains(&fcs_cs), format!("fcs_cs {fcs_cs:.2}% in [0, 20]"));
    checks.check(*elapsed < Duration::from_secs(7200), format!("{:.0}s", elapsed.as_secs_f64()));
    Ok(checks.verdict())
}

fn criterion_4() -> Result<Verdict, String> {
    let mut cfg = scenario(Mechanism::Mar, &[Method::Fcs, Method::FcsCs, Method::Jm, Method::JmCs]);
    cfg.name = "ics".into();
    cfg.generator = GenConfig { tau: 0.6, nu: 0.4, ..cfg.generator };
    let (run, _) = run(&cfg)?;
    let truth = cfg.generator.true_params.cutpoints[0];
    let dist = |m| row(&run, "eta1", m).map(|r| (r.mean_est - truth).abs());
    let mut checks = Checks::default();
    let (fcs, fcs_cs) = (dist(Method::Fcs)?, dist(Method::FcsCs)?);
    checks.check(fcs - fcs_cs >= 0.01, format!("fcs off by {fcs:.4}, fcs_cs by {fcs_cs:.4}"));
    let (jm, jm_cs) = (dist(Method::Jm)?, dist(Method::JmCs)?);
    checks.check(jm_cs < jm, format!("jm off by {jm:.4}, jm_cs by {jm_cs:.4}"));
    Ok(checks.verdict())
}

fn criterion_5(s: &mut Scenarios) -> Result<Verdict, String> {
    let mar: Vec<f64> = {
        let (run, _) = s.mar()?;
        MISSING_DATA_METHODS.iter().map(|&m| abs_bias(run, "eta1", m)).collect::<Result<_, _>>()?
    };
    let (run, _) = s.mnar()?;
    let mut checks = Checks::default();
    for (&m, &before) in MISSING_DATA_METHODS.iter().zip(&mar) {
        let after = abs_bias(run, "eta1", m)?;
        checks.check(after > before, format!("{m} {after:.2} > {before:.2}"));
    }
    let cca = abs_bias(run, "eta1", Method::Cca)?;
    for m in [Method::Fcs, Method::FcsCs] {
        let b = abs_bias(run, "eta1", m)?;
        checks.check(b < cca, format!("{m} {b:.2} < cca {cca:.2}"));
    }
    Ok(checks.verdict())
}

fn criterion_6() -> Result<Verdict, String> {
    let mut checks = Checks::default();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut cfg = base_config("complete", &Method::ALL);
        cfg.n_replications = 1;
        cfg.master_seed = SEED + seed;
        cfg.missingness = MissingnessSet::none();
        let result = run_replication(&cfg.resolve().map_err(|e| e.to_string())?, 0);
        let full = result.get(Method::Full).ok_or("full fit failed")?;
        for m in MISSING_DATA_METHODS {
            let Some(est) = result.get(m) else {
                checks.check(false, format!("seed {seed}: {m} failed"));
                continue;
            };
            for (a, b) in est.estimates.iter().zip(&full.estimates) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    checks.check(worst <= 1e-10, format!("max |diff| {worst:.1e} over 10 seeds"));
    Ok(checks.verdict())
}

/// Proportional-odds log-likelihood gradient for single-member clusters,
/// with `logit P(y ≤ c) = η_c + β·(x, z)`.
fn po_gradient(rows: &[(f64, f64, usize)], theta: &[f64], n_cut: usize) -> (f64, Vec<f64>) {
    let f = |a: f64| {
        let p = expit(a);
        p * (1.0 - p)
    };
    let mut ll = 0.0;
    let mut g = vec![0.0; theta.len()];
    for &(x, z, y) in rows {
        let lin = theta[n_cut] * x + theta[n_cut + 1] * z;
        let upper = (y <= n_cut).then(|| theta[y - 1] + lin);
        let lower = (y > 1).then(|| theta[y - 2] + lin);
        let p = upper.map_or(1.0, expit) - lower.map_or(0.0, expit);
        ll += p.ln();
        let (fu, fl) = (upper.map_or(0.0, f), lower.map_or(0.0, f));
        if upper.is_some() {
            g[y - 1] += fu / p;
        }
        if lower.is_some() {
            g[y - 2] -= fl / p;
        }
        g[n_cut] += (fu - fl) * x / p;
        g[n_cut + 1] += (fu - fl) * z / p;
    }
    (ll, g)
}

/// Newton–Raphson on the likelihood with a finite-difference Hessian.
fn po_mle(d: &ClusteredDataset) -> Result<Vec<f64>, String> {
    let rows: Vec<(f64, f64, usize)> =
        d.clusters.iter().map(|c| (c.x, c.z, c.members[0].y().unwrap() as usize)).collect();
    let n_cut = d.n_categories_y() as usize - 1;
    let mut theta: Vec<f64> = (1..=n_cut).map(|c| c as f64 - 2.0).collect();
    theta.extend([0.0, 0.0]);
    let dim = theta.len();
    for _ in 0..100 {
        let (ll, g) = po_gradient(&rows, &theta, n_cut);
        if g.iter().all(|v| v.abs() < 1e-10) {
            return Ok(theta);
        }
        let h = 1e-5;
        let mut hess = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let (gu, gd) = (po_gradient(&rows, &up, n_cut).1, po_gradient(&rows, &dn, n_cut).1);
            for i in 0..dim {
                hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let step = hess.lu().solve(&nalgebra::DVector::from_vec(g)).ok_or("singular Hessian")?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let ordered = cand[..n_cut].windows(2).all(|w| w[0] < w[1]);
            if ordered && po_gradient(&rows, &cand, n_cut).0 >= ll - 1e-12 {
                theta = cand;
                break;
            }
            t /= 2.0;
            if t < 1e-8 {
                return Err("line search failed".into());
            }
        }
    }
    Err("oracle did not converge".into())
}

fn criterion_7() -> Result<Verdict, String> {
    let mut checks = Checks::default();
    let single = GenConfig { n_clusters: 400, max_size: 1, ..GenConfig::default() };
    let opts = CwgeeOptions { tol: 1e-12, max_iter: 200, ..CwgeeOptions::default() };
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let d = simulate_dataset(&single, 7000 + seed).map_err(|e| e.to_string())?;
        let fit = cwgee_solve(&d, None, &opts).map_err(|e| e.to_string())?;
        let oracle = po_mle(&d)?;
        for (a, b) in fit.params.to_vec().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    checks.check(worst <= 1e-4, format!("single-member max |cwgee - mle| {worst:.1e} on 50 datasets"));

    let mut worst = 0.0f64;
    for seed in 0..10 {
        let d = simulate_dataset(&GenConfig { n_clusters: 120, ..GenConfig::default() }, 8000 + seed)
            .map_err(|e| e.to_string())?;
        let equal: Vec<Cluster> = d
            .clusters
            .iter()
            .filter(|c| c.size >= 6)
            .map(|c| Cluster::new(c.id, c.x, c.z, c.members[..6].to_vec()))
            .collect();
        let d = ClusteredDataset::new(equal, d.n_categories);
        let weighted = cwgee_solve(&d, None, &opts).map_err(|e| e.to_string())?;
        let plain = cwgee_solve(&d, None, &CwgeeOptions { weighting: Weighting::Unweighted, ..opts })
            .map_err(|e| e.to_string())?;
        for (a, b) in weighted.params.to_vec().iter().zip(&plain.params.to_vec()) {
            worst = worst.max((a - b).abs());
        }
    }
    checks.check(worst <= 1e-8, format!("equal-size weighted vs unweighted {worst:.1e}"));
    Ok(checks.verdict())
}

/// Cumulative bridge distribution by trapezoid quadrature on a fine grid.
struct QuadratureCdf {
    lo: f64,
    h: f64,
    values: Vec<f64>,
}

impl QuadratureCdf {
    fn new(phi: f64) -> Self {
        let (lo, h) = (-40.0 / phi, 1e-3);
        let n = (2.0 * -lo / h) as usize;
        let mut values = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        let mut prev = bridge_density(lo, phi).unwrap();
        values.push(0.0);
        for k in 1..=n {
            let cur = bridge_density(lo + k as f64 * h, phi).unwrap();
            acc += 0.5 * h * (prev + cur);
            values.push(acc);
            prev = cur;
        }
        QuadratureCdf { lo, h, values }
    }

    fn total(&self) -> f64 {
        *self.values.last().unwrap()
    }

    fn cdf(&self, b: f64) -> f64 {
        let t = (b - self.lo) / self.h;
        if t <= 0.0 {
            return 0.0;
        }
        let k = t as usize;
        if k + 1 >= self.values.len() {
            return self.total();
        }
        let frac = t - k as f64;
        self.values[k] * (1.0 - frac) + self.values[k + 1] * frac
    }
}

fn criterion_8() -> Result<Verdict, String> {
    let mut checks = Checks::default();
    let mut rng = seeded(SEED);

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut mu: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
        mu.sort_by(f64::total_cmp);
        let probs = [mu[0], mu[1] - mu[0], mu[2] - mu[1], 1.0 - mu[2]];
        let mut expected = DMatrix::zeros(3, 3);
        for (y, p) in probs.iter().enumerate() {
            let ind: Vec<f64> = (0..3).map(|c| f64::from(u8::from(y <= c))).collect();
            for i in 0..3 {
                for j in 0..3 {
                    expected[(i, j)] += p * (ind[i] - mu[i]) * (ind[j] - mu[j]);
                }
            }
        }
        let got = multinomial_cov(&mu).map_err(|e| e.to_string())?;
        worst = worst.max((got - expected).abs().max());
    }
    checks.check(worst <= 1e-12, format!("multinomial_cov {worst:.1e}"));

    for phi in [0.3, 0.5, 0.8] {
        let total = QuadratureCdf::new(phi).total();
        checks.check((total - 1.0).abs() <= 1e-6, format!("density phi={phi} integrates to {total:.8}"));
    }

    let n = 1_000_000;
    for phi in [0.3, 0.5, 0.8] {
        let cdf = QuadratureCdf::new(phi);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            draws.push(sample_bridge_cluster(1, 0.3, phi, &mut rng).map_err(|e| e.to_string())?[0]);
        }
        draws.sort_by(f64::total_cmp);
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let f = cdf.cdf(b);
                (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic Kolmogorov critical value at α = 0.001.
        let crit = 1.9495 / (n as f64).sqrt();
        checks.check(ks < crit, format!("KS phi={phi} D={ks:.2e} < {crit:.2e}"));
    }

    let params = ParamVector::new(vec![-0.4, 0.8, 1.6], vec![-0.2, -0.5]).map_err(|e| e.to_string())?;
    for phi in [0.4, 0.6, 0.8] {
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let b = sample_bridge_cluster(1, 0.0, phi, &mut rng).map_err(|e| e.to_string())?[0];
            let y = gen_ordinal_outcome(b, 0.0, 0.0, &params.cutpoints, &params.slopes, phi, &mut rng)
                .map_err(|e| e.to_string())?;
            counts[y as usize - 1] += 1;
        }
        let mut cum = 0usize;
        let mut worst_z = 0.0f64;
        for (c, &eta) in params.cutpoints.iter().enumerate() {
            cum += counts[c];
            let p = expit(eta);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            worst_z = worst_z.max((cum as f64 / n as f64 - p).abs() / se);
        }
        checks.check(worst_z <= 3.0, format!("marginals phi={phi} within {worst_z:.2} SE"));
    }
    Ok(checks.verdict())
}

fn criterion_9() -> Result<Verdict, String> {
    let mut checks = Checks::default();
    let cov = DMatrix::from_element(1, 1, 0.25);
    let pooled = rubin_pool(&[(vec![1.0], cov.clone()), (vec![2.0], cov)]).map_err(|e| e.to_string())?;
    checks.check(
        pooled.estimates[0] == 1.5 && pooled.total[(0, 0)] == 1.0,
        format!("Q = {}, T = {}", pooled.estimates[0], pooled.total[(0, 0)]),
    );
    let fit = (vec![0.3, -1.2, 2.5], DMatrix::from_fn(3, 3, |i, j| if i == j { 0.1 } else { 0.02 }));
    let same = rubin_pool(&vec![fit; 5]).map_err(|e| e.to_string())?;
    let b = same.between.abs().max();
    checks.check(b == 0.0, format!("identical fits B = {b}"));
    Ok(checks.verdict())
}

fn criterion_10() -> Result<Verdict, String> {
    let mut cfg = scenario(Mechanism::Mar, &Method::ALL);
    cfg.n_replications = 8;
    let a = run_scenario(&cfg, 1).and_then(|r| r.table.to_csv_string()).map_err(|e| e.to_string())?;
    let b = run_scenario(&cfg, 8).and_then(|r| r.table.to_csv_string()).map_err(|e| e.to_string())?;
    Ok(Verdict::new(a == b, format!("{} bytes, identical: {}", a.len(), a == b)))
}

fn main() -> ExitCode {
    println!("acceptance: {} replications, M={M}, burn-in {BURN_IN}, {} jobs", reps(), jobs());
    let mut scenarios = Scenarios::default();
    let mut all_pass = true;
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Scenarios) -> Result<Verdict, String>>)> = vec![
        ("1 full-data unbiasedness", Box::new(|_| criterion_1())),
        ("2 MCAR neutrality", Box::new(|_| criterion_2())),
        ("3 MAR ordering", Box::new(criterion_3)),
        ("4 ICS benefit of +CS", Box::new(|_| criterion_4())),
        ("5 MNAR degradation", Box::new(criterion_5)),
        ("6 no-missingness identity", Box::new(|_| criterion_6())),
        ("7 CWGEE oracle equivalence", Box::new(|_| criterion_7())),
        ("8 numerical kernels", Box::new(|_| criterion_8())),
        ("9 pooling exactness", Box::new(|_| criterion_9())),
        ("10 determinism", Box::new(|_| criterion_10())),
    ];
    for (name, f) in criteria {
        let start = Instant::now();
        let verdict = f(&mut scenarios).unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        all_pass &= verdict.pass;
        println!(
            "{} criterion {name} ({:.0}s): {}",
            if verdict.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
