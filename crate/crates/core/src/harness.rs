//! Monte Carlo scenarios: simulate, delete, impute, fit, pool, summarize.
//!
//! Every replication draws from streams derived from `(master_seed,
//! replication, stage, method)`, so results do not depend on how many
//! worker threads run the replications or which other methods are enabled.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cwgee::{cwgee_solve, parameter_names, CwgeeOptions, Weighting};
use crate::data::{complete_cases, ClusteredDataset};
use crate::datagen::{simulate_dataset_with, GenConfig};
use crate::error::{Error, Result};
use crate::impute::{FcsSpec, Imputer, JmSpec};
use crate::missingness::{
    apply_missingness, Mechanism, MissingnessSet, MissingnessSpec, REFERENCE_MAR_ALPHA, REFERENCE_MNAR_ALPHA,
};
use crate::pool::{compute_metrics, metrics_fields, rubin_pool, t_critical, Attrition, MetricsTable, RepEstimate, METRICS_COLUMNS};
use crate::rng::{stream, Stage};

/// Default number of clusters in the calibration pilot.
pub const PILOT_CLUSTERS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Cca,
    Fcs,
    FcsCs,
    Jm,
    JmCs,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Full, Method::Cca, Method::Fcs, Method::FcsCs, Method::Jm, Method::JmCs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Cca => "cca",
            Method::Fcs => "fcs",
            Method::FcsCs => "fcs_cs",
            Method::Jm => "jm",
            Method::JmCs => "jm_cs",
        }
    }

    /// Stream lane for this method's imputation draws.
    fn lane(self) -> u16 {
        self as u16
    }

    pub fn is_multiple_imputation(self) -> bool {
        matches!(self, Method::Fcs | Method::FcsCs | Method::Jm | Method::JmCs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected full|cca|fcs|fcs_cs|jm|jm_cs)")))
    }
}

/// How each non-full method analyses one incomplete dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub jm: JmSpec,
    pub fcs: FcsSpec,
    /// Cluster weights for complete-case fits.
    pub cca_weighting: Weighting,
    /// Use Barnard–Rubin degrees of freedom for MI coverage instead of 1.96.
    pub barnard_rubin: bool,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            jm: JmSpec::default(),
            fcs: FcsSpec::default(),
            cca_weighting: Weighting::InverseClusterSize,
            barnard_rubin: false,
        }
    }
}

impl AnalysisSettings {
    pub fn imputer(&self, method: Method) -> Option<Imputer> {
        match method {
            Method::Fcs => Some(Imputer::Fcs(FcsSpec { include_cluster_size: false, ..self.fcs.clone() })),
            Method::FcsCs => Some(Imputer::Fcs(FcsSpec { include_cluster_size: true, ..self.fcs.clone() })),
            Method::Jm => Some(Imputer::Jm(JmSpec { include_cluster_size: false, ..self.jm.clone() })),
            Method::JmCs => Some(Imputer::Jm(JmSpec { include_cluster_size: true, ..self.jm.clone() })),
            Method::Full | Method::Cca => None,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.jm.check()?;
        self.fcs.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_replications: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub pilot_clusters: usize,
    pub generator: GenConfig,
    pub missingness: MissingnessSet,
    pub analysis: AnalysisSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            n_replications: 200,
            master_seed: 20240601,
            methods: Method::ALL.to_vec(),
            pilot_clusters: PILOT_CLUSTERS,
            generator: GenConfig::default(),
            missingness: MissingnessSet::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn check(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.n_replications < 1 {
            return Err(Error::Config("n_replications must be at least 1".into()));
        }
        if self.pilot_clusters < 1 {
            return Err(Error::Config("pilot_clusters must be at least 1".into()));
        }
        self.generator.validate()?;
        self.missingness.check()?;
        self.analysis.check()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&read_config(path.as_ref())?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Copy with every missing-rate intercept calibrated on a pilot draw.
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        self.check()?;
        let mut out = self.clone();
        let needs_pilot = crate::data::Variable::ALL.iter().any(|&v| {
            let s = self.missingness.get(v);
            s.is_active() && s.alpha0.is_none()
        });
        if needs_pilot {
            let pilot_cfg = GenConfig { n_clusters: self.pilot_clusters, ..self.generator.clone() };
            let pilot = simulate_dataset_with(&pilot_cfg, &mut stream(self.master_seed, 0, Stage::Pilot, 0))?;
            out.missingness.calibrate(&pilot)?;
        }
        Ok(out)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        crate::data::param_names(self.generator.true_params.cutpoints.len(), self.generator.true_params.slopes.len())
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// One method's result in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: std::result::Result<RepEstimate, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub replication: usize,
    pub outcomes: Vec<MethodOutcome>,
}

impl ReplicationResult {
    pub fn get(&self, method: Method) -> Option<&RepEstimate> {
        self.outcomes.iter().find(|o| o.method == method).and_then(|o| o.result.as_ref().ok())
    }
}

fn fit_one(d: &ClusteredDataset, weighting: Weighting) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
    let fit = cwgee_solve(d, None, &CwgeeOptions { weighting, ..CwgeeOptions::default() })?;
    if !fit.converged {
        return Err(Error::Failed(format!("CWGEE did not converge (max |score| {:.3e})", fit.max_abs_score)));
    }
    Ok((fit.params.to_vec(), fit.robust_cov))
}

/// Runs `method` on an incomplete dataset (`Full` fits `d` as given).
pub fn analyze_dataset(
    d: &ClusteredDataset,
    method: Method,
    settings: &AnalysisSettings,
    rng: &mut crate::rng::SimRng,
) -> Result<RepEstimate> {
    match method {
        Method::Full => {
            let (est, cov) = fit_one(d, Weighting::InverseClusterSize)?;
            Ok(RepEstimate::new(est, cov.diagonal().iter().map(|v| v.sqrt()).collect()))
        }
        Method::Cca => {
            let cc = complete_cases(d)?;
            let (est, cov) = fit_one(&cc, settings.cca_weighting)?;
            Ok(RepEstimate::new(est, cov.diagonal().iter().map(|v| v.sqrt()).collect()))
        }
        _ => {
            let imputer = settings.imputer(method).expect("multiple-imputation method");
            let completed = imputer.impute(d, rng)?;
            let fits = completed.iter().map(|c| fit_one(c, Weighting::InverseClusterSize)).collect::<Result<Vec<_>>>()?;
            let pooled = rubin_pool(&fits)?;
            let mut rep = RepEstimate::new(pooled.estimates.clone(), pooled.se());
            if settings.barnard_rubin {
                let complete_df = d.n_clusters() as f64 - pooled.estimates.len() as f64;
                rep.critical = Some(t_critical(&pooled.barnard_rubin_df(complete_df.max(1.0))));
            }
            Ok(rep)
        }
    }
}

/// Simulates, deletes and analyses replication `replication` of a resolved
/// scenario. Failures are recorded per method.
pub fn run_replication(cfg: &ScenarioConfig, replication: usize) -> ReplicationResult {
    let rep = replication as u64;
    let data = simulate_dataset_with(&cfg.generator, &mut stream(cfg.master_seed, rep, Stage::Simulate, 0)).and_then(
        |full| {
            let observed = apply_missingness(&full, &cfg.missingness, &mut stream(cfg.master_seed, rep, Stage::Ampute, 0))?;
            Ok((full, observed))
        },
    );
    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let result = match &data {
                Err(e) => Err(e.to_string()),
                Ok((full, observed)) => {
                    let d = if method == Method::Full { full } else { observed };
                    let mut rng = stream(cfg.master_seed, rep, Stage::Impute, method.lane());
                    analyze_dataset(d, method, &cfg.analysis, &mut rng).map_err(|e| e.to_string())
                }
            };
            MethodOutcome { method, result }
        })
        .collect();
    ReplicationResult { replication, outcomes }
}

/// A finished scenario: the resolved config, every replication's results and
/// the metrics table.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub replications: Vec<ReplicationResult>,
    pub table: MetricsTable,
}

impl ScenarioRun {
    /// Per-replication estimates of `method`, successful replications only.
    pub fn estimates(&self, method: Method) -> Vec<&RepEstimate> {
        self.replications.iter().filter_map(|r| r.get(method)).collect()
    }
}

/// Runs all replications on `jobs` worker threads and aggregates them.
///
/// Fails when more than half the replications of any method fail.
pub fn run_scenario(cfg: &ScenarioConfig, jobs: usize) -> Result<ScenarioRun> {
    let cfg = cfg.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let replications: Vec<ReplicationResult> =
        pool.install(|| (0..cfg.n_replications).into_par_iter().map(|r| run_replication(&cfg, r)).collect());
    let table = aggregate(&cfg, &replications)?;
    Ok(ScenarioRun { config: cfg, replications, table })
}

/// Metrics per method from replication results, in `cfg.methods` order.
pub fn aggregate(cfg: &ScenarioConfig, replications: &[ReplicationResult]) -> Result<MetricsTable> {
    let names = cfg.parameter_names();
    let truth = cfg.generator.true_params.to_vec();
    let mut table = MetricsTable::default();
    for &method in &cfg.methods {
        let mut reps = Vec::new();
        let mut first_error = None;
        for r in replications {
            match r.outcomes.iter().find(|o| o.method == method).map(|o| &o.result) {
                Some(Ok(est)) => reps.push(est.clone()),
                Some(Err(e)) => {
                    first_error.get_or_insert_with(|| e.clone());
                }
                None => {}
            }
        }
        let attempted = replications.len();
        let failed = attempted - reps.len();
        if 2 * failed > attempted {
            return Err(Error::Failed(format!(
                "{method}: {failed} of {attempted} replications failed; first error: {}",
                first_error.unwrap_or_default()
            )));
        }
        table.rows.extend(compute_metrics(method.as_str(), &names, &reps, &truth)?);
        table.attrition.push(Attrition { method: method.as_str().into(), failed, attempted });
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Grids

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Settings shared by every cell; the grid axes override it.
    pub base: ScenarioConfig,
    pub n_clusters: Vec<usize>,
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
    pub missing_rate: Vec<f64>,
    pub mechanism: Vec<Mechanism>,
    /// Outcome deletion coefficients on `(x, z, y, m1, m2, m3)` in MAR cells.
    pub mar_alpha: [f64; 6],
    /// The same for MNAR cells.
    pub mnar_alpha: [f64; 6],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            base: ScenarioConfig::default(),
            n_clusters: vec![50, 250],
            tau: vec![0.0, 0.3, 0.6],
            nu: vec![0.0, 0.1, 0.4],
            missing_rate: vec![0.2, 0.5],
            mechanism: vec![Mechanism::Mar],
            mar_alpha: REFERENCE_MAR_ALPHA,
            mnar_alpha: REFERENCE_MNAR_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_clusters: usize,
    pub tau: f64,
    pub nu: f64,
    pub missing_rate: f64,
    pub mechanism: Mechanism,
}

impl GridConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: GridConfig = toml::from_str(s)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&read_config(path.as_ref())?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.n_clusters.is_empty()
            || self.tau.is_empty()
            || self.nu.is_empty()
            || self.missing_rate.is_empty()
            || self.mechanism.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        self.cells().iter().try_for_each(|c| self.scenario(c).check())
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &n_clusters in &self.n_clusters {
            for &tau in &self.tau {
                for &nu in &self.nu {
                    for &missing_rate in &self.missing_rate {
                        for &mechanism in &self.mechanism {
                            out.push(GridCell { n_clusters, tau, nu, missing_rate, mechanism });
                        }
                    }
                }
            }
        }
        out
    }

    /// The scenario for one cell; auxiliary deletion comes from `base`.
    pub fn scenario(&self, cell: &GridCell) -> ScenarioConfig {
        let mut cfg = self.base.clone();
        cfg.name = format!(
            "N{}_tau{}_nu{}_r{}_{}",
            cell.n_clusters, cell.tau, cell.nu, cell.missing_rate, cell.mechanism
        );
        cfg.generator.n_clusters = cell.n_clusters;
        cfg.generator.tau = cell.tau;
        cfg.generator.nu = cell.nu;
        cfg.missingness.y = match cell.mechanism {
            Mechanism::Mcar => MissingnessSpec::mcar(cell.missing_rate),
            Mechanism::Mar => MissingnessSpec::with_alpha(Mechanism::Mar, cell.missing_rate, self.mar_alpha),
            Mechanism::Mnar => MissingnessSpec::with_alpha(Mechanism::Mnar, cell.missing_rate, self.mnar_alpha),
        };
        for v in crate::data::Variable::ALL {
            cfg.missingness.get_mut(v).alpha0 = None;
        }
        cfg
    }
}

pub struct GridCellResult {
    pub cell: GridCell,
    pub result: Result<ScenarioRun>,
}

pub struct GridRun {
    pub cells: Vec<GridCellResult>,
}

pub const GRID_COLUMNS: [&str; 5] = ["n_clusters", "tau", "nu", "missing_rate", "mechanism"];

impl GridRun {
    /// Long-format CSV: scenario columns followed by the metrics columns.
    /// Failed cells contribute no rows.
    pub fn write_long_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(GRID_COLUMNS.iter().chain(METRICS_COLUMNS.iter()))?;
        for c in &self.cells {
            let Ok(run) = &c.result else { continue };
            let cell = [
                c.cell.n_clusters.to_string(),
                c.cell.tau.to_string(),
                c.cell.nu.to_string(),
                c.cell.missing_rate.to_string(),
                c.cell.mechanism.to_string(),
            ];
            for row in &run.table.rows {
                w.write_record(cell.iter().cloned().chain(metrics_fields(row)))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn failures(&self) -> Vec<(GridCell, String)> {
        self.cells.iter().filter_map(|c| c.result.as_ref().err().map(|e| (c.cell, e.to_string()))).collect()
    }
}

/// Runs every cell in turn; a failing cell is recorded and the grid continues.
pub fn run_grid(grid: &GridConfig, jobs: usize) -> Result<GridRun> {
    grid.check()?;
    let cells =
        grid.cells().into_iter().map(|cell| GridCellResult { cell, result: run_scenario(&grid.scenario(&cell), jobs) }).collect();
    Ok(GridRun { cells })
}

// ---------------------------------------------------------------------------
// Analysis of user data

/// Methods that can run on a single observed dataset.
pub const ANALYSIS_METHODS: [Method; 5] = [Method::Cca, Method::Fcs, Method::FcsCs, Method::Jm, Method::JmCs];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub method: Method,
    pub estimates: Vec<f64>,
    pub ses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub parameters: Vec<String>,
    pub rows: Vec<AnalysisRow>,
}

impl AnalysisReport {
    /// One line per parameter with `estimate (SE)` per method.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12}", "parameter");
        for r in &self.rows {
            out.push_str(&format!("{:>18}", r.method.as_str()));
        }
        out.push('\n');
        for (k, name) in self.parameters.iter().enumerate() {
            out.push_str(&format!("{name:<12}"));
            for r in &self.rows {
                out.push_str(&format!("{:>18}", format!("{:.3} ({:.3})", r.estimates[k], r.ses[k])));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs each method on `d` with its own seed-derived stream.
pub fn analyze(d: &ClusteredDataset, methods: &[Method], settings: &AnalysisSettings, seed: u64) -> Result<AnalysisReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if methods.contains(&Method::Full) {
        return Err(Error::Config("`full` needs the data before deletion; use cca or an imputation method".into()));
    }
    settings.check()?;
    d.validate().into_result()?;
    let rows = methods
        .iter()
        .map(|&method| {
            let mut rng = stream(seed, 0, Stage::Impute, method.lane());
            let est = analyze_dataset(d, method, settings, &mut rng)?;
            Ok(AnalysisRow { method, estimates: est.estimates, ses: est.ses })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisReport { parameters: parameter_names(d), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(methods: Vec<Method>) -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            n_replications: 3,
            methods,
            pilot_clusters: 300,
            generator: GenConfig { n_clusters: 30, ..GenConfig::default() },
            ..ScenarioConfig::default()
        };
        cfg.analysis.fcs = FcsSpec { m_imputations: 2, burn_in: 20, between: 5, ..FcsSpec::default() };
        cfg.analysis.jm = JmSpec { m_imputations: 2, burn_in: 20, between: 5, ..JmSpec::default() };
        cfg
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("mice".parse::<Method>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = quick(vec![Method::Full, Method::FcsCs]).resolve().unwrap();
        assert!(cfg.missingness.y.alpha0.is_some());
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_empty_methods_are_config_errors() {
        assert!(matches!(ScenarioConfig::from_toml_str("bogus = 1").unwrap_err(), Error::TomlDe(_)));
        let err = ScenarioConfig::from_toml_str("methods = []").unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Config);
    }

    #[test]
    fn full_method_is_the_plain_fit() {
        let cfg = quick(vec![Method::Full]).resolve().unwrap();
        let r = run_replication(&cfg, 1);
        let d = simulate_dataset_with(&cfg.generator, &mut stream(cfg.master_seed, 1, Stage::Simulate, 0)).unwrap();
        let fit = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        assert_eq!(r.get(Method::Full).unwrap().estimates, fit.params.to_vec());
    }

    #[test]
    fn replications_are_reproducible_and_tables_have_fixed_shape() {
        let cfg = quick(Method::ALL.to_vec());
        let a = run_scenario(&cfg, 1).unwrap();
        let b = run_scenario(&cfg, 3).unwrap();
        assert_eq!(a.replications, b.replications);
        assert_eq!(a.table.to_csv_string().unwrap(), b.table.to_csv_string().unwrap());
        assert_eq!(a.table.rows.len(), 6 * 5);
    }

    #[test]
    fn grid_rows_are_cells_by_methods_by_parameters() {
        let grid = GridConfig {
            base: quick(vec![Method::Full, Method::Cca]),
            n_clusters: vec![30],
            tau: vec![0.3],
            nu: vec![0.0, 0.1],
            missing_rate: vec![0.2],
            mechanism: vec![Mechanism::Mar],
            ..GridConfig::default()
        };
        let run = run_grid(&grid, 2).unwrap();
        let mut buf = Vec::new();
        run.write_long_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 5);
        assert!(text.starts_with("n_clusters,tau,nu,missing_rate,mechanism,parameter,method"));
    }

    #[test]
    fn analyze_rejects_full() {
        let d = simulate_dataset_with(&GenConfig::default(), &mut crate::rng::seeded(1)).unwrap();
        assert!(analyze(&d, &[Method::Full], &AnalysisSettings::default(), 1).is_err());
        let report = analyze(&d, &[Method::Cca, Method::Fcs], &AnalysisSettings::default(), 1).unwrap();
        // no missing cells: every method reduces to the same fit
        for k in 0..5 {
            assert!((report.rows[0].estimates[k] - report.rows[1].estimates[k]).abs() < 1e-10);
        }
        assert!(report.render().lines().count() == 6);
    }
}
