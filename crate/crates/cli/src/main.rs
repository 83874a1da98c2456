use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clustord::cwgee::{cwgee_solve, CwgeeOptions, Weighting};
use clustord::data::{read_csv_path, write_csv, write_csv_path, ClusteredDataset};
use clustord::datagen::simulate_dataset;
use clustord::error::{Error, ErrorKind, Result};
use clustord::harness::{analyze, run_grid, run_scenario, GridConfig, Method, ScenarioConfig, ANALYSIS_METHODS};
use clustord::impute::{fcs_impute_traced, jm_impute_traced, Imputer};
use clustord::missingness::apply_missingness;
use clustord::rng::{stream, Stage};

#[derive(Parser)]
#[command(name = "clustord", version, about = "Simulate, impute and analyse clustered ordinal data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario (or, for `grid`, grid) configuration in TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files; most commands fall back to stdout.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one complete dataset.
    Simulate,
    /// Delete values from a complete dataset.
    Ampute {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write M completed datasets.
    Impute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Also write the per-sweep parameter trace.
        #[arg(long)]
        trace: bool,
    },
    /// Fit the marginal model by CWGEE and print JSON.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "inverse-cluster-size", value_parser = parse_weighting)]
        weighting: Weighting,
    },
    /// Run one Monte Carlo scenario.
    Scenario {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a grid of scenarios and write long-format metrics.
    Grid {
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the analysis methods on one incomplete dataset.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Repeat for several methods; defaults to cca, fcs, fcs_cs, jm, jm_cs.
        #[arg(long, value_parser = parse_method)]
        method: Vec<Method>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weighting(s: &str) -> std::result::Result<Weighting, String> {
    match s {
        "inverse-cluster-size" => Ok(Weighting::InverseClusterSize),
        "inverse-original-size" => Ok(Weighting::InverseOriginalSize),
        "unweighted" => Ok(Weighting::Unweighted),
        other => Err(format!(
            "unknown weighting `{other}` (expected inverse-cluster-size|inverse-original-size|unweighted)"
        )),
    }
}

fn scenario_config(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn read_input(path: &Path, cfg: &ScenarioConfig) -> Result<ClusteredDataset> {
    read_csv_path(path, cfg.generator.n_categories())
}

/// Writes `d` to `out_dir/name`, or to stdout without an output directory.
fn emit_dataset(d: &ClusteredDataset, out_dir: Option<&Path>, name: &str) -> Result<()> {
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_csv_path(d, dir.join(name))
        }
        None => write_csv(d, io::stdout().lock()),
    }
}

fn emit_text(text: &str, out_dir: Option<&Path>, name: &str) -> Result<()> {
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn print_config(cfg: &ScenarioConfig) -> Result<()> {
    print!("{}", cfg.resolve()?.to_toml_string()?);
    Ok(())
}

fn grid(common: &Common, reps: Option<usize>, jobs: usize) -> Result<()> {
    let mut grid = match &common.config {
        Some(path) => GridConfig::load(path)?,
        None => GridConfig::default(),
    };
    if let Some(seed) = common.seed {
        grid.base.master_seed = seed;
    }
    if let Some(reps) = reps {
        grid.base.n_replications = reps;
    }
    grid.check()?;
    if common.print_config {
        print!("{}", grid.to_toml_string()?);
        return Ok(());
    }
    let run = run_grid(&grid, jobs)?;
    let mut buf = Vec::new();
    run.write_long_csv(&mut buf)?;
    emit_text(&String::from_utf8_lossy(&buf), common.out_dir.as_deref(), "grid.csv")?;
    for (cell, err) in run.failures() {
        eprintln!("cell {cell:?} failed: {err}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out_dir = common.out_dir.as_deref();
    if let Command::Grid { reps, jobs } = cli.command {
        return grid(common, reps, jobs);
    }

    let mut cfg = scenario_config(common)?;
    if let Command::Scenario { reps: Some(reps), .. } = &cli.command {
        cfg.n_replications = *reps;
    }
    if common.print_config {
        return print_config(&cfg);
    }
    let seed = cfg.master_seed;

    match cli.command {
        Command::Simulate => {
            let d = simulate_dataset(&cfg.generator, seed)?;
            emit_dataset(&d, out_dir, "simulated.csv")
        }
        Command::Ampute { input } => {
            let d = read_input(&input, &cfg)?;
            let cfg = cfg.resolve()?;
            let amputed = apply_missingness(&d, &cfg.missingness, &mut stream(seed, 0, Stage::Ampute, 0))?;
            emit_dataset(&amputed, out_dir, "amputed.csv")
        }
        Command::Impute { input, method, trace } => {
            let d = read_input(&input, &cfg)?;
            let imputer = cfg
                .analysis
                .imputer(method)
                .ok_or_else(|| Error::Config(format!("`{method}` is not an imputation method")))?;
            let mut rng = stream(seed, 0, Stage::Impute, 0);
            let (completed, chain) = match &imputer {
                Imputer::Fcs(spec) => fcs_impute_traced(&d, spec, &mut rng)?,
                Imputer::Jm(spec) => jm_impute_traced(&d, spec, &mut rng)?,
            };
            let dir = out_dir.unwrap_or(Path::new("."));
            fs::create_dir_all(dir)?;
            for (k, c) in completed.iter().enumerate() {
                write_csv_path(c, dir.join(format!("imputed_{}.csv", k + 1)))?;
            }
            if trace {
                chain.write_csv(fs::File::create(dir.join("trace.csv"))?)?;
            }
            eprintln!("wrote {} completed datasets to {}", completed.len(), dir.display());
            Ok(())
        }
        Command::Fit { input, weighting } => {
            let d = read_input(&input, &cfg)?;
            let fit = cwgee_solve(&d, None, &CwgeeOptions { weighting, ..CwgeeOptions::default() })?;
            if !fit.converged {
                return Err(Error::Failed(format!("no convergence after {} iterations", fit.n_iterations)));
            }
            let json = serde_json::to_string_pretty(&fit.report())?;
            emit_text(&(json + "\n"), out_dir, "fit.json")
        }
        Command::Scenario { jobs, .. } => {
            let run = run_scenario(&cfg, jobs)?;
            let csv = run.table.to_csv_string()?;
            if let Some(dir) = out_dir {
                emit_text(&csv, Some(dir), "metrics.csv")?;
                emit_text(&run.table.to_json()?, Some(dir), "metrics.json")?;
                emit_text(&run.config.to_toml_string()?, Some(dir), "config.toml")?;
            } else {
                print!("{csv}");
            }
            for a in &run.table.attrition {
                if a.failed > 0 {
                    eprintln!("{}: {} of {} replications failed", a.method, a.failed, a.attempted);
                }
            }
            Ok(())
        }
        Command::Grid { .. } => unreachable!("handled above"),
        Command::Analyze { input, method } => {
            let d = read_input(&input, &cfg)?;
            let methods = if method.is_empty() { ANALYSIS_METHODS.to_vec() } else { method };
            let report = analyze(&d, &methods, &cfg.analysis, seed)?;
            print!("{}", report.render());
            if let Some(dir) = out_dir {
                emit_text(&serde_json::to_string_pretty(&report)?, Some(dir), "analysis.json")?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
