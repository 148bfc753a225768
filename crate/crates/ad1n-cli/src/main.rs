use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ad1n::clse::{estimate, Flavor};
use ad1n::mc_harness::{discrete_vs_continuous_gap, params_from_map, parse_kv, run_experiment, ConfigMap, ExperimentConfig, RunOptions};
use ad1n::model_core::{classify, stack_tau, tau_labels, validate, ModelParams};
use ad1n::moments::{asymptotic_covariance, stationary_x_table};
use ad1n::sde_sim::{replication_rng, simulate_path_with, Path as SamplePath};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

#[derive(Parser)]
#[command(name = "ad1n", version, about = "Simulation and conditional least squares for AD(1, n) diffusions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = automatic.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write it as CSV.
    Simulate {
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Estimate the drift from a path CSV, or from a fresh simulation.
    Estimate {
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, default_value = "exact")]
        flavor: Flavor,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Stationary moments in X coordinates and the sandwich covariance.
    Moments {
        #[arg(long, default_value_t = 2)]
        order: u32,
    },
    /// Validate the parameters and report the regime.
    Classify,
    /// Run a Monte Carlo experiment.
    Experiment,
    /// Compare discrete and exact-discretization estimators on shared paths.
    Gap,
}

#[derive(Debug)]
enum Failure {
    Checks,
    Error(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Error(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
    }
}

fn config_text(g: &Global) -> Result<String, Failure> {
    let path = g.config.as_ref().ok_or_else(|| Failure::Error("--config is required".into()))?;
    Ok(std::fs::read_to_string(path).map_err(|e| format!("{}: {}", path.display(), e))?)
}

fn config_map(g: &Global) -> Result<ConfigMap, Failure> {
    Ok(parse_kv(&config_text(g)?)?)
}

fn lookup_f64(map: &ConfigMap, key: &str, cli: Option<f64>) -> Result<f64, Failure> {
    if let Some(v) = cli {
        return Ok(v);
    }
    let raw = map
        .get(key)
        .ok_or_else(|| Failure::Error(format!("{} missing from the command line and the config", key)))?;
    let first = raw.split(',').next().unwrap_or("").trim();
    Ok(first.parse::<f64>().map_err(|_| format!("{}: not a number: {}", key, raw))?)
}

fn seed_of(g: &Global, map: &ConfigMap) -> Result<u64, Failure> {
    match (g.seed, map.get("seed")) {
        (Some(s), _) => Ok(s),
        (None, Some(s)) => Ok(s.parse::<u64>().map_err(|_| "seed must be a u64".to_string())?),
        (None, None) => Ok(0),
    }
}

fn emit(g: &Global, file: &str, content: &str) -> Result<(), Failure> {
    match &g.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), content)?;
        }
        None => print!("{}", content),
    }
    Ok(())
}

fn simulate_from(g: &Global, map: &ConfigMap, params: &ModelParams, horizon: Option<f64>, delta: Option<f64>) -> Result<SamplePath, Failure> {
    let t = lookup_f64(map, "horizons", horizon)?;
    let d = lookup_f64(map, "delta", delta)?;
    let seed = seed_of(g, map)?;
    let mut rng = replication_rng(seed, 0);
    Ok(simulate_path_with(params, t, d, seed, &mut rng)?)
}

fn path_csv(path: &SamplePath) -> String {
    let n = path.n();
    let mut s = String::from("t,y");
    for i in 1..=n {
        s.push_str(&format!(",x{}", i));
    }
    s.push('\n');
    for k in 0..path.len() {
        s.push_str(&format!("{:.16e}", path.times[k]));
        for c in 0..=n {
            s.push_str(&format!(",{:.16e}", path.states[(k, c)]));
        }
        s.push('\n');
    }
    s
}

fn read_path_csv(file: &Path, seed: u64, hash: String) -> Result<SamplePath, Failure> {
    let text = std::fs::read_to_string(file).map_err(|e| format!("{}: {}", file.display(), e))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut width = 0;
    for (no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("{}: line {} is not numeric", file.display(), no + 1))?;
        if width == 0 {
            width = cols.len();
        }
        if cols.len() != width || width < 3 {
            return Err(Failure::Error(format!("{}: line {} has {} columns", file.display(), no + 1, cols.len())));
        }
        times.push(cols[0]);
        values.extend_from_slice(&cols[1..]);
    }
    let states = DMatrix::from_row_slice(times.len(), width - 1, &values);
    Ok(SamplePath::from_states(times, states, seed, hash)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let opts = RunOptions { threads: g.threads };
    match cli.command {
        Command::Simulate { horizon, delta } => {
            let map = config_map(g)?;
            let params = params_from_map(&map)?;
            let path = simulate_from(g, &map, &params, horizon, delta)?;
            emit(g, "path.csv", &path_csv(&path))
        }
        Command::Estimate {
            path,
            flavor,
            horizon,
            delta,
        } => {
            let map = config_map(g)?;
            let params = params_from_map(&map)?;
            let sample = match path {
                Some(file) => read_path_csv(&file, seed_of(g, &map)?, params.digest())?,
                None => simulate_from(g, &map, &params, horizon, delta)?,
            };
            let est = estimate(&sample, flavor)?;
            let report = json!({
                "flavor": flavor.to_string(),
                "labels": tau_labels(params.n()),
                "tau_hat": est.tau_hat.as_slice(),
                "truth": stack_tau(&params.drift).as_slice(),
                "horizon": est.horizon,
                "delta": est.delta,
                "condition_numbers": [est.cond1, est.cond2],
            });
            emit(g, "estimate.json", &format!("{}\n", serde_json::to_string_pretty(&report)?))
        }
        Command::Moments { order } => {
            let map = config_map(g)?;
            let params = params_from_map(&map)?;
            let table = stationary_x_table(&params, order)?;
            let cov = asymptotic_covariance(&params)?;
            let moments: Vec<_> = table.values.iter().map(|(k, v)| json!({"index": k, "value": v})).collect();
            let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>();
            let report = json!({
                "moments": moments,
                "expected_g": rows(&cov.eg),
                "expected_h": rows(&cov.eh),
                "sandwich": rows(&cov.sandwich),
            });
            emit(g, "moments.json", &format!("{}\n", serde_json::to_string_pretty(&report)?))
        }
        Command::Classify => {
            let map = config_map(g)?;
            let params = params_from_map(&map)?;
            let report = validate(&params);
            let class = classify(&params).ok();
            let out = json!({
                "valid": report.is_ok(),
                "violations": report.violations,
                "regime": class.as_ref().map(|c| c.regime.to_string()),
                "eigenvalues": class.as_ref().map(|c| c.eig_theta.clone()),
            });
            emit(g, "classify.json", &format!("{}\n", serde_json::to_string_pretty(&out)?))?;
            if report.is_ok() {
                Ok(())
            } else {
                Err(Failure::Checks)
            }
        }
        Command::Experiment => {
            let mut config = ExperimentConfig::parse(&config_text(g)?)?;
            if let Some(s) = g.seed {
                config.seed = s;
            }
            let report = run_experiment(&config, &opts)?;
            match &g.out {
                Some(dir) => report.write_to(dir)?,
                None => println!("{}", report.summary_json()),
            }
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Checks)
            }
        }
        Command::Gap => {
            let mut config = ExperimentConfig::parse(&config_text(g)?)?;
            if let Some(s) = g.seed {
                config.seed = s;
            }
            let report = discrete_vs_continuous_gap(&config, &opts)?;
            match &g.out {
                Some(dir) => report.write_to(dir)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Checks)
            }
        }
    }
}
