//! Seeded Monte Carlo experiments.
//!
//! Replication `r` at horizon index `h` draws from ChaCha20 stream
//! `(h << 32) | r` of the master seed, so results do not depend on the
//! thread count or on scheduling. Rows are merged in replication order.
//!
//! # Config format
//!
//! Plain `key = value` lines, `#` starts a comment. Arrays are comma lists
//! and matrices are semicolon-separated rows:
//!
//! ```text
//! a = 2
//! b = 1
//! m = 1
//! kappa = 0.5
//! theta = 2
//! rho = 1, 0; 0.2, 0.9
//! y0 = 2
//! x0 = 0
//! regime = subcritical
//! horizons = 500
//! delta = 0.02
//! replications = 500
//! seed = 7
//! flavor = exact
//! ```
//!
//! Other keys: `burn_in` (time simulated before recording), `gamma` (use
//! `Δ = T^{-γ}` instead of `delta`), `fine_delta` and `limit_draws` (critical
//! runs).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asymptotics::{
    self, check_supercritical_hypothesis, critical_limit_functional, extract_supercritical_limits, normalizer, AsymptoticsError,
};
use crate::clse::{estimate, Flavor};
use crate::model_core::{classify, stack_tau, tau_labels, Drift, InitialLaw, ModelError, ModelParams, Regime, TauVector};
use crate::moments::{asymptotic_covariance, MomentError};
use crate::sde_sim::{replication_rng, simulate_critical_limit, simulate_path_with, SimError};
use crate::stats;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("declared regime {declared} but the parameters are {actual}")]
    RegimeMismatch { declared: Regime, actual: Regime },
    #[error("unsupported experiment: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot build thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sampling step for a horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRule {
    Fixed(f64),
    /// `Δ(T) = T^{-γ}`.
    Power(f64),
}

impl DeltaRule {
    pub fn delta(&self, horizon: f64) -> f64 {
        match *self {
            DeltaRule::Fixed(d) => d,
            DeltaRule::Power(g) => horizon.powf(-g),
        }
    }
}

/// Parsed `key = value` pairs.
pub type ConfigMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<ConfigMap, HarnessError> {
    let mut map = ConfigMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", no + 1)))?;
        let key = k.trim().to_ascii_lowercase();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(HarnessError::Config(format!("line {}: duplicate key {}", no + 1, key)));
        }
    }
    Ok(map)
}

fn parse_f64(key: &str, v: &str) -> Result<f64, HarnessError> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| HarnessError::Config(format!("{}: not a number: {}", key, v)))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, HarnessError> {
    v.split(',').map(|s| parse_f64(key, s)).collect()
}

fn parse_matrix(key: &str, v: &str) -> Result<DMatrix<f64>, HarnessError> {
    let rows: Vec<Vec<f64>> = v.split(';').map(|r| parse_list(key, r)).collect::<Result<_, _>>()?;
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::Config(format!("{}: ragged matrix", key)));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

fn required<'a>(map: &'a ConfigMap, key: &str) -> Result<&'a str, HarnessError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| HarnessError::Config(format!("missing key {}", key)))
}

/// Model parameters and initial law from a config map.
pub fn params_from_map(map: &ConfigMap) -> Result<ModelParams, HarnessError> {
    let a = parse_f64("a", required(map, "a")?)?;
    let b = parse_f64("b", required(map, "b")?)?;
    let m = DVector::from_vec(parse_list("m", required(map, "m")?)?);
    let kappa = DVector::from_vec(parse_list("kappa", required(map, "kappa")?)?);
    let theta = parse_matrix("theta", required(map, "theta")?)?;
    let rho = parse_matrix("rho", required(map, "rho")?)?;
    let drift = Drift::new(a, b, m, kappa, theta)?;
    let n = drift.n();
    let y0 = map.get("y0").map(|v| parse_f64("y0", v)).transpose()?.unwrap_or(1.0);
    let x0 = match map.get("x0") {
        Some(v) => DVector::from_vec(parse_list("x0", v)?),
        None => DVector::zeros(n),
    };
    if x0.len() != n {
        return Err(HarnessError::Config(format!("x0 has {} entries, expected {}", x0.len(), n)));
    }
    let burn = map.get("burn_in").map(|v| parse_f64("burn_in", v)).transpose()?.unwrap_or(0.0);
    let init = if burn > 0.0 {
        InitialLaw::BurnIn { y0, x0, time: burn }
    } else {
        InitialLaw::Point { y0, x0 }
    };
    Ok(ModelParams::new(drift, rho)?.with_init(init))
}

/// A full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub params: ModelParams,
    pub regime: Regime,
    pub horizons: Vec<f64>,
    pub delta: DeltaRule,
    pub replications: usize,
    pub seed: u64,
    pub flavor: Flavor,
    pub fine_delta: f64,
    pub limit_draws: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "a",
    "b",
    "m",
    "kappa",
    "theta",
    "rho",
    "y0",
    "x0",
    "burn_in",
    "regime",
    "horizons",
    "delta",
    "gamma",
    "replications",
    "seed",
    "flavor",
    "fine_delta",
    "limit_draws",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let map = parse_kv(text)?;
        if let Some(k) = map.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(HarnessError::Config(format!("unknown key {}", k)));
        }
        let params = params_from_map(&map)?;
        let regime: Regime = required(&map, "regime")?.parse().map_err(HarnessError::Config)?;
        let horizons = parse_list("horizons", required(&map, "horizons")?)?;
        if horizons.iter().any(|t| !(*t > 0.0)) {
            return Err(HarnessError::Config("horizons must be positive".into()));
        }
        let delta = match (map.get("delta"), map.get("gamma")) {
            (Some(d), None) => DeltaRule::Fixed(parse_f64("delta", d)?),
            (None, Some(g)) => DeltaRule::Power(parse_f64("gamma", g)?),
            _ => return Err(HarnessError::Config("give exactly one of delta and gamma".into())),
        };
        let replications = required(&map, "replications")?
            .parse::<usize>()
            .map_err(|_| HarnessError::Config("replications must be a nonnegative integer".into()))?;
        let seed = map
            .get("seed")
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| HarnessError::Config("seed must be a u64".into()))?
            .unwrap_or(0);
        let flavor = map
            .get("flavor")
            .map(|s| s.parse::<Flavor>())
            .transpose()
            .map_err(HarnessError::Config)?
            .unwrap_or(Flavor::Exact);
        let fine_delta = map.get("fine_delta").map(|v| parse_f64("fine_delta", v)).transpose()?.unwrap_or(1e-3);
        let limit_draws = map
            .get("limit_draws")
            .map(|s| s.parse::<usize>())
            .transpose()
            .map_err(|_| HarnessError::Config("limit_draws must be an integer".into()))?
            .unwrap_or(replications);
        Ok(ExperimentConfig {
            params,
            regime,
            horizons,
            delta,
            replications,
            seed,
            flavor,
            fine_delta,
            limit_draws,
        })
    }

    pub fn from_file(path: &FsPath) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn canonical(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{:e}", x)).collect::<Vec<_>>().join(", ");
        let mat = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|r| fmt(&m.row(r).iter().copied().collect::<Vec<_>>()))
                .collect::<Vec<_>>()
                .join("; ")
        };
        let d = &self.params.drift;
        let (y0, x0) = self.params.init.start();
        let mut s = String::new();
        let _ = writeln!(s, "a = {:e}", d.a);
        let _ = writeln!(s, "b = {:e}", d.b);
        let _ = writeln!(s, "m = {}", fmt(d.m.as_slice()));
        let _ = writeln!(s, "kappa = {}", fmt(d.kappa.as_slice()));
        let _ = writeln!(s, "theta = {}", mat(&d.theta));
        let _ = writeln!(s, "rho = {}", mat(&self.params.rho));
        let _ = writeln!(s, "y0 = {:e}", y0);
        let _ = writeln!(s, "x0 = {}", fmt(x0.as_slice()));
        if self.params.init.burn_in() > 0.0 {
            let _ = writeln!(s, "burn_in = {:e}", self.params.init.burn_in());
        }
        let _ = writeln!(s, "regime = {}", self.regime);
        let _ = writeln!(s, "horizons = {}", fmt(&self.horizons));
        match self.delta {
            DeltaRule::Fixed(v) => {
                let _ = writeln!(s, "delta = {:e}", v);
            }
            DeltaRule::Power(g) => {
                let _ = writeln!(s, "gamma = {:e}", g);
            }
        }
        let _ = writeln!(s, "replications = {}", self.replications);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "flavor = {}", self.flavor);
        let _ = writeln!(s, "fine_delta = {:e}", self.fine_delta);
        let _ = writeln!(s, "limit_draws = {}", self.limit_draws);
        s
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

/// Runtime settings that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// 0 lets rayon choose.
    pub threads: usize,
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_digest: String,
    pub params_digest: String,
    pub seed: u64,
    pub code_version: String,
}

impl Provenance {
    fn of(config: &ExperimentConfig) -> Self {
        Provenance {
            config_digest: config.digest(),
            params_digest: config.params.digest(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// One named pass/fail check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Result of one replication at one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRow {
    pub horizon: f64,
    pub delta: f64,
    pub replication: usize,
    /// `None` when the replication ran; the error message otherwise.
    pub aborted: Option<String>,
    pub tau_hat: Vec<f64>,
    /// `Q_T(τ̂ - τ)`.
    pub normalized: Vec<f64>,
    /// Supercritical runs: normalized errors divided by the conditional
    /// standard deviations of the mixed-normal limit (empty if the path has
    /// not stabilized).
    pub standardized: Vec<f64>,
    pub stabilized: Option<bool>,
}

/// Statistics of the normalized errors at one horizon.
#[derive(Debug, Clone, Serialize)]
pub struct HorizonSummary {
    pub horizon: f64,
    pub delta: f64,
    pub completed: usize,
    pub aborted: usize,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frobenius_gap: Option<f64>,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    /// One-sample KS against the sandwich marginal (subcritical), two-sample
    /// KS against limit draws (critical), KS of the standardized errors
    /// against N(0, 1) (supercritical).
    pub ks: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_pvalues: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_abs_b_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iqr_a_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilized_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub regime: Regime,
    pub flavor: Flavor,
    pub labels: Vec<String>,
    pub truth: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sandwich: Option<Vec<Vec<f64>>>,
    pub summaries: Vec<HorizonSummary>,
    pub checks: Vec<Check>,
    pub abort_rate: f64,
    #[serde(skip)]
    pub rows: Vec<ReplicationRow>,
    /// Critical runs: draws of the limit law, stacked like `τ`.
    #[serde(skip)]
    pub limit_draws: Vec<Vec<f64>>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Per-replication CSV. Every summary statistic can be recomputed from it.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("horizon,delta,replication,status");
        for l in &self.labels {
            let _ = write!(s, ",tau_{}", l);
        }
        for l in &self.labels {
            let _ = write!(s, ",z_{}", l);
        }
        if self.regime == Regime::Supercritical {
            for l in &self.labels {
                let _ = write!(s, ",std_{}", l);
            }
            s.push_str(",stabilized");
        }
        s.push('\n');
        let p = self.labels.len();
        for r in &self.rows {
            let _ = write!(
                s,
                "{:.16e},{:.16e},{},{}",
                r.horizon,
                r.delta,
                r.replication,
                r.aborted.as_deref().map(csv_escape).unwrap_or_else(|| "ok".into())
            );
            let mut cols = |v: &[f64]| {
                for i in 0..p {
                    match v.get(i) {
                        Some(x) => {
                            let _ = write!(s, ",{:.16e}", x);
                        }
                        None => s.push(','),
                    }
                }
            };
            cols(&r.tau_hat);
            cols(&r.normalized);
            if self.regime == Regime::Supercritical {
                cols(&r.standardized);
                let _ = write!(s, ",{}", r.stabilized.map(|b| b.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }

    pub fn limit_draws_csv(&self) -> String {
        let mut s = self.labels.iter().map(|l| format!("limit_{}", l)).collect::<Vec<_>>().join(",");
        s.push('\n');
        for d in &self.limit_draws {
            s.push_str(&d.iter().map(|x| format!("{:.16e}", x)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `replications.csv`, `summary.json` and, for critical runs,
    /// `limit_draws.csv`.
    pub fn write_to(&self, dir: &FsPath) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("replications.csv"), self.rows_csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        if !self.limit_draws.is_empty() {
            std::fs::write(dir.join("limit_draws.csv"), self.limit_draws_csv())?;
        }
        Ok(())
    }
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "'"))
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn stream_index(horizon: usize, replication: usize) -> u64 {
    ((horizon as u64) << 32) | replication as u64
}

const LIMIT_STREAM_BASE: u64 = 1 << 48;

/// Refuses configs whose declared regime or hypotheses do not hold.
fn check_routing(config: &ExperimentConfig) -> Result<(), HarnessError> {
    let class = classify(&config.params)?;
    if class.regime != config.regime {
        return Err(HarnessError::RegimeMismatch {
            declared: config.regime,
            actual: class.regime,
        });
    }
    match class.regime {
        Regime::Subcritical => Ok(()),
        Regime::Critical if asymptotics::is_covered_critical(&class) && config.params.drift.kappa.iter().all(|&k| k == 0.0) => Ok(()),
        Regime::Critical => Err(HarnessError::Unsupported("critical runs need b = 0, kappa = 0 and theta = 0".into())),
        Regime::Supercritical => Ok(check_supercritical_hypothesis(&config.params)?),
        Regime::Unsupported => Err(HarnessError::Unsupported("the parameters are outside every covered regime".into())),
    }
}

/// Simulates, estimates and summarizes `M` replications per horizon.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, HarnessError> {
    check_routing(config)?;
    let params = &config.params;
    let class = classify(params)?;
    let n = params.n();
    let truth = stack_tau(&params.drift);
    let sandwich = if class.regime == Regime::Subcritical {
        Some(asymptotic_covariance(params)?.sandwich)
    } else {
        None
    };

    let mut rows = Vec::new();
    for (hi, &t) in config.horizons.iter().enumerate() {
        let delta = config.delta.delta(t);
        let q = normalizer(&class, t)?;
        let batch: Vec<ReplicationRow> = with_pool(opts.threads, || {
            (0..config.replications)
                .into_par_iter()
                .map(|r| replicate(config, &truth, &q, hi, r, t, delta))
                .collect()
        })?;
        rows.extend(batch);
    }

    let limit_draws = if class.regime == Regime::Critical {
        with_pool(opts.threads, || {
            (0..config.limit_draws)
                .into_par_iter()
                .map(|j| {
                    let mut rng = replication_rng(config.seed, LIMIT_STREAM_BASE | j as u64);
                    let sample = simulate_critical_limit(params, config.fine_delta, &mut rng)?;
                    let draw = critical_limit_functional(&sample, params.drift.a, &params.drift.m).limit_draw()?;
                    Ok(draw.iter().copied().collect())
                })
                .collect::<Result<Vec<Vec<f64>>, HarnessError>>()
        })??
    } else {
        Vec::new()
    };

    let mut report = ExperimentReport {
        provenance: Provenance::of(config),
        regime: class.regime,
        flavor: config.flavor,
        labels: tau_labels(n),
        truth: truth.as_slice().to_vec(),
        sandwich: sandwich.as_ref().map(mat_rows),
        summaries: Vec::new(),
        checks: Vec::new(),
        abort_rate: 0.0,
        rows,
        limit_draws,
    };
    summarize(&mut report, config, sandwich.as_ref());
    Ok(report)
}

fn replicate(config: &ExperimentConfig, truth: &TauVector, q: &asymptotics::Normalizer, hi: usize, r: usize, t: f64, delta: f64) -> ReplicationRow {
    let mut row = ReplicationRow {
        horizon: t,
        delta,
        replication: r,
        aborted: None,
        tau_hat: Vec::new(),
        normalized: Vec::new(),
        standardized: Vec::new(),
        stabilized: None,
    };
    let mut rng = replication_rng(config.seed, stream_index(hi, r));
    let path = match simulate_path_with(&config.params, t, delta, config.seed, &mut rng) {
        Ok(p) => p,
        Err(e) => {
            row.aborted = Some(e.to_string());
            return row;
        }
    };
    let est = match estimate(&path, config.flavor) {
        Ok(e) => e,
        Err(e) => {
            row.aborted = Some(e.to_string());
            return row;
        }
    };
    let z = q.apply(&(&est.tau_hat.0 - &truth.0));
    if config.regime == Regime::Supercritical {
        match extract_supercritical_limits(&path, &config.params) {
            Ok(lim) => {
                row.stabilized = Some(true);
                if let Some(sd) = mixed_normal_sd(&lim) {
                    row.standardized = z.iter().zip(sd.iter()).map(|(v, s)| v / s).collect();
                }
            }
            Err(_) => row.stabilized = Some(false),
        }
    }
    row.tau_hat = est.tau_hat.as_slice().to_vec();
    row.normalized = z.iter().copied().collect();
    row
}

/// Conditional standard deviations of `V⁻¹ η ξ`.
fn mixed_normal_sd(lim: &asymptotics::SupercriticalLimits) -> Option<DVector<f64>> {
    let n = lim.cj.len();
    let p = n + 2;
    let dim = 2 + n * p;
    let mut v = DMatrix::zeros(dim, dim);
    v.view_mut((0, 0), (2, 2)).copy_from(&lim.v1);
    for i in 0..n {
        v.view_mut((2 + i * p, 2 + i * p), (p, p)).copy_from(&lim.v2);
    }
    let vinv = v.try_inverse()?;
    let cov = &vinv * &lim.eta_eta_t * vinv.transpose();
    let sd = cov.diagonal().map(|x| x.max(0.0).sqrt());
    sd.iter().all(|s| *s > 0.0 && s.is_finite()).then_some(sd)
}

fn column(rows: &[&ReplicationRow], i: usize, f: impl Fn(&ReplicationRow) -> &Vec<f64>) -> Vec<f64> {
    rows.iter().filter_map(|r| f(r).get(i).copied()).collect()
}

fn summarize(report: &mut ExperimentReport, config: &ExperimentConfig, sandwich: Option<&DMatrix<f64>>) {
    let p = report.labels.len();
    let mut checks = Vec::new();
    let total = report.rows.len();
    let aborted = report.rows.iter().filter(|r| r.aborted.is_some()).count();
    report.abort_rate = if total > 0 { aborted as f64 / total as f64 } else { 0.0 };
    checks.push(Check::new(
        "abort_rate",
        report.abort_rate < 0.01,
        format!("{} of {} replications aborted", aborted, total),
    ));

    for &t in &config.horizons {
        let rows: Vec<&ReplicationRow> = report.rows.iter().filter(|r| r.horizon == t && r.aborted.is_none()).collect();
        let cols: Vec<Vec<f64>> = (0..p).map(|i| column(&rows, i, |r| &r.normalized)).collect();
        let ms: Vec<(f64, f64)> = cols.iter().map(|c| stats::mean_sd(c)).collect();
        let m = rows.len();
        let enough = m >= 2;
        let mut summary = HorizonSummary {
            horizon: t,
            delta: config.delta.delta(t),
            completed: m,
            aborted: config.replications - m,
            mean: ms.iter().map(|x| x.0).collect(),
            std_err: ms.iter().map(|x| x.1 / (m as f64).sqrt()).collect(),
            covariance: None,
            frobenius_gap: None,
            skewness: if enough {
                cols.iter().map(|c| stats::skewness(c)).collect()
            } else {
                Vec::new()
            },
            excess_kurtosis: if enough {
                cols.iter().map(|c| stats::excess_kurtosis(c)).collect()
            } else {
                Vec::new()
            },
            ks: Vec::new(),
            ks_pvalues: None,
            median_abs_b_error: None,
            iqr_a_error: None,
            stabilized_fraction: None,
        };
        if enough {
            let data = DMatrix::from_fn(m, p, |r, c| cols[c][r]);
            let cov = stats::covariance(&data);
            if let Some(s) = sandwich {
                summary.frobenius_gap = Some((&cov - s).norm() / s.norm());
                summary.ks = (0..p)
                    .map(|i| stats::ks_one_sample(&cols[i], |x| stats::normal_cdf(x, s[(i, i)].sqrt())))
                    .collect();
                summary.ks_pvalues = Some(summary.ks.iter().map(|d| stats::ks_pvalue(*d, m)).collect());
            }
            summary.covariance = Some(mat_rows(&cov));
        }
        match report.regime {
            Regime::Critical if !report.limit_draws.is_empty() && m > 0 => {
                summary.ks = (0..p)
                    .map(|i| {
                        let lim: Vec<f64> = report.limit_draws.iter().map(|d| d[i]).collect();
                        stats::ks_two_sample(&cols[i], &lim)
                    })
                    .collect();
            }
            Regime::Supercritical => {
                let a_err: Vec<f64> = rows.iter().map(|r| r.tau_hat[0] - report.truth[0]).collect();
                let b_err: Vec<f64> = rows.iter().map(|r| (r.tau_hat[1] - report.truth[1]).abs()).collect();
                summary.median_abs_b_error = Some(stats::median(&b_err));
                summary.iqr_a_error = Some(stats::iqr(&a_err));
                let stab = report.rows.iter().filter(|r| r.horizon == t && r.stabilized == Some(true)).count();
                summary.stabilized_fraction = Some(stab as f64 / config.replications.max(1) as f64);
                let std_rows: Vec<&ReplicationRow> = rows.iter().copied().filter(|r| !r.standardized.is_empty()).collect();
                if std_rows.len() >= 2 {
                    summary.ks = (0..p)
                        .map(|i| stats::ks_one_sample(&column(&std_rows, i, |r| &r.standardized), |x| stats::normal_cdf(x, 1.0)))
                        .collect();
                    summary.ks_pvalues = Some(summary.ks.iter().map(|d| stats::ks_pvalue(*d, std_rows.len())).collect());
                }
            }
            _ => {}
        }
        report.summaries.push(summary);
    }

    let last = match report.summaries.last() {
        Some(s) => s.clone(),
        None => {
            report.checks = checks;
            return;
        }
    };
    match report.regime {
        Regime::Subcritical if last.completed >= 2 => {
            let worst_mean = last.mean.iter().zip(&last.std_err).map(|(m, s)| m.abs() / s).fold(0.0, f64::max);
            checks.push(Check::new(
                "mean_within_3se",
                worst_mean <= 3.0,
                format!("max |mean|/se = {:.3}", worst_mean),
            ));
            let gap = last.frobenius_gap.unwrap_or(f64::INFINITY);
            checks.push(Check::new("covariance_gap", gap < 0.2, format!("relative Frobenius gap = {:.4}", gap)));
            let skew = last.skewness.iter().fold(0.0f64, |a, s| a.max(s.abs()));
            checks.push(Check::new("skewness", skew < 0.3, format!("max |skewness| = {:.4}", skew)));
            let kurt = last.excess_kurtosis.iter().fold(0.0f64, |a, s| a.max(s.abs()));
            checks.push(Check::new("excess_kurtosis", kurt < 0.5, format!("max |excess kurtosis| = {:.4}", kurt)));
            let pmin = last.ks_pvalues.as_ref().map(|v| v.iter().fold(1.0f64, |a, p| a.min(*p))).unwrap_or(0.0);
            checks.push(Check::new("ks_marginals", pmin > 1e-3, format!("min KS p-value = {:.4}", pmin)));
        }
        Regime::Critical if last.ks.len() >= 2 => {
            let worst = last.ks[0].max(last.ks[1]);
            checks.push(Check::new(
                "ks_limit_a_b",
                worst < 0.15,
                format!("KS distances (a, b) = ({:.4}, {:.4})", last.ks[0], last.ks[1]),
            ));
        }
        Regime::Supercritical => {
            let meds: Vec<f64> = report.summaries.iter().map(|s| s.median_abs_b_error.unwrap_or(f64::NAN)).collect();
            let decreasing = meds.windows(2).all(|w| w[1] < w[0]);
            checks.push(Check::new(
                "median_b_decreasing",
                decreasing,
                format!(
                    "median |b_hat - b| per horizon = [{}]",
                    meds.iter().map(|m| format!("{:.3e}", m)).collect::<Vec<_>>().join(", ")
                ),
            ));
            let lm = last.median_abs_b_error.unwrap_or(f64::NAN);
            checks.push(Check::new(
                "median_b_small",
                lm < 0.05,
                format!("median |b_hat - b| at T = {} is {:.3e}", last.horizon, lm),
            ));
            let first = &report.summaries[0];
            let ratio = last.iqr_a_error.unwrap_or(f64::NAN) / first.iqr_a_error.unwrap_or(f64::NAN);
            checks.push(Check::new(
                "iqr_a_ratio",
                (0.5..=2.0).contains(&ratio),
                format!("IQR(a_hat - a) at T = {} over T = {} is {:.4}", last.horizon, first.horizon, ratio),
            ));
            let frac = last.stabilized_fraction.unwrap_or(0.0);
            checks.push(Check::new(
                "stabilized",
                frac >= 0.95,
                format!("{:.3} of paths stabilized at T = {}", frac, last.horizon),
            ));
        }
        _ => {}
    }
    report.checks = checks;
}

/// One replication of the discrete/exact comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub horizon: f64,
    pub delta: f64,
    pub replication: usize,
    pub aborted: Option<String>,
    /// `‖√t_N (τ̌ - τ̂)‖_∞`.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub provenance: Provenance,
    pub gamma: Option<f64>,
    /// `(T, median gap)` per horizon.
    pub medians: Vec<(f64, f64)>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("horizon,delta,replication,status,gap\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{},{},{}",
                r.horizon,
                r.delta,
                r.replication,
                r.aborted.as_deref().map(csv_escape).unwrap_or_else(|| "ok".into()),
                r.gap.map(|g| format!("{:.16e}", g)).unwrap_or_default()
            );
        }
        s
    }

    pub fn write_to(&self, dir: &FsPath) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gap.csv"), self.rows_csv())?;
        std::fs::write(
            dir.join("gap_summary.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        Ok(())
    }
}

/// `‖√t_N (τ̌ - τ̂)‖_∞` between two flavours on the same path.
pub fn flavor_gap(path: &crate::sde_sim::Path, left: Flavor, right: Flavor) -> Result<f64, crate::clse::ClseError> {
    let l = estimate(path, left)?;
    let r = estimate(path, right)?;
    let scale = path.horizon().sqrt();
    Ok((&l.tau_hat.0 - &r.tau_hat.0).amax() * scale)
}

/// Compares the discrete estimator with the exact-discretization one on the
/// same paths. With `Δ(T) = T^{-γ}`, `γ > 1`, the median gap is expected to
/// shrink as `T` grows; for `γ ≤ 1` the run is a contrast demonstration and
/// its declared check is that the gap does not shrink.
pub fn discrete_vs_continuous_gap(config: &ExperimentConfig, opts: &RunOptions) -> Result<GapReport, HarnessError> {
    check_routing(config)?;
    if config.regime != Regime::Subcritical {
        return Err(HarnessError::Unsupported("the gap study needs a subcritical config".into()));
    }
    let mut rows = Vec::new();
    for (hi, &t) in config.horizons.iter().enumerate() {
        let delta = config.delta.delta(t);
        let batch: Vec<GapRow> = with_pool(opts.threads, || {
            (0..config.replications)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replication_rng(config.seed, stream_index(hi, r));
                    let res = simulate_path_with(&config.params, t, delta, config.seed, &mut rng)
                        .map_err(|e| e.to_string())
                        .and_then(|path| flavor_gap(&path, Flavor::Discrete, Flavor::Exact).map_err(|e| e.to_string()));
                    GapRow {
                        horizon: t,
                        delta,
                        replication: r,
                        gap: res.as_ref().ok().copied(),
                        aborted: res.err(),
                    }
                })
                .collect()
        })?;
        rows.extend(batch);
    }
    let medians: Vec<(f64, f64)> = config
        .horizons
        .iter()
        .map(|&t| {
            let g: Vec<f64> = rows.iter().filter(|r| r.horizon == t).filter_map(|r| r.gap).collect();
            (t, stats::median(&g))
        })
        .collect();
    let gamma = match config.delta {
        DeltaRule::Power(g) => Some(g),
        DeltaRule::Fixed(_) => None,
    };
    let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
    let detail = format!("median gaps {:?}", medians);
    let mut checks = Vec::new();
    let aborted = rows.iter().filter(|r| r.aborted.is_some()).count();
    checks.push(Check::new(
        "abort_rate",
        (aborted as f64) < 0.01 * rows.len() as f64,
        format!("{} of {} replications aborted", aborted, rows.len()),
    ));
    match gamma {
        Some(g) if g > 1.0 => checks.push(Check::new("gap_decreasing", decreasing, detail)),
        _ => {
            let not_shrinking = medians.windows(2).all(|w| w[1].1 >= w[0].1);
            checks.push(Check::new("gap_not_decreasing", not_shrinking, detail));
        }
    }
    Ok(GapReport {
        provenance: Provenance::of(config),
        gamma,
        medians,
        checks,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: &str = "a = 2\nb = 1\nm = 1\nkappa = 0.5\ntheta = 2\nrho = 1, 0; 0.2, 0.9\ny0 = 2\nx0 = 0\nregime = subcritical\nhorizons = 20\ndelta = 0.02\nreplications = 3\nseed = 5\n";

    #[test]
    fn parse_and_canonical_round_trip() {
        let c = ExperimentConfig::parse(REF).unwrap();
        assert_eq!(c.params.n(), 1);
        assert_eq!(c.flavor, Flavor::Exact);
        let again = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{}speed = 3\n", REF);
        assert!(matches!(ExperimentConfig::parse(&text), Err(HarnessError::Config(_))));
    }

    #[test]
    fn delta_rules() {
        assert_eq!(DeltaRule::Fixed(0.1).delta(50.0), 0.1);
        assert!((DeltaRule::Power(1.0).delta(50.0) - 0.02).abs() < 1e-15);
    }
}
