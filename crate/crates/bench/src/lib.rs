//! Benchmark harness: batches of random systems per dimension row, data
//! collection, learning, oracle error computation and aggregation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use qreg_core::datagen::IoDataset;
use qreg_core::matlib;
use qreg_core::nonmin::{self, GammaDecomposition, NonMinBasis};
use qreg_core::qlearn::{self, QlReport, RunOptions};
use qreg_plant::collect::{collect, derive_seed, CollectConfig, DataLength};
use qreg_plant::lti::{random_system, LtiSystem};
use qreg_plant::oracle;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// One benchmark row: a batch of random systems of fixed dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub systems: usize,
    #[serde(default = "default_stable_fraction")]
    pub stable_fraction: f64,
}

fn default_stable_fraction() -> f64 {
    0.5
}

/// Data-length policy: the minimal sample count or an explicit override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataLengthConfig {
    Keyword(KeywordLowerBound),
    Samples { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordLowerBound {
    LowerBound,
}

impl Default for DataLengthConfig {
    fn default() -> Self {
        DataLengthConfig::Keyword(KeywordLowerBound::LowerBound)
    }
}

impl From<DataLengthConfig> for DataLength {
    fn from(c: DataLengthConfig) -> Self {
        match c {
            DataLengthConfig::Keyword(_) => DataLength::LowerBound,
            DataLengthConfig::Samples { samples } => DataLength::Samples(samples),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub rows: Vec<RowSpec>,
    #[serde(default = "default_qy_scale")]
    pub qy_scale: f64,
    #[serde(default = "default_r_scale")]
    pub r_scale: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub data_length: DataLengthConfig,
    #[serde(default = "default_episode_cap")]
    pub episode_cap: usize,
    #[serde(default = "default_output_cap")]
    pub output_cap: f64,
    #[serde(default = "default_collect_retries")]
    pub collect_retries: usize,
    /// Worker threads per row; 0 uses the rayon default, 1 runs serially.
    #[serde(default)]
    pub threads: usize,
}

fn default_qy_scale() -> f64 {
    100.0
}
fn default_r_scale() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-10
}
fn default_max_iters() -> usize {
    10
}
fn default_episode_cap() -> usize {
    30
}
fn default_output_cap() -> f64 {
    1e9
}
fn default_collect_retries() -> usize {
    25
}

impl BenchConfig {
    /// Desk-scale defaults: the standard dimension sweep with small batches;
    /// larger batches stay reachable through the config file.
    pub fn desk_default(master_seed: u64) -> Self {
        BenchConfig {
            rows: vec![
                RowSpec { n: 3, p: 2, m: 1, systems: 20, stable_fraction: 0.5 },
                RowSpec { n: 5, p: 3, m: 2, systems: 20, stable_fraction: 0.5 },
                RowSpec { n: 10, p: 6, m: 5, systems: 10, stable_fraction: 0.5 },
                RowSpec { n: 30, p: 15, m: 10, systems: 3, stable_fraction: 0.5 },
                RowSpec { n: 50, p: 20, m: 15, systems: 3, stable_fraction: 0.5 },
            ],
            qy_scale: 100.0,
            r_scale: 1.0,
            epsilon: 1e-10,
            max_iters: 10,
            master_seed,
            data_length: DataLengthConfig::default(),
            episode_cap: 30,
            output_cap: 1e9,
            collect_retries: 25,
            threads: 0,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: BenchConfig =
            serde_json::from_str(s).map_err(|e| BenchError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(BenchError::Config("at least one row required".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.n == 0 || r.p == 0 || r.m == 0 {
                return Err(BenchError::Config(format!("row {i}: n, p, m must be >= 1")));
            }
            if !(0.0..=1.0).contains(&r.stable_fraction) {
                return Err(BenchError::Config(format!(
                    "row {i}: stable_fraction must lie in [0, 1]"
                )));
            }
        }
        if self.qy_scale <= 0.0 || self.r_scale <= 0.0 {
            return Err(BenchError::Config("qy_scale and r_scale must be > 0".into()));
        }
        if self.epsilon < 0.0 {
            return Err(BenchError::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }

    fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            data_length: self.data_length.into(),
            episode_cap: self.episode_cap,
            output_cap: self.output_cap,
            max_retries: self.collect_retries,
            ..Default::default()
        }
    }
}

/// Everything produced for one successful instance; kept in memory so the
/// acceptance suite can re-examine systems, datasets and gain histories.
#[derive(Debug, Clone)]
pub struct InstanceSuccess {
    pub sys: LtiSystem,
    pub dataset: IoDataset,
    pub x0s: Vec<DVector<f64>>,
    pub gamma: GammaDecomposition,
    pub basis: NonMinBasis,
    pub report: QlReport,
    pub oracle: oracle::OracleBundle,
    /// Spectral-norm distance of the returned gain from the oracle optimum.
    pub gain_error: f64,
    /// Same distance for the initial gain and every iterate.
    pub gain_error_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub row: usize,
    pub index: usize,
    pub seed: u64,
    pub stable: bool,
    pub result: std::result::Result<InstanceSuccess, String>,
}

/// Aggregate of one row; the error columns average successes only, failures
/// are carried as diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub systems: usize,
    pub successes: usize,
    pub avg_learn_secs: f64,
    pub avg_gain_error: f64,
    pub max_gain_error: f64,
    pub mean_nu: f64,
    pub failures: Vec<String>,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub instances: Vec<InstanceOutcome>,
}

fn run_instance(
    config: &BenchConfig,
    row_idx: usize,
    row: &RowSpec,
    index: usize,
) -> InstanceOutcome {
    // One seed stream per (row, instance), so worker scheduling can never
    // change any result.
    let stream = (row_idx as u64) * 1_000_003 + index as u64;
    let seed = derive_seed(config.master_seed, stream);
    let stable_count = (row.stable_fraction * row.systems as f64).round() as usize;
    let stable = index < stable_count;

    let work = || -> std::result::Result<InstanceSuccess, String> {
        let sys = random_system(row.n, row.p, row.m, stable, seed).map_err(|e| e.to_string())?;
        let collected = collect(&sys, &config.collect_config(), derive_seed(seed, 1))
            .map_err(|e| e.to_string())?;
        let lag = sys.lag();
        let gamma =
            nonmin::compute_gamma(&collected.dataset, lag, row.n).map_err(|e| e.to_string())?;
        let z = nonmin::build_z(&collected.dataset, &gamma, lag).map_err(|e| e.to_string())?;
        let basis = nonmin::build_basis(&collected.dataset, &z).map_err(|e| e.to_string())?;

        let qy = DMatrix::identity(row.p, row.p) * config.qy_scale;
        let r = DMatrix::identity(row.m, row.m) * config.r_scale;
        let opts = RunOptions {
            epsilon: config.epsilon,
            max_iters: config.max_iters,
            initial_gain: None,
        };
        let report = qlearn::run_with_basis(&basis, &qy, &r, &opts).map_err(|e| e.to_string())?;

        let bundle = oracle::oracle_bundle(&sys, &collected.dataset, &collected.x0s, &z, &qy, &r)
            .map_err(|e| e.to_string())?;
        let gain_error = matlib::spectral_norm(&(report.final_gain() - &bundle.k_z_star));
        let gain_error_history = report
            .gain_history()
            .iter()
            .map(|k| matlib::spectral_norm(&(*k - &bundle.k_z_star)))
            .collect();

        Ok(InstanceSuccess {
            sys,
            dataset: collected.dataset,
            x0s: collected.x0s,
            gamma,
            basis,
            report,
            oracle: bundle,
            gain_error,
            gain_error_history,
        })
    };

    InstanceOutcome {
        row: row_idx,
        index,
        seed,
        stable,
        result: work(),
    }
}

fn aggregate(config: &BenchConfig, instances: &[InstanceOutcome]) -> Vec<BenchRow> {
    config
        .rows
        .iter()
        .enumerate()
        .map(|(row_idx, spec)| {
            let mine: Vec<&InstanceOutcome> =
                instances.iter().filter(|o| o.row == row_idx).collect();
            let successes: Vec<&InstanceSuccess> =
                mine.iter().filter_map(|o| o.result.as_ref().ok()).collect();
            let failures: Vec<String> = mine
                .iter()
                .filter_map(|o| {
                    o.result
                        .as_ref()
                        .err()
                        .map(|e| format!("instance {}: {e}", o.index))
                })
                .collect();
            let count = successes.len();
            let avg = |f: &dyn Fn(&InstanceSuccess) -> f64| -> f64 {
                if count == 0 {
                    f64::NAN
                } else {
                    successes.iter().map(|s| f(s)).sum::<f64>() / count as f64
                }
            };
            BenchRow {
                n: spec.n,
                p: spec.p,
                m: spec.m,
                systems: spec.systems,
                successes: count,
                avg_learn_secs: avg(&|s| s.report.learn_secs),
                avg_gain_error: avg(&|s| s.gain_error),
                max_gain_error: successes
                    .iter()
                    .map(|s| s.gain_error)
                    .fold(f64::NAN, f64::max),
                mean_nu: avg(&|s| s.report.nu as f64),
                failures,
            }
        })
        .collect()
}

/// Run the whole suite. Per-instance failures are recorded and never abort
/// the run; results are deterministic in the master seed (timings aside)
/// regardless of the worker count.
pub fn run_suite(config: &BenchConfig) -> Result<SuiteResult> {
    config.validate()?;
    let mut instances = Vec::new();
    for (row_idx, row) in config.rows.iter().enumerate() {
        let mut row_outcomes: Vec<InstanceOutcome> = if config.threads == 1 {
            (0..row.systems)
                .map(|i| run_instance(config, row_idx, row, i))
                .collect()
        } else if config.threads == 0 {
            (0..row.systems)
                .into_par_iter()
                .map(|i| run_instance(config, row_idx, row, i))
                .collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| BenchError::Config(e.to_string()))?;
            pool.install(|| {
                (0..row.systems)
                    .into_par_iter()
                    .map(|i| run_instance(config, row_idx, row, i))
                    .collect()
            })
        };
        instances.append(&mut row_outcomes);
    }
    let rows = aggregate(config, &instances);
    Ok(SuiteResult {
        config: config.clone(),
        rows,
        instances,
    })
}

impl SuiteResult {
    /// Table-shaped summary, one line per row.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "n",
            "p",
            "m",
            "systems",
            "successes",
            "avg_learn_secs",
            "avg_gain_error",
            "max_gain_error",
            "failures",
        ])
        .map_err(|e| BenchError::Parse(e.to_string()))?;
        for r in &self.rows {
            wtr.write_record([
                r.n.to_string(),
                r.p.to_string(),
                r.m.to_string(),
                r.systems.to_string(),
                r.successes.to_string(),
                format!("{:.6e}", r.avg_learn_secs),
                format!("{:.17e}", r.avg_gain_error),
                format!("{:.17e}", r.max_gain_error),
                r.failures.join("; "),
            ])
            .map_err(|e| BenchError::Parse(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One JSON object per instance with the per-iteration error history.
    pub fn write_instances_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for o in &self.instances {
            let spec = &self.config.rows[o.row];
            let line = match &o.result {
                Ok(s) => serde_json::json!({
                    "row": o.row,
                    "n": spec.n, "p": spec.p, "m": spec.m,
                    "index": o.index,
                    "seed": o.seed,
                    "stable": o.stable,
                    "lag": s.sys.lag(),
                    "nu": s.report.nu,
                    "samples": s.dataset.usable_len(),
                    "learn_secs": s.report.learn_secs,
                    "iters_used": s.report.iters_used,
                    "converged": s.report.converged,
                    "gain_error": s.gain_error,
                    "gain_error_history": s.gain_error_history,
                    "error": serde_json::Value::Null,
                }),
                Err(e) => serde_json::json!({
                    "row": o.row,
                    "n": spec.n, "p": spec.p, "m": spec.m,
                    "index": o.index,
                    "seed": o.seed,
                    "stable": o.stable,
                    "error": e,
                }),
            };
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>4} {:>4} {:>4} {:>9} {:>10} {:>15} {:>13}\n",
            "n", "p", "m", "systems", "ok", "avg time [s]", "avg eps"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>4} {:>4} {:>4} {:>9} {:>10} {:>15.6} {:>13.3e}\n",
                r.n, r.p, r.m, r.systems, r.successes, r.avg_learn_secs, r.avg_gain_error
            ));
        }
        s
    }
}

/// Median of a sample (empty slices return NaN).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Render a dataset audit as one pass/fail line per condition.
pub fn render_audit(audit: &nonmin::DatasetAudit) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "dataset: {} episode(s) {:?}, lag {}, state order {}, m = {}, p = {}, N = {}\n",
        audit.episode_lengths.len(),
        audit.episode_lengths,
        audit.lag,
        audit.state_order,
        audit.input_dim,
        audit.output_dim,
        audit.usable_samples
    ));
    for (name, pass, detail) in audit.checks() {
        s.push_str(&format!(
            "  [{}] {name}: {detail}\n",
            if pass { "PASS" } else { "FAIL" }
        ));
    }
    s.push_str(&format!(
        "overall: {}\n",
        if audit.all_pass() { "PASS" } else { "FAIL" }
    ));
    s
}
