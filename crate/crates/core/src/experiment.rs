//! Experiment runner: configuration, the epsilon sweep, metrics files and
//! plot-ready aggregates.
//!
//! # Config file
//!
//! Plain text, one `key = value` per line, `#` starts a comment. Lists are
//! comma separated. See [`ExperimentConfig::set`] for the recognised keys.
//!
//! # Output files
//!
//! * `metrics_eps<E>_seed<S>.csv`: one row per round with header
//!   [`METRICS_HEADER`].
//! * `chain_eps<E>_seed<S>.hex`: the run's chain export.
//! * `summary.csv`: final-round means across seeds per epsilon, header
//!   [`SUMMARY_HEADER`].
//!
//! Floats are written in scientific notation with 9 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cas::ContentStore;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::federation::{run_training, Aggregation, MetricsRecord, TrainingConfig, TrainingData, TrainingRun};
use crate::ledger::{tx_cost, Ledger, LedgerConfig, TxCost};
use crate::model::{Mlp, MlpShape};
use crate::privacy::PrivacySpec;

pub const METRICS_HEADER: &str =
    "round,epsilon_target,seed,mean_accuracy,mean_loss,epsilon_spent,gas_total,mean_latency_s,store_total_bytes";
pub const SUMMARY_HEADER: &str = "epsilon_target,seeds_ok,seeds_failed,rounds,mean_final_accuracy,mean_final_global_accuracy,mean_final_loss,mean_final_epsilon_spent,noise_multiplier,status";
pub const PLOT_HEADER: &str = "epsilon_target,round,seeds,mean";

/// Formats a float with 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub training: TrainingConfig,
    pub clients: usize,
    pub dirichlet_beta: f64,
    pub samples: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub class_separation: f64,
    pub train_fraction: f64,
    /// Load samples from this CSV instead of generating them.
    pub data_csv: Option<PathBuf>,
    pub clip: f64,
    pub noise_split: f64,
    /// Defaults to `1 / clients`.
    pub delta: Option<f64>,
    pub epsilon_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base_gas: u64,
    pub gas_price_gwei: f64,
    pub latency_mean_s: f64,
    pub latency_jitter_s: f64,
    /// Mirror stored blobs to `<output_dir>/blobs_eps<E>_seed<S>/`.
    pub store_blobs: bool,
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            clients: 10,
            dirichlet_beta: 0.5,
            samples: 5000,
            classes: 10,
            input_dim: 16,
            hidden: 32,
            class_separation: 3.0,
            train_fraction: 0.8,
            data_csv: None,
            clip: 0.05,
            noise_split: 2.0,
            delta: None,
            epsilon_sweep: vec![1.0, 2.0, 4.0, 8.0],
            seeds: vec![0],
            base_gas: crate::ledger::DEFAULT_BASE_GAS,
            gas_price_gwei: 20.0,
            latency_mean_s: crate::ledger::DEFAULT_LATENCY_MEAN_S,
            latency_jitter_s: crate::ledger::DEFAULT_LATENCY_JITTER_S,
            store_blobs: false,
            threads: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("invalid boolean {other:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    ///
    /// Keys: `rounds`, `local_epochs`, `learning_rate`, `lambda1`, `lambda2`,
    /// `tau`, `batch_size`, `aggregation` (`uniform`|`weighted`),
    /// `fisher_samples`, `clients`, `dirichlet_beta`, `samples`, `classes`,
    /// `input_dim`, `hidden`, `class_separation`, `train_fraction`,
    /// `data_csv`, `clip`, `noise_split`, `delta`, `epsilons`, `seeds`,
    /// `base_gas`, `gas_price_gwei`, `latency_mean`, `latency_jitter`,
    /// `store_blobs`, `threads`, `out`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "rounds" => t.global_rounds = parse(key, value)?,
            "local_epochs" => t.local_epochs = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "lambda1" => t.lambda1 = parse(key, value)?,
            "lambda2" => t.lambda2 = parse(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "aggregation" => t.aggregation = value.trim().parse::<Aggregation>()?,
            "fisher_samples" => t.fisher_samples = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "dirichlet_beta" => self.dirichlet_beta = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "class_separation" => self.class_separation = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "data_csv" => self.data_csv = Some(PathBuf::from(value.trim())),
            "clip" => self.clip = parse(key, value)?,
            "noise_split" => self.noise_split = parse(key, value)?,
            "delta" => self.delta = Some(parse(key, value)?),
            "epsilons" => self.epsilon_sweep = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "base_gas" => self.base_gas = parse(key, value)?,
            "gas_price_gwei" => self.gas_price_gwei = parse(key, value)?,
            "latency_mean" => self.latency_mean_s = parse(key, value)?,
            "latency_jitter" => self.latency_jitter_s = parse(key, value)?,
            "store_blobs" => self.store_blobs = parse_bool(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "out" => self.output_dir = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(1.0 / self.clients as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.clients == 0 {
            return Err(Error::Config("clients must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.epsilon_sweep.is_empty() || self.epsilon_sweep.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("epsilon sweep values must be positive".into()));
        }
        let delta = self.delta();
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta {delta} must be in (0, 1)")));
        }
        if !(self.gas_price_gwei >= 0.0 && self.gas_price_gwei.is_finite()) {
            return Err(Error::Config(format!(
                "gas price {} must be non-negative",
                self.gas_price_gwei
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        PrivacySpec {
            epsilon_target: self.epsilon_sweep[0],
            delta,
            clip_c: self.clip,
            noise_split_rho: self.noise_split,
            rounds: self.training.global_rounds,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

fn run_tag(epsilon: f64, seed: u64) -> String {
    format!("eps{epsilon}_seed{seed}")
}

pub fn metrics_file_name(epsilon: f64, seed: u64) -> String {
    format!("metrics_{}.csv", run_tag(epsilon, seed))
}

pub fn chain_file_name(epsilon: f64, seed: u64) -> String {
    format!("chain_{}.hex", run_tag(epsilon, seed))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            fmt_float(r.epsilon_target),
            r.seed,
            fmt_float(r.mean_accuracy),
            fmt_float(r.mean_loss),
            fmt_float(r.epsilon_spent),
            r.gas_total,
            fmt_float(r.mean_latency_s),
            r.store_total_bytes
        );
    }
    out
}

/// Outcome of one `(epsilon, seed)` entry.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub epsilon: f64,
    pub seed: u64,
    pub outcome: std::result::Result<RunStats, String>,
}

#[derive(Clone, Debug)]
pub struct RunStats {
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub final_global_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_epsilon_spent: Option<f64>,
    pub noise_multiplier: Option<f64>,
    /// Gas of every transaction on the chain, coordinator included.
    pub total_gas: u64,
    /// `total_gas` priced at `gas_price_gwei`.
    pub total_cost: TxCost,
    pub metrics_path: PathBuf,
    pub chain_path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
    pub summary_path: PathBuf,
}

fn load_data(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &config.data_csv {
        Some(path) => data::load_csv(path),
        None => data::generate_synthetic(
            config.samples,
            config.classes,
            config.input_dim,
            config.class_separation,
            seed,
        ),
    }
}

/// Trains one sweep entry in memory.
pub fn train_entry(config: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<(TrainingRun, Ledger)> {
    let dataset = load_data(config, seed)?;
    let (train, test) = data::train_test_split(&dataset, config.train_fraction, seed)?;
    let partition = data::partition(&train, config.clients, config.dirichlet_beta, seed)?;
    let model = Mlp::new(MlpShape {
        input_dim: dataset.input_dim(),
        hidden: config.hidden,
        num_classes: dataset.num_classes(),
    })?;
    let mut ledger = Ledger::new(LedgerConfig {
        base_gas: config.base_gas,
        latency_mean_s: config.latency_mean_s,
        latency_jitter_s: config.latency_jitter_s,
        seed,
    })?;
    let store = if config.store_blobs {
        ContentStore::with_directory(config.output_dir.join(format!("blobs_{}", run_tag(epsilon, seed))))?
    } else {
        ContentStore::in_memory()
    };
    let priv_spec = PrivacySpec {
        epsilon_target: epsilon,
        delta: config.delta(),
        clip_c: config.clip,
        noise_split_rho: config.noise_split,
        rounds: config.training.global_rounds,
    };
    let training = TrainingConfig {
        seed,
        ..config.training.clone()
    };
    let run = run_training(
        TrainingData {
            model: &model,
            train: &train,
            test: &test,
            partition: &partition,
        },
        &priv_spec,
        &training,
        &mut ledger,
        &store,
    )?;
    Ok((run, ledger))
}

fn run_entry(config: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<RunStats> {
    let (run, ledger) = train_entry(config, epsilon, seed)?;
    let records: Vec<MetricsRecord> = run.rounds.iter().map(|r| r.metrics.clone()).collect();
    let metrics_path = config.output_dir.join(metrics_file_name(epsilon, seed));
    write_atomic(&metrics_path, metrics_csv(&records).as_bytes())?;
    let chain_path = config.output_dir.join(chain_file_name(epsilon, seed));
    write_atomic(&chain_path, ledger.export().as_bytes())?;
    let total_gas = ledger
        .blocks()
        .iter()
        .flat_map(|b| &b.transactions)
        .map(|tx| tx.gas_used)
        .sum();
    let last = run.rounds.last();
    Ok(RunStats {
        rounds: run.rounds.len(),
        final_accuracy: last.map(|r| r.metrics.mean_accuracy),
        final_global_accuracy: last.map(|r| r.global_accuracy),
        final_loss: last.map(|r| r.metrics.mean_loss),
        final_epsilon_spent: last.map(|r| r.metrics.epsilon_spent),
        total_gas,
        total_cost: tx_cost(total_gas, config.gas_price_gwei)?,
        noise_multiplier: run.calibration.map(|c| c.z),
        metrics_path,
        chain_path,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vs: Vec<f64> = values.flatten().collect();
    (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
}

fn opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

fn summary_csv(config: &ExperimentConfig, runs: &[RunSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for &eps in &config.epsilon_sweep {
        let entries: Vec<&RunSummary> = runs.iter().filter(|r| r.epsilon.to_bits() == eps.to_bits()).collect();
        let ok: Vec<&RunStats> = entries.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let failures: Vec<String> = entries
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        let rounds = ok.iter().map(|s| s.rounds).max().unwrap_or(0);
        let status = if !failures.is_empty() {
            format!("failed ({})", failures.join("; "))
        } else if rounds == 0 {
            "no rounds".to_string()
        } else {
            "ok".to_string()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_float(eps),
            ok.len(),
            failures.len(),
            rounds,
            opt_float(mean_of(ok.iter().map(|s| s.final_accuracy))),
            opt_float(mean_of(ok.iter().map(|s| s.final_global_accuracy))),
            opt_float(mean_of(ok.iter().map(|s| s.final_loss))),
            opt_float(mean_of(ok.iter().map(|s| s.final_epsilon_spent))),
            opt_float(mean_of(ok.iter().map(|s| s.noise_multiplier))),
            status.replace([',', '\n'], " ")
        );
    }
    out
}

/// Runs every `(epsilon, seed)` entry of the sweep on a pool of
/// `config.threads` workers and writes all output files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let entries: Vec<(f64, u64)> = config
        .epsilon_sweep
        .iter()
        .flat_map(|&e| config.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let runs: Vec<RunSummary> = pool.install(|| {
        entries
            .par_iter()
            .map(|&(epsilon, seed)| RunSummary {
                epsilon,
                seed,
                outcome: run_entry(config, epsilon, seed).map_err(|e| e.to_string()),
            })
            .collect()
    });
    let summary_path = config.output_dir.join("summary.csv");
    write_atomic(&summary_path, summary_csv(config, &runs).as_bytes())?;
    Ok(ExperimentReport { runs, summary_path })
}

/// Parsed row of a metrics file.
#[derive(Clone, Debug, PartialEq)]
struct MetricsRow {
    round: u32,
    epsilon: f64,
    accuracy: f64,
    loss: f64,
    gas_total: f64,
    latency: f64,
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("{} does not start with the metrics header", path.display()),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse {
                line: i + 2,
                message: format!("malformed metrics row in {}", path.display()),
            };
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                round: f[0].parse().map_err(|_| bad())?,
                epsilon: num(f[1])?,
                accuracy: num(f[3])?,
                loss: num(f[4])?,
                gas_total: num(f[6])?,
                latency: num(f[7])?,
            })
        })
        .collect()
}

/// Per round: number of seeds and the sums of the four plotted metrics.
type RoundSums = BTreeMap<u32, (usize, [f64; 4])>;

/// Paths of the plot files written by [`emit_plot_data`].
pub const PLOT_FILES: [&str; 4] = ["accuracy.csv", "loss.csv", "latency.csv", "gas.csv"];

/// Averages every metrics file in `metrics_dir` over seeds, per epsilon and
/// round, and writes `accuracy.csv`, `loss.csv`, `latency.csv` and `gas.csv`
/// (header [`PLOT_HEADER`]) into `out_dir`.
pub fn emit_plot_data(metrics_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(metrics_dir)
        .map_err(|e| Error::io(metrics_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!("no metrics files in {}", metrics_dir.display())));
    }

    // epsilon (ordered by value) -> round -> per-metric sums
    let mut groups: BTreeMap<u64, (f64, RoundSums)> = BTreeMap::new();
    for path in &files {
        for row in read_metrics(path)? {
            // positive floats order like their bit patterns
            let entry = groups
                .entry(row.epsilon.to_bits())
                .or_insert_with(|| (row.epsilon, BTreeMap::new()));
            let cell = entry.1.entry(row.round).or_insert((0, [0.0; 4]));
            cell.0 += 1;
            for (acc, v) in cell
                .1
                .iter_mut()
                .zip([row.accuracy, row.loss, row.latency, row.gas_total])
            {
                *acc += v;
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (m, name) in PLOT_FILES.iter().enumerate() {
        let mut out = String::from(PLOT_HEADER);
        out.push('\n');
        for (eps, rounds) in groups.values() {
            for (round, (n, sums)) in rounds {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_float(*eps),
                    round,
                    n,
                    fmt_float(sums[m] / *n as f64)
                );
            }
        }
        let path = out_dir.join(name);
        write_atomic(&path, out.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_has_nine_significant_digits() {
        assert_eq!(fmt_float(0.645), "6.45000000e-1");
        assert_eq!(fmt_float(443_040.0), "4.43040000e5");
        assert_eq!(fmt_float(0.645).parse::<f64>().unwrap(), 0.645);
    }

    #[test]
    fn config_text_parsing() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nrounds = 4\nepsilons = 1.0, 8\nseeds=3,4\naggregation = weighted\n")
            .unwrap();
        assert_eq!(c.training.global_rounds, 4);
        assert_eq!(c.epsilon_sweep, vec![1.0, 8.0]);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.training.aggregation, Aggregation::Weighted);
        assert!(c.apply_text("nonsense = 1").is_err());
        assert!(c.apply_text("rounds").is_err());
        assert!(c.apply_text("rounds = many").is_err());
    }

    #[test]
    fn default_delta_is_reciprocal_of_clients() {
        let c = ExperimentConfig {
            clients: 8,
            ..ExperimentConfig::default()
        };
        assert_eq!(c.delta(), 0.125);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig {
            epsilon_sweep: vec![1.0, -2.0],
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn plot_data_on_empty_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(dir.path(), &dir.path().join("plots")).is_err());
    }
}
