//! Multi-run experiments: configuration, seeded execution of the
//! multi-population engine and the single-population baseline, report
//! persistence and post-hoc analysis.
//!
//! Run `i` of both modes shares one data split, so per-run RMSE differences
//! are paired. Every random stream is derived from the master seed and the
//! run index, which makes serial and parallel schedules produce identical
//! reports apart from timing fields.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ahsam::{self, AbstractionRegistry, ActivationLog};
use crate::analysis::{self, ContributionBreakdown, ElasticityResult, Mechanism, PairedTestResult, Parsimony, RankSumResult, Summary};
use crate::data::{self, Dataset, PartitionScheme, SplitSpec};
use crate::ensemble::{self, EnsembleModel};
use crate::error::{Error, Result};
use crate::evolution::{self, EvolutionConfig, Population};
use crate::exprtree::TerminalSet;
use crate::linfit;

/// Variables probed for one-point elasticities.
pub const ELASTICITY_VARIABLES: [&str; 4] = ["Vf", "fc", "rho", "a_over_d"];

/// Expected sign of each probed elasticity on the shear problem.
pub const EXPECTED_SIGNS: [f64; 4] = [1.0, 1.0, 1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Digsp,
    Bgp,
}

impl RunMode {
    fn salt(self) -> u64 {
        match self {
            RunMode::Digsp => 0x4449_4753_5000_0001,
            RunMode::Bgp => 0x4247_5000_0000_0002,
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Digsp => "digsp",
            RunMode::Bgp => "bgp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Digsp,
    Bgp,
    Both,
}

impl Mode {
    pub fn run_modes(self) -> Vec<RunMode> {
        match self {
            Mode::Digsp => vec![RunMode::Digsp],
            Mode::Bgp => vec![RunMode::Bgp],
            Mode::Both => vec![RunMode::Digsp, RunMode::Bgp],
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "digsp" => Ok(Mode::Digsp),
            "bgp" => Ok(Mode::Bgp),
            "both" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected digsp, bgp or both)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Digsp => "digsp",
            Mode::Bgp => "bgp",
            Mode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Csv(PathBuf),
    Synth { n: usize, noise_sd: f64, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Csv(path) => data::load_csv(path),
            DatasetSource::Synth { n, noise_sd, seed } => data::synth_superposition(*n, *noise_sd, *seed),
        }
    }
}

/// Everything a `run` needs. Unset keys keep the engine defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSource,
    pub partition: String,
    /// Engine settings shared by both modes; `genes_per_individual` and
    /// `seed` are overridden per mode and run.
    pub evolution: EvolutionConfig,
    pub genes_digsp: usize,
    pub genes_bgp: usize,
    /// Abstraction in the multi-population mode; always off for the baseline.
    pub ahsam: bool,
    pub n_runs: usize,
    pub split: (f64, f64, f64),
    /// `None` keeps reports in memory only.
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
    pub parallel: bool,
    pub epsilon: f64,
    pub n_boot: usize,
    pub ci_level: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Both,
            dataset: DatasetSource::Synth {
                n: 213,
                noise_sd: data::SYNTH_DEFAULT_NOISE_SD,
                seed: 0,
            },
            partition: "full".into(),
            evolution: EvolutionConfig::default(),
            genes_digsp: 3,
            genes_bgp: 9,
            ahsam: true,
            n_runs: 30,
            split: (0.65, 0.10, 0.25),
            output_dir: None,
            master_seed: 2025,
            parallel: true,
            epsilon: 0.01,
            n_boot: 10_000,
            ci_level: 0.95,
        }
    }
}

/// Configuration keys with their meaning, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("mode", "digsp, bgp or both"),
    ("dataset", "CSV path, or `synth` for the superposition benchmark"),
    ("synth_n", "rows of the synthetic dataset"),
    ("synth_noise", "noise SD of the synthetic dataset"),
    ("synth_seed", "seed of the synthetic dataset"),
    ("partition", "feature partition scheme: full or minimal"),
    ("population_size", "individuals per population"),
    ("max_generations", "generation cap per run"),
    ("stall_generations", "generations without ensemble improvement before stopping"),
    ("ahsam_trigger", "per-population stagnation that arms abstraction"),
    ("genes_digsp", "genes per individual, multi-population mode"),
    ("genes_bgp", "genes per individual, baseline"),
    ("max_tree_depth", "maximum gene depth"),
    ("init_depth_min", "smallest initial depth"),
    ("init_depth_max", "largest initial depth"),
    ("p_crossover", "crossover probability"),
    ("p_mutation", "mutation probability"),
    ("p_reproduction", "reproduction probability"),
    ("constant_min", "lower bound of random constants"),
    ("constant_max", "upper bound of random constants"),
    ("k_folds", "cross-validation folds for isolated fitness"),
    ("tournament_size", "tournament size"),
    ("lambda1", "L1 penalty on standardized columns"),
    ("lambda2", "L2 penalty on standardized columns"),
    ("top_m", "ensemble members per population"),
    ("alpha", "significance level of the abstraction filter"),
    ("max_abstractions", "abstractions accepted per activation"),
    ("prune_rounds", "pruning rounds per candidate abstraction"),
    ("ahsam", "enable abstraction in multi-population mode (true/false)"),
    ("n_runs", "independent runs per mode"),
    ("train_frac", "training fraction"),
    ("val_frac", "validation fraction"),
    ("test_frac", "test fraction"),
    ("output_dir", "report directory; empty keeps reports in memory"),
    ("master_seed", "seed from which every run seed is derived"),
    ("parallel", "execute runs in parallel (true/false)"),
    ("epsilon", "relative perturbation for elasticities"),
    ("n_boot", "bootstrap resamples"),
    ("ci_level", "bootstrap confidence level"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let evo = &mut self.evolution;
        match key {
            "mode" => self.mode = value.parse()?,
            "dataset" => {
                self.dataset = if value.eq_ignore_ascii_case("synth") {
                    match &self.dataset {
                        DatasetSource::Synth { .. } => self.dataset.clone(),
                        DatasetSource::Csv(_) => DatasetSource::Synth {
                            n: 213,
                            noise_sd: data::SYNTH_DEFAULT_NOISE_SD,
                            seed: 0,
                        },
                    }
                } else {
                    DatasetSource::Csv(PathBuf::from(value))
                }
            }
            "synth_n" | "synth_noise" | "synth_seed" => match &mut self.dataset {
                DatasetSource::Synth { n, noise_sd, seed } => match key {
                    "synth_n" => *n = parse_value(key, value)?,
                    "synth_noise" => *noise_sd = parse_value(key, value)?,
                    _ => *seed = parse_value(key, value)?,
                },
                DatasetSource::Csv(_) => {
                    return Err(Error::Config(format!("{key} requires dataset = synth")));
                }
            },
            "partition" => {
                PartitionScheme::by_name(value)?;
                self.partition = value.to_string();
            }
            "population_size" => evo.population_size = parse_value(key, value)?,
            "max_generations" => evo.max_generations = parse_value(key, value)?,
            "stall_generations" => evo.stall_generations = parse_value(key, value)?,
            "ahsam_trigger" => evo.ahsam_trigger = parse_value(key, value)?,
            "genes_digsp" => self.genes_digsp = parse_value(key, value)?,
            "genes_bgp" => self.genes_bgp = parse_value(key, value)?,
            "max_tree_depth" => evo.max_tree_depth = parse_value(key, value)?,
            "init_depth_min" => evo.init_depth_range.0 = parse_value(key, value)?,
            "init_depth_max" => evo.init_depth_range.1 = parse_value(key, value)?,
            "p_crossover" => evo.p_crossover = parse_value(key, value)?,
            "p_mutation" => evo.p_mutation = parse_value(key, value)?,
            "p_reproduction" => evo.p_reproduction = parse_value(key, value)?,
            "constant_min" => evo.constant_range.0 = parse_value(key, value)?,
            "constant_max" => evo.constant_range.1 = parse_value(key, value)?,
            "k_folds" => evo.k_folds = parse_value(key, value)?,
            "tournament_size" => evo.tournament_size = parse_value(key, value)?,
            "lambda1" => evo.lambda1 = parse_value(key, value)?,
            "lambda2" => evo.lambda2 = parse_value(key, value)?,
            "top_m" => evo.top_m = parse_value(key, value)?,
            "alpha" => evo.alpha = parse_value(key, value)?,
            "max_abstractions" => evo.max_abstractions_per_activation = parse_value(key, value)?,
            "prune_rounds" => evo.prune_rounds = parse_value(key, value)?,
            "ahsam" => self.ahsam = parse_value(key, value)?,
            "n_runs" => self.n_runs = parse_value(key, value)?,
            "train_frac" => self.split.0 = parse_value(key, value)?,
            "val_frac" => self.split.1 = parse_value(key, value)?,
            "test_frac" => self.split.2 = parse_value(key, value)?,
            "output_dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "master_seed" => self.master_seed = parse_value(key, value)?,
            "parallel" => self.parallel = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "n_boot" => self.n_boot = parse_value(key, value)?,
            "ci_level" => self.ci_level = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, `None` for keys that do not apply.
    pub fn get(&self, key: &str) -> Option<String> {
        let evo = &self.evolution;
        let synth = match &self.dataset {
            DatasetSource::Synth { n, noise_sd, seed } => Some((*n, *noise_sd, *seed)),
            DatasetSource::Csv(_) => None,
        };
        Some(match key {
            "mode" => self.mode.to_string(),
            "dataset" => match &self.dataset {
                DatasetSource::Csv(p) => p.display().to_string(),
                DatasetSource::Synth { .. } => "synth".into(),
            },
            "synth_n" => synth?.0.to_string(),
            "synth_noise" => synth?.1.to_string(),
            "synth_seed" => synth?.2.to_string(),
            "partition" => self.partition.clone(),
            "population_size" => evo.population_size.to_string(),
            "max_generations" => evo.max_generations.to_string(),
            "stall_generations" => evo.stall_generations.to_string(),
            "ahsam_trigger" => evo.ahsam_trigger.to_string(),
            "genes_digsp" => self.genes_digsp.to_string(),
            "genes_bgp" => self.genes_bgp.to_string(),
            "max_tree_depth" => evo.max_tree_depth.to_string(),
            "init_depth_min" => evo.init_depth_range.0.to_string(),
            "init_depth_max" => evo.init_depth_range.1.to_string(),
            "p_crossover" => evo.p_crossover.to_string(),
            "p_mutation" => evo.p_mutation.to_string(),
            "p_reproduction" => evo.p_reproduction.to_string(),
            "constant_min" => evo.constant_range.0.to_string(),
            "constant_max" => evo.constant_range.1.to_string(),
            "k_folds" => evo.k_folds.to_string(),
            "tournament_size" => evo.tournament_size.to_string(),
            "lambda1" => evo.lambda1.to_string(),
            "lambda2" => evo.lambda2.to_string(),
            "top_m" => evo.top_m.to_string(),
            "alpha" => evo.alpha.to_string(),
            "max_abstractions" => evo.max_abstractions_per_activation.to_string(),
            "prune_rounds" => evo.prune_rounds.to_string(),
            "ahsam" => self.ahsam.to_string(),
            "n_runs" => self.n_runs.to_string(),
            "train_frac" => self.split.0.to_string(),
            "val_frac" => self.split.1.to_string(),
            "test_frac" => self.split.2.to_string(),
            "output_dir" => self
                .output_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "master_seed" => self.master_seed.to_string(),
            "parallel" => self.parallel.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "n_boot" => self.n_boot.to_string(),
            "ci_level" => self.ci_level.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines; `#` starts a comment. Keys apply in order
    /// on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Text form that [`ExperimentConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            if let Some(v) = self.get(key) {
                out.push_str(&format!("# {doc}\n{key} = {v}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.evolution_for(RunMode::Digsp, 0).validate()?;
        self.evolution_for(RunMode::Bgp, 0).validate()?;
        PartitionScheme::by_name(&self.partition)?.validate()?;
        SplitSpec::new(self.split.0, self.split.1, self.split.2, 0)?;
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.n_boot == 0 || !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("n_boot must be >= 1 and ci_level in (0, 1)".into()));
        }
        Ok(())
    }

    /// Engine configuration of one run.
    pub fn evolution_for(&self, mode: RunMode, run_index: usize) -> EvolutionConfig {
        EvolutionConfig {
            genes_per_individual: match mode {
                RunMode::Digsp => self.genes_digsp,
                RunMode::Bgp => self.genes_bgp,
            },
            seed: evolution_seed(self.master_seed, run_index, mode),
            ..self.evolution.clone()
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Data-split seed of run `run_index`; shared by both modes.
pub fn split_seed(master: u64, run_index: usize) -> u64 {
    splitmix64(splitmix64(master) ^ run_index as u64)
}

/// Evolution seed of one run; distinct per mode.
pub fn evolution_seed(master: u64, run_index: usize, mode: RunMode) -> u64 {
    splitmix64(split_seed(master, run_index) ^ mode.salt())
}

/// Metrics of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub test_rmse: f64,
    pub generations: usize,
    /// Generation at which the reported model was built.
    pub best_generation: usize,
    pub ahsam_log: Vec<ActivationLog>,
    /// Wall-clock time of the evolutionary loop only.
    pub wall_seconds: f64,
    pub parsimony: Parsimony,
    /// Fully expanded closed form over canonical feature names.
    pub model_text: String,
    pub model: EnsembleModel,
    /// Ensemble validation RMSE after initialization and each generation.
    pub ensemble_history: Vec<f64>,
    /// Per-feature medians of the whole dataset.
    pub x_median: Vec<f64>,
}

/// Self-contained record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub mode: RunMode,
    pub split_seed: u64,
    pub evolution_seed: u64,
    pub feature_names: Vec<String>,
    pub result: Option<RunResult>,
    pub failure: Option<String>,
}

impl RunReport {
    pub fn file_name(&self) -> String {
        format!("{}_{:03}.json", self.mode, self.run_index)
    }

    /// Same report with timing zeroed, for schedule-independent comparison.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        if let Some(res) = r.result.as_mut() {
            res.wall_seconds = 0.0;
        }
        r
    }
}

fn populations_for(
    cfg: &ExperimentConfig,
    mode: RunMode,
    evo: &EvolutionConfig,
    train: &Dataset,
    registry: &AbstractionRegistry,
) -> Result<(Vec<Population>, Vec<ChaCha8Rng>)> {
    let scheme = match mode {
        RunMode::Digsp => PartitionScheme::by_name(&cfg.partition)?,
        RunMode::Bgp => data::single_partition(),
    };
    scheme.validate()?;
    let groups = scheme.group_indices();
    let mut rngs: Vec<ChaCha8Rng> = (0..groups.len())
        .map(|p| ChaCha8Rng::seed_from_u64(splitmix64(evo.seed.wrapping_add(p as u64))))
        .collect();
    let pops = groups
        .into_iter()
        .zip(rngs.iter_mut())
        .map(|((name, vars), rng)| {
            let terms = TerminalSet::new(vars, evo.constant_range)?;
            Population::initialize(name, terms, evo, train, registry, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pops, rngs))
}

/// Execute one run of one mode on `ds`.
pub fn run_single(cfg: &ExperimentConfig, ds: &Dataset, run_index: usize, mode: RunMode) -> RunReport {
    let split = split_seed(cfg.master_seed, run_index);
    let evo = cfg.evolution_for(mode, run_index);
    let mut report = RunReport {
        run_index,
        mode,
        split_seed: split,
        evolution_seed: evo.seed,
        feature_names: data::feature_names(),
        result: None,
        failure: None,
    };
    match execute(cfg, ds, mode, split, &evo) {
        Ok(res) => report.result = Some(res),
        Err(e) => report.failure = Some(e.to_string()),
    }
    report
}

fn execute(cfg: &ExperimentConfig, ds: &Dataset, mode: RunMode, split: u64, evo: &EvolutionConfig) -> Result<RunResult> {
    evo.validate()?;
    let spec = SplitSpec::new(cfg.split.0, cfg.split.1, cfg.split.2, split)?;
    let (train, val, test) = data::split(ds, &spec)?;
    let net = evo.net();
    let use_ahsam = mode == RunMode::Digsp && cfg.ahsam;

    let start = Instant::now();
    let mut registry = AbstractionRegistry::default();
    let (mut pops, mut rngs) = populations_for(cfg, mode, evo, &train, &registry)?;
    let mut best = ensemble::build_ensemble(&pops, evo.top_m, &train, &val, &registry, &net)?;
    let mut best_generation = 0;
    let mut incumbent = best.val_rmse;
    let mut history = vec![best.val_rmse];
    let mut stall = 0;
    let mut activations = Vec::new();
    let mut generations = 0;

    for gen in 1..=evo.max_generations {
        pops.par_iter_mut()
            .zip(rngs.par_iter_mut())
            .try_for_each(|(pop, rng)| pop.advance(evo, &train, &registry, rng))?;
        generations = gen;
        let activated = use_ahsam && ahsam::should_trigger(&pops, evo.ahsam_trigger);
        if activated {
            activations.push(ahsam::activate(&mut pops, &mut registry, &train, &val, evo, gen)?);
        }
        let model = ensemble::build_ensemble(&pops, evo.top_m, &train, &val, &registry, &net)?;
        history.push(model.val_rmse);
        if evolution::improves(incumbent, model.val_rmse) {
            incumbent = model.val_rmse;
            stall = 0;
        } else {
            stall += 1;
        }
        if model.val_rmse < best.val_rmse {
            best = model;
            best_generation = gen;
        }
        if activated {
            stall = 0;
        }
        let may_stop = !use_ahsam || !activations.is_empty();
        if may_stop && stall >= evo.stall_generations {
            break;
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();

    let test_rmse = linfit::rmse(&best.predict(&test)?, test.target())?;
    let (closed, _) = analysis::closed_form(&best)?;
    Ok(RunResult {
        train_rmse: best.train_rmse,
        val_rmse: best.val_rmse,
        test_rmse,
        generations,
        best_generation,
        ahsam_log: activations,
        wall_seconds,
        parsimony: analysis::parsimony(&best)?,
        model_text: closed.to_infix(&data::feature_names())?,
        model: best,
        ensemble_history: history,
        x_median: ds.feature_medians(),
    })
}

/// Serialized writes of run reports into `<dir>/runs/`.
pub struct ReportWriter {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl ReportWriter {
    pub fn create<P: AsRef<Path>>(dir: P) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("runs"))?;
        Ok(ReportWriter { dir, lock: Mutex::new(()) })
    }

    pub fn write(&self, report: &RunReport) -> Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.dir.join("runs").join(report.file_name());
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(report)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// All runs of all configured modes, ordered by run index then mode. Each
/// report is persisted as soon as its run finishes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    run_experiment_on(cfg, &ds)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let writer = match &cfg.output_dir {
        Some(dir) => {
            let w = ReportWriter::create(dir)?;
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            Some(w)
        }
        None => None,
    };
    let jobs: Vec<(usize, RunMode)> = (0..cfg.n_runs)
        .flat_map(|i| cfg.mode.run_modes().into_iter().map(move |m| (i, m)))
        .collect();
    let job = |&(i, m): &(usize, RunMode)| -> Result<RunReport> {
        let report = run_single(cfg, ds, i, m);
        if let Some(w) = &writer {
            w.write(&report)?;
        }
        Ok(report)
    };
    let mut reports = if cfg.parallel {
        jobs.par_iter().map(job).collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter().map(job).collect::<Result<Vec<_>>>()?
    };
    reports.sort_by_key(|r| (r.run_index, r.mode));
    if let Some(dir) = &cfg.output_dir {
        write_summary_csv(&reports, dir.join("summary.csv"))?;
    }
    Ok(reports)
}

/// Read every `*.json` report under `<dir>/runs` (or `dir` itself).
pub fn load_reports<P: AsRef<Path>>(dir: P) -> Result<Vec<RunReport>> {
    let dir = dir.as_ref();
    let runs = if dir.join("runs").is_dir() { dir.join("runs") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut reports = paths
        .iter()
        .map(|p| -> Result<RunReport> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by_key(|r| (r.run_index, r.mode));
    Ok(reports)
}

pub fn write_summary_csv<P: AsRef<Path>>(reports: &[RunReport], path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_index",
        "mode",
        "split_seed",
        "status",
        "train_rmse",
        "val_rmse",
        "test_rmse",
        "generations",
        "activations",
        "wall_seconds",
        "n_terms",
        "tree_size_nodes",
        "operator_count",
    ])?;
    for r in reports {
        let mut row = vec![r.run_index.to_string(), r.mode.to_string(), r.split_seed.to_string()];
        match &r.result {
            Some(res) => {
                row.push("ok".into());
                row.extend([
                    res.train_rmse.to_string(),
                    res.val_rmse.to_string(),
                    res.test_rmse.to_string(),
                    res.generations.to_string(),
                    res.ahsam_log.len().to_string(),
                    format!("{:.3}", res.wall_seconds),
                    res.parsimony.n_terms.to_string(),
                    res.parsimony.tree_size_nodes.to_string(),
                    res.parsimony.operator_count.to_string(),
                ]);
            }
            None => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 9));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Post-hoc settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    pub epsilon: f64,
    pub n_boot: usize,
    pub ci_level: f64,
    pub seed: u64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            epsilon: 0.01,
            n_boot: 10_000,
            ci_level: 0.95,
            seed: 0,
        }
    }
}

impl From<&ExperimentConfig> for AnalysisSettings {
    fn from(cfg: &ExperimentConfig) -> Self {
        AnalysisSettings {
            epsilon: cfg.epsilon,
            n_boot: cfg.n_boot,
            ci_level: cfg.ci_level,
            seed: cfg.master_seed,
        }
    }
}

/// Mean and SD of per-run mechanism contributions and shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionSummary {
    pub per_run: Vec<ContributionBreakdown>,
    pub mean_contribution: BTreeMap<Mechanism, f64>,
    pub sd_contribution: BTreeMap<Mechanism, f64>,
    pub mean_share: BTreeMap<Mechanism, f64>,
    pub sd_share: BTreeMap<Mechanism, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub mode: RunMode,
    pub n_completed: usize,
    pub n_failed: usize,
    pub train_rmse: Summary,
    pub val_rmse: Summary,
    pub test_rmse: Summary,
    pub n_terms: Summary,
    pub tree_size_nodes: Summary,
    pub operator_count: Summary,
    pub generations: Summary,
    pub activations: Summary,
    pub wall_seconds: Summary,
    pub contributions: ContributionSummary,
    pub elasticities: Vec<ElasticityResult>,
}

/// Paired comparison on matched run indices; positive differences favor
/// the multi-population engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedAnalysis {
    pub run_indices: Vec<usize>,
    pub test: PairedTestResult,
    pub mean_delta: f64,
    pub median_delta: f64,
    pub bootstrap_ci: (f64, f64),
    pub ci_level: f64,
    /// Rank-sum test on training RMSEs.
    pub train_rank_sum: RankSumResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub settings: AnalysisSettings,
    pub notices: Vec<String>,
    pub modes: Vec<ModeAnalysis>,
    pub paired: Option<PairedAnalysis>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    match analysis::summarize(values) {
        Ok(s) => (s.mean, s.sd),
        Err(_) => (0.0, 0.0),
    }
}

fn summarize_contributions(per_run: Vec<ContributionBreakdown>) -> ContributionSummary {
    let mut out = ContributionSummary {
        per_run: Vec::new(),
        mean_contribution: BTreeMap::new(),
        sd_contribution: BTreeMap::new(),
        mean_share: BTreeMap::new(),
        sd_share: BTreeMap::new(),
    };
    for m in Mechanism::ALL {
        let c: Vec<f64> = per_run.iter().map(|b| b.contributions[&m]).collect();
        let s: Vec<f64> = per_run.iter().map(|b| b.shares[&m]).collect();
        let (cm, cs) = mean_sd(&c);
        let (sm, ss) = mean_sd(&s);
        out.mean_contribution.insert(m, cm);
        out.sd_contribution.insert(m, cs);
        out.mean_share.insert(m, sm);
        out.sd_share.insert(m, ss);
    }
    out.per_run = per_run;
    out
}

fn analyze_mode(mode: RunMode, reports: &[&RunReport], settings: &AnalysisSettings, notices: &mut Vec<String>) -> Result<Option<ModeAnalysis>> {
    let done: Vec<&RunResult> = reports.iter().filter_map(|r| r.result.as_ref()).collect();
    let n_failed = reports.len() - done.len();
    if n_failed > 0 {
        notices.push(format!("{mode}: {n_failed} failed run(s) excluded"));
    }
    if done.is_empty() {
        notices.push(format!("{mode}: no completed runs"));
        return Ok(None);
    }
    let col = |f: &dyn Fn(&RunResult) -> f64| -> Result<Summary> {
        analysis::summarize(&done.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    let mut contributions = Vec::new();
    for (r, res) in reports.iter().filter_map(|r| r.result.as_ref().map(|res| (r, res))) {
        match analysis::mechanism_contributions(&res.model, &res.x_median) {
            Ok(c) => contributions.push(c),
            Err(e) => notices.push(format!("{mode} run {}: contributions skipped ({e})", r.run_index)),
        }
    }
    let mut elasticities = Vec::new();
    for var in ELASTICITY_VARIABLES {
        let idx = data::feature_index(var).expect("probed variable is a feature");
        let mut values = Vec::new();
        for (r, res) in reports.iter().filter_map(|r| r.result.as_ref().map(|res| (r, res))) {
            match analysis::elasticity(&res.model, &res.x_median, idx, settings.epsilon) {
                Ok(s) => values.push(s),
                Err(e) => notices.push(format!("{mode} run {}: elasticity of {var} skipped ({e})", r.run_index)),
            }
        }
        if !values.is_empty() {
            elasticities.push(ElasticityResult::from_runs(var, settings.epsilon, values)?);
        }
    }
    Ok(Some(ModeAnalysis {
        mode,
        n_completed: done.len(),
        n_failed,
        train_rmse: col(&|r| r.train_rmse)?,
        val_rmse: col(&|r| r.val_rmse)?,
        test_rmse: col(&|r| r.test_rmse)?,
        n_terms: col(&|r| r.parsimony.n_terms as f64)?,
        tree_size_nodes: col(&|r| r.parsimony.tree_size_nodes as f64)?,
        operator_count: col(&|r| r.parsimony.operator_count as f64)?,
        generations: col(&|r| r.generations as f64)?,
        activations: col(&|r| r.ahsam_log.len() as f64)?,
        wall_seconds: col(&|r| r.wall_seconds)?,
        contributions: summarize_contributions(contributions),
        elasticities,
    }))
}

/// Summaries per mode, and paired tests when both modes are present.
pub fn analyze(reports: &[RunReport], settings: &AnalysisSettings) -> Result<AnalysisReport> {
    let mut notices = Vec::new();
    let mut modes = Vec::new();
    for mode in [RunMode::Digsp, RunMode::Bgp] {
        let of_mode: Vec<&RunReport> = reports.iter().filter(|r| r.mode == mode).collect();
        if of_mode.is_empty() {
            notices.push(format!("no {mode} reports; paired tests skipped"));
            continue;
        }
        if let Some(m) = analyze_mode(mode, &of_mode, settings, &mut notices)? {
            modes.push(m);
        }
    }

    let by_run = |mode: RunMode| -> BTreeMap<usize, &RunResult> {
        reports
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.result.as_ref().map(|res| (r.run_index, res)))
            .collect()
    };
    let (digsp, bgp) = (by_run(RunMode::Digsp), by_run(RunMode::Bgp));
    let matched: Vec<usize> = digsp.keys().filter(|i| bgp.contains_key(i)).copied().collect();
    let mut paired = None;
    if !digsp.is_empty() && !bgp.is_empty() {
        let deltas: Vec<f64> = matched.iter().map(|i| bgp[i].test_rmse - digsp[i].test_rmse).collect();
        match analysis::wilcoxon_signed_rank(&deltas, analysis::Alternative::Greater) {
            Ok(test) => {
                let s = analysis::summarize(&deltas)?;
                let ci = if deltas.len() >= 2 {
                    analysis::bootstrap_ci_mean(&deltas, settings.n_boot, settings.ci_level, settings.seed)?
                } else {
                    (s.mean, s.mean)
                };
                let train_d: Vec<f64> = digsp.values().map(|r| r.train_rmse).collect();
                let train_b: Vec<f64> = bgp.values().map(|r| r.train_rmse).collect();
                paired = Some(PairedAnalysis {
                    run_indices: matched.clone(),
                    test,
                    mean_delta: s.mean,
                    median_delta: s.median,
                    bootstrap_ci: ci,
                    ci_level: settings.ci_level,
                    train_rank_sum: analysis::wilcoxon_rank_sum(&train_d, &train_b)?,
                });
            }
            Err(e) => notices.push(format!("paired tests skipped: {e}")),
        }
    }
    Ok(AnalysisReport {
        settings: *settings,
        notices,
        modes,
        paired,
    })
}
