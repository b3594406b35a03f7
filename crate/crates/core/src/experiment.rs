//! Config-driven experiments: multi-seed runs, traces, summaries,
//! checkpoints and checkpoint diagnostics.
//!
//! Configs are TOML with one table per section:
//!
//! ```toml
//! [scenario]
//! response = "linear"
//!
//! [optimizer]
//! kind = "sgda"
//! batch_size = 256
//! ```
//!
//! Everything except `scenario.response` has a default. The resolved
//! config is echoed as JSON in every summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{diagnostics_report, DiagnosticsReport, GmmGame, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::metrics::{best_validation, trace_from_csv, trace_to_csv, MetricsRecord};
use crate::nn::{init_params, Activation, InitScheme, MlpSpec, ParamVector};
use crate::objective::TildeSchedule;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::runtime::{run_federation, Checkpoint, EvalSets, FedConfig};
use crate::scenario::{
    dirichlet_partition, generate, standardize_y, ClientShard, NoiseReading, ResponseKind,
    ScenarioSpec,
};
use crate::seeds::derive_seed;

/// Learning rates searched by `--grid`.
pub const GRID_LR: [f64; 4] = [1e-4, 2.5e-4, 5e-4, 1e-3];
/// Step-size ratios searched by `--grid`.
pub const GRID_GAMMA: [f64; 3] = [1.0, 2.0, 5.0];

fn default_n() -> usize {
    20_000
}
fn default_clients() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.3
}
fn default_local_steps() -> usize {
    5
}
fn default_rounds() -> usize {
    2000
}
fn default_eval_every() -> usize {
    10
}
fn default_lr() -> f64 {
    5e-4
}
fn default_gamma() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_g_widths() -> Vec<usize> {
    vec![1, 20, 3, 1]
}
fn default_f_widths() -> Vec<usize> {
    vec![2, 20, 1]
}
fn default_slope() -> f64 {
    0.1
}
fn default_n_seeds() -> usize {
    5
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub response: ResponseKind,
    #[serde(default = "default_n")]
    pub n_train: usize,
    #[serde(default = "default_n")]
    pub n_val: usize,
    #[serde(default = "default_n")]
    pub n_test: usize,
    /// Whether the second parameter of `N(0, 0.1)` is a variance or a
    /// standard deviation.
    #[serde(default)]
    pub noise_reading: NoiseReading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_clients")]
    pub n_clients: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_clients: default_clients(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TildeMode {
    #[default]
    PrevRound,
    Frozen,
    EveryK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub tilde: TildeMode,
    /// Refresh period for `tilde = "every_k"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilde_every: Option<usize>,
    #[serde(default)]
    pub persist_opt_state: bool,
    #[serde(default)]
    pub parallel: bool,
}

impl Default for FedSection {
    fn default() -> Self {
        Self {
            local_steps: default_local_steps(),
            rounds: default_rounds(),
            tilde: TildeMode::PrevRound,
            tilde_every: None,
            persist_opt_state: false,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Gda,
    Sgda,
    Oadam,
}

impl std::str::FromStr for OptimizerName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gda" => Ok(Self::Gda),
            "sgda" => Ok(Self::Sgda),
            "oadam" => Ok(Self::Oadam),
            _ => Err(format!("unknown optimizer `{s}` (gda, sgda, oadam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub kind: OptimizerName,
    /// Step size of the `tau` player; `theta` uses `lr_tau / gamma`.
    #[serde(default = "default_lr")]
    pub lr_tau: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Gda,
            lr_tau: default_lr(),
            gamma: default_gamma(),
            batch_size: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_g_widths")]
    pub g_widths: Vec<usize>,
    #[serde(default = "default_f_widths")]
    pub f_widths: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            g_widths: default_g_widths(),
            f_widths: default_f_widths(),
            leaky_slope: default_slope(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Checkpoint with the lowest validation MSE among logged rounds.
    #[default]
    BestValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_every")]
    pub every: usize,
    #[serde(default)]
    pub selection: Selection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: default_eval_every(),
            selection: Selection::BestValidation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// Seed of the first run; run `k` uses `seed + k`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Write the best and final checkpoint of each run.
    #[serde(default = "yes")]
    pub checkpoints: bool,
}

fn yes() -> bool {
    true
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_seeds: default_n_seeds(),
            seed: 0,
            output_dir: default_out(),
            checkpoints: true,
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub fed: FedSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    /// Defaults everywhere, with the given response.
    pub fn with_response(response: ResponseKind) -> Self {
        Self {
            scenario: ScenarioSection {
                response,
                n_train: default_n(),
                n_val: default_n(),
                n_test: default_n(),
                noise_reading: NoiseReading::Variance,
            },
            data: DataSection::default(),
            fed: FedSection::default(),
            optimizer: OptimizerSection::default(),
            model: ModelSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<toml>", e.message()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<toml>", e.to_string()))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n_seeds == 0 {
            return Err(Error::config("run.n_seeds", "must be at least 1"));
        }
        if self.eval.every == 0 {
            return Err(Error::config("eval.every", "must be at least 1"));
        }
        if !(self.data.alpha > 0.0 && self.data.alpha.is_finite()) {
            return Err(Error::config("data.alpha", "must be positive"));
        }
        if self.fed.tilde == TildeMode::EveryK && self.fed.tilde_every.is_none() {
            return Err(Error::config("fed.tilde_every", "required when fed.tilde = \"every_k\""));
        }
        self.scenario_spec(0).validate()?;
        self.fed_config(0)?.validate()?;
        self.g_spec()?;
        self.f_spec()?;
        Ok(())
    }

    pub fn scenario_spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            response: self.scenario.response,
            n_train: self.scenario.n_train,
            n_val: self.scenario.n_val,
            n_test: self.scenario.n_test,
            seed,
            noise_second_param: self.scenario.noise_reading,
        }
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let o = &self.optimizer;
        let kind = match o.kind {
            OptimizerName::Gda => OptimizerKind::Gda,
            OptimizerName::Sgda => OptimizerKind::Sgda {
                batch_size: o
                    .batch_size
                    .ok_or_else(|| Error::config("optimizer.batch_size", "required for sgda"))?,
            },
            OptimizerName::Oadam => OptimizerKind::OAdam {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
        };
        OptimizerConfig::with_ratio(kind, o.lr_tau, o.gamma)
    }

    pub fn tilde_schedule(&self) -> TildeSchedule {
        match self.fed.tilde {
            TildeMode::PrevRound => TildeSchedule::PrevRound,
            TildeMode::Frozen => TildeSchedule::Frozen,
            TildeMode::EveryK => TildeSchedule::EveryK(self.fed.tilde_every.unwrap_or(1)),
        }
    }

    pub fn fed_config(&self, seed: u64) -> Result<FedConfig> {
        Ok(FedConfig {
            n_clients: self.data.n_clients,
            local_steps: self.fed.local_steps,
            rounds: self.fed.rounds,
            optimizer: self.optimizer_config()?,
            tilde_schedule: self.tilde_schedule(),
            seed,
            eval_every: self.eval.every,
            persist_opt_state: self.fed.persist_opt_state,
            parallel: self.fed.parallel,
        })
    }

    fn activation(&self) -> Activation {
        Activation::LeakyRelu {
            slope: self.model.leaky_slope,
        }
    }

    pub fn g_spec(&self) -> Result<Arc<MlpSpec>> {
        let spec = MlpSpec::new(self.model.g_widths.clone(), self.activation())
            .map_err(|e| Error::config("model.g_widths", e.to_string()))?;
        if spec.input_width() != 1 || spec.output_width() != 1 {
            return Err(Error::config("model.g_widths", "must start and end with 1"));
        }
        Ok(Arc::new(spec))
    }

    pub fn f_spec(&self) -> Result<Arc<MlpSpec>> {
        let spec = MlpSpec::new(self.model.f_widths.clone(), self.activation())
            .map_err(|e| Error::config("model.f_widths", e.to_string()))?;
        if spec.input_width() != 2 || spec.output_width() != 1 {
            return Err(Error::config("model.f_widths", "must start with 2 and end with 1"));
        }
        Ok(Arc::new(spec))
    }

    /// Root seed of run `k`.
    pub fn run_seed(&self, k: usize) -> u64 {
        self.run.seed.wrapping_add(k as u64)
    }
}

/// Sub-seeds of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub partition: u64,
    pub partition_val: u64,
    pub partition_test: u64,
    pub init_g: u64,
    pub init_f: u64,
    pub fed: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, &[1]),
            partition: derive_seed(seed, &[2]),
            init_g: derive_seed(seed, &[3]),
            init_f: derive_seed(seed, &[4]),
            fed: derive_seed(seed, &[5]),
            partition_val: derive_seed(seed, &[2, 1]),
            partition_test: derive_seed(seed, &[2, 2]),
        }
    }
}

/// Every modelling choice a run depends on that is not a plain
/// hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub noise_reading: NoiseReading,
    pub tilde_schedule: TildeSchedule,
    pub persist_opt_state: bool,
    pub init: InitScheme,
    pub standardization: String,
    pub partitioned_split: String,
    pub selection: Selection,
    pub summary_std: String,
    pub seed_derivation: String,
}

impl DesignRecord {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            noise_reading: cfg.scenario.noise_reading,
            tilde_schedule: cfg.tilde_schedule(),
            persist_opt_state: cfg.fed.persist_opt_state,
            init: InitScheme::Kaiming,
            standardization: "y only, train mean and population std".into(),
            partitioned_split: "every split, independent draws; training uses train shards, MSE pooled per split".into(),
            selection: cfg.eval.selection,
            summary_std: "sample (n - 1), 0 for a single run".into(),
            seed_derivation: "run k uses run.seed + k".into(),
        }
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: usize,
    pub seed: u64,
    pub trace: Vec<MetricsRecord>,
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
}

/// Standardized splits of one seed, each split partitioned across clients
/// with its own Dirichlet draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: crate::IvDataset,
    pub val: crate::IvDataset,
    pub test: crate::IvDataset,
    /// Training shards; these drive the federation.
    pub shards: Vec<ClientShard>,
    pub val_shards: Vec<ClientShard>,
    pub test_shards: Vec<ClientShard>,
}

pub fn prepare_data(cfg: &RunConfig, seed: u64) -> Result<PreparedData> {
    let seeds = RunSeeds::derive(seed);
    let (tr, va, te) = generate(&cfg.scenario_spec(seeds.data))?;
    let (train, val, test) = standardize_y(&tr, &va, &te)?;
    let split = |ds, s| dirichlet_partition(ds, cfg.data.n_clients, cfg.data.alpha, s);
    Ok(PreparedData {
        shards: split(&train, seeds.partition)?,
        val_shards: split(&val, seeds.partition_val)?,
        test_shards: split(&test, seeds.partition_test)?,
        train,
        val,
        test,
    })
}

/// One seed of the protocol: generate, standardize, partition, train,
/// evaluate.
pub fn run_single(cfg: &RunConfig, run_id: usize) -> Result<RunOutcome> {
    let seed = cfg.run_seed(run_id);
    let seeds = RunSeeds::derive(seed);
    let PreparedData {
        train: tr,
        val: va,
        test: te,
        shards,
        ..
    } = prepare_data(cfg, seed)?;
    let theta = init_params(&cfg.g_spec()?, seeds.init_g, InitScheme::Kaiming);
    let tau = init_params(&cfg.f_spec()?, seeds.init_f, InitScheme::Kaiming);
    let eval = EvalSets {
        train: &tr,
        val: &va,
        test: &te,
        response: cfg.scenario.response,
    };
    let fed = cfg.fed_config(seeds.fed)?;
    let state = run_federation(&fed, theta, tau, &shards, Some(&eval), run_id)?;
    let mut trace = state.trajectory.clone();
    // The trace reports the run seed, not the derived federation seed.
    trace.iter_mut().for_each(|r| r.seed = seed);
    Ok(RunOutcome {
        run_id,
        seed,
        last: state.checkpoint(),
        best: state.best,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub best_round: usize,
    pub best_val_mse: f64,
    pub test_mse_at_best_val: f64,
    pub final_round: usize,
    pub final_test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: usize,
    pub seed: u64,
    pub error: String,
    pub divergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub partial: bool,
    pub n_completed: usize,
    pub mean_test_mse: Option<f64>,
    pub std_test_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignRecord>,
}

/// Mean and sample standard deviation (zero for one value).
pub fn mean_and_sample_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

pub fn run_result(trace: &[MetricsRecord]) -> Option<RunResult> {
    let best = best_validation(trace)?;
    let last = trace.last()?;
    Some(RunResult {
        run_id: best.run_id,
        seed: best.seed,
        best_round: best.round,
        best_val_mse: best.val_mse,
        test_mse_at_best_val: best.test_mse,
        final_round: last.round,
        final_test_mse: last.test_mse,
    })
}

/// Aggregates traces (one per run) into a summary.
pub fn aggregate(traces: &[Vec<MetricsRecord>], failures: Vec<RunFailure>) -> Summary {
    let mut runs: Vec<RunResult> = traces.iter().filter_map(|t| run_result(t)).collect();
    runs.sort_by_key(|r| r.run_id);
    let tests: Vec<f64> = runs.iter().map(|r| r.test_mse_at_best_val).collect();
    let stats = mean_and_sample_std(&tests);
    Summary {
        n_completed: runs.len(),
        partial: !failures.is_empty(),
        runs,
        failures,
        mean_test_mse: stats.map(|s| s.0),
        std_test_mse: stats.map(|s| s.1),
        config: None,
        design: None,
    }
}

pub fn trace_path(dir: &Path, run_id: usize) -> PathBuf {
    dir.join(format!("trace_{run_id}.csv"))
}

pub fn checkpoint_path(dir: &Path, run_id: usize, round: usize) -> PathBuf {
    dir.join(format!("run_{run_id}")).join(format!("checkpoint_{round}.json"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write(path, &serde_json::to_string_pretty(ckpt)?)
}

/// Reads a checkpoint and re-validates its parameter vectors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let check = |p: ParamVector| -> Result<ParamVector> {
        let spec = Arc::new(
            MlpSpec::new(p.spec().layer_widths().to_vec(), p.spec().hidden_activation())
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?,
        );
        ParamVector::new(spec, p.into_values())
    };
    Ok(Checkpoint {
        round: raw.round,
        theta: check(raw.theta)?,
        tau: check(raw.tau)?,
        theta_tilde: check(raw.theta_tilde)?,
    })
}

/// Runs every seed of `cfg` into `cfg.run.output_dir`. Failed seeds are
/// recorded and the remaining seeds still run.
pub fn run_experiment(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(
        &dir.join("config.json"),
        &serde_json::to_string_pretty(&cfg.to_json()?)?,
    )?;
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for run_id in 0..cfg.run.n_seeds {
        match run_single(cfg, run_id) {
            Ok(out) => {
                write(&trace_path(dir, run_id), &trace_to_csv(&out.trace))?;
                if cfg.run.checkpoints {
                    if let Some(best) = &out.best {
                        save_checkpoint(&checkpoint_path(dir, run_id, best.round), best)?;
                    }
                    save_checkpoint(&checkpoint_path(dir, run_id, out.last.round), &out.last)?;
                }
                traces.push(out.trace);
            }
            Err(e) => {
                let _ = fs::remove_file(trace_path(dir, run_id));
                failures.push(RunFailure {
                    run_id,
                    seed: cfg.run_seed(run_id),
                    divergence: matches!(e, Error::Divergence { .. } | Error::NonFinite { .. }),
                    error: e.to_string(),
                });
            }
        }
    }
    let mut summary = aggregate(&traces, failures);
    summary.config = Some(cfg.to_json()?);
    summary.design = Some(DesignRecord::from_config(cfg));
    write(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Learning-rate/ratio grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr_tau: f64,
    pub gamma: f64,
    pub dir: PathBuf,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub points: Vec<GridPoint>,
    /// Index of the point with the lowest mean best-validation MSE.
    pub selected: Option<usize>,
}

/// Runs the full experiment for every `(lr, gamma)` in the fixed grid, each
/// into its own subdirectory, and selects by validation MSE.
pub fn run_grid(cfg: &RunConfig) -> Result<GridReport> {
    let mut points = Vec::new();
    for &lr in &GRID_LR {
        for &gamma in &GRID_GAMMA {
            let mut c = cfg.clone();
            c.optimizer.lr_tau = lr;
            c.optimizer.gamma = gamma;
            c.run.output_dir = cfg.run.output_dir.join(format!("lr{lr:e}_gamma{gamma}"));
            let summary = run_experiment(&c)?;
            points.push(GridPoint {
                lr_tau: lr,
                gamma,
                dir: c.run.output_dir,
                summary,
            });
        }
    }
    let mean_val = |p: &GridPoint| {
        let v: Vec<f64> = p.summary.runs.iter().map(|r| r.best_val_mse).collect();
        mean_and_sample_std(&v).map_or(f64::INFINITY, |s| s.0)
    };
    let selected = points
        .iter()
        .enumerate()
        .filter(|(_, p)| mean_val(p).is_finite())
        .min_by(|a, b| mean_val(a.1).total_cmp(&mean_val(b.1)))
        .map(|(i, _)| i);
    let report = GridReport { points, selected };
    write(
        &cfg.run.output_dir.join("grid.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Rebuilds `summary.json` in `dir` from its `trace_<run>.csv` files.
/// Failures and config recorded in an existing summary are kept.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(id) = name
            .strip_prefix("trace_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse().ok())
        {
            entries.push((id, path));
        }
    }
    entries.sort();
    let mut traces = Vec::new();
    for (_, path) in &entries {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        traces.push(trace_from_csv(&text).map_err(|message| Error::Parse {
            path: path.clone(),
            message,
        })?);
    }
    let summary_path = dir.join("summary.json");
    let previous: Option<Summary> = fs::read_to_string(&summary_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let failures = previous
        .as_ref()
        .map(|p| p.failures.clone())
        .unwrap_or_default();
    let mut summary = aggregate(&traces, failures);
    if let Some(p) = previous {
        summary.config = p.config;
        summary.design = p.design;
    }
    write(&summary_path, &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Diagnostics document for a checkpoint on the given client shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOutput {
    pub round: usize,
    pub gamma: f64,
    pub local_steps: usize,
    pub report: DiagnosticsReport,
}

pub fn diagnose(
    ckpt: &Checkpoint,
    shards: &[ClientShard],
    gamma: f64,
    local_steps: usize,
    tol: Option<f64>,
) -> Result<DiagnoseOutput> {
    let game = GmmGame::new(&ckpt.theta, &ckpt.tau, &ckpt.theta_tilde, shards)?;
    let report = diagnostics_report(
        &game,
        &game.point(),
        gamma,
        local_steps,
        tol.unwrap_or(DEFAULT_TOL),
    )?;
    Ok(DiagnoseOutput {
        round: ckpt.round,
        gamma,
        local_steps,
        report,
    })
}
