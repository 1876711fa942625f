//! Experiment configuration, orchestration over rounds, sweeps and persisted
//! outputs.
//!
//! Configs are TOML. Only `task` and `rounds` are required:
//!
//! ```toml
//! rounds = 50
//!
//! [task]
//! kind = "quadratic"
//! clients = 10
//! d = 20
//! samples_per_client = 30
//! ```
//!
//! Each run writes `<name>_s<seed>.csv` (one row per round), a
//! `<name>_s<seed>.summary.toml` and, if the run diverged, a
//! `<name>_s<seed>.failed` marker next to them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compressors::{uplink_bits, CompressorSpec, Family, DEFAULT_VALUE_BITS};
use crate::diagnostics::{accumulate_comm, gradient_mismatch, virtual_identity_residual, MetricsRecord};
use crate::error::{Error, Result};
use crate::numerics::{ModelVector, Purpose, RandomStream};
use crate::objectives::{
    draw_probe_batch, estimate_dissimilarity, estimate_noise, label_histograms, make_dirichlet_task,
    make_quadratic_task, smoothness_constant, two_client_quadratic, FederatedTask, ProbeBatch,
    QuadraticTaskSpec,
};
use crate::protocol::{participant_count, run_round, sample_participants, ClientState, RoundSchedule};
use crate::theory::{
    self, constants_report, verify_bound, BoundKind, BoundReport, ConstantsReport, Snapshot, TheoryParams,
    VerifyOptions,
};

/// Environment variable that overrides every config's output directory.
pub const OUTPUT_DIR_ENV: &str = "SAPEF_OUTPUT_DIR";

fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_value_bits() -> u32 {
    DEFAULT_VALUE_BITS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Heterogeneous least squares.
    Quadratic {
        clients: usize,
        d: usize,
        samples_per_client: usize,
        #[serde(default = "one")]
        heterogeneity: f64,
        #[serde(default = "one")]
        condition: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        weight_decay: f64,
        /// Seed for the data; defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Two identity-Hessian clients with `β² = ν² = 1`.
    TwoClient { d: usize },
    /// Dirichlet label-skewed logistic regression.
    Dirichlet {
        classes: usize,
        clients: usize,
        gamma: f64,
        per_class: usize,
        d: usize,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A task dumped with [`FederatedTask::save_json`].
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorConfig {
    TopK {
        k: usize,
        #[serde(default = "default_value_bits")]
        value_bits: u32,
    },
    ScaledSign {
        #[serde(default = "default_value_bits")]
        value_bits: u32,
    },
    Identity {
        #[serde(default = "default_value_bits")]
        value_bits: u32,
    },
}

impl From<CompressorConfig> for CompressorSpec {
    fn from(c: CompressorConfig) -> Self {
        match c {
            CompressorConfig::TopK { k, value_bits } => CompressorSpec {
                family: Family::TopK { k },
                value_bits,
            },
            CompressorConfig::ScaledSign { value_bits } => CompressorSpec {
                family: Family::ScaledSign,
                value_bits,
            },
            CompressorConfig::Identity { value_bits } => CompressorSpec {
                family: Family::Identity,
                value_bits,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaRule {
    Constant { value: f64 },
    /// Straight line from `start` at round 0 to `end` at round `R − 1`.
    Linear { start: f64, end: f64 },
    /// `α*_r = 1/(1 + 12 s_r²)` with `s_r = η_r L T`.
    TheoryOptimal,
}

impl Default for AlphaRule {
    fn default() -> Self {
        AlphaRule::Constant { value: 0.85 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    #[default]
    Constant,
    /// Cosine decay from `eta0` at round 0 towards `min` at round `R`.
    Cosine { min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default)]
    pub eta0_rule: StepRule,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub alpha: AlphaRule,
    #[serde(default = "one")]
    pub participation: f64,
}

fn default_eta0() -> f64 {
    0.01
}
fn default_local_steps() -> usize {
    5
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta: 1.0,
            eta0: default_eta0(),
            eta0_rule: StepRule::Constant,
            local_steps: default_local_steps(),
            batch_size: 1,
            momentum: 0.0,
            alpha: AlphaRule::default(),
            participation: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Standard deviation of the Gaussian initial model.
    #[serde(default)]
    pub scale: f64,
    /// Constant added to every coordinate.
    #[serde(default)]
    pub shift: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Rows per client for the fixed probe set; all local rows when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    /// Preview coefficient for the mismatch probe; the round's `α_r` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    /// Round at which the lemma checks freeze the protocol state.
    #[serde(default = "default_snapshot_round")]
    pub snapshot_round: usize,
    #[serde(default = "default_stationarity_samples")]
    pub stationarity_samples: usize,
    #[serde(default = "default_noise_samples")]
    pub noise_samples: usize,
    #[serde(default = "default_probes")]
    pub dissimilarity_probes: usize,
}

fn default_mc() -> usize {
    500
}
fn default_snapshot_round() -> usize {
    10
}
fn default_stationarity_samples() -> usize {
    100
}
fn default_noise_samples() -> usize {
    1000
}
fn default_probes() -> usize {
    200
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            mc_samples: default_mc(),
            snapshot_round: default_snapshot_round(),
            stationarity_samples: default_stationarity_samples(),
            noise_samples: default_noise_samples(),
            dissimilarity_probes: default_probes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub replicates: usize,
    pub rounds: usize,
    /// Gradient-norm threshold ε for rounds-to-threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Record elapsed milliseconds; off by default so files replay byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Add the dense broadcast to every client to the bit counter.
    #[serde(default)]
    pub count_downlink: bool,
    pub task: TaskConfig,
    /// Top-1% sparsification when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<CompressorConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.apply_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    fn apply_defaults(&mut self) {
        if self.compressor.is_none() {
            if let Some(d) = self.task_dim() {
                self.compressor = Some(CompressorConfig::TopK {
                    k: (d / 100).max(1),
                    value_bits: DEFAULT_VALUE_BITS,
                });
            }
        }
    }

    /// Model dimension when it is known without loading data.
    pub fn task_dim(&self) -> Option<usize> {
        match &self.task {
            TaskConfig::Quadratic { d, .. } | TaskConfig::TwoClient { d } | TaskConfig::Dirichlet { d, .. } => {
                Some(*d)
            }
            TaskConfig::File { .. } => None,
        }
    }

    pub fn task_clients(&self) -> Option<usize> {
        match &self.task {
            TaskConfig::Quadratic { clients, .. } | TaskConfig::Dirichlet { clients, .. } => Some(*clients),
            TaskConfig::TwoClient { .. } => Some(2),
            TaskConfig::File { .. } => None,
        }
    }

    pub fn compressor_spec(&self, d: usize) -> CompressorSpec {
        self.compressor
            .map(CompressorSpec::from)
            .unwrap_or_else(|| CompressorSpec::top_k((d / 100).max(1)))
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("run")
    }

    /// Checks every field that can be checked without building the task.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be >= 1"));
        }
        if !(s.eta.is_finite() && s.eta > 0.0) {
            return Err(Error::config("schedule.eta", "must be positive"));
        }
        if !(s.eta0.is_finite() && s.eta0 > 0.0) {
            return Err(Error::config("schedule.eta0", "must be positive"));
        }
        if let StepRule::Cosine { min } = s.eta0_rule {
            if !(min >= 0.0 && min <= s.eta0) {
                return Err(Error::config("schedule.eta0_rule.min", "must lie in [0, eta0]"));
            }
        }
        if s.local_steps == 0 {
            return Err(Error::config("schedule.local_steps", "must be >= 1"));
        }
        if s.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::config("schedule.momentum", "must lie in [0, 1)"));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        match s.alpha {
            AlphaRule::Constant { value } if !in_unit(value) => {
                return Err(Error::config("schedule.alpha.value", "must lie in [0, 1]"))
            }
            AlphaRule::Linear { start, end } if !(in_unit(start) && in_unit(end)) => {
                return Err(Error::config("schedule.alpha", "start and end must lie in [0, 1]"))
            }
            _ => {}
        }
        if let Some(a) = self.probe.alpha {
            if !in_unit(a) {
                return Err(Error::config("probe.alpha", "must lie in [0, 1]"));
            }
        }
        if self.probe.size == Some(0) {
            return Err(Error::config("probe.size", "must be >= 1"));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return Err(Error::config("threshold", "must be >= 0"));
            }
        }
        if let Some(k) = self.task_clients() {
            if k == 0 {
                return Err(Error::config("task.clients", "must be >= 1"));
            }
            participant_count(k, s.participation)
                .map_err(|e| Error::config("schedule.participation", e.to_string()))?;
        } else if !(s.participation > 0.0 && s.participation <= 1.0) {
            return Err(Error::config("schedule.participation", "must lie in (0, 1]"));
        }
        if let Some(d) = self.task_dim() {
            if d == 0 {
                return Err(Error::config("task.d", "must be >= 1"));
            }
            self.compressor_spec(d).validate(d)?;
        }
        match &self.task {
            TaskConfig::Dirichlet {
                gamma,
                classes,
                per_class,
                clients,
                ..
            } => {
                if !(*gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::config("task.gamma", "concentration must be > 0"));
                }
                if *classes == 0 || per_class * classes < *clients {
                    return Err(Error::config(
                        "task.per_class",
                        "classes * per_class must be at least the number of clients",
                    ));
                }
            }
            TaskConfig::Quadratic {
                samples_per_client,
                condition,
                ..
            } => {
                if *samples_per_client == 0 {
                    return Err(Error::config("task.samples_per_client", "must be >= 1"));
                }
                if !(*condition >= 1.0) {
                    return Err(Error::config("task.condition", "must be >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Preview coefficient scheduled for round `r`.
    pub fn alpha_at(&self, r: usize, eta_r: f64, l: f64) -> f64 {
        match self.schedule.alpha {
            AlphaRule::Constant { value } => value,
            AlphaRule::Linear { start, end } => {
                if self.rounds <= 1 {
                    start
                } else {
                    start + (end - start) * r as f64 / (self.rounds - 1) as f64
                }
            }
            AlphaRule::TheoryOptimal => theory::alpha_star(eta_r * l * self.schedule.local_steps as f64),
        }
    }

    /// Local stepsize for round `r`.
    pub fn eta_at(&self, r: usize) -> f64 {
        let e0 = self.schedule.eta0;
        match self.schedule.eta0_rule {
            StepRule::Constant => e0,
            StepRule::Cosine { min } => {
                let frac = r as f64 / self.rounds.max(1) as f64;
                min + (e0 - min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Reads, defaults and validates a config. The name defaults to the file stem.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if cfg.name.is_none() {
        cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    if let TaskConfig::File { path: p } = &mut cfg.task {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml()?)?;
    Ok(())
}

/// Builds the task for a run seed.
pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedTask> {
    match &cfg.task {
        TaskConfig::Quadratic {
            clients,
            d,
            samples_per_client,
            heterogeneity,
            condition,
            noise,
            weight_decay,
            seed: task_seed,
        } => make_quadratic_task(
            &QuadraticTaskSpec {
                clients: *clients,
                d: *d,
                samples_per_client: *samples_per_client,
                heterogeneity: *heterogeneity,
                condition: *condition,
                noise: *noise,
                weight_decay: *weight_decay,
            },
            &RandomStream::new(task_seed.unwrap_or(seed), Purpose::TaskData),
        ),
        TaskConfig::TwoClient { d } => two_client_quadratic(*d),
        TaskConfig::Dirichlet {
            classes,
            clients,
            gamma,
            per_class,
            d,
            weight_decay,
            seed: task_seed,
        } => make_dirichlet_task(
            *classes,
            *clients,
            *gamma,
            *per_class,
            *d,
            *weight_decay,
            &RandomStream::new(task_seed.unwrap_or(seed), Purpose::TaskData),
        ),
        TaskConfig::File { path } => FederatedTask::load_json(path),
    }
}

/// Everything derived from the config before round 0.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub task: FederatedTask,
    pub w0: ModelVector,
    pub l: f64,
    pub compressor: CompressorSpec,
    pub probe: ProbeBatch,
    pub m: usize,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let task = build_task(cfg, seed)?;
    let d = task.d;
    let compressor = cfg.compressor_spec(d);
    compressor.validate(d)?;
    let kk = task.num_clients();
    let m = participant_count(kk, cfg.schedule.participation)?;
    for k in 0..kk {
        let n = task.clients[k].samples();
        if cfg.schedule.batch_size > n {
            return Err(Error::config(
                "schedule.batch_size",
                format!("{} exceeds the {n} samples of client {k}", cfg.schedule.batch_size),
            ));
        }
    }
    let z = RandomStream::new(seed, Purpose::Init).draw_gaussian(d);
    let w0 = ModelVector::new(z.iter().map(|zi| cfg.init.scale * zi + cfg.init.shift).collect());
    let l = smoothness_constant(&task)?;
    let probe = match cfg.probe.size {
        None => ProbeBatch::Full,
        Some(n) => draw_probe_batch(&task, n, &RandomStream::new(seed, Purpose::Probe)),
    };
    Ok(Prepared {
        seed,
        task,
        w0,
        l,
        compressor,
        probe,
        m,
    })
}

/// In-memory result of one run.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub records: Vec<MetricsRecord>,
    pub final_w: ModelVector,
    pub final_states: Vec<ClientState>,
    /// `‖∇f(w_r)‖²` for `r = 0..=R` (fewer on failure).
    pub grad_norms: Vec<f64>,
    pub final_loss: f64,
    pub failure: Option<Error>,
}

/// Schedule for round `r` of a prepared run.
pub fn round_schedule(cfg: &ExperimentConfig, prep: &Prepared, r: usize) -> Result<RoundSchedule> {
    let eta_r = cfg.eta_at(r);
    let kk = prep.task.num_clients();
    Ok(RoundSchedule {
        round: r,
        eta: cfg.schedule.eta,
        eta_r,
        alpha_r: cfg.alpha_at(r, eta_r, prep.l),
        local_steps: cfg.schedule.local_steps,
        participants: sample_participants(
            kk,
            cfg.schedule.participation,
            r,
            &RandomStream::new(prep.seed, Purpose::Participation),
        )?,
        momentum: cfg.schedule.momentum,
        batch_size: cfg.schedule.batch_size,
        compressor: prep.compressor,
    })
}

/// Runs `rounds` rounds from `w0` with zero residuals. Divergence stops the
/// loop and is returned in [`Simulation::failure`] along with every complete
/// record before it.
pub fn simulate(cfg: &ExperimentConfig, prep: &Prepared, rounds: usize) -> Result<Simulation> {
    let task = &prep.task;
    let kk = task.num_clients();
    let d = task.d;
    let start = Instant::now();
    let stream = RandomStream::new(prep.seed, Purpose::Minibatch);
    let mut states = vec![ClientState::new(d); kk];
    let mut w = prep.w0.clone();
    let mut records = Vec::with_capacity(rounds.max(1));
    let mut grad_norms = Vec::with_capacity(rounds + 1);
    let mut bits = 0u64;
    let mut failure = None;
    let downlink = if cfg.count_downlink {
        (kk as u64)
            .checked_mul(d as u64 * prep.compressor.value_bits as u64)
            .ok_or(Error::AccountingOverflow)?
    } else {
        0
    };
    let snapshot = |w: &ModelVector, states: &[ClientState], r: usize, alpha: f64| -> Result<MetricsRecord> {
        let g = task.global_grad(w)?.norm2_sq();
        Ok(MetricsRecord {
            round: r,
            f_w: task.loss(w)?,
            grad_norm_sq: g,
            residual_energy_mean: states.iter().map(|s| s.residual_energy()).sum::<f64>() / kk as f64,
            mismatch: gradient_mismatch(task, w, states, cfg.probe.alpha.unwrap_or(alpha), &prep.probe)?,
            uplink_bits_cum: 0,
            virtual_identity_residual: 0.0,
            wall_time_ms: 0,
        })
    };
    for r in 0..rounds {
        let sched = round_schedule(cfg, prep, r)?;
        let mut rec = snapshot(&w, &states, r, sched.alpha_r)?;
        if !(rec.grad_norm_sq.is_finite() && rec.f_w.is_finite()) {
            failure = Some(overflow(r));
            break;
        }
        grad_norms.push(rec.grad_norm_sq);
        let out = match run_round(task, &mut states, &w, &sched, &stream) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        rec.uplink_bits_cum = bits;
        rec = accumulate_comm(&rec, &prep.compressor, d, sched.participants.len())?;
        rec.uplink_bits_cum = rec
            .uplink_bits_cum
            .checked_add(downlink)
            .ok_or(Error::AccountingOverflow)?;
        bits = rec.uplink_bits_cum;
        rec.virtual_identity_residual = virtual_identity_residual(&out.trace, sched.eta, sched.alpha_r)?;
        if cfg.record_wall_time {
            rec.wall_time_ms = start.elapsed().as_millis() as u64;
        }
        records.push(rec);
        w = out.w_next;
    }
    if failure.is_none() {
        let g = task.global_grad(&w)?.norm2_sq();
        if g.is_finite() {
            grad_norms.push(g);
        } else {
            failure = Some(overflow(rounds));
        }
        if rounds == 0 && failure.is_none() {
            let alpha = cfg.alpha_at(0, cfg.eta_at(0), prep.l);
            records.push(snapshot(&w, &states, 0, alpha)?);
        }
    }
    Ok(Simulation {
        final_loss: task.loss(&w)?,
        records,
        final_w: w,
        final_states: states,
        grad_norms,
        failure,
    })
}

fn overflow(round: usize) -> Error {
    Error::Numeric(format!("objective overflowed at the start of round {round}"))
}

/// Outcome of one run as written to the summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub rounds_completed: usize,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub min_grad_norm_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// First `r` with `‖∇f(w_r)‖² ≤ ε`; absent when never reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_to_threshold: Option<usize>,
    pub uplink_bits: u64,
    pub mean_mismatch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

pub fn summarize(cfg: &ExperimentConfig, seed: u64, sim: &Simulation) -> RunSummary {
    let rounds_to_threshold = cfg
        .threshold
        .and_then(|eps| sim.grad_norms.iter().position(|g| *g <= eps));
    let mean_mismatch = if sim.records.is_empty() {
        0.0
    } else {
        sim.records.iter().map(|r| r.mismatch).sum::<f64>() / sim.records.len() as f64
    };
    RunSummary {
        name: cfg.name().to_string(),
        seed,
        rounds: cfg.rounds,
        rounds_completed: if sim.failure.is_some() { sim.records.len() } else { cfg.rounds },
        final_loss: sim.final_loss,
        final_grad_norm_sq: *sim.grad_norms.last().unwrap_or(&f64::NAN),
        min_grad_norm_sq: sim.grad_norms.iter().copied().fold(f64::INFINITY, f64::min),
        threshold: cfg.threshold,
        rounds_to_threshold,
        uplink_bits: sim.records.last().map_or(0, |r| r.uplink_bits_cum),
        mean_mismatch,
        metrics_path: None,
        failure: sim.failure.as_ref().map(|e| e.to_string()),
    }
}

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "f_w",
    "grad_norm_sq",
    "residual_energy_mean",
    "mismatch",
    "uplink_bits_cum",
    "virtual_identity_residual",
    "wall_time_ms",
];

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders records as CSV with 17 significant digits.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_f64(r.f_w),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.residual_energy_mean),
            fmt_f64(r.mismatch),
            r.uplink_bits_cum.to_string(),
            fmt_f64(r.virtual_identity_residual),
            r.wall_time_ms.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected metrics header {headers:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |j: usize| -> Result<&str> {
            row.get(j)
                .ok_or_else(|| Error::Parse(format!("row {}: missing column {}", i + 1, METRICS_HEADER[j])))
        };
        let float = |j: usize| -> Result<f64> {
            field(j)?
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {}: {e}", i + 1, METRICS_HEADER[j])))
        };
        let int = |j: usize| -> Result<u64> {
            field(j)?
                .parse()
                .map_err(|e| Error::Parse(format!("row {}: {}: {e}", i + 1, METRICS_HEADER[j])))
        };
        out.push(MetricsRecord {
            round: int(0)? as usize,
            f_w: float(1)?,
            grad_norm_sq: float(2)?,
            residual_energy_mean: float(3)?,
            mismatch: float(4)?,
            uplink_bits_cum: int(5)?,
            virtual_identity_residual: float(6)?,
            wall_time_ms: int(7)?,
        });
    }
    Ok(out)
}

/// Writes via a temporary file and rename, so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_atomic(path, &metrics_to_csv(records)?)
}

pub fn parse_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics_csv(&std::fs::read_to_string(path)?)
}

/// How a run is executed; none of these options change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for client-parallel work; rayon's default when absent.
    pub threads: Option<usize>,
    /// Overrides the config's output directory.
    pub output_dir: Option<PathBuf>,
}

impl RunOptions {
    /// Options with the output directory taken from [`OUTPUT_DIR_ENV`] if set.
    pub fn from_env() -> Self {
        RunOptions {
            threads: None,
            output_dir: std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from),
        }
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::config("threads", e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }
}

pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run_stem(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}_s{seed}", cfg.name())
}

/// Runs one seed and writes its metrics, summary and (on divergence) failure
/// marker. A diverged run still returns its summary; the error is reported in
/// [`RunSummary::failure`].
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<RunSummary> {
    let prep = prepare(cfg, seed)?;
    let sim = opts.install(|| simulate(cfg, &prep, cfg.rounds))??;
    let dir = output_dir(cfg, opts);
    std::fs::create_dir_all(&dir)?;
    let stem = run_stem(cfg, seed);
    let metrics = dir.join(format!("{stem}.csv"));
    emit_metrics(&sim.records, &metrics)?;
    let marker = dir.join(format!("{stem}.failed"));
    if let Some(e) = &sim.failure {
        write_atomic(&marker, &format!("error: {e}\nrounds_completed: {}\n", sim.records.len()))?;
    } else if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let mut summary = summarize(cfg, seed, &sim);
    summary.metrics_path = Some(metrics);
    let text = toml::to_string(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&dir.join(format!("{stem}.summary.toml")), &text)?;
    Ok(summary)
}

/// Run with the config's own seed. Divergence is returned as an error after
/// the partial outputs are written.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let s = run_seed(cfg, cfg.seed, opts)?;
    match &s.failure {
        None => Ok(s),
        Some(_) => {
            let prep = prepare(cfg, cfg.seed)?;
            let sim = opts.install(|| simulate(cfg, &prep, cfg.rounds))??;
            Err(sim.failure.expect("failure reproduces deterministically"))
        }
    }
}

/// Seeds of all replicates: `seed, seed + 1, …`.
pub fn replicate_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.replicates as u64).map(|i| cfg.seed + i).collect()
}

pub fn with_alpha(cfg: &ExperimentConfig, alpha: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.schedule.alpha = AlphaRule::Constant { value: alpha };
    c.name = Some(format!("{}_alpha{alpha}", cfg.name()));
    c
}

/// One α of a sweep: a summary per replicate seed, or the error that stopped it.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub alpha: f64,
    pub runs: Result<Vec<RunSummary>>,
}

/// Runs every replicate for every α with shared seeds and writes
/// `<name>_sweep.csv`. A failing cell does not abort the others.
pub fn sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64], opts: &RunOptions) -> Result<Vec<SweepCell>> {
    if alphas.is_empty() {
        return Ok(Vec::new());
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::config("alphas", format!("{a} not in [0, 1]")));
        }
    }
    let cells: Vec<SweepCell> = alphas
        .iter()
        .map(|&alpha| {
            let c = with_alpha(cfg, alpha);
            let runs = replicate_seeds(&c)
                .into_iter()
                .map(|s| run_seed(&c, s, opts))
                .collect::<Result<Vec<_>>>();
            SweepCell { alpha, runs }
        })
        .collect();
    let dir = output_dir(cfg, opts);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(format!("{}_sweep.csv", cfg.name())), &sweep_table(&cells))?;
    Ok(cells)
}

/// Comparison table with one line per (α, seed).
pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut s = String::from("alpha,seed,rounds_to_threshold,final_grad_norm_sq,min_grad_norm_sq,final_loss,mean_mismatch,uplink_bits,status\n");
    for c in cells {
        match &c.runs {
            Ok(runs) => {
                for r in runs {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{}",
                        c.alpha,
                        r.seed,
                        r.rounds_to_threshold.map_or("not_reached".into(), |x| x.to_string()),
                        fmt_f64(r.final_grad_norm_sq),
                        fmt_f64(r.min_grad_norm_sq),
                        fmt_f64(r.final_loss),
                        fmt_f64(r.mean_mismatch),
                        r.uplink_bits,
                        if r.failure.is_some() { "diverged" } else { "ok" }
                    );
                }
            }
            Err(e) => {
                let _ = writeln!(s, "{},,,,,,,,error: {}", c.alpha, e.to_string().replace(',', ";"));
            }
        }
    }
    s
}

/// Constants estimated for a config: `L` from the task, `β²`, `ν²` from the
/// dissimilarity fit and `σ²` by Monte Carlo at the given points.
pub fn theory_params(cfg: &ExperimentConfig, prep: &Prepared, noise_points: &[ModelVector]) -> Result<TheoryParams> {
    let task = &prep.task;
    let est = estimate_dissimilarity(
        task,
        cfg.verify.dissimilarity_probes,
        &RandomStream::new(prep.seed, Purpose::Dissimilarity),
    )?;
    let mut sigma_sq: f64 = 0.0;
    for (i, w) in noise_points.iter().enumerate() {
        sigma_sq = sigma_sq.max(estimate_noise(
            task,
            w,
            cfg.schedule.batch_size,
            cfg.verify.noise_samples,
            &RandomStream::new(prep.seed, Purpose::Noise).round(i),
        )?);
    }
    // a varying schedule is summarized by its least favourable round
    let mut alpha = cfg.alpha_at(0, cfg.eta_at(0), prep.l);
    let s0 = cfg.schedule.eta0 * prep.l * cfg.schedule.local_steps as f64;
    let delta = prep.compressor.certified_delta(task.d);
    for r in 0..cfg.rounds {
        let a = cfg.alpha_at(r, cfg.eta_at(r), prep.l);
        if theory::rho(a, s0, delta)? > theory::rho(alpha, s0, delta)? {
            alpha = a;
        }
    }
    Ok(TheoryParams {
        l: prep.l,
        beta_sq: est.beta_sq,
        nu_sq: est.nu_sq,
        sigma_sq,
        delta,
        eta: cfg.schedule.eta,
        eta0: cfg.schedule.eta0,
        local_steps: cfg.schedule.local_steps,
        alpha,
        p: cfg.schedule.participation,
        num_clients: task.num_clients(),
    })
}

/// The `constants` report for a config, with `σ²` estimated at `w₀`.
pub fn constants(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(TheoryParams, ConstantsReport)> {
    let prep = prepare(cfg, cfg.seed)?;
    let params = opts.install(|| theory_params(cfg, &prep, std::slice::from_ref(&prep.w0)))??;
    let report = constants_report(&params)?;
    Ok((params, report))
}

/// One line of the `verify` output.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Hypotheses of the check do not hold for this config.
    Skipped,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            outcome: if ok { Outcome::Pass } else { Outcome::Fail },
            detail: detail.into(),
        }
    }

    fn skipped(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            outcome: Outcome::Skipped,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub bounds: Vec<BoundReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != Outcome::Fail)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.outcome {
                Outcome::Pass => "PASS",
                Outcome::Fail => "FAIL",
                Outcome::Skipped => "SKIP",
            };
            let _ = writeln!(s, "{tag} {}: {}", c.name, c.detail);
        }
        s
    }
}

/// Invariant and bound suite for one config.
pub fn verify(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let prep = prepare(cfg, cfg.seed)?;
    let kk = prep.task.num_clients();
    let d = prep.task.d;

    let sim = opts.install(|| simulate(cfg, &prep, cfg.rounds))??;
    report.checks.push(Check::new(
        "run",
        sim.failure.is_none(),
        sim.failure.as_ref().map_or(format!("{} rounds", cfg.rounds), |e| e.to_string()),
    ));

    let worst = sim.records.iter().map(|r| r.virtual_identity_residual).fold(0.0, f64::max);
    report.checks.push(Check::new(
        "virtual_iterate_identity",
        worst <= 1e-9,
        format!("max defect {worst:.3e} (tolerance 1e-9)"),
    ));

    let per_round = prep.m as u64 * uplink_bits(&prep.compressor, d)
        + if cfg.count_downlink { kk as u64 * d as u64 * prep.compressor.value_bits as u64 } else { 0 };
    let bits_ok = if cfg.rounds == 0 {
        sim.records.iter().all(|r| r.uplink_bits_cum == 0)
    } else {
        sim.records
            .iter()
            .all(|r| r.uplink_bits_cum == per_round * (r.round as u64 + 1))
    };
    report.checks.push(Check::new(
        "communication_accounting",
        bits_ok,
        format!("{per_round} bits per round"),
    ));

    let csv_a = metrics_to_csv(&sim.records)?;
    let alt = RunOptions {
        threads: Some(if opts.threads == Some(1) { 4 } else { 1 }),
        ..opts.clone()
    };
    let sim_b = alt.install(|| simulate(cfg, &prep, cfg.rounds))??;
    let csv_b = metrics_to_csv(&sim_b.records)?;
    report.checks.push(Check::new(
        "determinism",
        csv_a == csv_b,
        "metrics identical across thread counts",
    ));

    let first_ok = sim
        .records
        .first()
        .is_none_or(|r| r.residual_energy_mean == 0.0 && r.mismatch == 0.0);
    report.checks.push(Check::new(
        "round_zero_record",
        first_ok,
        "zero residual energy and mismatch at round 0",
    ));

    // Lemma checks are conditional on a frozen full-participation state.
    let lemma_ok = cfg.schedule.participation == 1.0
        && cfg.schedule.momentum == 0.0
        && matches!(cfg.schedule.eta0_rule, StepRule::Constant)
        && prep.probe == ProbeBatch::Full;
    let snap_round = cfg.verify.snapshot_round.min(cfg.rounds);
    if !lemma_ok {
        for kind in [BoundKind::LocalDrift, BoundKind::SecondMoment, BoundKind::ResidualRecursion] {
            report.checks.push(Check::skipped(
                kind.name(),
                "needs full participation, constant local stepsize and no momentum",
            ));
        }
        report.checks.push(Check::skipped("stationarity", "needs the same hypotheses"));
        return Ok(report);
    }
    let snap = opts.install(|| simulate(cfg, &prep, snap_round))??;
    if let Some(e) = snap.failure {
        report.checks.push(Check::new("snapshot", false, e.to_string()));
        return Ok(report);
    }
    let snapshot = Snapshot {
        round: snap_round,
        w: snap.final_w.clone(),
        states: snap.final_states.clone(),
    };
    let alpha = cfg.alpha_at(snap_round, cfg.eta_at(snap_round), prep.l);
    let mut points = vec![snapshot.w.clone()];
    for st in &snapshot.states {
        points.push(snapshot.w.sub(&st.residual.scale(alpha))?);
    }
    let mut params = theory_params(cfg, &prep, &points)?;
    params.alpha = alpha;
    let vopts = VerifyOptions {
        mc_samples: cfg.verify.mc_samples,
        batch_size: cfg.schedule.batch_size,
        compressor: prep.compressor,
        rounds: cfg.rounds.max(1),
    };
    let mc = RandomStream::new(prep.seed, Purpose::MonteCarlo);
    for kind in [BoundKind::LocalDrift, BoundKind::SecondMoment, BoundKind::ResidualRecursion] {
        let b = opts.install(|| verify_bound(kind, &prep.task, &params, &snapshot, &vopts, &mc))??;
        report.checks.push(bound_check(&b));
        report.bounds.push(b);
    }

    // Stationarity: noise over the whole trajectory, every theorem hypothesis.
    let mut traj = vec![prep.w0.clone()];
    let stride = (cfg.rounds / 10).max(1);
    let mut w = prep.w0.clone();
    let mut states = vec![ClientState::new(d); kk];
    let stream = RandomStream::new(prep.seed, Purpose::Minibatch);
    for r in 0..cfg.rounds {
        let sched = round_schedule(cfg, &prep, r)?;
        let out = opts.install(|| run_round(&prep.task, &mut states, &w, &sched, &stream))??;
        w = out.w_next;
        if (r + 1) % stride == 0 {
            traj.push(w.clone());
        }
    }
    let mut sparams = theory_params(cfg, &prep, &traj)?;
    sparams.alpha = cfg.alpha_at(0, cfg.eta_at(0), prep.l);
    let pre = theory::preconditions(&sparams)?;
    if !pre.all() || !matches!(cfg.schedule.alpha, AlphaRule::Constant { .. }) {
        report.checks.push(Check::skipped(
            "stationarity",
            format!("theorem hypotheses fail: {}", pre.violations().join("; ")),
        ));
    } else {
        let sopts = VerifyOptions {
            mc_samples: cfg.verify.stationarity_samples,
            ..vopts
        };
        let b = opts.install(|| {
            verify_bound(
                BoundKind::Stationarity,
                &prep.task,
                &sparams,
                &Snapshot::initial(prep.w0.clone(), kk),
                &sopts,
                &mc,
            )
        })??;
        report.checks.push(bound_check(&b));
        report.bounds.push(b);
    }
    Ok(report)
}

fn bound_check(b: &BoundReport) -> Check {
    let detail = format!(
        "lhs {:.6e} <= rhs {:.6e} + 3*se {:.3e} ({} samples{}){}",
        b.empirical_lhs,
        b.theoretical_rhs,
        b.standard_error,
        b.samples,
        b.step.map_or(String::new(), |t| format!(", step {t}")),
        if b.precondition_violations.is_empty() {
            String::new()
        } else {
            format!("; violated: {}", b.precondition_violations.join("; "))
        }
    );
    if b.precondition_violations.is_empty() {
        Check::new(b.lemma.name(), b.satisfied, detail)
    } else {
        Check::skipped(b.lemma.name(), detail)
    }
}

/// Per-client label histograms of a Dirichlet task.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionStats {
    pub classes: usize,
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("client,samples");
        for c in 0..self.classes {
            let _ = write!(s, ",class_{c}");
        }
        s.push_str(",majority_share\n");
        for (k, h) in self.histograms.iter().enumerate() {
            let n: usize = h.iter().sum();
            let _ = write!(s, "{k},{n}");
            for c in h {
                let _ = write!(s, ",{c}");
            }
            let maj = *h.iter().max().unwrap_or(&0) as f64 / n.max(1) as f64;
            let _ = writeln!(s, ",{maj:.6}");
        }
        s
    }
}

pub fn partition_stats(cfg: &ExperimentConfig) -> Result<PartitionStats> {
    let classes = match &cfg.task {
        TaskConfig::Dirichlet { classes, .. } => *classes,
        _ => {
            return Err(Error::config(
                "task.kind",
                "partition statistics need a dirichlet task",
            ))
        }
    };
    let task = build_task(cfg, cfg.seed)?;
    Ok(PartitionStats {
        classes,
        histograms: label_histograms(&task, classes),
    })
}
