//! JSON experiment configurations, single runs, parameter sweeps and the
//! artifacts they write.
//!
//! Output files carry the hash of the effective configuration: CSV files as a
//! leading `# config_hash=` comment, JSON files as a `config_hash` field.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    bound_constants, run_certificates, BoundConstants, Certificate, CertificateEntry, CertificateReport,
    ConvergenceOptions, Status,
};
use crate::critic::best_parameters_with;
use crate::error::Error;
use crate::flow::{
    default_dt, graded_grid, integrate_with, matched_steps, run_two_timescale, uniform_grid, write_trajectory_csv, FlowContext,
    FlowState, IntegrateOptions, Method, TimescaleSchedule, Trajectory, TwoTimescaleOptions, KL_GUARD, THETA_GUARD,
};
use crate::mdp::{
    build_mdp, matrix_to_nested, nested_to_matrix, random_distribution, random_policy, sample_random_mdp, FeatureMap,
    FiniteMdp, Policy, RawMdp, Structure,
};

/// Default step of the exponential integrator, which is stable for any `η`.
pub const EXP_EULER_DT: f64 = 1e-2;
const DEFAULT_N_OUT: usize = 200;
const GRADED_PER_DECADE: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{context}: {source}")]
    Model {
        context: String,
        #[source]
        source: Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn model(context: &str) -> impl FnOnce(Error) -> Self + '_ {
        move |source| Self::Model {
            context: context.to_string(),
            source,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type ExpResult<T> = std::result::Result<T, ExperimentError>;

/// MDP description on disk. Pairs are indexed `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub cost: Vec<Vec<f64>>,
    pub gamma: f64,
    pub tau: f64,
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<Vec<f64>>>,
    /// `features[s][a]` is the feature vector of `(s, a)`; one-hot when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
}

impl MdpFile {
    pub fn load(path: &Path) -> ExpResult<Self> {
        let text = fs::read_to_string(path).map_err(ExperimentError::io(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::config("mdp.file", format!("{}: {e}", path.display())))
    }

    pub fn build(&self) -> ExpResult<(FiniteMdp<f64>, FeatureMap<f64>)> {
        if self.transition.len() != self.n_states || self.cost.len() != self.n_states {
            return Err(ExperimentError::config(
                "mdp.n_states",
                "transition/cost outer length differs from n_states",
            ));
        }
        if self.transition.iter().any(|r| r.len() != self.n_actions) || self.mu.len() != self.n_actions {
            return Err(ExperimentError::config(
                "mdp.n_actions",
                "transition/mu action length differs from n_actions",
            ));
        }
        let raw = RawMdp {
            transition: self.transition.clone(),
            cost: self.cost.clone(),
            gamma: self.gamma,
            tau: self.tau,
            mu: self.mu.clone(),
            beta: self.beta.clone(),
        };
        let mdp = build_mdp(&raw).map_err(ExperimentError::model("building the MDP"))?;
        let features = match &self.features {
            None => FeatureMap::one_hot(&mdp),
            Some(f) => {
                let dim = f.first().and_then(|r| r.first()).map_or(0, |v| v.len());
                let mut rows = Vec::with_capacity(mdp.n_pairs());
                for (s, per_state) in f.iter().enumerate() {
                    if per_state.len() != self.n_actions {
                        return Err(ExperimentError::config("mdp.features", format!("state {s} has wrong action count")));
                    }
                    rows.extend(per_state.iter().cloned());
                }
                if rows.len() != mdp.n_pairs() {
                    return Err(ExperimentError::config("mdp.features", "expected one row per state"));
                }
                let phi = nested_to_matrix(&rows, mdp.n_pairs(), dim, "features")
                    .map_err(ExperimentError::model("reading features"))?;
                FeatureMap::new(phi, &mdp).map_err(ExperimentError::model("building features"))?
            }
        };
        Ok((mdp, features))
    }

    pub fn from_model(mdp: &FiniteMdp<f64>, features: &FeatureMap<f64>) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let transition = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| mdp.transition().row(mdp.pair(s, a)).iter().cloned().collect())
                    .collect()
            })
            .collect();
        let phi = matrix_to_nested(features.phi());
        let features = (0..ns).map(|s| phi[s * na..(s + 1) * na].to_vec()).collect();
        Self {
            n_states: ns,
            n_actions: na,
            transition,
            cost: matrix_to_nested(mdp.cost()),
            gamma: mdp.gamma(),
            tau: mdp.tau(),
            mu: mdp.mu().iter().cloned().collect(),
            beta: Some(matrix_to_nested(mdp.beta())),
            features: Some(features),
        }
    }
}

/// Seeded random MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau: f64,
    #[serde(default = "default_structure")]
    pub structure: Structure,
    /// Draws a random full-support `β` with this seed; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_seed: Option<u64>,
}

fn default_structure() -> Structure {
    Structure::TabularOnehot
}

impl GeneratorSpec {
    pub fn generate(&self) -> ExpResult<(FiniteMdp<f64>, FeatureMap<f64>)> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(ExperimentError::config("mdp.generator", "n_states and n_actions must be positive"));
        }
        let inst = sample_random_mdp::<f64>(
            self.seed,
            self.n_states,
            self.n_actions,
            self.gamma,
            self.tau,
            self.structure,
        )
        .map_err(ExperimentError::model("generating the MDP"))?;
        let mdp = match self.beta_seed {
            Some(seed) => inst
                .mdp
                .with_beta(random_distribution(seed, self.n_states, self.n_actions))
                .map_err(ExperimentError::model("setting beta"))?,
            None => inst.mdp,
        };
        let features = FeatureMap::new(inst.features.phi().clone(), &mdp).map_err(ExperimentError::model("features"))?;
        Ok((mdp, features))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum MdpSource {
    File(PathBuf),
    Generator(GeneratorSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaName {
    Zeros,
    /// `θ_{π₀}`.
    Best,
    /// Fit of `Q*`.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaInit {
    Named(ThetaName),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Uniform,
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPolicySpec {
    pub seed: u64,
    #[serde(default = "one")]
    pub spread: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyInit {
    Named(PolicyName),
    Logits { logits: Vec<Vec<f64>> },
    Random { random: RandomPolicySpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub theta: ThetaInit,
    pub policy: PolicyInit,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            theta: ThetaInit::Named(ThetaName::Zeros),
            policy: PolicyInit::Named(PolicyName::Uniform),
        }
    }
}

/// `two-timescale` runs the discrete scheme with `λ = dt` and `h_n = η(t_n) λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorMethod {
    Rk4,
    ExponentialEuler,
    TwoTimescale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default = "default_method")]
    pub method: IntegratorMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Number of uniform output intervals (ignored when `output_times` is set).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_times: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: GridKind,
}

/// Snapshot grid when `output_times` is absent. `graded` adds log-spaced
/// points near `t = 0`, which the time integrals of the certificates need to
/// resolve the initial critic transient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Uniform,
    #[default]
    Graded,
}

fn default_method() -> IntegratorMethod {
    IntegratorMethod::ExponentialEuler
}

/// Cartesian parameter grid; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eta0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mdp: MdpSource,
    pub schedule: TimescaleSchedule,
    #[serde(default)]
    pub initial: InitialSpec,
    pub integrator: IntegratorSpec,
    /// Enabled certificate groups; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificates: Option<Vec<Certificate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> ExpResult<Self> {
        let text = fs::read_to_string(path).map_err(ExperimentError::io(path))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| ExperimentError::config("<root>", e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let MdpSource::File(f) = &mut cfg.mdp {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    /// Structural checks that need no model construction.
    pub fn validate(&self) -> ExpResult<()> {
        match &self.mdp {
            MdpSource::File(f) if !f.is_file() => {
                return Err(ExperimentError::config("mdp.file", format!("{} does not exist", f.display())));
            }
            MdpSource::Generator(g) => {
                if !(g.gamma > 0.0 && g.gamma < 1.0) {
                    return Err(ExperimentError::config("mdp.generator.gamma", "must lie in (0, 1)"));
                }
                if !(g.tau > 0.0) {
                    return Err(ExperimentError::config("mdp.generator.tau", "must be positive"));
                }
            }
            _ => {}
        }
        self.schedule
            .validate()
            .map_err(|e| ExperimentError::config("schedule", e.to_string()))?;
        let it = &self.integrator;
        if !(it.t_end > 0.0 && it.t_end.is_finite()) {
            return Err(ExperimentError::config("integrator.t_end", "must be positive"));
        }
        if let Some(dt) = it.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(ExperimentError::config("integrator.dt", "must be positive"));
            }
        }
        if it.n_out == Some(0) {
            return Err(ExperimentError::config("integrator.n_out", "must be positive"));
        }
        if it.method == IntegratorMethod::TwoTimescale && it.output_times.is_some() {
            return Err(ExperimentError::config(
                "integrator.output_times",
                "not supported by the two-timescale scheme; use n_out",
            ));
        }
        if let Some(s) = &self.sweep {
            if s.gamma.is_empty() && s.tau.is_empty() && s.eta0.is_empty() && s.seed.is_empty() {
                return Err(ExperimentError::config("sweep", "grid is empty"));
            }
            if !s.seed.is_empty() && matches!(self.mdp, MdpSource::File(_)) {
                return Err(ExperimentError::config("sweep.seed", "seeds need a generator MDP source"));
            }
        }
        Ok(())
    }

    /// Replaces the generator seed.
    pub fn override_seed(&mut self, seed: u64) {
        if let MdpSource::Generator(g) = &mut self.mdp {
            g.seed = seed;
        }
    }

    /// SHA-256 of the canonical JSON with the output directory removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn certificates(&self) -> Vec<Certificate> {
        self.certificates.clone().unwrap_or_else(|| Certificate::ALL.to_vec())
    }

    /// Builds the MDP and features, applying no overrides.
    pub fn build_model(&self) -> ExpResult<(FiniteMdp<f64>, FeatureMap<f64>)> {
        match &self.mdp {
            MdpSource::File(p) => MdpFile::load(p)?.build(),
            MdpSource::Generator(g) => g.generate(),
        }
    }
}

fn with_eta0(s: &TimescaleSchedule, eta0: f64) -> TimescaleSchedule {
    match *s {
        TimescaleSchedule::Constant { .. } => TimescaleSchedule::Constant { eta0 },
        TimescaleSchedule::Exponential { k1, .. } => TimescaleSchedule::Exponential { eta0, k1 },
        TimescaleSchedule::Polynomial { p, .. } => TimescaleSchedule::Polynomial { eta0, p },
    }
}

/// Resolves the initial condition.
pub fn initial_state(spec: &InitialSpec, ctx: &FlowContext<f64>) -> ExpResult<FlowState<f64>> {
    let mdp = &ctx.mdp;
    let policy = match &spec.policy {
        PolicyInit::Named(PolicyName::Uniform) => Policy::reference(mdp.n_states(), mdp.mu()),
        PolicyInit::Named(PolicyName::Optimal) => ctx.optimum.policy.clone(),
        PolicyInit::Logits { logits } => {
            let f = nested_to_matrix(logits, mdp.n_states(), mdp.n_actions(), "initial.policy.logits")
                .map_err(|e| ExperimentError::config("initial.policy.logits", e.to_string()))?;
            Policy::from_logits(&f, mdp.mu()).map_err(|e| ExperimentError::config("initial.policy.logits", e.to_string()))?
        }
        PolicyInit::Random { random } => random_policy(random.seed, mdp, random.spread),
    };
    let theta = match &spec.theta {
        ThetaInit::Named(ThetaName::Zeros) => DVector::zeros(ctx.features.dim()),
        ThetaInit::Named(ThetaName::Best) => {
            best_parameters_with(&policy, mdp, &ctx.features, &ctx.gram)
                .map_err(ExperimentError::model("fitting theta_pi0"))?
                .theta
        }
        ThetaInit::Named(ThetaName::Optimal) => ctx.equilibrium().theta,
        ThetaInit::Vector(v) => {
            if v.len() != ctx.features.dim() {
                return Err(ExperimentError::config(
                    "initial.theta",
                    format!("expected {} entries, found {}", ctx.features.dim(), v.len()),
                ));
            }
            DVector::from_column_slice(v)
        }
    };
    Ok(FlowState { t: 0.0, theta, policy })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub constants: BoundConstants,
    pub report: CertificateReport,
    /// Empty when the integration aborted.
    pub trajectory: Trajectory<f64>,
    pub exit_code: i32,
}

impl RunOutcome {
    pub fn final_gap(&self) -> Option<f64> {
        self.trajectory.snapshots.last().map(|s| s.diag.gap)
    }

    pub fn k_max(&self) -> Option<f64> {
        self.trajectory.snapshots.iter().map(|s| s.diag.k_t).reduce(f64::max)
    }

    pub fn count(&self, status: Status) -> usize {
        self.report.entries.iter().filter(|e| e.status == status).count()
    }
}

/// Runs one configuration in memory.
pub fn execute(cfg: &ExperimentConfig) -> ExpResult<RunOutcome> {
    cfg.validate()?;
    let (mdp, features) = cfg.build_model()?;
    let ctx = FlowContext::new(mdp, features).map_err(ExperimentError::model("preparing the flow"))?;
    let init = initial_state(&cfg.initial, &ctx)?;
    let constants = bound_constants(&ctx.mdp, &ctx.features, &init.theta, &init.policy, &cfg.schedule)
        .map_err(ExperimentError::model("computing constants"))?;

    let it = &cfg.integrator;
    let n_out = it.n_out.unwrap_or(DEFAULT_N_OUT);
    let output_times = match (&it.output_times, it.grid) {
        (Some(ts), _) => ts.clone(),
        (None, GridKind::Uniform) => uniform_grid(it.t_end, n_out),
        (None, GridKind::Graded) => {
            let first = it.dt.unwrap_or(EXP_EULER_DT).min(it.t_end / n_out as f64);
            graded_grid(it.t_end, n_out, first, GRADED_PER_DECADE)
        }
    };
    let result = match it.method {
        IntegratorMethod::Rk4 | IntegratorMethod::ExponentialEuler => {
            let (method, dt) = match it.method {
                IntegratorMethod::Rk4 => (Method::Rk4, it.dt.unwrap_or_else(|| default_dt(&cfg.schedule, it.t_end))),
                _ => (Method::ExponentialEuler, it.dt.unwrap_or(EXP_EULER_DT)),
            };
            let opts = IntegrateOptions {
                method,
                dt,
                t_end: it.t_end,
                output_times,
                theta_guard: THETA_GUARD,
                kl_guard: KL_GUARD,
            };
            integrate_with(&ctx, &init, &cfg.schedule, &opts)
        }
        IntegratorMethod::TwoTimescale => {
            let lambda = it.dt.unwrap_or(EXP_EULER_DT);
            let n_steps = (it.t_end / lambda).round().max(1.0) as usize;
            let mut opts = TwoTimescaleOptions::new(n_steps);
            opts.record_every = (n_steps / it.n_out.unwrap_or(DEFAULT_N_OUT)).max(1);
            run_two_timescale(&ctx, &init.theta, &init.policy, matched_steps(cfg.schedule, lambda), &opts)
        }
    };

    let config_hash = cfg.hash();
    let (trajectory, report) = match result {
        Ok(traj) => {
            let conv = cfg.convergence.unwrap_or_default();
            let report = run_certificates(&traj, &constants, &cfg.schedule, &cfg.certificates(), &conv);
            (traj, report)
        }
        Err(e @ (Error::BlowupDetected { .. } | Error::StepSizeTooLarge { .. })) => {
            let mut report = CertificateReport::default();
            report.push(blowup_entry(&e, &constants));
            (
                Trajectory {
                    snapshots: Vec::new(),
                    steps: 0,
                },
                report,
            )
        }
        Err(e) => return Err(ExperimentError::model("integrating")(e)),
    };
    let exit_code = if report.all_pass() { 0 } else { 2 };
    Ok(RunOutcome {
        config_hash,
        constants,
        report,
        trajectory,
        exit_code,
    })
}

/// A blow-up is only a failure when the stability hypothesis `η₀ > τ/Γ` holds.
fn blowup_entry(e: &Error, c: &BoundConstants) -> CertificateEntry {
    let t = match e {
        Error::BlowupDetected { t, .. } | Error::StepSizeTooLarge { t, .. } => *t,
        _ => f64::NAN,
    };
    let mut used = BTreeMap::new();
    used.insert("eta0".to_string(), c.eta0);
    used.insert("tau_over_Gamma".to_string(), c.tau / c.gamma_const);
    CertificateEntry {
        name: "integration".into(),
        status: if c.eta0_admissible_kl {
            Status::Fail
        } else {
            Status::NotApplicable
        },
        margin: f64::NAN,
        t_worst: t,
        constants_used: used,
        note: Some(if c.eta0_admissible_kl {
            format!("{e}")
        } else {
            format!("{e} (expected: eta0 <= tau/Gamma)")
        }),
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, hash: &str, body: &T) -> ExpResult<()> {
    let text = serde_json::to_string_pretty(&Stamped { config_hash: hash, body }).expect("serialisable");
    fs::write(path, text + "\n").map_err(ExperimentError::io(path))
}

#[derive(Serialize)]
struct ConstantsBody<'a> {
    constants: &'a BoundConstants,
}

#[derive(Serialize)]
struct ConfigBody<'a> {
    config: &'a ExperimentConfig,
}

/// Writes `trajectory.csv`, `constants.json`, `certificates.json` and
/// `config.json` into `dir`.
pub fn write_artifacts(out: &RunOutcome, cfg: &ExperimentConfig, dir: &Path) -> ExpResult<()> {
    fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
    let p = dir.join("trajectory.csv");
    let f = fs::File::create(&p).map_err(ExperimentError::io(&p))?;
    write_trajectory_csv(&out.trajectory, &out.config_hash, BufWriter::new(f)).map_err(ExperimentError::io(&p))?;
    write_json(&dir.join("constants.json"), &out.config_hash, &ConstantsBody { constants: &out.constants })?;
    write_json(&dir.join("certificates.json"), &out.config_hash, &out.report)?;
    let mut c = cfg.clone();
    c.output_dir = None;
    write_json(&dir.join("config.json"), &out.config_hash, &ConfigBody { config: &c })
}

fn output_dir(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs a configuration and writes its artifacts; returns the outcome.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> ExpResult<RunOutcome> {
    let mut single = cfg.clone();
    single.sweep = None;
    let out = execute(&single)?;
    write_artifacts(&out, &single, &output_dir(cfg, out_dir))?;
    Ok(out)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub index: usize,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub eta0: Option<f64>,
    pub seed: Option<u64>,
}

/// Expands the grid in row-major order `gamma × tau × eta0 × seed`.
pub fn sweep_points(grid: &SweepGrid) -> Vec<SweepPoint> {
    fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().map(|x| Some(*x)).collect()
        }
    }
    let mut out = Vec::new();
    for g in axis(&grid.gamma) {
        for t in axis(&grid.tau) {
            for e in axis(&grid.eta0) {
                for s in axis(&grid.seed) {
                    out.push(SweepPoint {
                        index: out.len(),
                        gamma: g,
                        tau: t,
                        eta0: e,
                        seed: s,
                    });
                }
            }
        }
    }
    out
}

/// The single-run configuration of a grid point.
pub fn point_config(base: &ExperimentConfig, p: &SweepPoint) -> ExpResult<ExperimentConfig> {
    let mut c = base.clone();
    c.sweep = None;
    if let Some(e) = p.eta0 {
        c.schedule = with_eta0(&c.schedule, e);
    }
    if let Some(s) = p.seed {
        c.override_seed(s);
    }
    if p.gamma.is_some() || p.tau.is_some() {
        match &mut c.mdp {
            MdpSource::Generator(g) => {
                g.gamma = p.gamma.unwrap_or(g.gamma);
                g.tau = p.tau.unwrap_or(g.tau);
            }
            MdpSource::File(path) => {
                // inline the file so the override is part of the effective config
                let (mdp, features) = MdpFile::load(path)?.build()?;
                let mut f = MdpFile::from_model(&mdp, &features);
                f.gamma = p.gamma.unwrap_or(f.gamma);
                f.tau = p.tau.unwrap_or(f.tau);
                let dir = std::env::temp_dir().join(format!("acflow-sweep-{}", base.hash()));
                fs::create_dir_all(&dir).map_err(ExperimentError::io(&dir))?;
                let fp = dir.join(format!("point_{:04}.json", p.index));
                fs::write(&fp, serde_json::to_string(&f).expect("serialisable")).map_err(ExperimentError::io(&fp))?;
                *path = fp;
            }
        }
    }
    Ok(c)
}

/// Per-point summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub exit_code: i32,
    pub final_gap: Option<f64>,
    pub k_max: Option<f64>,
    pub small_gamma_flag: Option<bool>,
    pub eta0_admissible: Option<bool>,
    pub n_pass: usize,
    pub n_fail: usize,
    pub n_not_applicable: usize,
    pub inadmissible_eta: bool,
    pub error: Option<String>,
}

/// Runs every grid point in parallel; a failing point does not abort the others.
pub fn sweep(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> ExpResult<Vec<SweepRow>> {
    cfg.validate()?;
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ExperimentError::config("sweep", "missing parameter grid"))?;
    let root = output_dir(cfg, out_dir);
    let points = sweep_points(grid);
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|p| {
            let res = point_config(cfg, p).and_then(|pc| {
                let out = execute(&pc)?;
                write_artifacts(&out, &pc, &root.join(format!("point_{:04}", p.index)))?;
                Ok(out)
            });
            match res {
                Ok(out) => SweepRow {
                    point: p.clone(),
                    exit_code: out.exit_code,
                    final_gap: out.final_gap(),
                    k_max: out.k_max(),
                    small_gamma_flag: Some(out.constants.small_gamma_flag),
                    eta0_admissible: Some(out.constants.eta0_admissible_kl),
                    n_pass: out.count(Status::Pass),
                    n_fail: out.count(Status::Fail),
                    n_not_applicable: out.count(Status::NotApplicable),
                    inadmissible_eta: !out.constants.eta0_admissible_kl,
                    error: None,
                },
                Err(e) => SweepRow {
                    point: p.clone(),
                    exit_code: 1,
                    final_gap: None,
                    k_max: None,
                    small_gamma_flag: None,
                    eta0_admissible: None,
                    n_pass: 0,
                    n_fail: 0,
                    n_not_applicable: 0,
                    inadmissible_eta: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    write_summary(&rows, &cfg.hash(), &root.join("summary.csv"))?;
    Ok(rows)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn opt_e(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

pub const SUMMARY_COLUMNS: [&str; 15] = [
    "point",
    "gamma",
    "tau",
    "eta0",
    "seed",
    "exit_code",
    "final_gap",
    "K_max",
    "small_gamma_flag",
    "eta0_admissible",
    "inadmissible_eta",
    "n_pass",
    "n_fail",
    "n_not_applicable",
    "error",
];

fn write_summary(rows: &[SweepRow], hash: &str, path: &Path) -> ExpResult<()> {
    use std::io::Write;
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(ExperimentError::io(d))?;
    }
    let mut f = BufWriter::new(fs::File::create(path).map_err(ExperimentError::io(path))?);
    writeln!(f, "# config_hash={hash}").map_err(ExperimentError::io(path))?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| ExperimentError::io(path)(e.into());
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.point.index.to_string(),
            opt(r.point.gamma),
            opt(r.point.tau),
            opt(r.point.eta0),
            opt(r.point.seed),
            r.exit_code.to_string(),
            opt_e(r.final_gap),
            opt_e(r.k_max),
            opt(r.small_gamma_flag),
            opt(r.eta0_admissible),
            r.inadmissible_eta.to_string(),
            r.n_pass.to_string(),
            r.n_fail.to_string(),
            r.n_not_applicable.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(ExperimentError::io(path))
}

/// Parses and builds everything a run needs without integrating.
pub fn validate_config(cfg: &ExperimentConfig) -> ExpResult<BoundConstants> {
    cfg.validate()?;
    let (mdp, features) = cfg.build_model()?;
    let ctx = FlowContext::new(mdp, features).map_err(ExperimentError::model("preparing the flow"))?;
    let init = initial_state(&cfg.initial, &ctx)?;
    if let Some(g) = &cfg.sweep {
        for p in sweep_points(g) {
            point_config(cfg, &p)?.validate()?;
        }
    }
    bound_constants(&ctx.mdp, &ctx.features, &init.theta, &init.policy, &cfg.schedule)
        .map_err(ExperimentError::model("computing constants"))
}

/// Samples a generator spec and writes it as an MDP file.
pub fn gen_mdp(spec: &GeneratorSpec, path: &Path) -> ExpResult<MdpFile> {
    let (mdp, features) = spec.generate()?;
    let file = MdpFile::from_model(&mdp, &features);
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(ExperimentError::io(d))?;
    }
    let text = serde_json::to_string_pretty(&file).expect("serialisable");
    fs::write(path, text + "\n").map_err(ExperimentError::io(path))?;
    Ok(file)
}

/// Reads a generator spec from JSON.
pub fn load_generator_spec(path: &Path) -> ExpResult<GeneratorSpec> {
    let text = fs::read_to_string(path).map_err(ExperimentError::io(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::config("<generator spec>", e.to_string()))
}

/// Flattened `(|S|·|A|) × N` matrix from nested `[s][a][i]` features.
pub fn phi_from_nested(f: &[Vec<Vec<f64>>]) -> DMatrix<f64> {
    let rows: Vec<&Vec<f64>> = f.iter().flatten().collect();
    let dim = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}
