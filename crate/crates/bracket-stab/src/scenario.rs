//! Scenario-driven batch runner.
//!
//! One JSON document describes a scenario: the system, the certificate
//! candidate, the radius pairs, initial states, grid resolutions, and
//! integrator settings. Running a scenario executes envelope construction,
//! constants estimation, schedule assembly, the sampled dissipative check,
//! the per-state runs, and the stabilizability audits, then writes traces,
//! `summary.json`, `schedule.json`, `constants.json`, `envelopes.csv`, and a
//! Markdown report.
//!
//! All randomness flows from the single scenario seed. Identical configs and
//! seeds produce byte-identical summaries.

use crate::brackets::{LabelSet, Pruning};
use crate::feedback::{
    du_envelopes, estimate_constants, step_schedule, ConstantsConfig, ConstantsEstimate,
    FeedbackError, LevelEnvelopes, StepSchedule,
};
use crate::hamiltonian::{
    check_dissipative, w_bound, CandidateFunction, DissipativeReport, HamiltonianError,
    MrfCandidate, RateMap,
};
use crate::sampling::shell_points;
use crate::simulate::{
    check_stabilizability, run_process, write_trace_csv, AuditReport, CostCheck, ProcessRecord,
    RunOptions, SimulateError, Termination,
};
use crate::symexpr::parse::{parse_scalar, parse_state_scalar, ParseError};
use crate::symexpr::{Lagrangian, ScalarExpr, System, SystemError, Target, VectorField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("in {context}: {source}")]
    Expr {
        context: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Bracket(#[from] crate::brackets::BracketError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Eval(#[from] crate::symexpr::EvalError),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ScenarioError {
    /// Exit class of the error: configuration problems versus numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Io { .. }
            | ScenarioError::Json(_)
            | ScenarioError::Expr { .. }
            | ScenarioError::System(_)
            | ScenarioError::Invalid(_)
            | ScenarioError::Bracket(_) => 2,
            _ => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// configuration schema

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub system: SystemSpec,
    pub candidate: CandidateSpec,
    pub pairs: Vec<PairSpec>,
    pub initial_states: Vec<Vec<f64>>,
    #[serde(default)]
    pub grids: GridSpec,
    #[serde(default)]
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default = "default_inflation")]
    pub safety_inflation: f64,
    #[serde(default = "default_horizons")]
    pub asymptotic_horizons: Vec<f64>,
    #[serde(default = "default_true")]
    pub cost_audit: bool,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Keep identically-zero bracket labels in the enumeration (audit aid).
    #[serde(default)]
    pub keep_zero_labels: bool,
}

fn default_seed() -> u64 {
    0x5eed
}
fn default_inflation() -> f64 {
    1.25
}
fn default_horizons() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05]
}
fn default_true() -> bool {
    true
}
fn default_jobs() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub state_dim: usize,
    /// One expression list per control field, each of length `state_dim`.
    pub fields: Vec<Vec<String>>,
    pub lagrangian: LagrangianSpec,
    pub target: TargetSpec,
    pub k: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagrangianSpec {
    Uniform(String),
    /// Indexed `+e1..+em` then `-e1..-em`.
    PerControl(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Point {
        center: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Expression {
        distance: String,
        gradient: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    /// `"distance"` or an expression in `x1..xn`.
    pub u: String,
    #[serde(default)]
    pub gradient: Option<Vec<String>>,
    /// Expression in `u`.
    pub p0: String,
    /// Expression in `u`.
    pub gamma: String,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_probe_radius")]
    pub probe_radius: f64,
}

fn default_probe_radius() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    #[serde(rename = "R")]
    pub r_big: f64,
    #[serde(rename = "r")]
    pub r_small: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_envelope_samples")]
    pub envelope_samples: usize,
    /// Largest target distance sampled for the envelopes; defaults to
    /// 2.5x the largest exit radius.
    #[serde(default)]
    pub envelope_cover: Option<f64>,
    #[serde(default = "default_dissipative_samples")]
    pub dissipative_samples: usize,
    /// Shell of target distances for the dissipative check; defaults to
    /// `[r/10, 2 r_tilde]` per pair.
    #[serde(default)]
    pub dissipative_shell: Option<(f64, f64)>,
    #[serde(default = "default_lattice")]
    pub constants_lattice: usize,
    #[serde(default = "default_shell_samples")]
    pub constants_shell_samples: usize,
    #[serde(default = "default_probe_trials")]
    pub probe_trials: usize,
    #[serde(default = "default_asymptotic_points")]
    pub asymptotic_points: usize,
}

fn default_envelope_samples() -> usize {
    4000
}
fn default_dissipative_samples() -> usize {
    1000
}
fn default_lattice() -> usize {
    15
}
fn default_shell_samples() -> usize {
    1000
}
fn default_probe_trials() -> usize {
    2000
}
fn default_asymptotic_points() -> usize {
    2
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            envelope_samples: default_envelope_samples(),
            envelope_cover: None,
            dissipative_samples: default_dissipative_samples(),
            dissipative_shell: None,
            constants_lattice: default_lattice(),
            constants_shell_samples: default_shell_samples(),
            probe_trials: default_probe_trials(),
            asymptotic_points: default_asymptotic_points(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Substeps per segment for reference (asymptotic-order) integrations.
    #[serde(default = "default_reference_substeps")]
    pub reference_substeps: usize,
}

fn default_substeps() -> usize {
    8
}
fn default_reference_substeps() -> usize {
    128
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        IntegratorSpec {
            substeps: default_substeps(),
            reference_substeps: default_reference_substeps(),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "default_target_tolerance")]
    pub target_tolerance: f64,
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
}

fn default_horizon() -> f64 {
    1000.0
}
fn default_max_steps() -> usize {
    500_000
}
fn default_step_fraction() -> f64 {
    1.0
}
fn default_target_tolerance() -> f64 {
    1e-9
}
fn default_trace_stride() -> usize {
    32
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            horizon: default_horizon(),
            max_steps: default_max_steps(),
            step_fraction: default_step_fraction(),
            target_tolerance: default_target_tolerance(),
            trace_stride: default_trace_stride(),
        }
    }
}

// ---------------------------------------------------------------------------
// building runtime objects from the config

/// A parsed and validated scenario, ready to run.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub system: System,
    pub candidate: MrfCandidate,
    pub label_set: LabelSet,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ScenarioConfig = serde_json::from_str(&text)?;
        Scenario::from_config(config)
    }

    pub fn from_config(config: ScenarioConfig) -> Result<Scenario, ScenarioError> {
        let n = config.system.state_dim;
        let parse_state = |src: &str, context: String| {
            parse_state_scalar(src, n).map_err(|source| ScenarioError::Expr { context, source })
        };

        let mut fields = Vec::with_capacity(config.system.fields.len());
        for (i, comps) in config.system.fields.iter().enumerate() {
            if comps.len() != n {
                return Err(ScenarioError::Invalid(format!(
                    "field {} has {} components, state dimension is {n}",
                    i + 1,
                    comps.len()
                )));
            }
            let mut exprs = Vec::with_capacity(n);
            for (j, src) in comps.iter().enumerate() {
                exprs.push(parse_state(
                    src,
                    format!("field {} component {}", i + 1, j + 1),
                )?);
            }
            fields.push(VectorField::new(exprs));
        }

        let lagrangian = match &config.system.lagrangian {
            LagrangianSpec::Uniform(src) => {
                Lagrangian::Uniform(parse_state(src, "lagrangian".into())?)
            }
            LagrangianSpec::PerControl(srcs) => {
                let m = fields.len();
                if srcs.len() != 2 * m {
                    return Err(ScenarioError::Invalid(format!(
                        "per-control lagrangian needs {} entries (got {})",
                        2 * m,
                        srcs.len()
                    )));
                }
                let mut exprs = Vec::with_capacity(srcs.len());
                for (i, src) in srcs.iter().enumerate() {
                    exprs.push(parse_state(src, format!("lagrangian entry {i}"))?);
                }
                Lagrangian::PerControl(exprs)
            }
        };

        let target = match &config.system.target {
            TargetSpec::Point { center } => {
                if center.len() != n {
                    return Err(ScenarioError::Invalid("target center dimension".into()));
                }
                Target::Point(center.clone())
            }
            TargetSpec::Ball { center, radius } => {
                if center.len() != n {
                    return Err(ScenarioError::Invalid("target center dimension".into()));
                }
                if !(*radius > 0.0) {
                    return Err(ScenarioError::Invalid(
                        "target radius must be positive".into(),
                    ));
                }
                Target::Ball {
                    center: center.clone(),
                    radius: *radius,
                }
            }
            TargetSpec::Expression { distance, gradient } => {
                let dist = parse_state(distance, "target distance".into())?;
                let grad = match gradient {
                    Some(srcs) => {
                        if srcs.len() != n {
                            return Err(ScenarioError::Invalid("target gradient dimension".into()));
                        }
                        let mut exprs = Vec::with_capacity(n);
                        for (i, src) in srcs.iter().enumerate() {
                            exprs.push(parse_state(src, format!("target gradient {}", i + 1))?);
                        }
                        Some(exprs)
                    }
                    None => None,
                };
                Target::LevelSet {
                    distance: dist,
                    gradient: grad,
                }
            }
        };

        let system = System::new(n, fields, lagrangian, target, config.system.k)?;

        let function = if config.candidate.u.trim() == "distance" {
            CandidateFunction::TargetDistance
        } else {
            let value = parse_state(&config.candidate.u, "candidate u".into())?;
            let gradient = match &config.candidate.gradient {
                Some(srcs) => {
                    if srcs.len() != n {
                        return Err(ScenarioError::Invalid(
                            "candidate gradient dimension".into(),
                        ));
                    }
                    let mut exprs = Vec::with_capacity(n);
                    for (i, src) in srcs.iter().enumerate() {
                        exprs.push(parse_state(src, format!("candidate gradient {}", i + 1))?);
                    }
                    Some(exprs)
                }
                None => None,
            };
            CandidateFunction::Expr { value, gradient }
        };
        let parse_rate = |src: &str, context: &str| -> Result<ScalarExpr, ScenarioError> {
            parse_scalar(src, &["u"]).map_err(|source| ScenarioError::Expr {
                context: context.into(),
                source,
            })
        };
        let candidate = MrfCandidate {
            function,
            cost_multiplier: RateMap::new(parse_rate(&config.candidate.p0, "p0")?),
            dissipative_rate: RateMap::new(parse_rate(&config.candidate.gamma, "gamma")?),
            nu: config.candidate.nu,
            probe_radius: config.candidate.probe_radius,
        };
        if !(0.0..=1.0).contains(&candidate.nu) {
            return Err(ScenarioError::Invalid("nu must lie in [0, 1]".into()));
        }

        for pair in &config.pairs {
            if !(pair.r_small > 0.0) || pair.r_small >= pair.r_big {
                return Err(ScenarioError::Invalid(format!(
                    "radius pair needs 0 < r < R, got R = {}, r = {}",
                    pair.r_big, pair.r_small
                )));
            }
        }
        if config.pairs.is_empty() {
            return Err(ScenarioError::Invalid(
                "at least one (R, r) pair required".into(),
            ));
        }
        if config.initial_states.is_empty() {
            return Err(ScenarioError::Invalid(
                "at least one initial state required".into(),
            ));
        }
        for (i, x) in config.initial_states.iter().enumerate() {
            if x.len() != n {
                return Err(ScenarioError::Invalid(format!(
                    "initial state {i} has dimension {}, expected {n}",
                    x.len()
                )));
            }
        }
        if config.system.k == 0 {
            return Err(ScenarioError::Invalid("k must be at least 1".into()));
        }
        let spread = (config.system.k as f64 - 1.0) / config.system.k as f64;
        if !(config.run.step_fraction > spread && config.run.step_fraction <= 1.0) {
            return Err(ScenarioError::Invalid(format!(
                "step_fraction must lie in ({spread}, 1]"
            )));
        }

        let pruning = if config.keep_zero_labels {
            Pruning::Keep
        } else {
            Pruning::ZeroBrackets
        };
        let label_set = LabelSet::new(&system, config.system.k, pruning)?;
        Ok(Scenario {
            config,
            system,
            candidate,
            label_set,
        })
    }

    /// Sanity warnings about the candidate's rate maps and positivity, from
    /// sampled grids. Warnings never block a run.
    pub fn candidate_warnings(&self, rng: &mut dyn rand::RngCore) -> Vec<String> {
        let mut warnings = Vec::new();
        let mut prev_p0 = f64::NEG_INFINITY;
        let mut prev_gamma = f64::NEG_INFINITY;
        for i in 0..=100 {
            let u = i as f64 * 0.05;
            match self.candidate.p0(u) {
                Ok(p) => {
                    if !(0.0..=1.0).contains(&p) {
                        warnings.push(format!("p0({u}) = {p} leaves [0, 1]"));
                        break;
                    }
                    if p < prev_p0 - 1e-12 {
                        warnings.push(format!("p0 decreases at u = {u}"));
                        break;
                    }
                    prev_p0 = p;
                }
                Err(e) => {
                    warnings.push(format!("p0({u}) failed: {e}"));
                    break;
                }
            }
            match self.candidate.gamma(u) {
                Ok(g) => {
                    if u > 0.0 && g <= 0.0 {
                        warnings.push(format!("gamma({u}) = {g} is not positive"));
                        break;
                    }
                    if g < prev_gamma - 1e-12 {
                        warnings.push(format!("gamma decreases at u = {u}"));
                        break;
                    }
                    prev_gamma = g;
                }
                Err(e) => {
                    warnings.push(format!("gamma({u}) failed: {e}"));
                    break;
                }
            }
        }
        // positive definiteness of the certificate on a small shell sample,
        // and nonnegativity of the running cost
        let r_max = self
            .config
            .pairs
            .iter()
            .map(|p| p.r_big)
            .fold(0.0, f64::max);
        if let Ok(points) = shell_points(
            self.system.target(),
            self.system.state_dim(),
            (1e-3, r_max),
            64,
            rng,
        ) {
            'outer: for x in points {
                match self.candidate.value(self.system.target(), &x) {
                    Ok(u) if u <= 0.0 => {
                        warnings.push(format!("candidate is not positive at {x:?}"));
                        break;
                    }
                    Err(e) => {
                        warnings.push(format!("candidate evaluation failed: {e}"));
                        break;
                    }
                    _ => {}
                }
                for a in self.system.control_values() {
                    match self.system.running_cost(&x, a) {
                        Ok(l) if l < 0.0 => {
                            warnings.push(format!("running cost is negative at {x:?} under {a}"));
                            break 'outer;
                        }
                        Err(e) => {
                            warnings.push(format!("running cost failed at {x:?}: {e}"));
                            break 'outer;
                        }
                        _ => {}
                    }
                }
            }
        }
        // the certificate should vanish toward the target boundary: levels on
        // a thin inner shell must separate from levels on a far shell
        let near = shell_points(
            self.system.target(),
            self.system.state_dim(),
            (1e-4 * r_max, 1e-3 * r_max),
            32,
            rng,
        );
        let far = shell_points(
            self.system.target(),
            self.system.state_dim(),
            (0.5 * r_max, r_max),
            32,
            rng,
        );
        if let (Ok(near), Ok(far)) = (near, far) {
            let near_max = near
                .iter()
                .filter_map(|x| self.candidate.value(self.system.target(), x).ok())
                .fold(0.0f64, f64::max);
            let far_min = far
                .iter()
                .filter_map(|x| self.candidate.value(self.system.target(), x).ok())
                .fold(f64::INFINITY, f64::min);
            if near_max >= far_min {
                warnings.push(format!(
                    "candidate does not vanish toward the target (near-shell max {near_max}, far-shell min {far_min})"
                ));
            }
        }
        for w in &self.label_set.smoothness_warnings {
            warnings.push(format!(
                "field primitive '{w}' is not smooth on all of its domain"
            ));
        }
        warnings
    }
}

// ---------------------------------------------------------------------------
// outcome types serialized into summary.json

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub index: usize,
    pub initial_state: Vec<f64>,
    pub termination: Termination,
    pub certified: bool,
    pub steps: usize,
    pub entry_time: Option<f64>,
    pub entry_step: Option<usize>,
    pub cost_at_entry: Option<f64>,
    pub level_at_entry: Option<f64>,
    pub max_distance: f64,
    pub final_cost: f64,
    pub audit: AuditReport,
    pub trace_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipativeSummary {
    pub samples: usize,
    pub max_violation: f64,
    pub violations: usize,
    pub oracle_failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilitySummary {
    pub integrable: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairSummary {
    pub r_big: f64,
    pub r_small: f64,
    pub constants: ConstantsEstimate,
    pub schedule: StepSchedule,
    pub dissipative: DissipativeSummary,
    pub integrability: IntegrabilitySummary,
    pub runs: Vec<RunSummary>,
    pub all_runs_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub seed: u64,
    pub cost_audit: bool,
    pub warnings: Vec<String>,
    pub pairs: Vec<PairSummary>,
    pub all_pass: bool,
}

/// Everything produced by a scenario run.
pub struct ScenarioOutcome {
    pub summary: ScenarioSummary,
    /// Full dissipative reports per pair (written to disk, big).
    pub dissipative_reports: Vec<DissipativeReport>,
    pub records: Vec<(usize, ProcessRecord)>,
    pub envelopes: Vec<LevelEnvelopes>,
}

impl ScenarioOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.summary.all_pass {
            0
        } else {
            3
        }
    }
}

// ---------------------------------------------------------------------------
// the pipeline

/// Run the full pipeline; artifacts go to `out_dir` if given.
pub fn run_scenario(
    scenario: &Scenario,
    out_dir: Option<&Path>,
) -> Result<ScenarioOutcome, ScenarioError> {
    let config = &scenario.config;
    let system = &scenario.system;
    let candidate = &scenario.candidate;
    let set = &scenario.label_set;
    let k = config.system.k;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let warnings = scenario.candidate_warnings(&mut rng);

    // level envelopes over a cover of every requested exit radius
    let r_max = config.pairs.iter().map(|p| p.r_big).fold(0.0, f64::max);
    let cover = config.grids.envelope_cover.unwrap_or(2.5 * r_max);
    let envelopes = du_envelopes(
        system,
        candidate,
        (1e-3 * r_max, cover),
        config.grids.envelope_samples,
        &mut rng,
    )?;

    let constants_cfg = ConstantsConfig {
        lattice_per_axis: config.grids.constants_lattice,
        shell_samples: config.grids.constants_shell_samples,
        probe_trials: config.grids.probe_trials,
        asymptotic_points: config.grids.asymptotic_points,
        horizons: config.asymptotic_horizons.clone(),
        substeps: config.integrator.reference_substeps,
        inflation: config.safety_inflation,
    };

    let mut pair_summaries = Vec::new();
    let mut dissipative_reports = Vec::new();
    let mut all_records = Vec::new();
    let mut run_counter = 0usize;

    for pair in &config.pairs {
        // thresholds first: the constants live on the region they define
        let thresholds =
            crate::feedback::thresholds_from_envelopes(&envelopes, pair.r_big, pair.r_small, k)?;
        let constants = estimate_constants(
            system,
            set,
            candidate,
            thresholds.r_tilde,
            &constants_cfg,
            &mut rng,
        )?;
        let schedule = step_schedule(
            &constants,
            candidate,
            &envelopes,
            pair.r_big,
            pair.r_small,
            k,
        )?;

        // sampled dissipative check over the working shell
        let shell = config
            .grids
            .dissipative_shell
            .unwrap_or((pair.r_small / 10.0, 2.0 * thresholds.r_tilde));
        let samples = shell_points(
            system.target(),
            system.state_dim(),
            shell,
            config.grids.dissipative_samples,
            &mut rng,
        )?;
        let dissipative = check_dissipative(system, set, candidate, &samples)?;

        // integrability of the rate envelope ((H3)-style gate for the cost)
        let integrability = match w_bound(candidate, schedule.u_big_r.max(1e-6), k, 1.0) {
            Ok(_) => IntegrabilitySummary {
                integrable: true,
                detail: String::new(),
            },
            Err(HamiltonianError::NonIntegrable(e)) => IntegrabilitySummary {
                integrable: false,
                detail: e.to_string(),
            },
            Err(other) => return Err(other.into()),
        };

        // validate starts against this pair before running anything
        for x in &config.initial_states {
            let d = system.distance(x)?;
            if d > pair.r_big {
                return Err(ScenarioError::Invalid(format!(
                    "initial state {x:?} has distance {d}, beyond R = {}",
                    pair.r_big
                )));
            }
        }

        let opts = RunOptions {
            horizon: config.run.horizon,
            max_steps: config.run.max_steps,
            substeps: config.integrator.substeps,
            step_fraction: config.run.step_fraction,
            target_tolerance: config.run.target_tolerance,
            trace_stride: config.run.trace_stride,
        };

        // independent runs, bounded worker pool, deterministic order
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs.max(1))
            .build()
            .expect("worker pool");
        let results: Vec<Result<ProcessRecord, SimulateError>> = pool.install(|| {
            use rayon::prelude::*;
            config
                .initial_states
                .par_iter()
                .map(|x| run_process(system, set, candidate, &schedule, x, &opts))
                .collect()
        });

        let mut run_summaries = Vec::new();
        for (i, result) in results.into_iter().enumerate() {
            let record = result?;
            let audit = check_stabilizability(&record, &schedule, candidate)?;
            let trace_file = format!("trace_{run_counter}.csv");
            run_summaries.push(RunSummary {
                index: run_counter,
                initial_state: config.initial_states[i].clone(),
                termination: record.termination.clone(),
                certified: record.certified,
                steps: record.steps.len(),
                entry_time: record.entry_time,
                entry_step: record.entry_step,
                cost_at_entry: record.cost_at_entry,
                level_at_entry: record.level_at_entry,
                max_distance: record.max_distance,
                final_cost: record.final_cost,
                audit,
                trace_file,
            });
            all_records.push((run_counter, record));
            run_counter += 1;
        }

        let all_runs_pass = run_summaries.iter().all(|r| {
            let core = r.audit.overshoot.pass
                && r.audit.attractiveness.pass
                && r.audit.entrapment.pass
                && r.audit.decrease_pass
                && r.audit.iteration_check.pass;
            let cost_ok = if config.cost_audit {
                matches!(r.audit.cost, CostCheck::Checked(ref c) if c.pass)
            } else {
                true
            };
            core && cost_ok
        });

        pair_summaries.push(PairSummary {
            r_big: pair.r_big,
            r_small: pair.r_small,
            constants,
            schedule,
            dissipative: DissipativeSummary {
                samples: dissipative.samples,
                max_violation: dissipative.max_violation,
                violations: dissipative.violation_witnesses.len(),
                oracle_failures: dissipative.oracle_failures,
                passed: dissipative.passed(),
            },
            integrability,
            runs: run_summaries,
            all_runs_pass,
        });
        dissipative_reports.push(dissipative);
    }

    let all_pass = pair_summaries.iter().all(|p| {
        let h3_ok = !config.cost_audit || p.integrability.integrable;
        p.dissipative.passed && p.all_runs_pass && h3_ok
    });
    let summary = ScenarioSummary {
        name: config.name.clone(),
        seed: config.seed,
        cost_audit: config.cost_audit,
        warnings,
        pairs: pair_summaries,
        all_pass,
    };
    let outcome = ScenarioOutcome {
        summary,
        dissipative_reports,
        records: all_records,
        envelopes: vec![envelopes],
    };

    if let Some(dir) = out_dir {
        write_artifacts(&outcome, dir)?;
    }
    Ok(outcome)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ScenarioError> {
    std::fs::write(path, contents).map_err(|source| ScenarioError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `summary.json`, `report.md`, `schedule.json`, `constants.json`,
/// `dissipative.json`, `envelopes.csv`, and per-run `trace_<i>.csv`.
pub fn write_artifacts(outcome: &ScenarioOutcome, dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let summary = serde_json::to_vec_pretty(&outcome.summary)?;
    write_file(&dir.join("summary.json"), &summary)?;

    let schedules: Vec<&StepSchedule> = outcome.summary.pairs.iter().map(|p| &p.schedule).collect();
    write_file(
        &dir.join("schedule.json"),
        &serde_json::to_vec_pretty(&schedules)?,
    )?;
    let constants: Vec<&ConstantsEstimate> =
        outcome.summary.pairs.iter().map(|p| &p.constants).collect();
    write_file(
        &dir.join("constants.json"),
        &serde_json::to_vec_pretty(&constants)?,
    )?;
    write_file(
        &dir.join("dissipative.json"),
        &serde_json::to_vec_pretty(&outcome.dissipative_reports)?,
    )?;

    for envelopes in &outcome.envelopes {
        let mut buf = Vec::new();
        envelopes.write_csv(&mut buf)?;
        write_file(&dir.join("envelopes.csv"), &buf)?;
    }

    for (index, record) in &outcome.records {
        let mut buf = Vec::new();
        write_trace_csv(record, &mut buf)?;
        write_file(&dir.join(format!("trace_{index}.csv")), &buf)?;
    }

    write_file(
        &dir.join("report.md"),
        render_report(&outcome.summary).as_bytes(),
    )?;
    Ok(())
}

fn check_mark(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

/// Render the Markdown report: realized values next to their a priori bounds.
pub fn render_report(summary: &ScenarioSummary) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "# Scenario `{}`\n", summary.name);
    let _ = writeln!(out, "- seed: `{}`", summary.seed);
    let _ = writeln!(out, "- overall: **{}**\n", check_mark(summary.all_pass));
    if !summary.warnings.is_empty() {
        let _ = writeln!(out, "## Warnings\n");
        for w in &summary.warnings {
            let _ = writeln!(out, "- {w}");
        }
        let _ = writeln!(out);
    }
    for pair in &summary.pairs {
        let _ = writeln!(out, "## Pair R = {}, r = {}\n", pair.r_big, pair.r_small);
        let _ = writeln!(
            out,
            "- dissipative check: **{}** (max violation {:.3e} over {} samples)",
            check_mark(pair.dissipative.passed),
            pair.dissipative.max_violation,
            pair.dissipative.samples
        );
        let _ = writeln!(
            out,
            "- rate envelope integrable: **{}** {}",
            check_mark(pair.integrability.integrable),
            pair.integrability.detail
        );
        let s = &pair.schedule;
        let _ = writeln!(
            out,
            "- schedule: entry level {:.6}, exit level {:.6}, steps {:?}, T(R,r) = {:.4e}, J(R,r) = {:.4e}",
            s.entry_level, s.u_big_r, s.delta, s.time_bound, s.iteration_bound
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "| run | start | steps | entry step | entry time | T bound | cost | cost bound | (i) | (ii) | (iii) | (iv) | certified |"
        );
        let _ = writeln!(
            out,
            "|-----|-------|-------|------------|-----------|---------|------|-----------|-----|------|-------|------|-----------|"
        );
        for run in &pair.runs {
            let (cost_bound, cost_mark) = match &run.audit.cost {
                CostCheck::Checked(c) => (format!("{:.4e}", c.bound), check_mark(c.pass)),
                CostCheck::NotEvaluable { .. } => ("n/a".into(), "FAIL"),
                CostCheck::NoEntry => ("n/a".into(), "FAIL"),
            };
            let _ = writeln!(
                out,
                "| {} | {:?} | {} | {} | {} | {:.4e} | {} | {} | {} | {} | {} | {} | {} |",
                run.index,
                run.initial_state,
                run.steps,
                run.entry_step
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "-".into()),
                run.entry_time
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                pair.schedule.time_bound,
                run.cost_at_entry
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                cost_bound,
                check_mark(run.audit.overshoot.pass),
                check_mark(run.audit.attractiveness.pass),
                check_mark(run.audit.entrapment.pass),
                cost_mark,
                check_mark(run.certified),
            );
        }
        let _ = writeln!(out);
    }
    out
}

/// Parse + run + write in one call, as the CLI does.
pub fn run_scenario_path(
    path: &Path,
    out_dir: Option<&Path>,
    seed_override: Option<u64>,
    jobs_override: Option<usize>,
) -> Result<ScenarioOutcome, ScenarioError> {
    let mut scenario = Scenario::from_path(path)?;
    if let Some(seed) = seed_override {
        scenario.config.seed = seed;
    }
    if let Some(jobs) = jobs_override {
        scenario.config.jobs = jobs;
    }
    let default_dir = scenario.config.output_dir.clone().map(PathBuf::from);
    let dir = out_dir.map(Path::to_path_buf).or(default_dir);
    run_scenario(&scenario, dir.as_deref())
}

// ---------------------------------------------------------------------------
// single-stage entry points used by the CLI subcommands

/// Dissipative grid check only: envelopes, thresholds, sampled inequality.
pub fn run_check(
    scenario: &Scenario,
    out_dir: Option<&Path>,
) -> Result<(Vec<DissipativeSummary>, bool), ScenarioError> {
    let config = &scenario.config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r_max = config.pairs.iter().map(|p| p.r_big).fold(0.0, f64::max);
    let cover = config.grids.envelope_cover.unwrap_or(2.5 * r_max);
    let envelopes = du_envelopes(
        &scenario.system,
        &scenario.candidate,
        (1e-3 * r_max, cover),
        config.grids.envelope_samples,
        &mut rng,
    )?;
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    let mut all_pass = true;
    for pair in &config.pairs {
        let thresholds = crate::feedback::thresholds_from_envelopes(
            &envelopes,
            pair.r_big,
            pair.r_small,
            config.system.k,
        )?;
        let shell = config
            .grids
            .dissipative_shell
            .unwrap_or((pair.r_small / 10.0, 2.0 * thresholds.r_tilde));
        let samples = shell_points(
            scenario.system.target(),
            scenario.system.state_dim(),
            shell,
            config.grids.dissipative_samples,
            &mut rng,
        )?;
        let report = check_dissipative(
            &scenario.system,
            &scenario.label_set,
            &scenario.candidate,
            &samples,
        )?;
        all_pass = all_pass && report.passed();
        summaries.push(DissipativeSummary {
            samples: report.samples,
            max_violation: report.max_violation,
            violations: report.violation_witnesses.len(),
            oracle_failures: report.oracle_failures,
            passed: report.passed(),
        });
        reports.push(report);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        write_file(
            &dir.join("dissipative.json"),
            &serde_json::to_vec_pretty(&reports)?,
        )?;
    }
    Ok((summaries, all_pass))
}

/// Envelopes + constants + schedule for every pair, no runs.
pub fn run_schedule_stage(
    scenario: &Scenario,
    out_dir: Option<&Path>,
) -> Result<Vec<StepSchedule>, ScenarioError> {
    let config = &scenario.config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r_max = config.pairs.iter().map(|p| p.r_big).fold(0.0, f64::max);
    let cover = config.grids.envelope_cover.unwrap_or(2.5 * r_max);
    let envelopes = du_envelopes(
        &scenario.system,
        &scenario.candidate,
        (1e-3 * r_max, cover),
        config.grids.envelope_samples,
        &mut rng,
    )?;
    let constants_cfg = ConstantsConfig {
        lattice_per_axis: config.grids.constants_lattice,
        shell_samples: config.grids.constants_shell_samples,
        probe_trials: config.grids.probe_trials,
        asymptotic_points: config.grids.asymptotic_points,
        horizons: config.asymptotic_horizons.clone(),
        substeps: config.integrator.reference_substeps,
        inflation: config.safety_inflation,
    };
    let mut schedules = Vec::new();
    let mut constants_list = Vec::new();
    for pair in &config.pairs {
        let thresholds = crate::feedback::thresholds_from_envelopes(
            &envelopes,
            pair.r_big,
            pair.r_small,
            config.system.k,
        )?;
        let constants = estimate_constants(
            &scenario.system,
            &scenario.label_set,
            &scenario.candidate,
            thresholds.r_tilde,
            &constants_cfg,
            &mut rng,
        )?;
        let schedule = step_schedule(
            &constants,
            &scenario.candidate,
            &envelopes,
            pair.r_big,
            pair.r_small,
            config.system.k,
        )?;
        schedules.push(schedule);
        constants_list.push(constants);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        write_file(
            &dir.join("schedule.json"),
            &serde_json::to_vec_pretty(&schedules)?,
        )?;
        write_file(
            &dir.join("constants.json"),
            &serde_json::to_vec_pretty(&constants_list)?,
        )?;
        let mut buf = Vec::new();
        envelopes.write_csv(&mut buf)?;
        write_file(&dir.join("envelopes.csv"), &buf)?;
    }
    Ok(schedules)
}

/// One order-fit line per label of degree `<= k`.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticLine {
    pub label: String,
    pub degree: u32,
    pub switch_number: u64,
    pub slope: Option<f64>,
    pub exact_to_tolerance: bool,
    pub max_error: f64,
    pub remainder_constant: f64,
}

/// Order-fit study of the expansion for every enumerated label.
pub fn run_asymptotic_study(scenario: &Scenario) -> Result<Vec<AsymptoticLine>, ScenarioError> {
    let config = &scenario.config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r_max = config.pairs.iter().map(|p| p.r_big).fold(0.0, f64::max);
    let x = shell_points(
        scenario.system.target(),
        scenario.system.state_dim(),
        (0.4 * r_max, 0.6 * r_max),
        1,
        &mut rng,
    )?
    .pop()
    .expect("one sample requested");
    let mut out = Vec::new();
    for entry in scenario.label_set.entries() {
        let fit = crate::controls::verify_asymptotic(
            &scenario.system,
            entry,
            &x,
            &config.asymptotic_horizons,
            config.integrator.reference_substeps,
        )
        .map_err(FeedbackError::from)?;
        out.push(AsymptoticLine {
            label: entry.label.text(),
            degree: entry.label.degree() as u32,
            switch_number: entry.label.switch_number(),
            slope: fit.slope,
            exact_to_tolerance: fit.exact_to_tolerance(),
            max_error: fit.points.iter().map(|(_, e)| *e).fold(0.0, f64::max),
            remainder_constant: fit.remainder_constant,
        });
    }
    Ok(out)
}
