//! Sample-and-hold execution of the bracket feedback and the audit of the
//! stabilization-with-cost conditions.
//!
//! A run repeatedly asks the feedback for a label at the current state, holds
//! the label's oriented control for the step length prescribed by the schedule, and
//! integrates the flow while accumulating the running cost. Metrics needed by
//! the audit are accumulated streaming at full substep resolution; the stored
//! dense trace may be decimated for export.

use crate::brackets::LabelSet;
use crate::controls::oriented_control;
use crate::feedback::{feedback_generator, FeedbackError, StepSchedule};
use crate::hamiltonian::{psi, HamiltonianError, MrfCandidate};
use crate::ode::{self, CostMode, OdeError};
use crate::symexpr::{EvalError, System};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Control(#[from] crate::controls::ControlError),
    #[error("start state has target distance {d}, beyond the exit radius {r_big}")]
    StartOutOfRange { d: f64, r_big: f64 },
    #[error("step fraction {0} must lie in (spread(k), 1]")]
    BadStepFraction(f64),
}

/// One dense trajectory sample.
#[derive(Debug, Clone, Serialize)]
pub struct TraceSample {
    pub s: f64,
    pub state: Vec<f64>,
    pub level: f64,
    pub distance: f64,
    pub cost: f64,
    pub step_index: usize,
    pub label: String,
}

/// Per-step bookkeeping at the partition points.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub s_start: f64,
    pub state_start: Vec<f64>,
    pub duration: f64,
    pub label: String,
    pub degree: u32,
    pub switch_number: u64,
    pub level_start: f64,
    pub level_end: f64,
    pub cost_increment: f64,
    pub margin_met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum Termination {
    /// The trajectory hit the target; state and cost are frozen afterwards.
    ReachedTarget {
        time: f64,
    },
    HorizonExhausted,
    StepLimit,
    Diverged {
        time: f64,
    },
}

/// Full record of one sample-and-hold run.
#[derive(Debug, Clone, Serialize)]
pub struct ProcessRecord {
    pub initial_state: Vec<f64>,
    pub r_big: f64,
    pub r_small: f64,
    pub steps: Vec<StepRecord>,
    /// Decimated dense samples (full resolution feeds the metrics).
    pub trace: Vec<TraceSample>,
    pub termination: Termination,
    /// Largest target distance seen at any substep.
    pub max_distance: f64,
    /// First time the certificate level reached the entry level, if ever.
    pub entry_time: Option<f64>,
    /// Accumulated cost at the entry time.
    pub cost_at_entry: Option<f64>,
    /// Certificate level at the entry time.
    pub level_at_entry: Option<f64>,
    /// Largest distance at any substep after the entry time.
    pub max_distance_after_entry: Option<f64>,
    /// Largest certificate level at any substep after the entry time.
    pub max_level_after_entry: Option<f64>,
    /// First partition index whose level is strictly below the entry level
    /// (zero when the run starts inside).
    pub entry_step: Option<usize>,
    /// Certificate level at the partition point one past the entry index.
    pub level_after_entry_step: Option<f64>,
    /// Total accumulated cost at the end of the run.
    pub final_cost: f64,
    pub final_state: Vec<f64>,
    /// Endpoint of the final multiflow when the target was hit mid-step (the
    /// frozen trajectory may differ from it).
    pub post_target_endpoint: Option<Vec<f64>>,
    /// True when the dissipative margin was met at every step.
    pub certified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOptions {
    /// Stop stepping once the partition passes this time.
    pub horizon: f64,
    pub max_steps: usize,
    /// RK4 substeps per control segment.
    pub substeps: usize,
    /// Step length as a fraction of the scheduled ceiling, in (spread(k), 1].
    pub step_fraction: f64,
    /// Distance at which the target counts as reached.
    pub target_tolerance: f64,
    /// Keep every n-th dense sample in the exported trace.
    pub trace_stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            horizon: 1e4,
            max_steps: 2_000_000,
            substeps: 8,
            step_fraction: 1.0,
            target_tolerance: 1e-9,
            trace_stride: 32,
        }
    }
}

struct MetricsAccumulator {
    entry_level: f64,
    max_distance: f64,
    entry_time: Option<f64>,
    cost_at_entry: Option<f64>,
    level_at_entry: Option<f64>,
    max_distance_after_entry: Option<f64>,
    max_level_after_entry: Option<f64>,
}

impl MetricsAccumulator {
    fn new(entry_level: f64) -> Self {
        MetricsAccumulator {
            entry_level,
            max_distance: 0.0,
            entry_time: None,
            cost_at_entry: None,
            level_at_entry: None,
            max_distance_after_entry: None,
            max_level_after_entry: None,
        }
    }

    fn observe(&mut self, s: f64, level: f64, distance: f64, cost: f64) {
        self.max_distance = self.max_distance.max(distance);
        if self.entry_time.is_none() && level <= self.entry_level {
            self.entry_time = Some(s);
            self.cost_at_entry = Some(cost);
            self.level_at_entry = Some(level);
        }
        if self.entry_time.is_some() {
            let d = self.max_distance_after_entry.get_or_insert(0.0);
            *d = d.max(distance);
            let l = self.max_level_after_entry.get_or_insert(f64::NEG_INFINITY);
            *l = l.max(level);
        }
    }
}

/// Execute one sample-and-hold process from `x0`.
///
/// Each step holds the feedback label's oriented control for
/// `step_fraction * delta[degree]`; the step therefore satisfies the
/// partition constraint by construction. On a target hit the state and cost
/// freeze at the crossing (located by bisection to `target_tolerance`).
pub fn run_process(
    system: &System,
    set: &LabelSet,
    candidate: &MrfCandidate,
    schedule: &StepSchedule,
    x0: &[f64],
    opts: &RunOptions,
) -> Result<ProcessRecord, SimulateError> {
    let spread = (schedule.k as f64 - 1.0) / schedule.k as f64;
    if !(opts.step_fraction > spread && opts.step_fraction <= 1.0) {
        return Err(SimulateError::BadStepFraction(opts.step_fraction));
    }
    let d0 = system.distance(x0)?;
    if d0 > schedule.r_big {
        return Err(SimulateError::StartOutOfRange {
            d: d0,
            r_big: schedule.r_big,
        });
    }

    let mut metrics = MetricsAccumulator::new(schedule.entry_level);
    let mut trace: Vec<TraceSample> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut x = x0.to_vec();
    let mut s = 0.0;
    let mut cost = 0.0;
    let mut certified = true;
    let mut termination = Termination::HorizonExhausted;
    let mut post_target_endpoint = None;
    let mut entry_step: Option<usize> = None;
    let mut level_after_entry_step: Option<f64> = None;
    let mut sample_counter = 0usize;

    let u0 = candidate.value(system.target(), &x)?;
    if u0 < schedule.entry_level {
        entry_step = Some(0);
    }
    metrics.observe(0.0, u0, d0, 0.0);
    trace.push(TraceSample {
        s: 0.0,
        state: x.clone(),
        level: u0,
        distance: d0,
        cost: 0.0,
        step_index: 0,
        label: String::new(),
    });

    let mut step_index = 0usize;
    'steps: while s < opts.horizon {
        if step_index >= opts.max_steps {
            termination = Termination::StepLimit;
            break;
        }
        let choice = feedback_generator(system, set, candidate, &x)?;
        certified = certified && choice.margin_met;
        let duration = opts.step_fraction * schedule.delta[(choice.degree - 1) as usize];
        let entry = &set.entries()[choice.entry_index];
        let control = oriented_control(&entry.label, duration)?;

        let level_start = choice.level;
        let step_start_state = x.clone();
        let cost_start = cost;
        let mut hit: Option<(f64, Vec<f64>, f64)> = None;
        let mut prev_point = (s, x.clone(), cost);
        let mut eval_failure: Option<EvalError> = None;
        {
            let step_offset = s;
            let label_text = choice.label.clone();
            let mut observe = |t_local: f64, state: &[f64], c_local: f64| {
                let t = step_offset + t_local;
                let c = cost_start + c_local;
                let (level, distance) = match (
                    candidate.value(system.target(), state),
                    system.distance(state),
                ) {
                    (Ok(u), Ok(d)) => (u, d),
                    (Err(e), _) | (_, Err(e)) => {
                        if eval_failure.is_none() {
                            eval_failure = Some(e);
                        }
                        return;
                    }
                };
                if hit.is_none() {
                    metrics.observe(t, level, distance, c);
                    if distance <= opts.target_tolerance {
                        hit = Some((t, state.to_vec(), c));
                    }
                    sample_counter += 1;
                    if sample_counter.is_multiple_of(opts.trace_stride) {
                        trace.push(TraceSample {
                            s: t,
                            state: state.to_vec(),
                            level,
                            distance,
                            cost: c,
                            step_index,
                            label: label_text.clone(),
                        });
                    }
                    if distance > opts.target_tolerance {
                        prev_point = (t, state.to_vec(), c);
                    }
                }
            };
            match ode::integrate_schedule(
                system,
                &control,
                &x,
                opts.substeps,
                CostMode::Accumulate,
                &mut observe,
            ) {
                Ok((endpoint, step_cost)) => {
                    if let Some(e) = eval_failure {
                        return Err(SimulateError::Eval(e));
                    }
                    if let Some((t_hit, state_hit, cost_hit)) = hit.take() {
                        // refine the crossing within the last substep
                        let refined = refine_target_hit(
                            system,
                            &prev_point,
                            (t_hit, &state_hit, cost_hit),
                            opts.target_tolerance,
                        )?;
                        post_target_endpoint = Some(endpoint);
                        x = refined.1;
                        cost = refined.2;
                        s = refined.0;
                        termination = Termination::ReachedTarget { time: refined.0 };
                        let level_end = candidate.value(system.target(), &x)?;
                        steps.push(StepRecord {
                            index: step_index,
                            s_start: prev_point.0.min(s),
                            state_start: step_start_state.clone(),
                            duration,
                            label: choice.label,
                            degree: choice.degree,
                            switch_number: choice.switch_number,
                            level_start,
                            level_end,
                            cost_increment: cost - cost_start,
                            margin_met: choice.margin_met,
                        });
                        break 'steps;
                    }
                    let level_end = candidate.value(system.target(), &endpoint)?;
                    steps.push(StepRecord {
                        index: step_index,
                        s_start: s,
                        state_start: step_start_state.clone(),
                        duration,
                        label: choice.label,
                        degree: choice.degree,
                        switch_number: choice.switch_number,
                        level_start,
                        level_end,
                        cost_increment: step_cost,
                        margin_met: choice.margin_met,
                    });
                    // step `j` joins partition points `j` and `j + 1`
                    if entry_step.is_none() && level_end < schedule.entry_level {
                        entry_step = Some(step_index + 1);
                    } else if level_after_entry_step.is_none() && entry_step == Some(step_index) {
                        level_after_entry_step = Some(level_end);
                    }
                    x = endpoint;
                    cost += step_cost;
                    s += duration;
                }
                Err(OdeError::Diverged { time, .. }) => {
                    termination = Termination::Diverged { time: s + time };
                    break 'steps;
                }
                Err(OdeError::Eval { source, .. }) => return Err(SimulateError::Eval(source)),
            }
        }
        step_index += 1;
    }

    let final_state = x.clone();
    Ok(ProcessRecord {
        initial_state: x0.to_vec(),
        r_big: schedule.r_big,
        r_small: schedule.r_small,
        steps,
        trace,
        termination,
        max_distance: metrics.max_distance,
        entry_time: metrics.entry_time,
        cost_at_entry: metrics.cost_at_entry,
        level_at_entry: metrics.level_at_entry,
        max_distance_after_entry: metrics.max_distance_after_entry,
        max_level_after_entry: metrics.max_level_after_entry,
        entry_step,
        level_after_entry_step,
        final_cost: cost,
        final_state,
        post_target_endpoint,
        certified,
    })
}

/// Bisect the target crossing between a point outside and a point inside the
/// tolerance ball; the crossing time is resolved to the tolerance itself.
fn refine_target_hit(
    system: &System,
    outside: &(f64, Vec<f64>, f64),
    inside: (f64, &[f64], f64),
    tolerance: f64,
) -> Result<(f64, Vec<f64>, f64), SimulateError> {
    let mut lo = (outside.0, outside.1.clone(), outside.2);
    let mut hi = (inside.0, inside.1.to_vec(), inside.2);
    for _ in 0..80 {
        if (hi.0 - lo.0).abs() < 1e-15 {
            break;
        }
        let lambda = 0.5;
        let t = lo.0 + lambda * (hi.0 - lo.0);
        let state: Vec<f64> =
            lo.1.iter()
                .zip(&hi.1)
                .map(|(a, b)| a + lambda * (b - a))
                .collect();
        let cost = lo.2 + lambda * (hi.2 - lo.2);
        let d = system.distance(&state)?;
        if d <= tolerance {
            hi = (t, state, cost);
        } else {
            lo = (t, state, cost);
        }
    }
    Ok(hi)
}

/// Outcome of one audited condition.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub pass: bool,
    pub observed: f64,
    pub bound: f64,
    pub detail: String,
}

/// How the cost condition fared; the bound needs an integrable rate envelope.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind")]
pub enum CostCheck {
    Checked(ConditionCheck),
    /// The rate envelope is not integrable, so no finite bound exists.
    NotEvaluable {
        reason: String,
    },
    /// The run never reached the entry level; nothing to audit.
    NoEntry,
}

/// The four audited conditions plus the per-step decrease diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub overshoot: ConditionCheck,
    pub attractiveness: ConditionCheck,
    pub entrapment: ConditionCheck,
    pub cost: CostCheck,
    /// Worst slack of the per-step decrease inequality over audited steps
    /// (nonnegative means every step met its bound).
    pub decrease_worst_slack: f64,
    pub decrease_pass: bool,
    /// Steps until the level first dropped below the entry level.
    pub entry_step_count: Option<usize>,
    pub iteration_check: ConditionCheck,
    pub certified: bool,
}

impl AuditReport {
    /// All audited conditions hold (a non-evaluable cost bound counts as a
    /// failure only if the run actually entered).
    pub fn all_pass(&self) -> bool {
        self.overshoot.pass
            && self.attractiveness.pass
            && self.entrapment.pass
            && matches!(
                self.cost,
                CostCheck::Checked(ConditionCheck { pass: true, .. })
            )
            && self.decrease_pass
            && self.iteration_check.pass
    }
}

const DECREASE_SLACK: f64 = 1e-9;

/// Audit a finished record against the schedule's bounds.
pub fn check_stabilizability(
    record: &ProcessRecord,
    schedule: &StepSchedule,
    candidate: &MrfCandidate,
) -> Result<AuditReport, HamiltonianError> {
    // overshoot boundedness
    let overshoot = ConditionCheck {
        pass: record.max_distance <= schedule.overshoot_bound + 1e-12,
        observed: record.max_distance,
        bound: schedule.overshoot_bound,
        detail: "max distance along the run".into(),
    };

    // attractiveness: entry happened within the time bound
    let attractiveness = match record.entry_time {
        Some(t) => ConditionCheck {
            pass: t <= schedule.time_bound,
            observed: t,
            bound: schedule.time_bound,
            detail: "first time at or below the entry level".into(),
        },
        None => ConditionCheck {
            pass: false,
            observed: f64::INFINITY,
            bound: schedule.time_bound,
            detail: "the run never reached the entry level".into(),
        },
    };

    // entrapment: after entry the distance stays within the small radius
    let entrapment = match record.max_distance_after_entry {
        Some(d) => ConditionCheck {
            pass: d <= record.r_small + 1e-12,
            observed: d,
            bound: record.r_small,
            detail: "max distance after entering the sublevel".into(),
        },
        None => ConditionCheck {
            pass: false,
            observed: f64::INFINITY,
            bound: record.r_small,
            detail: "no entry, entrapment not reached".into(),
        },
    };

    // cost boundedness at the entry time
    let cost = match (
        record.entry_time,
        record.cost_at_entry,
        record.level_at_entry,
    ) {
        (Some(_), Some(cost_at_entry), Some(level_at_entry)) => {
            let v1 = candidate.value_floor(record)?;
            let v2 = level_at_entry.max(1e-300);
            match psi(candidate, v1, v2, schedule.k) {
                Ok(base) => {
                    let bound = schedule.cost_factor * base;
                    CostCheck::Checked(ConditionCheck {
                        pass: cost_at_entry <= bound + 1e-9,
                        observed: cost_at_entry,
                        bound,
                        detail: "accumulated cost at entry vs integral bound".into(),
                    })
                }
                Err(HamiltonianError::NonIntegrable(e)) => CostCheck::NotEvaluable {
                    reason: e.to_string(),
                },
                Err(other) => return Err(other),
            }
        }
        _ => CostCheck::NoEntry,
    };

    // per-step decrease while the level sits in the working band
    let mut worst_slack = f64::INFINITY;
    let mut decrease_pass = true;
    for step in &record.steps {
        if step.level_start < schedule.entry_level || step.level_start > schedule.u_big_r {
            continue;
        }
        if !step.margin_met {
            continue;
        }
        let p0 = candidate.p0(step.level_start)?;
        let gamma = candidate.gamma(step.level_start)?;
        let ratio = step.duration / step.switch_number as f64;
        let scaled = ratio.powi(step.degree as i32);
        let weighted_cost = step.duration.powi(step.degree as i32 - 1)
            / (step.switch_number as f64).powi(step.degree as i32)
            * p0
            * step.cost_increment;
        // drop + weighted cost must reach gamma/2 * (t/s)^l, within slack
        let slack = (step.level_start - step.level_end) - weighted_cost - 0.5 * gamma * scaled;
        worst_slack = worst_slack.min(slack);
        if slack < -DECREASE_SLACK {
            decrease_pass = false;
        }
    }
    if worst_slack == f64::INFINITY {
        worst_slack = 0.0;
    }

    // the step-count bound only constrains processes that mix degrees; at
    // degree one the partition itself is unbounded and only time is bounded
    let entry_step_count = record.entry_step;
    let iteration_check = if schedule.k == 1 {
        ConditionCheck {
            pass: true,
            observed: entry_step_count.map(|j| j as f64).unwrap_or(f64::INFINITY),
            bound: f64::INFINITY,
            detail: "no step-count bound applies at degree one".into(),
        }
    } else {
        match entry_step_count {
            Some(j) => ConditionCheck {
                pass: (j as f64) <= schedule.iteration_bound,
                observed: j as f64,
                bound: schedule.iteration_bound,
                detail: "steps to reach the entry level".into(),
            },
            None => ConditionCheck {
                pass: false,
                observed: f64::INFINITY,
                bound: schedule.iteration_bound,
                detail: "no entry".into(),
            },
        }
    };

    Ok(AuditReport {
        overshoot,
        attractiveness,
        entrapment,
        cost,
        decrease_worst_slack: worst_slack,
        decrease_pass,
        entry_step_count,
        iteration_check,
        certified: record.certified,
    })
}

impl MrfCandidate {
    /// Initial certificate level of a record (the `v1` of the cost bound).
    fn value_floor(&self, record: &ProcessRecord) -> Result<f64, HamiltonianError> {
        record
            .steps
            .first()
            .map(|s| Ok(s.level_start))
            .unwrap_or_else(|| Ok(record.trace.first().map(|t| t.level).unwrap_or(1e-300)))
    }
}

/// Write the dense trace as CSV: `s, x1..xn, U, d, cost, step_index, label`.
pub fn write_trace_csv<W: std::io::Write>(record: &ProcessRecord, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = record.initial_state.len();
    let mut header = vec!["s".to_string()];
    for i in 1..=n {
        header.push(format!("x{i}"));
    }
    header.extend(["U", "d", "cost", "step_index", "label"].map(str::to_string));
    w.write_record(&header)?;
    for sample in &record.trace {
        let mut row = vec![sample.s.to_string()];
        row.extend(sample.state.iter().map(|v| v.to_string()));
        row.push(sample.level.to_string());
        row.push(sample.distance.to_string());
        row.push(sample.cost.to_string());
        row.push(sample.step_index.to_string());
        row.push(sample.label.clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Timestamped states along an integration.
pub type DenseStates = Vec<(f64, Vec<f64>)>;

/// Fixed-step integration of a whole control schedule (thin public wrapper
/// over the integrator used everywhere else).
pub fn integrate(
    system: &System,
    schedule: &crate::controls::ControlSchedule,
    x0: &[f64],
    substeps: usize,
) -> Result<(Vec<f64>, DenseStates), OdeError> {
    let mut samples = vec![(0.0, x0.to_vec())];
    let mut observe = |t: f64, state: &[f64], _c: f64| samples.push((t, state.to_vec()));
    let (endpoint, _) =
        ode::integrate_schedule(system, schedule, x0, substeps, CostMode::Skip, &mut observe)?;
    Ok((endpoint, samples))
}
