//! Fixed-step classical Runge-Kutta integration of piecewise-constant-control
//! flows. Steps are aligned to control segments and never straddle a switch.

use crate::controls::ControlSchedule;
use crate::symexpr::{ControlValue, EvalError, System};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum OdeError {
    #[error("trajectory diverged at time {time}")]
    Diverged { time: f64, last_state: Vec<f64> },
    #[error("field evaluation failed at time {time}: {source}")]
    Eval {
        time: f64,
        #[source]
        source: EvalError,
    },
}

/// State bound beyond which a run is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// Accumulate the running cost alongside the state on the same RK grid.
    Accumulate,
    Skip,
}

fn rhs(system: &System, a: ControlValue, y: &[f64], time: f64) -> Result<Vec<f64>, OdeError> {
    system
        .velocity(y, a)
        .map_err(|source| OdeError::Eval { time, source })
}

fn cost_rate(system: &System, a: ControlValue, y: &[f64], time: f64) -> Result<f64, OdeError> {
    system
        .running_cost(y, a)
        .map_err(|source| OdeError::Eval { time, source })
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// One constant-control leg integrated with `substeps` RK4 steps.
///
/// `observe(time, state, cost_so_far)` fires after every substep; `cost`
/// accumulates with the matching fourth-order combination so the quadrature
/// carries the integrator's order.
#[allow(clippy::too_many_arguments)]
pub fn rk4_leg(
    system: &System,
    a: ControlValue,
    start_time: f64,
    duration: f64,
    y0: &[f64],
    cost0: f64,
    substeps: usize,
    cost_mode: CostMode,
    observe: &mut dyn FnMut(f64, &[f64], f64),
) -> Result<(Vec<f64>, f64), OdeError> {
    let n = substeps.max(1);
    let h = duration / n as f64;
    let mut y = y0.to_vec();
    let mut cost = cost0;
    for i in 0..n {
        let t = start_time + i as f64 * h;
        let k1 = rhs(system, a, &y, t)?;
        let y2 = axpy(&y, h / 2.0, &k1);
        let k2 = rhs(system, a, &y2, t)?;
        let y3 = axpy(&y, h / 2.0, &k2);
        let k3 = rhs(system, a, &y3, t)?;
        let y4 = axpy(&y, h, &k3);
        let k4 = rhs(system, a, &y4, t)?;
        if cost_mode == CostMode::Accumulate {
            let c1 = cost_rate(system, a, &y, t)?;
            let c2 = cost_rate(system, a, &y2, t)?;
            let c3 = cost_rate(system, a, &y3, t)?;
            let c4 = cost_rate(system, a, &y4, t)?;
            cost += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        }
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_next = start_time + (i + 1) as f64 * h;
        let mut bad = !cost.is_finite();
        let mut norm_sq = 0.0;
        for v in &y {
            if !v.is_finite() {
                bad = true;
            }
            norm_sq += v * v;
        }
        if bad || norm_sq > DIVERGENCE_BOUND * DIVERGENCE_BOUND {
            return Err(OdeError::Diverged {
                time: t_next,
                last_state: y,
            });
        }
        observe(t_next, &y, cost);
    }
    Ok((y, cost))
}

/// Integrate a whole control schedule from `x0`, observing every substep.
pub fn integrate_schedule(
    system: &System,
    schedule: &ControlSchedule,
    x0: &[f64],
    substeps_per_segment: usize,
    cost_mode: CostMode,
    observe: &mut dyn FnMut(f64, &[f64], f64),
) -> Result<(Vec<f64>, f64), OdeError> {
    let mut y = x0.to_vec();
    let mut cost = 0.0;
    for seg in schedule.segments() {
        let (t0, t1) = schedule.segment_times(seg);
        let out = rk4_leg(
            system,
            seg.value,
            t0,
            t1 - t0,
            &y,
            cost,
            substeps_per_segment,
            cost_mode,
            observe,
        )?;
        y = out.0;
        cost = out.1;
    }
    Ok((y, cost))
}
