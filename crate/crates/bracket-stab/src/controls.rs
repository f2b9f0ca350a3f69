//! Oriented bang-bang controls synthesized from control labels.
//!
//! The schedule of a label is built recursively: a degree-1 label holds its
//! direction for the whole horizon; a negative label is the time-reversed
//! negation of its positive partner; a composite label `[B1, B2]` concatenates
//! the four blocks `B1+, B2+, B1-, B2-` with durations proportional to the
//! factors' switch numbers. Every breakpoint is an exact rational multiple of
//! the horizon with denominator dividing the switch number, so schedules
//! compare bit-exactly; floats appear only at integration time.
//!
//! At interior breakpoints the schedule is right-continuous (half-open
//! segments); the final instant takes the last segment's value.

use crate::brackets::{ControlLabel, FormalBracket, LabelEntry};
use crate::ode::{self, CostMode, OdeError};
use crate::symexpr::{norm, ControlValue, SignDir, System};
use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::Serialize;
use thiserror::Error;

pub type Fraction = Ratio<i64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("horizons list must not be empty")]
    NoHorizons,
}

/// One constant-control piece, on `[start, end)` as fractions of the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: Fraction,
    pub end: Fraction,
    pub value: ControlValue,
}

/// A piecewise-constant control on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    horizon: f64,
    segments: Vec<Segment>,
}

impl ControlSchedule {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Float start/end times of a segment.
    pub fn segment_times(&self, seg: &Segment) -> (f64, f64) {
        (
            fraction_to_f64(seg.start) * self.horizon,
            fraction_to_f64(seg.end) * self.horizon,
        )
    }

    /// Control value at fraction `s` of the horizon; right-continuous, with
    /// the closing instant owned by the last segment.
    pub fn value_at_fraction(&self, s: Fraction) -> ControlValue {
        for seg in &self.segments {
            if s >= seg.start && s < seg.end {
                return seg.value;
            }
        }
        self.segments
            .last()
            .expect("schedules are never empty")
            .value
    }

    pub fn value_at_time(&self, s: f64) -> ControlValue {
        let last = self.segments.last().expect("schedules are never empty");
        for seg in &self.segments {
            let (a, b) = self.segment_times(seg);
            if s >= a && s < b {
                return seg.value;
            }
        }
        last.value
    }

    /// Exact control integral over the horizon, one rational per direction
    /// (in horizon units).
    pub fn control_integral(&self, control_count: usize) -> Vec<Fraction> {
        let mut acc = vec![Fraction::zero(); control_count];
        for seg in &self.segments {
            let len = seg.end - seg.start;
            match seg.value.sign {
                SignDir::Plus => acc[seg.value.field] += len,
                SignDir::Minus => acc[seg.value.field] -= len,
            }
        }
        acc
    }

    /// Rows `(t_start, t_end, control_index, sign)`; control indices 1-based.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t_start", "t_end", "control_index", "sign"])?;
        for seg in &self.segments {
            let (a, b) = self.segment_times(seg);
            w.write_record([
                a.to_string(),
                b.to_string(),
                (seg.value.field + 1).to_string(),
                seg.value.sign.symbol().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> ScheduleJson {
        ScheduleJson {
            horizon: self.horizon,
            segments: self
                .segments
                .iter()
                .map(|seg| SegmentJson {
                    start: [*seg.start.numer(), *seg.start.denom()],
                    end: [*seg.end.numer(), *seg.end.denom()],
                    control_index: seg.value.field + 1,
                    sign: seg.value.sign.symbol().to_string(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleJson {
    pub horizon: f64,
    pub segments: Vec<SegmentJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentJson {
    /// Exact fraction of the horizon, `[numerator, denominator]`.
    pub start: [i64; 2],
    pub end: [i64; 2],
    pub control_index: usize,
    pub sign: String,
}

fn fraction_to_f64(f: Fraction) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

/// Segments on `[0, 1]` for `(bracket, assignment, sign)`.
fn build_segments(bracket: &FormalBracket, assignment: &[usize], sign: SignDir) -> Vec<Segment> {
    match sign {
        SignDir::Minus => {
            // time-reversed negation of the positive schedule
            let plus = build_segments(bracket, assignment, SignDir::Plus);
            let one = Fraction::one();
            plus.into_iter()
                .rev()
                .map(|seg| Segment {
                    start: one - seg.end,
                    end: one - seg.start,
                    value: seg.value.negated(),
                })
                .collect()
        }
        SignDir::Plus => match bracket {
            FormalBracket::Leaf => vec![Segment {
                start: Fraction::zero(),
                end: Fraction::one(),
                value: ControlValue::plus(assignment[0]),
            }],
            FormalBracket::Node(left, right) => {
                let split = left.degree();
                let (la, ra) = assignment.split_at(split);
                let s1 = left.switch_number() as i64;
                let s2 = right.switch_number() as i64;
                let s = 2 * (s1 + s2);
                let blocks = [
                    (left.as_ref(), la, SignDir::Plus, Fraction::new(0, 1), s1),
                    (right.as_ref(), ra, SignDir::Plus, Fraction::new(s1, s), s2),
                    (
                        left.as_ref(),
                        la,
                        SignDir::Minus,
                        Fraction::new(s1 + s2, s),
                        s1,
                    ),
                    (
                        right.as_ref(),
                        ra,
                        SignDir::Minus,
                        Fraction::new(2 * s1 + s2, s),
                        s2,
                    ),
                ];
                let mut out = Vec::new();
                for (sub, sub_assign, sub_sign, offset, sub_switch) in blocks {
                    let scale = Fraction::new(sub_switch, s);
                    for seg in build_segments(sub, sub_assign, sub_sign) {
                        out.push(Segment {
                            start: offset + seg.start * scale,
                            end: offset + seg.end * scale,
                            value: seg.value,
                        });
                    }
                }
                out
            }
        },
    }
}

/// The oriented bang-bang control of a label over horizon `t`.
///
/// The schedule has exactly `switch_number` segments of equal length.
pub fn oriented_control(label: &ControlLabel, t: f64) -> Result<ControlSchedule, ControlError> {
    if !(t > 0.0) {
        return Err(ControlError::NonPositiveHorizon(t));
    }
    let segments = build_segments(&label.bracket, &label.assignment, label.sign);
    debug_assert_eq!(segments.len() as u64, label.switch_number());
    Ok(ControlSchedule {
        horizon: t,
        segments,
    })
}

/// Empirical check of the bracket-direction expansion of a label's flow.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticFit {
    /// `(horizon, endpoint error)` per tested horizon.
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of `log(error)` against `log(horizon)` over the
    /// points above the noise floor; `None` if fewer than two qualify.
    pub slope: Option<f64>,
    /// Errors at or below this are treated as integrator noise.
    pub noise_floor: f64,
    /// Largest `error / (t (t/s)^l)` ratio observed (empirical remainder
    /// constant).
    pub remainder_constant: f64,
}

impl AsymptoticFit {
    /// Every tested horizon sits at the integrator noise floor: the expansion
    /// is exact for this label as far as the experiment can resolve.
    pub fn exact_to_tolerance(&self) -> bool {
        self.points.iter().all(|(_, e)| *e <= self.noise_floor)
    }

    /// The experiment is consistent with a decay order of at least
    /// `min_slope`: either the fitted slope reaches it or the errors never
    /// rise above noise.
    pub fn confirms_order(&self, min_slope: f64) -> bool {
        self.exact_to_tolerance() || self.slope.is_some_and(|s| s >= min_slope)
    }
}

#[derive(Debug, Error)]
pub enum AsymptoticError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("integration diverged while probing horizon {horizon}: {source}")]
    Diverged {
        horizon: f64,
        #[source]
        source: OdeError,
    },
    #[error(transparent)]
    Eval(#[from] crate::symexpr::EvalError),
}

/// Integrate the label's oriented control over each horizon and compare the
/// endpoint against `x + sign B(g)(x) (t/s)^l`.
///
/// `substeps` is the per-segment resolution of the reference integration;
/// the default used by callers keeps the integration error orders of
/// magnitude below the expansion remainder being measured.
pub fn verify_asymptotic(
    system: &System,
    entry: &LabelEntry,
    x: &[f64],
    horizons: &[f64],
    substeps: usize,
) -> Result<AsymptoticFit, AsymptoticError> {
    if horizons.is_empty() {
        return Err(ControlError::NoHorizons.into());
    }
    let direction = entry.eval(x)?;
    let ell = entry.label.degree() as i32;
    let switch = entry.label.switch_number() as f64;
    let scale = 1.0 + norm(x) + norm(&direction);
    let noise_floor = 1e-10 * scale;
    let mut points = Vec::with_capacity(horizons.len());
    let mut remainder_constant: f64 = 0.0;
    for &t in horizons {
        let schedule = oriented_control(&entry.label, t)?;
        let mut sink = |_: f64, _: &[f64], _: f64| {};
        let (endpoint, _) =
            ode::integrate_schedule(system, &schedule, x, substeps, CostMode::Skip, &mut sink)
                .map_err(|source| AsymptoticError::Diverged { horizon: t, source })?;
        let step = (t / switch).powi(ell);
        let mut err_sq = 0.0;
        for i in 0..x.len() {
            let predicted = x[i] + direction[i] * step;
            let d = endpoint[i] - predicted;
            err_sq += d * d;
        }
        let err = err_sq.sqrt();
        remainder_constant = remainder_constant.max(err / (t * step));
        points.push((t, err));
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(_, e)| *e > noise_floor)
        .collect();
    let slope = if usable.len() >= 2 {
        Some(log_log_slope(&usable))
    } else {
        None
    };
    Ok(AsymptoticFit {
        points,
        slope,
        noise_floor,
        remainder_constant,
    })
}

fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (t, e) in points {
        let x = t.ln();
        let y = e.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
