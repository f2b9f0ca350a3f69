//! Feedback synthesis: argmin label selection, numerical estimation of the
//! regularity constants, level envelopes of the certificate, and the
//! degree-dependent step schedule with its a priori bounds.
//!
//! Every existential constant is estimated by sampling and inflated by a
//! configurable safety factor; conservative constants only shrink the steps,
//! they never break soundness of the audited bounds.

use crate::brackets::{beta, LabelSet};
use crate::controls::{verify_asymptotic, AsymptoticError};
use crate::hamiltonian::{
    degree_h_hamiltonian, probe_semiconcavity, HamiltonianError, MrfCandidate, RateMap,
};
use crate::sampling::{lattice_in_reach, shell_point, shell_points, unit_direction};
use crate::symexpr::{norm, EvalError, System};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Asymptotic(#[from] AsymptoticError),
    #[error("need 0 < r < R, got R = {r_big}, r = {r_small}")]
    InvalidPair { r_big: f64, r_small: f64 },
    #[error("envelope has no samples")]
    EmptyEnvelope,
    #[error("value {value} is outside the invertible range of the {name} envelope")]
    EnvelopeRange { name: &'static str, value: f64 },
    #[error("decrease equation is degenerate (all coefficients vanish)")]
    DegenerateDecreaseEquation,
    #[error("entry level {u_hat} does not sit below the exit level {u_big}")]
    ThresholdOrder { u_hat: f64, u_big: f64 },
}

/// The feedback's choice at a state: the canonical-order argmin label.
#[derive(Debug, Clone, Serialize)]
pub struct FeedbackChoice {
    /// Index into the label set's canonical order.
    pub entry_index: usize,
    pub label: String,
    pub degree: u32,
    pub switch_number: u64,
    /// Minimized Hamiltonian value at the state.
    pub value: f64,
    /// Certificate value at the state.
    pub level: f64,
    /// `H + gamma(U)`; nonpositive when the dissipative margin is met.
    pub margin: f64,
    /// Whether the dissipative margin `-gamma(U)` is met at this state.
    pub margin_met: bool,
}

/// Select the argmin label of the unminimized Hamiltonian at `x` and report
/// whether the dissipative margin is met there. Never fails the selection on
/// a missed margin; the flag is the caller's to act on.
pub fn feedback_generator(
    system: &System,
    set: &LabelSet,
    candidate: &MrfCandidate,
    x: &[f64],
) -> Result<FeedbackChoice, FeedbackError> {
    let u = candidate.value(system.target(), x)?;
    let p = candidate.gradient(system.target(), x)?;
    let ham = degree_h_hamiltonian(system, set, candidate, x, &p, u, set.degree_bound())?;
    let gamma = candidate.gamma(u)?;
    let margin = ham.value + gamma;
    let tolerance = 1e-12 * (1.0 + ham.value.abs() + gamma.abs());
    let entry = &set.entries()[ham.argmin_index];
    Ok(FeedbackChoice {
        entry_index: ham.argmin_index,
        label: ham.argmin_label,
        degree: entry.label.degree() as u32,
        switch_number: entry.label.switch_number(),
        value: ham.value,
        level: u,
        margin,
        margin_met: margin <= tolerance,
    })
}

/// Sampled regularity constants on the working region (a ball of twice the
/// exit radius around the target), each inflated by the safety factor.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantsEstimate {
    /// Sup of |B(g)(x)| over labels and the region.
    pub bracket_bound: f64,
    /// Empirical constant of the flow-expansion remainder.
    pub remainder_constant: f64,
    /// Lipschitz bound of the certificate.
    pub cert_lipschitz: f64,
    /// Lipschitz bound of the running cost in the state.
    pub cost_lipschitz: f64,
    /// Semiconcavity curvature constant of the certificate.
    pub curvature: f64,
    /// Probe radius the curvature was sampled with.
    pub probe_radius: f64,
    /// Largest step horizon validated by the expansion experiments.
    pub horizon_bound: f64,
    /// Exit radius: the working region is the ball of radius twice this.
    pub region_radius: f64,
    pub inflation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsConfig {
    pub lattice_per_axis: usize,
    pub shell_samples: usize,
    pub probe_trials: usize,
    pub asymptotic_points: usize,
    pub horizons: Vec<f64>,
    pub substeps: usize,
    pub inflation: f64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig {
            lattice_per_axis: 15,
            shell_samples: 1500,
            probe_trials: 3000,
            asymptotic_points: 3,
            horizons: vec![0.4, 0.2, 0.1, 0.05],
            substeps: 64,
            inflation: 1.25,
        }
    }
}

/// Estimate the regularity constants on the ball of radius `2 r_tilde`.
pub fn estimate_constants(
    system: &System,
    set: &LabelSet,
    candidate: &MrfCandidate,
    r_tilde: f64,
    cfg: &ConstantsConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<ConstantsEstimate, FeedbackError> {
    let reach = 2.0 * r_tilde;
    let target = system.target();
    let n = system.state_dim();

    // sup of bracket directions over a lattice through the region
    let lattice = lattice_in_reach(target, n, reach, cfg.lattice_per_axis)?;
    let mut bracket_bound: f64 = 0.0;
    for entry in set.entries() {
        if entry.label.sign == crate::symexpr::SignDir::Minus {
            continue; // norms are sign-invariant
        }
        for x in &lattice {
            bracket_bound = bracket_bound.max(norm(&entry.field.eval(x)?));
        }
    }

    // Lipschitz bounds from gradient norms and difference quotients
    let shell = (1e-3 * reach.max(1e-6), reach);
    let mut cert_lipschitz: f64 = 0.0;
    let mut cost_lipschitz: f64 = 0.0;
    let control_values = system.control_values();
    for _ in 0..cfg.shell_samples {
        let x = shell_point(target, n, shell, rng)?;
        if let Ok(p) = candidate.gradient(target, &x) {
            cert_lipschitz = cert_lipschitz.max(norm(&p));
        }
        let dir = unit_direction(n, rng);
        let step = 1e-3 * (1.0 + norm(&x));
        let y: Vec<f64> = (0..n).map(|i| x[i] + step * dir[i]).collect();
        if let (Ok(a), Ok(b)) = (candidate.value(target, &x), candidate.value(target, &y)) {
            cert_lipschitz = cert_lipschitz.max((a - b).abs() / step);
        }
        for &a in &control_values {
            if let (Ok(la), Ok(lb)) = (system.running_cost(&x, a), system.running_cost(&y, a)) {
                cost_lipschitz = cost_lipschitz.max((la - lb).abs() / step);
            }
        }
    }

    // curvature from the semiconcavity probe
    let probe = probe_semiconcavity(system, candidate, shell, cfg.probe_trials, rng)?;
    let curvature = probe.curvature_estimate.max(1e-9);
    let cert_lipschitz = cert_lipschitz.max(probe.gradient_bound).max(1e-9);

    // remainder constant from expansion residuals over a small design
    let mut remainder: f64 = 0.0;
    let points = shell_points(
        target,
        n,
        (0.25 * reach, 0.75 * reach),
        cfg.asymptotic_points,
        rng,
    )?;
    for entry in set.entries() {
        for x in &points {
            let fit = verify_asymptotic(system, entry, x, &cfg.horizons, cfg.substeps)?;
            remainder = remainder.max(fit.remainder_constant);
        }
    }

    let horizon_bound = cfg.horizons.iter().cloned().fold(0.0, f64::max);
    Ok(ConstantsEstimate {
        bracket_bound: (bracket_bound * cfg.inflation).max(1e-9),
        remainder_constant: remainder * cfg.inflation,
        cert_lipschitz: cert_lipschitz * cfg.inflation,
        cost_lipschitz: cost_lipschitz * cfg.inflation,
        curvature: curvature * cfg.inflation,
        probe_radius: candidate.probe_radius,
        horizon_bound,
        region_radius: r_tilde,
        inflation: cfg.inflation,
    })
}

/// A tabulated nondecreasing map with a tiny affine tilt so that a strictly
/// increasing continuous version exists and can be inverted by bisection.
#[derive(Debug, Clone, Serialize)]
pub struct MonotoneMap {
    /// `(u, value)` knots, strictly increasing in `u`.
    knots: Vec<(f64, f64)>,
    tilt_slope: f64,
    /// The tilt vanishes at this abscissa, so values there are exact.
    tilt_anchor: f64,
}

pub const ENVELOPE_TILT: f64 = 1e-9;

impl MonotoneMap {
    fn new(knots: Vec<(f64, f64)>, tilt_slope: f64, tilt_anchor: f64) -> Self {
        MonotoneMap {
            knots,
            tilt_slope,
            tilt_anchor,
        }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, u: f64) -> f64 {
        let base = self.interp(u);
        (base + self.tilt_slope * (u - self.tilt_anchor)).max(0.0)
    }

    fn interp(&self, u: f64) -> f64 {
        let k = &self.knots;
        if u <= k[0].0 {
            return k[0].1;
        }
        if u >= k[k.len() - 1].0 {
            // continue with the last segment's slope
            let (u1, v1) = k[k.len() - 1];
            let slope = if k.len() >= 2 {
                let (u0, v0) = k[k.len() - 2];
                ((v1 - v0) / (u1 - u0)).max(0.0)
            } else {
                1.0
            };
            return v1 + slope * (u - u1);
        }
        let idx = k.partition_point(|(ku, _)| *ku <= u);
        let (u0, v0) = k[idx - 1];
        let (u1, v1) = k[idx];
        v0 + (v1 - v0) * (u - u0) / (u1 - u0)
    }

    /// Smallest `u >= 0` with `eval(u) = y`, by bisection.
    pub fn inverse(&self, y: f64, name: &'static str) -> Result<f64, FeedbackError> {
        if y < self.eval(0.0) {
            return Err(FeedbackError::EnvelopeRange { name, value: y });
        }
        let mut hi = self.knots.last().map(|(u, _)| *u).unwrap_or(1.0).max(1e-9);
        let mut grow = 0;
        while self.eval(hi) < y {
            hi *= 2.0;
            grow += 1;
            if grow > 60 {
                return Err(FeedbackError::EnvelopeRange { name, value: y });
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Level envelopes of the certificate: the smallest target distance over
/// superlevels (`lower`) and the largest over sublevels (`upper`), tabulated
/// from shell samples. At every sample `lower(U(x)) <= d(x) <= upper(U(x))`.
#[derive(Debug, Clone, Serialize)]
pub struct LevelEnvelopes {
    pub lower: MonotoneMap,
    pub upper: MonotoneMap,
    pub sample_count: usize,
}

impl LevelEnvelopes {
    /// Rows `(u, d_minus, d_plus)` at the knot levels.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["u", "d_minus", "d_plus"])?;
        let mut levels: Vec<f64> = self
            .lower
            .knots()
            .iter()
            .chain(self.upper.knots())
            .map(|(u, _)| *u)
            .collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for u in levels {
            w.write_record([
                u.to_string(),
                self.lower.eval(u).to_string(),
                self.upper.eval(u).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the level envelopes from shell samples with target distances in
/// `[shell.0, shell.1]`.
pub fn du_envelopes(
    system: &System,
    candidate: &MrfCandidate,
    shell: (f64, f64),
    samples: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<LevelEnvelopes, FeedbackError> {
    let target = system.target();
    let n = system.state_dim();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = shell_point(target, n, shell, rng)?;
        let u = candidate.value(target, &x)?;
        let d = target.distance(&x)?;
        pairs.push((u, d));
    }
    if pairs.is_empty() {
        return Err(FeedbackError::EmptyEnvelope);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // prefix max of d gives the upper envelope, suffix min the lower
    let mut upper_knots: Vec<(f64, f64)> = Vec::with_capacity(pairs.len() + 1);
    let mut running_max = 0.0f64;
    for &(u, d) in &pairs {
        running_max = running_max.max(d);
        match upper_knots.last_mut() {
            Some(last) if last.0 == u => last.1 = running_max,
            _ => upper_knots.push((u, running_max)),
        }
    }
    let mut lower_knots: Vec<(f64, f64)> = Vec::with_capacity(pairs.len() + 1);
    let mut running_min = f64::INFINITY;
    for &(u, d) in pairs.iter().rev() {
        running_min = running_min.min(d);
        match lower_knots.last_mut() {
            Some(last) if last.0 == u => last.1 = running_min,
            _ => lower_knots.push((u, running_min)),
        }
    }
    lower_knots.reverse();
    // both envelopes vanish at level zero
    if upper_knots[0].0 > 0.0 {
        upper_knots.insert(0, (0.0, 0.0));
        lower_knots.insert(0, (0.0, 0.0));
    }
    let u_max = pairs.last().unwrap().0;
    let envelopes = LevelEnvelopes {
        // the lower tilt anchors at u_max so the tilted map stays below the
        // tabulated envelope, the upper anchors at zero so it stays above;
        // the sandwich then holds at every sample by construction
        lower: MonotoneMap::new(lower_knots, ENVELOPE_TILT, u_max),
        upper: MonotoneMap::new(upper_knots, ENVELOPE_TILT, 0.0),
        sample_count: pairs.len(),
    };
    for &(u, d) in &pairs {
        debug_assert!(envelopes.lower.eval(u) <= d + 1e-12);
        debug_assert!(d <= envelopes.upper.eval(u) + 1e-12);
    }
    Ok(envelopes)
}

/// `u` or `u^(1/k)`, whichever is larger.
pub fn reach_gauge(u: f64, k: u32) -> f64 {
    u.max(u.powf(1.0 / k as f64))
}

/// `u + 2 reach_gauge(u)`: the level inflation a single step can cause.
pub fn level_inflation(u: f64, k: u32) -> f64 {
    u + 2.0 * reach_gauge(u, k)
}

/// Invert [`level_inflation`] by bisection.
pub fn level_inflation_inverse(target: f64, k: u32) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let mut hi = target.max(1.0);
    while level_inflation(hi, k) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if level_inflation(mid, k) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Certificate levels bracketing the working region for a radius pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Thresholds {
    /// Entry level: below it the state is trapped within the small radius.
    pub u_hat_r: f64,
    /// Exit level: every start with distance `<= R` sits below it.
    pub u_big_r: f64,
    /// Exit radius: the sublevel of `u_big_r` sits within this distance.
    pub r_tilde: f64,
}

/// Compute the thresholds for a pair `0 < r < R` from the envelopes.
pub fn thresholds_from_envelopes(
    envelopes: &LevelEnvelopes,
    r_big: f64,
    r_small: f64,
    k: u32,
) -> Result<Thresholds, FeedbackError> {
    if !(r_small > 0.0) || r_small >= r_big {
        return Err(FeedbackError::InvalidPair { r_big, r_small });
    }
    let u_big_r = envelopes.lower.inverse(r_big, "lower")?;
    let r_tilde = envelopes.upper.eval(u_big_r);
    let u_hat_r = level_inflation_inverse(envelopes.upper.inverse(r_small, "upper")?, k);
    if !(u_hat_r < u_big_r) {
        return Err(FeedbackError::ThresholdOrder {
            u_hat: u_hat_r,
            u_big: u_big_r,
        });
    }
    Ok(Thresholds {
        u_hat_r,
        u_big_r,
        r_tilde,
    })
}

/// Solve `a1 d + ap d^l = rhs` for the unique positive root, to residual
/// 1e-12. The left side is strictly increasing and unbounded as long as some
/// coefficient is positive.
pub fn solve_decrease_equation(
    a_linear: f64,
    a_power: f64,
    ell: u32,
    rhs: f64,
) -> Result<f64, FeedbackError> {
    if a_linear <= 0.0 && a_power <= 0.0 {
        return Err(FeedbackError::DegenerateDecreaseEquation);
    }
    let f = |d: f64| a_linear * d + a_power * d.powi(ell as i32);
    let mut hi = 1.0;
    while f(hi) < rhs {
        hi *= 2.0;
        if hi > 1e120 {
            return Err(FeedbackError::DegenerateDecreaseEquation);
        }
    }
    let mut lo = 0.0;
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v - rhs).abs() <= 1e-12 {
            return Ok(mid);
        }
        if v < rhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The degree-dependent sampling steps with thresholds and a priori bounds.
#[derive(Debug, Clone, Serialize)]
pub struct StepSchedule {
    pub k: u32,
    pub r_big: f64,
    pub r_small: f64,
    pub u_hat_r: f64,
    pub u_big_r: f64,
    pub r_tilde: f64,
    /// Step ceiling independent of the degree.
    pub delta_base: f64,
    /// Degree-indexed ceiling keeping one step's displacement small
    /// (index `l - 1` holds the degree-`l` value).
    pub delta_reach: Vec<f64>,
    /// Degree-indexed root of the decrease equation.
    pub delta_decrease: Vec<f64>,
    /// Final step sizes: pointwise minimum of the three ceilings.
    pub delta: Vec<f64>,
    /// Smallest step across degrees.
    pub mu: f64,
    /// A priori bound on the number of steps to reach the entry level.
    pub iteration_bound: f64,
    /// A priori bound on the time to reach the entry level.
    pub time_bound: f64,
    /// Distance bound valid along the whole process.
    pub overshoot_bound: f64,
    /// Certificate level defining entrapment.
    pub entry_level: f64,
    /// Multiplier of the integral cost bound.
    pub cost_factor: f64,
    pub gamma_at_entry: f64,
}

/// Assemble the schedule from already-computed thresholds. Exposed separately
/// so threshold anchors can be exercised directly.
pub fn assemble_schedule(
    constants: &ConstantsEstimate,
    gamma: &RateMap,
    nu: f64,
    k: u32,
    thresholds: Thresholds,
    pair: (f64, f64),
) -> Result<StepSchedule, FeedbackError> {
    let m = constants.bracket_bound;
    let omega = constants.remainder_constant;
    let l_u = constants.cert_lipschitz;
    let l_l = constants.cost_lipschitz;
    let curvature = constants.curvature;
    let u_hat = thresholds.u_hat_r;
    let gamma_at_entry = gamma.eval(u_hat)?;

    let delta_base = 1.0_f64
        .min(constants.horizon_bound)
        .min(constants.probe_radius / m);
    let mut delta_reach = Vec::with_capacity(k as usize);
    let mut delta_decrease = Vec::with_capacity(k as usize);
    let mut delta = Vec::with_capacity(k as usize);
    let a_linear = l_u * omega + 0.5 * l_l * m;
    let a_power =
        curvature * (2.0 * l_u).powf(nu) * (m + omega).powi(2) / (2.0 * l_u).min(u_hat).powf(nu);
    for ell in 1..=k {
        let inv_ell = 1.0 / ell as f64;
        let reach = u_hat.powf(inv_ell) / (2.0 * (m + omega) * l_u).powf(inv_ell).max(l_u * m);
        let decrease = solve_decrease_equation(a_linear, a_power, ell, 0.5 * gamma_at_entry)?;
        delta_reach.push(reach);
        delta_decrease.push(decrease);
        delta.push(delta_base.min(reach).min(decrease));
    }
    let mu = delta.iter().cloned().fold(f64::INFINITY, f64::min);

    let beta_k = beta(k).expect("k >= 1") as f64;
    let level_gap = thresholds.u_big_r - u_hat;
    let spread = (k as f64 - 1.0) / k as f64;
    let iteration_bound = if k == 1 {
        1.0
    } else {
        (2.0 * level_gap * beta_k.powi(k as i32)
            / (gamma_at_entry * mu.powi(k as i32) * spread.powi(k as i32)))
        .floor()
            + 1.0
    };
    let time_bound = beta_k
        * (2.0 * level_gap * iteration_bound.powi(k as i32 - 1) / gamma_at_entry)
            .powf(1.0 / k as f64)
        + 1.0;

    let cost_factor = if k == 1 {
        1.0
    } else {
        let frac = 1.0 - 1.0 / k as f64;
        let term_base = 1.0 / delta_base.powi(k as i32 - 1);
        let term_curved = 4.0
            * curvature
            * (2.0 * l_u).powf(nu / k as f64).max((2.0 * l_u).powf(nu))
            * (m + omega).powi(2);
        let term_linear = 4.0 * l_u * omega + 2.0 * l_l * m;
        let term_reach = (2.0 * l_u * (m + omega)).powf(frac);
        let term_flat = (l_u * m).powi(k as i32 - 1);
        beta_k.powi(k as i32) / spread.powi(k as i32 - 1)
            * term_base
                .max(term_curved)
                .max(term_linear)
                .max(term_reach)
                .max(term_flat)
    };

    Ok(StepSchedule {
        k,
        r_big: pair.0,
        r_small: pair.1,
        u_hat_r: u_hat,
        u_big_r: thresholds.u_big_r,
        r_tilde: thresholds.r_tilde,
        delta_base,
        delta_reach,
        delta_decrease,
        delta,
        mu,
        iteration_bound,
        time_bound,
        overshoot_bound: 2.0 * thresholds.r_tilde,
        entry_level: u_hat,
        cost_factor,
        gamma_at_entry,
    })
}

/// Build the schedule for a pair `0 < r < R` from envelopes and constants.
pub fn step_schedule(
    constants: &ConstantsEstimate,
    candidate: &MrfCandidate,
    envelopes: &LevelEnvelopes,
    r_big: f64,
    r_small: f64,
    k: u32,
) -> Result<StepSchedule, FeedbackError> {
    let thresholds = thresholds_from_envelopes(envelopes, r_big, r_small, k)?;
    assemble_schedule(
        constants,
        &candidate.dissipative_rate,
        candidate.nu,
        k,
        thresholds,
        (r_big, r_small),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brackets::{LabelSet, Pruning};
    use crate::hamiltonian::CandidateFunction;
    use crate::symexpr::{Lagrangian, ScalarExpr, Target, VectorField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heisenberg(target: Target) -> System {
        use ScalarExpr as E;
        System::new(
            3,
            vec![
                VectorField::new(vec![E::one(), E::zero(), E::neg(E::coord(1))]),
                VectorField::new(vec![E::zero(), E::one(), E::coord(0)]),
            ],
            Lagrangian::constant(1.0),
            target,
            2,
        )
        .unwrap()
    }

    fn distance_candidate() -> MrfCandidate {
        MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::constant(0.1),
            dissipative_rate: RateMap::constant(0.2),
            nu: 0.0,
            probe_radius: 0.5,
        }
    }

    #[test]
    fn feedback_prefers_the_bracket_on_the_axis() {
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let candidate = MrfCandidate {
            cost_multiplier: RateMap::constant(0.0),
            ..distance_candidate()
        };
        let choice = feedback_generator(&system, &set, &candidate, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(choice.label, "-[f1,f2]");
        assert_eq!(choice.degree, 2);
        assert_eq!(choice.switch_number, 4);
        assert!((choice.value + 2.0).abs() < 1e-12);
        assert!(choice.margin_met);
    }

    #[test]
    fn feedback_picks_a_direct_direction_off_axis() {
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let candidate = distance_candidate();
        // x1 dominates: the straight -f1 direction descends steepest
        let choice = feedback_generator(&system, &set, &candidate, &[2.0, 0.0, 0.1]).unwrap();
        assert_eq!(choice.degree, 1);
        assert_eq!(choice.label, "-f1");
        assert!(choice.margin_met);
    }

    #[test]
    fn margin_flag_reports_unattainable_rates() {
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let candidate = MrfCandidate {
            dissipative_rate: RateMap::constant(50.0),
            ..distance_candidate()
        };
        let choice = feedback_generator(&system, &set, &candidate, &[1.0, 0.5, 0.2]).unwrap();
        assert!(!choice.margin_met);
        assert!(choice.margin > 0.0);
    }

    #[test]
    fn bracket_bound_on_heisenberg_lattice() {
        // on the ball of radius 2 the field norms peak at sqrt(5) and the
        // commutator contributes 2
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let candidate = distance_candidate();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = ConstantsConfig {
            lattice_per_axis: 21,
            shell_samples: 400,
            probe_trials: 400,
            asymptotic_points: 2,
            ..ConstantsConfig::default()
        };
        let constants = estimate_constants(&system, &set, &candidate, 1.0, &cfg, &mut rng).unwrap();
        let raw = constants.bracket_bound / constants.inflation;
        assert!((raw - 5.0f64.sqrt()).abs() < 1e-2, "raw bound {raw}");
        // l == 1 has no state dependence
        assert_eq!(constants.cost_lipschitz, 0.0);
        // the expansion is exact on this system
        assert!(constants.remainder_constant < 1e-6);
        // the distance certificate has unit Lipschitz bound
        assert!((constants.cert_lipschitz / constants.inflation - 1.0).abs() < 1e-3);
    }

    #[test]
    fn remainder_constant_vanishes_for_constant_fields() {
        use ScalarExpr as E;
        let system = System::new(
            2,
            vec![VectorField::new(vec![E::one(), E::constant(-0.5)])],
            Lagrangian::constant(1.0),
            Target::Point(vec![0.0; 2]),
            1,
        )
        .unwrap();
        let set = LabelSet::new(&system, 1, Pruning::ZeroBrackets).unwrap();
        let candidate = distance_candidate();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let cfg = ConstantsConfig {
            lattice_per_axis: 9,
            shell_samples: 100,
            probe_trials: 200,
            asymptotic_points: 2,
            ..ConstantsConfig::default()
        };
        let constants = estimate_constants(&system, &set, &candidate, 1.0, &cfg, &mut rng).unwrap();
        assert!(constants.remainder_constant < 1e-9);
    }

    #[test]
    fn envelopes_of_the_distance_are_the_identity() {
        let system = heisenberg(Target::Ball {
            center: vec![0.0; 3],
            radius: 0.1,
        });
        let candidate = distance_candidate();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let env = du_envelopes(&system, &candidate, (0.01, 3.0), 4000, &mut rng).unwrap();
        for u in [0.05, 0.3, 1.0, 2.5] {
            assert!(
                (env.lower.eval(u) - u).abs() < 1e-2,
                "lower({u}) = {}",
                env.lower.eval(u)
            );
            assert!(
                (env.upper.eval(u) - u).abs() < 1e-2,
                "upper({u}) = {}",
                env.upper.eval(u)
            );
        }
        let got = env.lower.inverse(1.5, "lower").unwrap();
        assert!((got - 1.5).abs() < 1e-2);
    }

    #[test]
    fn envelopes_of_a_scaled_certificate() {
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        let candidate = MrfCandidate {
            function: CandidateFunction::Expr {
                value: crate::symexpr::parse::parse_state_scalar("2*sqrt(x1^2 + x2^2 + x3^2)", 3)
                    .unwrap(),
                gradient: None,
            },
            ..distance_candidate()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let env = du_envelopes(&system, &candidate, (0.05, 2.0), 3000, &mut rng).unwrap();
        for u in [0.4, 1.0, 2.0, 3.0] {
            assert!((env.lower.eval(u) - u / 2.0).abs() < 1e-2);
            assert!((env.upper.eval(u) - u / 2.0).abs() < 1e-2);
        }
    }

    #[test]
    fn asymmetric_certificate_separates_the_envelopes() {
        let system = heisenberg(Target::Point(vec![0.0; 3]));
        // level sets are ellipsoids: distance ranges between u/2 and u
        let candidate = MrfCandidate {
            function: CandidateFunction::Expr {
                value: crate::symexpr::parse::parse_state_scalar("sqrt(x1^2 + 4*x2^2 + x3^2)", 3)
                    .unwrap(),
                gradient: None,
            },
            ..distance_candidate()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let env = du_envelopes(&system, &candidate, (0.05, 2.0), 6000, &mut rng).unwrap();
        for u in [0.5, 1.0, 1.5] {
            let lo = env.lower.eval(u);
            let hi = env.upper.eval(u);
            assert!(lo <= hi);
            assert!((lo - u / 2.0).abs() < 0.05, "lower({u}) = {lo}");
            assert!((hi - u).abs() < 0.05, "upper({u}) = {hi}");
        }
    }

    #[test]
    fn sandwich_holds_at_fresh_samples() {
        let system = heisenberg(Target::Ball {
            center: vec![0.0; 3],
            radius: 0.1,
        });
        let candidate = distance_candidate();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let env = du_envelopes(&system, &candidate, (0.01, 3.0), 3000, &mut rng).unwrap();
        // the envelopes were built from these same shells; fresh draws from
        // the same family must respect the sandwich up to sampling slack
        for _ in 0..500 {
            let x = shell_point(system.target(), 3, (0.02, 2.9), &mut rng).unwrap();
            let u = candidate.value(system.target(), &x).unwrap();
            let d = system.target().distance(&x).unwrap();
            assert!(env.lower.eval(u) <= d + 1e-6);
            assert!(d <= env.upper.eval(u) + 1e-6);
        }
    }

    #[test]
    fn gauge_and_inflation_values() {
        // k = 2 at u = 1/4 and u = 4
        assert!((reach_gauge(0.25, 2) - 0.5).abs() < 1e-15);
        assert!((level_inflation(0.25, 2) - 1.25).abs() < 1e-15);
        assert!((reach_gauge(4.0, 2) - 4.0).abs() < 1e-15);
        assert!((level_inflation(4.0, 2) - 12.0).abs() < 1e-15);
        // the inverse recovers the level
        for u in [0.01, 0.25, 1.0, 4.0, 9.0] {
            let v = level_inflation(u, 3);
            assert!((level_inflation_inverse(v, 3) - u).abs() < 1e-10);
        }
    }

    #[test]
    fn decrease_equation_linear_anchor() {
        // l_u = omega = m = curvature = 1, l_l = 0, nu = 0, ell = 1,
        // gamma at entry = 1: (1) d + (4) d = 1/2 so the root is 0.1
        let root = solve_decrease_equation(1.0, 4.0, 1, 0.5).unwrap();
        assert!((root - 0.1).abs() < 1e-12);
        // residual of the returned root is at most 1e-12
        let f = |d: f64| 1.0 * d + 4.0 * d;
        assert!((f(root) - 0.5).abs() <= 1e-12);
        // a fully degenerate left side is rejected
        assert!(solve_decrease_equation(0.0, 0.0, 1, 0.5).is_err());
    }

    #[test]
    fn decrease_equation_power_case() {
        let root = solve_decrease_equation(0.3, 2.0, 3, 0.8).unwrap();
        let f = |d: f64| 0.3 * d + 2.0 * d * d * d;
        assert!((f(root) - 0.8).abs() <= 1e-12);
    }

    fn worked_constants() -> ConstantsEstimate {
        ConstantsEstimate {
            bracket_bound: 1.0,
            remainder_constant: 1.0,
            cert_lipschitz: 1.0,
            cost_lipschitz: 0.0,
            curvature: 1.0,
            probe_radius: 1.0,
            horizon_bound: 1.0,
            region_radius: 1.0,
            inflation: 1.0,
        }
    }

    #[test]
    fn schedule_linear_anchor_through_assembly() {
        // with the worked constants and gamma == 1 the degree-1 decrease
        // equation reads 5 d = 1/2
        let thresholds = Thresholds {
            u_hat_r: 1.0,
            u_big_r: 2.0,
            r_tilde: 1.0,
        };
        let schedule = assemble_schedule(
            &worked_constants(),
            &RateMap::constant(1.0),
            0.0,
            1,
            thresholds,
            (2.0, 1.0),
        )
        .unwrap();
        assert!((schedule.delta_decrease[0] - 0.1).abs() < 1e-12);
        // k = 1 time bound: 2 (u_big - u_hat) / gamma + 1 = 3, exactly
        assert_eq!(schedule.time_bound, 3.0);
        assert_eq!(schedule.iteration_bound, 1.0);
        assert_eq!(schedule.cost_factor, 1.0);
    }

    #[test]
    fn schedule_monotonicity_over_radius_grids() {
        let system = heisenberg(Target::Ball {
            center: vec![0.0; 3],
            radius: 0.1,
        });
        let candidate = distance_candidate();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let env = du_envelopes(&system, &candidate, (0.005, 5.0), 4000, &mut rng).unwrap();
        let constants = ConstantsEstimate {
            bracket_bound: 3.0,
            remainder_constant: 0.01,
            cert_lipschitz: 1.25,
            cost_lipschitz: 0.0,
            curvature: 12.0,
            probe_radius: 0.5,
            horizon_bound: 0.4,
            region_radius: 2.0,
            inflation: 1.25,
        };
        // delta shrinks with r
        let mut prev = [f64::INFINITY; 2];
        for r in [0.8, 0.4, 0.2, 0.1] {
            let schedule = step_schedule(&constants, &candidate, &env, 2.0, r, 2).unwrap();
            for (ell, slot) in prev.iter_mut().enumerate() {
                assert!(schedule.delta[ell] <= *slot + 1e-12);
                *slot = schedule.delta[ell];
            }
            assert_eq!(schedule.entry_level, schedule.u_hat_r);
            assert_eq!(schedule.overshoot_bound, 2.0 * schedule.r_tilde);
            assert!(schedule.u_hat_r < schedule.u_big_r);
        }
        // time bound grows with R, shrinks with r
        let t_small_r = step_schedule(&constants, &candidate, &env, 2.0, 0.2, 2)
            .unwrap()
            .time_bound;
        let t_big_r = step_schedule(&constants, &candidate, &env, 2.0, 0.6, 2)
            .unwrap()
            .time_bound;
        assert!(t_big_r <= t_small_r);
        let t_bigger_reach = step_schedule(&constants, &candidate, &env, 2.4, 0.2, 2)
            .unwrap()
            .time_bound;
        assert!(t_bigger_reach >= t_small_r);
        // invalid pairs are rejected
        assert!(step_schedule(&constants, &candidate, &env, 1.0, 1.0, 2).is_err());
        assert!(step_schedule(&constants, &candidate, &env, 1.0, 2.0, 2).is_err());
    }
}
