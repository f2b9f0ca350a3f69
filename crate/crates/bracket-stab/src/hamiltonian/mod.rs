//! Bracket-extended Hamiltonians, restraint-function candidates, and the
//! integral cost-bound machinery.
//!
//! The unminimized Hamiltonian pairs a covector with a label's signed bracket
//! direction and adds the cost multiplier times the worst running cost over
//! the label's control values. The degree-h Hamiltonian minimizes over all
//! labels of degree <= h; ties break toward the first label in canonical
//! enumeration order so downstream feedback laws are deterministic.
//!
//! All checks here are sample-based: they report margins and witnesses, never
//! certificates over a continuum.

pub mod quad;

use crate::brackets::{LabelEntry, LabelSet};
use crate::symexpr::{dot, norm, EvalError, ScalarExpr, System, Target};
use quad::{adaptive_quadrature, QuadError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HamiltonianError {
    #[error("degree bound {h} out of range 1..={k}")]
    DegreeOutOfRange { h: u32, k: u32 },
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("the rate integrand is not integrable: {0}")]
    NonIntegrable(QuadError),
    #[error("cost bounds need positive arguments, got ({v1}, {v2})")]
    NonPositiveBound { v1: f64, v2: f64 },
    #[error("improved rates need a positive cost ceiling, got {0}")]
    NonPositiveCeiling(f64),
}

/// A scalar function of one nonnegative variable, wrapped for rate maps.
#[derive(Debug, Clone)]
pub struct RateMap {
    expr: ScalarExpr,
}

impl RateMap {
    pub fn new(expr: ScalarExpr) -> Self {
        RateMap { expr }
    }

    pub fn constant(c: f64) -> Self {
        RateMap {
            expr: ScalarExpr::constant(c),
        }
    }

    pub fn eval(&self, u: f64) -> Result<f64, EvalError> {
        self.expr.eval(&[u])
    }

    pub fn expr(&self) -> &ScalarExpr {
        &self.expr
    }
}

/// How the certificate function and its gradient selection are supplied.
#[derive(Debug, Clone)]
pub enum CandidateFunction {
    /// The target distance itself (gradient from the target oracle, finite
    /// differences where no analytic form exists).
    TargetDistance,
    Expr {
        value: ScalarExpr,
        gradient: Option<Vec<ScalarExpr>>,
    },
}

/// A candidate restraint function with its rate data.
#[derive(Debug, Clone)]
pub struct MrfCandidate {
    pub function: CandidateFunction,
    /// Cost multiplier, increasing with values in [0, 1].
    pub cost_multiplier: RateMap,
    /// Dissipative rate, increasing and positive.
    pub dissipative_rate: RateMap,
    /// Semiconcavity exponent in [0, 1].
    pub nu: f64,
    /// Probe radius for semiconcavity sampling.
    pub probe_radius: f64,
}

impl MrfCandidate {
    pub fn value(&self, target: &Target, x: &[f64]) -> Result<f64, EvalError> {
        match &self.function {
            CandidateFunction::TargetDistance => target.distance(x),
            CandidateFunction::Expr { value, .. } => value.eval(x),
        }
    }

    /// Gradient selection: analytic when available, otherwise central finite
    /// differences with step `1e-6 (1 + |x|)`.
    pub fn gradient(&self, target: &Target, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        match &self.function {
            CandidateFunction::TargetDistance => {
                if let Some(g) = target.gradient(x)? {
                    return Ok(g);
                }
                self.fd_gradient(target, x)
            }
            CandidateFunction::Expr {
                gradient: Some(g), ..
            } => {
                let mut out = Vec::with_capacity(g.len());
                for e in g {
                    out.push(e.eval(x)?);
                }
                Ok(out)
            }
            CandidateFunction::Expr { gradient: None, .. } => self.fd_gradient(target, x),
        }
    }

    fn fd_gradient(&self, target: &Target, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let h = 1e-6 * (1.0 + norm(x));
        let mut out = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = self.value(target, &probe)?;
            probe[i] = x[i] - h;
            let down = self.value(target, &probe)?;
            probe[i] = x[i];
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    }

    pub fn p0(&self, u: f64) -> Result<f64, EvalError> {
        self.cost_multiplier.eval(u)
    }

    pub fn gamma(&self, u: f64) -> Result<f64, EvalError> {
        self.dissipative_rate.eval(u)
    }
}

/// `<p, sign B(g)(x)> + p0val * max over the label's control values of l(x, a)`.
pub fn unminimized_hamiltonian(
    system: &System,
    x: &[f64],
    p0val: f64,
    p: &[f64],
    entry: &LabelEntry,
) -> Result<f64, EvalError> {
    let direction = entry.eval(x)?;
    let pairing = dot(p, &direction);
    if p0val == 0.0 {
        return Ok(pairing);
    }
    let mut worst = f64::NEG_INFINITY;
    for &a in &entry.control_values {
        let l = system.running_cost(x, a)?;
        worst = worst.max(l);
    }
    Ok(pairing + p0val * worst)
}

/// Minimum of the unminimized Hamiltonian with its canonical-order argmin.
#[derive(Debug, Clone, Serialize)]
pub struct HamiltonianValue {
    pub value: f64,
    /// Index into the label set's canonical order.
    pub argmin_index: usize,
    pub argmin_label: String,
}

/// Minimize over labels of degree `<= h`; `p0val = p0(u)` is evaluated once.
pub fn degree_h_hamiltonian(
    system: &System,
    set: &LabelSet,
    candidate: &MrfCandidate,
    x: &[f64],
    p: &[f64],
    u: f64,
    h: u32,
) -> Result<HamiltonianValue, HamiltonianError> {
    if h == 0 || h > set.degree_bound() {
        return Err(HamiltonianError::DegreeOutOfRange {
            h,
            k: set.degree_bound(),
        });
    }
    let p0val = candidate.p0(u)?;
    let mut best: Option<(f64, usize)> = None;
    for (i, entry) in set.up_to_degree(h) {
        let v = unminimized_hamiltonian(system, x, p0val, p, entry)?;
        match best {
            Some((bv, _)) if bv <= v => {}
            _ => best = Some((v, i)),
        }
    }
    let (value, argmin_index) = best.ok_or(HamiltonianError::EmptyLabelSet)?;
    Ok(HamiltonianValue {
        value,
        argmin_index,
        argmin_label: set.entries()[argmin_index].label.text(),
    })
}

/// Outcome of the sampled dissipative-inequality check.
#[derive(Debug, Clone, Serialize)]
pub struct DissipativeReport {
    pub samples: usize,
    /// Max over samples of `H + gamma(U)`; nonpositive means every sample
    /// satisfied the inequality.
    pub max_violation: f64,
    pub violation_witnesses: Vec<ViolationWitness>,
    pub margin_histogram: Vec<HistogramBin>,
    pub argmin_label_frequency: Vec<(String, usize)>,
    /// Samples where the gradient or value oracle failed (flagged, not fatal).
    pub oracle_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationWitness {
    pub x: Vec<f64>,
    pub value: f64,
    pub argmin_label: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl DissipativeReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= 0.0 && self.oracle_failures == 0
    }
}

const MAX_WITNESSES: usize = 32;

/// Evaluate `H(x, p(x), U(x)) + gamma(U(x))` at every sample.
pub fn check_dissipative(
    system: &System,
    set: &LabelSet,
    candidate: &MrfCandidate,
    samples: &[Vec<f64>],
) -> Result<DissipativeReport, HamiltonianError> {
    let k = set.degree_bound();
    let mut margins = Vec::with_capacity(samples.len());
    let mut witnesses = Vec::new();
    let mut freq: std::collections::BTreeMap<String, usize> = Default::default();
    let mut oracle_failures = 0usize;
    let mut max_violation = f64::NEG_INFINITY;
    for x in samples {
        let (u, p) = match (
            candidate.value(system.target(), x),
            candidate.gradient(system.target(), x),
        ) {
            (Ok(u), Ok(p)) => (u, p),
            _ => {
                oracle_failures += 1;
                continue;
            }
        };
        let ham = degree_h_hamiltonian(system, set, candidate, x, &p, u, k)?;
        let margin = ham.value + candidate.gamma(u)?;
        max_violation = max_violation.max(margin);
        if margin > 0.0 && witnesses.len() < MAX_WITNESSES {
            witnesses.push(ViolationWitness {
                x: x.clone(),
                value: margin,
                argmin_label: ham.argmin_label.clone(),
            });
        }
        *freq.entry(ham.argmin_label).or_insert(0) += 1;
        margins.push(margin);
    }
    Ok(DissipativeReport {
        samples: margins.len(),
        max_violation,
        violation_witnesses: witnesses,
        margin_histogram: histogram(&margins, 20),
        argmin_label_frequency: freq.into_iter().collect(),
        oracle_failures,
    })
}

fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        out[idx].count += 1;
    }
    out
}

/// The rate envelope whose integrability near zero gates cost regulation.
///
/// For `k = 1` every branch collapses to `1 / p0(w)`. A vanishing cost
/// multiplier signals `+inf` explicitly.
pub fn theta(candidate: &MrfCandidate, w: f64, k: u32) -> Result<f64, EvalError> {
    let p0 = candidate.p0(w)?;
    if p0 <= 0.0 {
        return Ok(f64::INFINITY);
    }
    if k == 1 {
        return Ok(1.0 / p0);
    }
    let gamma = candidate.gamma(w)?;
    let frac = 1.0 - 1.0 / k as f64;
    let t1 = 1.0 / p0;
    let t2 = 1.0 / (p0 * w.powf(frac));
    let t3 = 1.0 / (p0 * gamma.powi(k as i32 - 1));
    let t4 = 1.0 / (p0 * (w.powf(candidate.nu) * gamma).powf(frac));
    Ok(t1.max(t2).max(t3).max(t4))
}

const QUAD_REL_TOL: f64 = 1e-8;

/// Integral cost bound between two certificate levels.
///
/// Clamped at zero; an empty integration range (v2 >= 2 v1) yields zero.
pub fn psi(candidate: &MrfCandidate, v1: f64, v2: f64, k: u32) -> Result<f64, HamiltonianError> {
    if !(v1 > 0.0) || !(v2 > 0.0) {
        return Err(HamiltonianError::NonPositiveBound { v1, v2 });
    }
    let lo = v2 / 2.0;
    if lo >= v1 {
        return Ok(0.0);
    }
    let scale = if k == 1 { 1.0 } else { v2 / v1 };
    let integrand = |w: f64| theta(candidate, scale * w, k);
    let value = adaptive_quadrature(&integrand, lo, v1, QUAD_REL_TOL)
        .map_err(HamiltonianError::NonIntegrable)?;
    Ok(value.max(0.0))
}

/// Total cost bound from level `u`: the integral of the rate envelope from
/// zero, scaled by `lambda_factor` when brackets beyond degree one are in play.
///
/// Divergence of the improper integral is reported as non-integrability.
pub fn w_bound(
    candidate: &MrfCandidate,
    u: f64,
    k: u32,
    lambda_factor: f64,
) -> Result<f64, HamiltonianError> {
    if !(u > 0.0) {
        return Err(HamiltonianError::NonPositiveBound { v1: u, v2: u });
    }
    let integrand = |w: f64| theta(candidate, w, k);
    if k == 1 {
        adaptive_quadrature(&integrand, 0.0, u, QUAD_REL_TOL)
            .map_err(HamiltonianError::NonIntegrable)
    } else {
        let base = adaptive_quadrature(&integrand, 0.0, u / 2.0, QUAD_REL_TOL)
            .map_err(HamiltonianError::NonIntegrable)?;
        Ok(lambda_factor * base)
    }
}

/// Sharpened rate pair available when the running cost is pinched between
/// positive bounds; both returned maps are increasing whenever the inputs are.
pub fn improved_rates(
    candidate: &MrfCandidate,
    cost_ceiling: f64,
    cost_floor: &RateMap,
) -> Result<(ImprovedRate, ImprovedRate), HamiltonianError> {
    if !(cost_ceiling > 0.0) {
        return Err(HamiltonianError::NonPositiveCeiling(cost_ceiling));
    }
    let p0 = candidate.cost_multiplier.clone();
    let gamma = candidate.dissipative_rate.clone();
    let new_gamma = ImprovedRate {
        kind: ImprovedKind::Gamma {
            floor: cost_floor.clone(),
        },
        p0: p0.clone(),
        gamma: gamma.clone(),
        ceiling: cost_ceiling,
    };
    let new_p0 = ImprovedRate {
        kind: ImprovedKind::P0,
        p0,
        gamma,
        ceiling: cost_ceiling,
    };
    Ok((new_p0, new_gamma))
}

#[derive(Debug, Clone)]
enum ImprovedKind {
    P0,
    Gamma { floor: RateMap },
}

/// A function oracle produced by [`improved_rates`].
#[derive(Debug, Clone)]
pub struct ImprovedRate {
    kind: ImprovedKind,
    p0: RateMap,
    gamma: RateMap,
    ceiling: f64,
}

impl ImprovedRate {
    pub fn eval(&self, u: f64) -> Result<f64, EvalError> {
        let p0 = self.p0.eval(u)?;
        let gamma = self.gamma.eval(u)?;
        match &self.kind {
            // (p0 l_floor + gamma) / 2
            ImprovedKind::Gamma { floor } => Ok(0.5 * (p0 * floor.eval(u)? + gamma)),
            // (p0 + gamma / M) / 2
            ImprovedKind::P0 => Ok(0.5 * (p0 + gamma / self.ceiling)),
        }
    }
}

/// Statistical probe of the one-sided quadratic bound on certificate
/// increments near the target.
#[derive(Debug, Clone, Serialize)]
pub struct SemiconcavityReport {
    /// Smallest constant satisfying the probed inequality over all trials.
    pub curvature_estimate: f64,
    /// Largest gradient norm observed.
    pub gradient_bound: f64,
    pub trials: usize,
    pub oracle_failures: usize,
}

/// Sample pairs `(x, x_hat)` with `|x_hat - x| <= probe_radius` and the whole
/// segment inside the shell, and estimate the smallest `C` with
/// `U(x_hat) - U(x) <= <p, x_hat - x> + C |x_hat - x|^2 / d(sgm)^nu`.
pub fn probe_semiconcavity(
    system: &System,
    candidate: &MrfCandidate,
    shell: (f64, f64),
    trials: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<SemiconcavityReport, HamiltonianError> {
    use crate::sampling::{shell_point, unit_direction};
    let target = system.target();
    let n = system.state_dim();
    let mut curvature: f64 = 0.0;
    let mut gradient_bound: f64 = 0.0;
    let mut done = 0usize;
    let mut failures = 0usize;
    let mut attempts = 0usize;
    while done < trials && attempts < trials * 50 {
        attempts += 1;
        let x = shell_point(target, n, shell, rng)?;
        let dir = unit_direction(n, rng);
        let radius: f64 = rand::Rng::gen_range(rng, 0.0..1.0f64);
        let step = candidate.probe_radius * radius.max(1e-3);
        let offset: Vec<f64> = (0..n).map(|i| x[i] + step * dir[i]).collect();
        // keep the whole segment inside the shell
        let seg_dist = match segment_distance(target, &x, &offset, 17) {
            Ok(d) => d,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        if seg_dist <= shell.0 * 0.5 || seg_dist >= shell.1 {
            continue;
        }
        let (u0, u1, p) = match (
            candidate.value(target, &x),
            candidate.value(target, &offset),
            candidate.gradient(target, &x),
        ) {
            (Ok(a), Ok(b), Ok(p)) => (a, b, p),
            _ => {
                failures += 1;
                continue;
            }
        };
        gradient_bound = gradient_bound.max(norm(&p));
        let diff: Vec<f64> = offset.iter().zip(&x).map(|(a, b)| a - b).collect();
        let linear = dot(&p, &diff);
        let dist_sq = diff.iter().map(|d| d * d).sum::<f64>();
        if dist_sq == 0.0 {
            continue;
        }
        let required = (u1 - u0 - linear) * seg_dist.powf(candidate.nu) / dist_sq;
        curvature = curvature.max(required);
        done += 1;
    }
    Ok(SemiconcavityReport {
        curvature_estimate: curvature.max(0.0),
        gradient_bound,
        trials: done,
        oracle_failures: failures,
    })
}

/// Smallest target distance along the segment, sampled.
fn segment_distance(
    target: &Target,
    a: &[f64],
    b: &[f64],
    samples: usize,
) -> Result<f64, EvalError> {
    let mut best = f64::INFINITY;
    for i in 0..samples {
        let lambda = i as f64 / (samples - 1) as f64;
        let point: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + lambda * (y - x)).collect();
        best = best.min(target.distance(&point)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brackets::{LabelSet, Pruning};
    use crate::symexpr::{Lagrangian, VectorField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heisenberg(lagrangian: Lagrangian) -> System {
        use ScalarExpr as E;
        System::new(
            3,
            vec![
                VectorField::new(vec![E::one(), E::zero(), E::neg(E::coord(1))]),
                VectorField::new(vec![E::zero(), E::one(), E::coord(0)]),
            ],
            lagrangian,
            Target::Point(vec![0.0; 3]),
            2,
        )
        .unwrap()
    }

    fn candidate(p0: f64, gamma: f64) -> MrfCandidate {
        MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::constant(p0),
            dissipative_rate: RateMap::constant(gamma),
            nu: 0.0,
            probe_radius: 0.5,
        }
    }

    #[test]
    fn unminimized_constant_cost() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let x = [0.4, -0.2, 0.9];
        let p = [0.0, 0.0, 0.0];
        for entry in set.entries() {
            let v = unminimized_hamiltonian(&system, &x, 3.5, &p, entry).unwrap();
            assert!((v - 3.5).abs() < 1e-15);
        }
        // p0 = 0 reduces to the pure pairing
        let p = [0.0, 0.0, 1.0];
        let entry = set
            .entries()
            .iter()
            .find(|e| e.label.text() == "-[f1,f2]")
            .unwrap();
        let v = unminimized_hamiltonian(&system, &[0.0, 0.0, 1.0], 0.0, &p, entry).unwrap();
        assert!((v - -2.0).abs() < 1e-15);
    }

    #[test]
    fn degree_hamiltonian_anchor_values() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let cand = candidate(0.0, 1.0);
        let x = [0.0, 0.0, 1.0];
        let p = [0.0, 0.0, 1.0];
        let h1 = degree_h_hamiltonian(&system, &set, &cand, &x, &p, 1.0, 1).unwrap();
        let h2 = degree_h_hamiltonian(&system, &set, &cand, &x, &p, 1.0, 2).unwrap();
        assert!(h1.value.abs() < 1e-12);
        assert!((h2.value + 2.0).abs() < 1e-12);
        assert_eq!(h2.argmin_label, "-[f1,f2]");
        assert!(degree_h_hamiltonian(&system, &set, &cand, &x, &p, 1.0, 3).is_err());
    }

    #[test]
    fn zero_covector_constant_cost_gives_p0() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let cand = candidate(1.0, 1.0);
        let h = degree_h_hamiltonian(&system, &set, &cand, &[0.1, 0.2, 0.3], &[0.0; 3], 7.0, 2)
            .unwrap();
        assert!((h.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chain_monotonicity_in_degree() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let cand = candidate(0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3)
                .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                .collect();
            if norm(&x) < 1e-3 {
                continue;
            }
            let p: Vec<f64> = (0..3)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let u: f64 = rand::Rng::gen_range(&mut rng, 0.0..3.0);
            let h1 = degree_h_hamiltonian(&system, &set, &cand, &x, &p, u, 1).unwrap();
            let h2 = degree_h_hamiltonian(&system, &set, &cand, &x, &p, u, 2).unwrap();
            assert!(h2.value <= h1.value);
        }
    }

    #[test]
    fn sign_pairs_force_nonpositive_pure_pairing() {
        let system = heisenberg(Lagrangian::constant(0.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        let cand = candidate(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3)
                .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                .collect();
            let p: Vec<f64> = (0..3)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let h = degree_h_hamiltonian(&system, &set, &cand, &x, &p, 0.0, 2).unwrap();
            assert!(h.value <= 0.0);
        }
    }

    #[test]
    fn dissipative_check_reports_witnesses() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let set = LabelSet::new(&system, 2, Pruning::ZeroBrackets).unwrap();
        // gamma far above the attainable margin: everything is a violation
        let bad = candidate(0.0, 10.0);
        let samples: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.5]];
        let report = check_dissipative(&system, &set, &bad, &samples).unwrap();
        assert!(!report.passed());
        assert!(!report.violation_witnesses.is_empty());
        assert!(report.max_violation > 0.0);

        // modest gamma passes on a shell away from degenerate points
        let good = candidate(0.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shell_samples: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                crate::sampling::shell_point(system.target(), 3, (0.3, 2.0), &mut rng).unwrap()
            })
            .collect();
        let report = check_dissipative(&system, &set, &good, &shell_samples).unwrap();
        assert!(report.passed(), "max violation {}", report.max_violation);
        assert_eq!(report.samples, 1000);
    }

    #[test]
    fn theta_values() {
        // k > 1 worked instance
        let cand = candidate(1.0, 1.0);
        let t = theta(&cand, 0.25, 2).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
        let t = theta(&cand, 4.0, 2).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        // k = 1 collapses to 1/p0
        let half = candidate(0.5, 1.0);
        let t = theta(&half, 0.9, 1).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
        // vanishing multiplier is signaled as +inf
        let degenerate = candidate(0.0, 1.0);
        assert!(theta(&degenerate, 1.0, 2).unwrap().is_infinite());
    }

    #[test]
    fn theta_monotone_for_monotone_rates() {
        let cand = MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::new(
                crate::symexpr::parse::parse_scalar("u/(1+u)", &["u"]).unwrap(),
            ),
            dissipative_rate: RateMap::new(
                crate::symexpr::parse::parse_scalar("0.1 + u/(1+u)", &["u"]).unwrap(),
            ),
            nu: 0.0,
            probe_radius: 0.5,
        };
        let mut prev = f64::INFINITY;
        for i in 1..60 {
            let w = i as f64 * 0.1;
            let t = theta(&cand, w, 3).unwrap();
            assert!(t <= prev + 1e-12);
            prev = t;
        }
    }

    #[test]
    fn psi_closed_form_for_unit_multiplier() {
        let cand = candidate(1.0, 1.0);
        for (v1, v2) in [(1.0, 0.5), (2.0, 1.0), (0.8, 0.8), (0.5, 0.9)] {
            let got = psi(&cand, v1, v2, 1).unwrap();
            let expect = (v1 - v2 / 2.0).max(0.0);
            assert!(
                (got - expect).abs() < 1e-9,
                "({v1},{v2}): {got} vs {expect}"
            );
        }
        // v2 >= 2 v1 clamps to zero
        assert_eq!(psi(&cand, 1.0, 2.0, 1).unwrap(), 0.0);
        assert_eq!(psi(&cand, 1.0, 5.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn psi_degree_two_against_panel_oracle() {
        // p0 = 1, gamma = 1, nu = 0, v1 = v2 = 1:
        // integrand max(1, w^{-1/2}) on [1/2, 1] has closed value 2 - sqrt(2).
        let cand = candidate(1.0, 1.0);
        let got = psi(&cand, 1.0, 1.0, 2).unwrap();
        let closed = 2.0 - 2.0f64.sqrt();
        assert!((got - closed).abs() < 1e-9);
        // brute-force midpoint oracle
        let n = 1_000_000;
        let (a, b) = (0.5, 1.0);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let w: f64 = a + (i as f64 + 0.5) * h;
            acc += theta(&cand, w, 2).unwrap();
        }
        acc *= h;
        assert!((got - acc).abs() < 1e-6);
    }

    #[test]
    fn psi_nonintegrable_multiplier_is_an_error() {
        let degenerate = candidate(0.0, 1.0);
        assert!(matches!(
            psi(&degenerate, 1.0, 0.5, 2),
            Err(HamiltonianError::NonIntegrable(_))
        ));
    }

    #[test]
    fn psi_monotone_on_grids() {
        let cand = MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::new(
                crate::symexpr::parse::parse_scalar("u^0.25/(1+u^0.25)", &["u"]).unwrap(),
            ),
            dissipative_rate: RateMap::constant(1.0),
            nu: 0.0,
            probe_radius: 0.5,
        };
        // nondecreasing in v1
        let mut prev = 0.0;
        for i in 1..=10 {
            let v1 = i as f64 * 0.3;
            let v = psi(&cand, v1, 0.4, 2).unwrap();
            assert!(v >= prev - 1e-10);
            prev = v;
        }
        // nonincreasing in v2
        let mut prev = f64::INFINITY;
        for i in 1..=10 {
            let v2 = i as f64 * 0.3;
            let v = psi(&cand, 2.0, v2, 2).unwrap();
            assert!(v <= prev + 1e-10);
            prev = v;
        }
    }

    #[test]
    fn dyadic_partial_sums_stay_below_closed_bound() {
        let cand = MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::new(
                crate::symexpr::parse::parse_scalar("u^0.25/(1+u^0.25)", &["u"]).unwrap(),
            ),
            dissipative_rate: RateMap::constant(1.0),
            nu: 0.0,
            probe_radius: 0.5,
        };
        let v_bar = 1.7;
        let k = 2;
        // closed tail bound: 2 int_0^{v_bar} theta(w/2) dw = 4 int_0^{v_bar/2} theta
        let bound =
            2.0 * adaptive_quadrature(&|w| theta(&cand, w / 2.0, k), 0.0, v_bar, 1e-10).unwrap();
        // telescoped limit of the full series: each level in (0, v_bar] is
        // covered once plus once more below v_bar / 2
        let limit = adaptive_quadrature(&|w| theta(&cand, w / 2.0, k), 0.0, v_bar, 1e-10).unwrap()
            + adaptive_quadrature(&|w| theta(&cand, w / 2.0, k), 0.0, v_bar / 2.0, 1e-10).unwrap();
        let mut partial = 0.0;
        let mut prev_increment = f64::INFINITY;
        let mut v = v_bar;
        for _ in 0..60 {
            let increment = psi(&cand, v, v / 2.0, k).unwrap();
            partial += increment;
            assert!(
                partial <= bound + 1e-6,
                "partial {partial} exceeds bound {bound}"
            );
            assert!(increment <= prev_increment + 1e-12);
            prev_increment = increment;
            v /= 2.0;
        }
        // the tail has effectively converged, onto the telescoped value
        assert!(prev_increment < 1e-3);
        assert!(
            (partial - limit).abs() < 1e-3,
            "partial {partial} vs limit {limit}"
        );
        assert!(limit <= bound);
    }

    #[test]
    fn w_bound_improper_integral() {
        // k=1, p0 == 1: the bound from level u is exactly u.
        let cand = candidate(1.0, 1.0);
        let w = w_bound(&cand, 1.3, 1, 1.0).unwrap();
        assert!((w - 1.3).abs() < 1e-8);
        // k=2 with integrable singularity w^{-1/2} near zero:
        // int_0^{u/2} max(1, w^{-1/2}) dw with u = 2 -> int_0^1 w^{-1/2} = 2.
        let w = w_bound(&cand, 2.0, 2, 1.0).unwrap();
        assert!((w - 2.0).abs() < 1e-6, "{w}");
        // non-integrable case
        let degenerate = candidate(0.0, 1.0);
        assert!(w_bound(&degenerate, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn improved_rate_substitutions() {
        let zero_p0 = candidate(0.0, 1.0);
        let (p0, gamma) = improved_rates(&zero_p0, 1.0, &RateMap::constant(1.0)).unwrap();
        assert!((p0.eval(2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((gamma.eval(2.0).unwrap() - 0.5).abs() < 1e-15);
        let unit = candidate(1.0, 1.0);
        let (p0, gamma) = improved_rates(&unit, 1.0, &RateMap::constant(1.0)).unwrap();
        assert!((p0.eval(0.3).unwrap() - 1.0).abs() < 1e-15);
        assert!((gamma.eval(0.3).unwrap() - 1.0).abs() < 1e-15);
        // monotone inputs give monotone outputs
        let increasing = MrfCandidate {
            function: CandidateFunction::TargetDistance,
            cost_multiplier: RateMap::new(
                crate::symexpr::parse::parse_scalar("u/(1+u)", &["u"]).unwrap(),
            ),
            dissipative_rate: RateMap::new(
                crate::symexpr::parse::parse_scalar("0.5 + u/(2+u)", &["u"]).unwrap(),
            ),
            nu: 0.0,
            probe_radius: 0.5,
        };
        let (p0, gamma) = improved_rates(&increasing, 2.0, &RateMap::constant(0.5)).unwrap();
        let mut prev_p = 0.0;
        let mut prev_g = 0.0;
        for i in 1..=20 {
            let u = i as f64 * 0.25;
            let p = p0.eval(u).unwrap();
            let g = gamma.eval(u).unwrap();
            assert!(p >= prev_p && g >= prev_g);
            prev_p = p;
            prev_g = g;
        }
        assert!(improved_rates(&unit, 0.0, &RateMap::constant(1.0)).is_err());
    }

    #[test]
    fn semiconcavity_of_point_distance() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let cand = MrfCandidate {
            nu: 1.0,
            ..candidate(0.5, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let report = probe_semiconcavity(&system, &cand, (0.2, 2.0), 4000, &mut rng).unwrap();
        assert!(
            report.curvature_estimate <= 1.0 + 1e-6,
            "{}",
            report.curvature_estimate
        );
        assert!(report.gradient_bound <= 1.0 + 1e-9);
        assert!(report.trials >= 1000);
    }

    #[test]
    fn semiconcavity_of_ball_distance() {
        use ScalarExpr as E;
        let system = System::new(
            3,
            vec![
                VectorField::new(vec![E::one(), E::zero(), E::neg(E::coord(1))]),
                VectorField::new(vec![E::zero(), E::one(), E::coord(0)]),
            ],
            Lagrangian::constant(1.0),
            Target::Ball {
                center: vec![0.0; 3],
                radius: 0.5,
            },
            2,
        )
        .unwrap();
        let cand = MrfCandidate {
            nu: 0.0,
            probe_radius: 0.2,
            ..candidate(0.5, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let report = probe_semiconcavity(&system, &cand, (0.05, 1.5), 4000, &mut rng).unwrap();
        // curvature of the ball distance is 1/radius = 2, approached near the surface
        assert!(
            report.curvature_estimate <= 2.0 * 1.05,
            "{}",
            report.curvature_estimate
        );
        assert!(
            report.curvature_estimate >= 0.4,
            "{}",
            report.curvature_estimate
        );
        assert!(report.gradient_bound <= 1.0 + 1e-9);
    }

    #[test]
    fn semiconcavity_of_affine_function_is_flat() {
        let system = heisenberg(Lagrangian::constant(1.0));
        let cand = MrfCandidate {
            function: CandidateFunction::Expr {
                value: crate::symexpr::parse::parse_state_scalar("1 + 0.3*x1 - 0.2*x3", 3).unwrap(),
                gradient: Some(vec![
                    ScalarExpr::constant(0.3),
                    ScalarExpr::constant(0.0),
                    ScalarExpr::constant(-0.2),
                ]),
            },
            cost_multiplier: RateMap::constant(0.5),
            dissipative_rate: RateMap::constant(1.0),
            nu: 0.0,
            probe_radius: 0.4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let report = probe_semiconcavity(&system, &cand, (0.3, 2.0), 2000, &mut rng).unwrap();
        assert!(report.curvature_estimate <= 1e-8);
    }
}
