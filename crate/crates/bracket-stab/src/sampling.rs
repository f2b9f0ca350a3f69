//! Seeded sampling helpers for shells around the target and lattice grids.
//!
//! All randomness in the crate flows through a caller-supplied RNG, so a
//! scenario seed fixes every probe and grid jitter.

use crate::symexpr::{EvalError, Target};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("target has no center; shell sampling needs a bounding box")]
    NoCenter,
    #[error("rejection sampling failed to hit the shell ({0} attempts)")]
    RejectionExhausted(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Uniform direction on the unit sphere.
pub fn unit_direction(n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    loop {
        // Box-Muller normals, normalized
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = crate::symexpr::norm(&v);
        if norm > 1e-12 {
            return v.iter().map(|c| c / norm).collect();
        }
    }
}

/// A point whose target distance lies in `[shell.0, shell.1]`.
///
/// For point and ball targets the point is built radially; the construction
/// is exact, no rejection involved.
pub fn shell_point(
    target: &Target,
    n: usize,
    shell: (f64, f64),
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<f64>, EvalError> {
    let center = target
        .center()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; n]);
    let dir = unit_direction(n, rng);
    let d: f64 = rng.gen_range(shell.0..=shell.1);
    let radius = target.inner_radius() + d;
    Ok((0..n).map(|i| center[i] + radius * dir[i]).collect())
}

/// `count` shell points.
pub fn shell_points(
    target: &Target,
    n: usize,
    shell: (f64, f64),
    count: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<Vec<f64>>, EvalError> {
    (0..count)
        .map(|_| shell_point(target, n, shell, rng))
        .collect()
}

/// Regular lattice over the axis-aligned box around the target center with
/// half-width `radius`, keeping the points whose target distance is at most
/// `radius`. Includes the axis extremes, which carry the coordinate maxima.
pub fn lattice_in_reach(
    target: &Target,
    n: usize,
    radius: f64,
    per_axis: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let center = target
        .center()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; n]);
    let half_width = target.inner_radius() + radius;
    let per_axis = per_axis.max(2);
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let point: Vec<f64> = (0..n)
            .map(|i| {
                let frac = idx[i] as f64 / (per_axis - 1) as f64;
                center[i] - half_width + 2.0 * half_width * frac
            })
            .collect();
        if target.distance(&point)? <= radius {
            out.push(point);
        }
        // advance the odometer
        let mut i = 0;
        loop {
            if i == n {
                return Ok(out);
            }
            idx[i] += 1;
            if idx[i] < per_axis {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}
