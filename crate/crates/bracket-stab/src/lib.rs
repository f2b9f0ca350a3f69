//! Lie-bracket feedback stabilization with cost regulation for driftless
//! control-affine systems.
//!
//! The crate synthesizes oriented bang-bang controls from iterated formal
//! brackets, evaluates bracket-extended Hamiltonians, checks candidate
//! restraint functions against the dissipative inequality, assembles the
//! degree-dependent step schedule, and simulates sample-and-hold processes
//! while auditing overshoot, attractiveness, entrapment, and cost bounds.

// `!(x > 0.0)` guards deliberately treat NaN as out of range
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brackets;
pub mod controls;
pub mod feedback;
pub mod hamiltonian;
pub mod ode;
pub mod sampling;
pub mod scenario;
pub mod simulate;
pub mod symexpr;
