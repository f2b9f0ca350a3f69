//! Symbolic scalar and vector-field expressions over state coordinates.
//!
//! Vector fields, running costs, and certificate functions are all closed-form
//! expression trees, so Jacobians and iterated Lie brackets are computed by
//! exact differentiation: no truncation error enters the bracket directions.
//! The only simplification applied is constant folding (plus the neutral and
//! absorbing elements it implies); expressions are never rewritten into a
//! canonical form.

pub mod parse;

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Errors raised when evaluating an expression at a point.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("coordinate x{} not available in dimension {dim}", index + 1)]
    CoordOutOfRange { index: usize, dim: usize },
    #[error("sqrt of negative value {arg}")]
    SqrtNegative { arg: f64 },
    #[error("ln of non-positive value {arg}")]
    LnNonPositive { arg: f64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("{base}^{exponent} is not a finite real")]
    PowDomain { base: f64, exponent: f64 },
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<EvalError>,
    },
}

/// A scalar expression tree over coordinates `x1..xn`.
///
/// Primitives are smooth on their natural domains; `sqrt` and `ln` are only
/// smooth away from the boundary of theirs, which [`ScalarExpr::smoothness_warnings`]
/// reports.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    Const(f64),
    Coord(usize),
    Neg(Box<ScalarExpr>),
    Add(Box<ScalarExpr>, Box<ScalarExpr>),
    Sub(Box<ScalarExpr>, Box<ScalarExpr>),
    Mul(Box<ScalarExpr>, Box<ScalarExpr>),
    Div(Box<ScalarExpr>, Box<ScalarExpr>),
    Pow(Box<ScalarExpr>, Box<ScalarExpr>),
    Sin(Box<ScalarExpr>),
    Cos(Box<ScalarExpr>),
    Exp(Box<ScalarExpr>),
    Sqrt(Box<ScalarExpr>),
    Ln(Box<ScalarExpr>),
}

// constructor names mirror the operations they fold, not the std traits
#[allow(clippy::should_implement_trait)]
impl ScalarExpr {
    pub fn constant(c: f64) -> Self {
        ScalarExpr::Const(c)
    }

    /// Coordinate `x{i+1}` (0-based index).
    pub fn coord(i: usize) -> Self {
        ScalarExpr::Coord(i)
    }

    pub fn zero() -> Self {
        ScalarExpr::Const(0.0)
    }

    pub fn one() -> Self {
        ScalarExpr::Const(1.0)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            ScalarExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarExpr::Const(c) if *c == 0.0)
    }

    pub fn neg(a: ScalarExpr) -> Self {
        match a {
            ScalarExpr::Const(c) => ScalarExpr::Const(-c),
            ScalarExpr::Neg(inner) => *inner,
            other => ScalarExpr::Neg(Box::new(other)),
        }
    }

    pub fn add(a: ScalarExpr, b: ScalarExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ScalarExpr::Const(x + y),
            (Some(0.0), None) => b,
            (None, Some(0.0)) => a,
            _ => ScalarExpr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: ScalarExpr, b: ScalarExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ScalarExpr::Const(x - y),
            (None, Some(0.0)) => a,
            (Some(0.0), None) => ScalarExpr::neg(b),
            _ => ScalarExpr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: ScalarExpr, b: ScalarExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => ScalarExpr::Const(x * y),
            (Some(0.0), None) | (None, Some(0.0)) => ScalarExpr::Const(0.0),
            (Some(1.0), None) => b,
            (None, Some(1.0)) => a,
            _ => ScalarExpr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: ScalarExpr, b: ScalarExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => ScalarExpr::Const(x / y),
            (Some(0.0), None) => ScalarExpr::Const(0.0),
            (None, Some(1.0)) => a,
            _ => ScalarExpr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: ScalarExpr, b: ScalarExpr) -> Self {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => {
                let v = x.powf(y);
                if v.is_finite() {
                    return ScalarExpr::Const(v);
                }
                ScalarExpr::Pow(
                    Box::new(ScalarExpr::Const(x)),
                    Box::new(ScalarExpr::Const(y)),
                )
            }
            (None, Some(1.0)) => a,
            (None, Some(0.0)) => ScalarExpr::Const(1.0),
            _ => ScalarExpr::Pow(Box::new(a), Box::new(b)),
        }
    }

    pub fn sin(a: ScalarExpr) -> Self {
        match a.as_const() {
            Some(c) => ScalarExpr::Const(c.sin()),
            None => ScalarExpr::Sin(Box::new(a)),
        }
    }

    pub fn cos(a: ScalarExpr) -> Self {
        match a.as_const() {
            Some(c) => ScalarExpr::Const(c.cos()),
            None => ScalarExpr::Cos(Box::new(a)),
        }
    }

    pub fn exp(a: ScalarExpr) -> Self {
        match a.as_const() {
            Some(c) => ScalarExpr::Const(c.exp()),
            None => ScalarExpr::Exp(Box::new(a)),
        }
    }

    pub fn sqrt(a: ScalarExpr) -> Self {
        match a.as_const() {
            Some(c) if c >= 0.0 => ScalarExpr::Const(c.sqrt()),
            _ => ScalarExpr::Sqrt(Box::new(a)),
        }
    }

    pub fn ln(a: ScalarExpr) -> Self {
        match a.as_const() {
            Some(c) if c > 0.0 => ScalarExpr::Const(c.ln()),
            _ => ScalarExpr::Ln(Box::new(a)),
        }
    }

    /// Evaluate at a point. Domain violations are reported, never silently NaN.
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            ScalarExpr::Const(c) => *c,
            ScalarExpr::Coord(i) => {
                if *i >= x.len() {
                    return Err(EvalError::CoordOutOfRange {
                        index: *i,
                        dim: x.len(),
                    });
                }
                x[*i]
            }
            ScalarExpr::Neg(a) => -a.eval(x)?,
            ScalarExpr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            ScalarExpr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            ScalarExpr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            ScalarExpr::Div(a, b) => {
                let d = b.eval(x)?;
                if d == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a.eval(x)? / d
            }
            ScalarExpr::Pow(a, b) => {
                let base = a.eval(x)?;
                let expo = b.eval(x)?;
                let v = base.powf(expo);
                if !v.is_finite() {
                    return Err(EvalError::PowDomain {
                        base,
                        exponent: expo,
                    });
                }
                v
            }
            ScalarExpr::Sin(a) => a.eval(x)?.sin(),
            ScalarExpr::Cos(a) => a.eval(x)?.cos(),
            ScalarExpr::Exp(a) => a.eval(x)?.exp(),
            ScalarExpr::Sqrt(a) => {
                let v = a.eval(x)?;
                if v < 0.0 {
                    return Err(EvalError::SqrtNegative { arg: v });
                }
                v.sqrt()
            }
            ScalarExpr::Ln(a) => {
                let v = a.eval(x)?;
                if v <= 0.0 {
                    return Err(EvalError::LnNonPositive { arg: v });
                }
                v.ln()
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    /// Exact partial derivative with respect to coordinate `i`.
    ///
    /// Differentiation is closed: the result is again a `ScalarExpr`.
    pub fn diff(&self, i: usize) -> ScalarExpr {
        use ScalarExpr as E;
        match self {
            E::Const(_) => E::zero(),
            E::Coord(j) => {
                if *j == i {
                    E::one()
                } else {
                    E::zero()
                }
            }
            E::Neg(a) => E::neg(a.diff(i)),
            E::Add(a, b) => E::add(a.diff(i), b.diff(i)),
            E::Sub(a, b) => E::sub(a.diff(i), b.diff(i)),
            E::Mul(a, b) => E::add(
                E::mul(a.diff(i), (**b).clone()),
                E::mul((**a).clone(), b.diff(i)),
            ),
            E::Div(a, b) => E::div(
                E::sub(
                    E::mul(a.diff(i), (**b).clone()),
                    E::mul((**a).clone(), b.diff(i)),
                ),
                E::mul((**b).clone(), (**b).clone()),
            ),
            E::Pow(a, b) => {
                let da = a.diff(i);
                match b.as_const() {
                    Some(c) => {
                        // d(u^c) = c * u^(c-1) * u'
                        E::mul(
                            E::mul(E::constant(c), E::pow((**a).clone(), E::constant(c - 1.0))),
                            da,
                        )
                    }
                    None => {
                        // d(u^v) = u^v * (v' ln u + v u'/u)
                        let db = b.diff(i);
                        E::mul(
                            self.clone(),
                            E::add(
                                E::mul(db, E::ln((**a).clone())),
                                E::div(E::mul((**b).clone(), da), (**a).clone()),
                            ),
                        )
                    }
                }
            }
            E::Sin(a) => E::mul(E::cos((**a).clone()), a.diff(i)),
            E::Cos(a) => E::neg(E::mul(E::sin((**a).clone()), a.diff(i))),
            E::Exp(a) => E::mul(self.clone(), a.diff(i)),
            E::Sqrt(a) => E::div(a.diff(i), E::mul(E::constant(2.0), self.clone())),
            E::Ln(a) => E::div(a.diff(i), (**a).clone()),
        }
    }

    /// Names of primitives in this tree that are not smooth on all of their
    /// closed domain (informational; never blocks anything).
    pub fn smoothness_warnings(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.collect_warnings(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_warnings(&self, out: &mut Vec<&'static str>) {
        use ScalarExpr as E;
        match self {
            E::Const(_) | E::Coord(_) => {}
            E::Neg(a) | E::Sin(a) | E::Cos(a) | E::Exp(a) => a.collect_warnings(out),
            E::Sqrt(a) => {
                out.push("sqrt");
                a.collect_warnings(out);
            }
            E::Ln(a) => {
                out.push("ln");
                a.collect_warnings(out);
            }
            E::Div(a, b) => {
                out.push("div");
                a.collect_warnings(out);
                b.collect_warnings(out);
            }
            E::Pow(a, b) => {
                if b.as_const().is_none_or(|c| c.fract() != 0.0 || c < 0.0) {
                    out.push("pow");
                }
                a.collect_warnings(out);
                b.collect_warnings(out);
            }
            E::Add(a, b) | E::Sub(a, b) | E::Mul(a, b) => {
                a.collect_warnings(out);
                b.collect_warnings(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        use ScalarExpr as E;
        match self {
            E::Add(..) | E::Sub(..) => 1,
            E::Mul(..) | E::Div(..) => 2,
            E::Neg(..) => 3,
            E::Pow(..) => 4,
            _ => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        let prec = self.precedence();
        let needs_paren = prec < parent;
        if needs_paren {
            write!(f, "(")?;
        }
        use ScalarExpr as E;
        match self {
            E::Const(c) => write!(f, "{c}")?,
            E::Coord(i) => write!(f, "x{}", i + 1)?,
            E::Neg(a) => {
                write!(f, "-")?;
                a.fmt_prec(f, 4)?;
            }
            E::Add(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
            }
            E::Sub(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)?;
            }
            E::Mul(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "*")?;
                b.fmt_prec(f, 3)?;
            }
            E::Div(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "/")?;
                b.fmt_prec(f, 3)?;
            }
            E::Pow(a, b) => {
                a.fmt_prec(f, 5)?;
                write!(f, "^")?;
                b.fmt_prec(f, 4)?;
            }
            E::Sin(a) => {
                write!(f, "sin(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            E::Cos(a) => {
                write!(f, "cos(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            E::Exp(a) => {
                write!(f, "exp(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            E::Sqrt(a) => {
                write!(f, "sqrt(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            E::Ln(a) => {
                write!(f, "ln(")?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if needs_paren {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// A vector field on R^n given componentwise by scalar expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<ScalarExpr>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("dimension mismatch: {left} vs {right}")]
pub struct DimensionMismatch {
    pub left: usize,
    pub right: usize,
}

impl VectorField {
    pub fn new(components: Vec<ScalarExpr>) -> Self {
        VectorField { components }
    }

    pub fn zero(dim: usize) -> Self {
        VectorField {
            components: vec![ScalarExpr::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ScalarExpr] {
        &self.components
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.eval(x).map_err(|e| EvalError::Component {
                    component: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Jacobian matrix: entry `(i, j)` is the expression for d f_i / d x_j.
    pub fn jacobian(&self) -> Vec<Vec<ScalarExpr>> {
        let n = self.dim();
        self.components
            .iter()
            .map(|c| (0..n).map(|j| c.diff(j)).collect())
            .collect()
    }

    /// Lie bracket `[self, other] = D(other) self - D(self) other`, exact.
    pub fn lie_bracket(&self, other: &VectorField) -> Result<VectorField, DimensionMismatch> {
        if self.dim() != other.dim() {
            return Err(DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        let n = self.dim();
        let jac_self = self.jacobian();
        let jac_other = other.jacobian();
        let mut comps = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = ScalarExpr::zero();
            for j in 0..n {
                let fwd = ScalarExpr::mul(jac_other[i][j].clone(), self.components[j].clone());
                let bwd = ScalarExpr::mul(jac_self[i][j].clone(), other.components[j].clone());
                acc = ScalarExpr::add(acc, ScalarExpr::sub(fwd, bwd));
            }
            comps.push(acc);
        }
        Ok(VectorField { components: comps })
    }

    pub fn smoothness_warnings(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = self
            .components
            .iter()
            .flat_map(|c| c.smoothness_warnings())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// One of the admissible constant control values, a signed canonical basis
/// direction of the control space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ControlValue {
    /// 0-based index of the driven vector field.
    pub field: usize,
    pub sign: SignDir,
}

/// Orientation sign used by control values and control labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignDir {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl SignDir {
    pub fn factor(self) -> f64 {
        match self {
            SignDir::Plus => 1.0,
            SignDir::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> SignDir {
        match self {
            SignDir::Plus => SignDir::Minus,
            SignDir::Minus => SignDir::Plus,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            SignDir::Plus => '+',
            SignDir::Minus => '-',
        }
    }
}

impl ControlValue {
    pub fn plus(field: usize) -> Self {
        ControlValue {
            field,
            sign: SignDir::Plus,
        }
    }

    pub fn minus(field: usize) -> Self {
        ControlValue {
            field,
            sign: SignDir::Minus,
        }
    }

    pub fn negated(self) -> Self {
        ControlValue {
            field: self.field,
            sign: self.sign.flipped(),
        }
    }

    /// The control vector in R^m (all zeros except +-1 at `field`).
    pub fn as_vector(self, m: usize) -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[self.field] = self.sign.factor();
        v
    }
}

impl fmt::Display for ControlValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}e{}", self.sign.symbol(), self.field + 1)
    }
}

/// Running cost `l(x, a) >= 0`, either shared by all control values or given
/// per value.
#[derive(Debug, Clone)]
pub enum Lagrangian {
    Uniform(ScalarExpr),
    /// Indexed `+e1..+em` then `-e1..-em`.
    PerControl(Vec<ScalarExpr>),
}

impl Lagrangian {
    pub fn constant(c: f64) -> Self {
        Lagrangian::Uniform(ScalarExpr::constant(c))
    }

    pub fn eval(&self, x: &[f64], a: ControlValue, control_count: usize) -> Result<f64, EvalError> {
        match self {
            Lagrangian::Uniform(e) => e.eval(x),
            Lagrangian::PerControl(exprs) => {
                let idx = match a.sign {
                    SignDir::Plus => a.field,
                    SignDir::Minus => control_count + a.field,
                };
                exprs[idx].eval(x)
            }
        }
    }
}

/// The closed target set, exposed through its Euclidean distance function and
/// (when available) the distance gradient.
#[derive(Debug, Clone)]
pub enum Target {
    Point(Vec<f64>),
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// A user-supplied distance oracle: the expression must be >= 0, vanish
    /// exactly on the target, and be 1-Lipschitz to behave like a distance.
    LevelSet {
        distance: ScalarExpr,
        gradient: Option<Vec<ScalarExpr>>,
    },
}

impl Target {
    pub fn distance(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Target::Point(c) => Ok(euclidean(x, c)),
            Target::Ball { center, radius } => Ok((euclidean(x, center) - radius).max(0.0)),
            Target::LevelSet { distance, .. } => distance.eval(x),
        }
    }

    /// Gradient of the distance where defined; `None` when no analytic form
    /// is available (callers fall back to finite differences).
    pub fn gradient(&self, x: &[f64]) -> Result<Option<Vec<f64>>, EvalError> {
        match self {
            Target::Point(c) | Target::Ball { center: c, .. } => {
                let norm = euclidean(x, c);
                if norm == 0.0 {
                    return Ok(None);
                }
                Ok(Some(
                    x.iter().zip(c).map(|(xi, ci)| (xi - ci) / norm).collect(),
                ))
            }
            Target::LevelSet { gradient, .. } => match gradient {
                Some(g) => {
                    let mut out = Vec::with_capacity(g.len());
                    for e in g {
                        out.push(e.eval(x)?);
                    }
                    Ok(Some(out))
                }
                None => Ok(None),
            },
        }
    }

    /// Center used for shell sampling around the target, if the target has one.
    pub fn center(&self) -> Option<&[f64]> {
        match self {
            Target::Point(c) => Some(c),
            Target::Ball { center, .. } => Some(center),
            Target::LevelSet { .. } => None,
        }
    }

    pub fn inner_radius(&self) -> f64 {
        match self {
            Target::Point(_) => 0.0,
            Target::Ball { radius, .. } => *radius,
            Target::LevelSet { .. } => 0.0,
        }
    }
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// A driftless control-affine system with a running cost and a target.
#[derive(Debug, Clone)]
pub struct System {
    state_dim: usize,
    fields: Vec<VectorField>,
    lagrangian: Lagrangian,
    target: Target,
    max_degree: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("system needs at least one control field")]
    NoFields,
    #[error("field {index} has dimension {got}, state dimension is {expected}")]
    FieldDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("max bracket degree must be >= 1")]
    DegreeZero,
}

impl System {
    pub fn new(
        state_dim: usize,
        fields: Vec<VectorField>,
        lagrangian: Lagrangian,
        target: Target,
        max_degree: u32,
    ) -> Result<Self, SystemError> {
        if fields.is_empty() {
            return Err(SystemError::NoFields);
        }
        if max_degree == 0 {
            return Err(SystemError::DegreeZero);
        }
        for (index, f) in fields.iter().enumerate() {
            if f.dim() != state_dim {
                return Err(SystemError::FieldDimension {
                    index,
                    got: f.dim(),
                    expected: state_dim,
                });
            }
        }
        Ok(System {
            state_dim,
            fields,
            lagrangian,
            target,
            max_degree,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Number of control directions `m`; the control set has `2m` values.
    pub fn control_count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn field(&self, i: usize) -> &VectorField {
        &self.fields[i]
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn lagrangian(&self) -> &Lagrangian {
        &self.lagrangian
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn running_cost(&self, x: &[f64], a: ControlValue) -> Result<f64, EvalError> {
        self.lagrangian.eval(x, a, self.control_count())
    }

    /// State velocity under the constant control value `a`.
    pub fn velocity(&self, x: &[f64], a: ControlValue) -> Result<Vec<f64>, EvalError> {
        let mut v = self.fields[a.field].eval(x)?;
        if a.sign == SignDir::Minus {
            for c in &mut v {
                *c = -*c;
            }
        }
        Ok(v)
    }

    pub fn distance(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.target.distance(x)
    }

    /// All control values `+e1..+em, -e1..-em` in canonical order.
    pub fn control_values(&self) -> Vec<ControlValue> {
        let m = self.control_count();
        (0..m)
            .map(ControlValue::plus)
            .chain((0..m).map(ControlValue::minus))
            .collect()
    }
}
