//! Formal iterated brackets and control labels.
//!
//! A formal bracket is a binary tree whose leaves stand for letters; its
//! degree is the leaf count and its switch number follows the recursion
//! `s = 2(s_left + s_right)` with `s = 1` at leaves. A control label attaches
//! a system field to every leaf (positionally, left to right) together with an
//! orientation sign. The label set of degree `<= h` is enumerated in a fixed
//! canonical order so the Hamiltonian argmin, and therefore the synthesized
//! feedback, is reproducible.

use crate::symexpr::{ControlValue, SignDir, System, VectorField};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BracketError {
    #[error("degree bound must be >= 1")]
    DegreeZero,
    #[error("degree bound {h} exceeds the system's max bracket degree {k}")]
    DegreeAboveMax { h: u32, k: u32 },
    #[error("bracket text: {message} at byte {offset}")]
    Text { message: String, offset: usize },
    #[error("leaf assignment has {got} entries for a degree-{expected} bracket")]
    AssignmentLength { got: usize, expected: usize },
    #[error("assigned field index {index} out of range (system has {count} fields)")]
    FieldIndex { index: usize, count: usize },
}

/// A formal iterated bracket; leaves are positional (left to right).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FormalBracket {
    Leaf,
    Node(Box<FormalBracket>, Box<FormalBracket>),
}

impl FormalBracket {
    pub fn leaf() -> Self {
        FormalBracket::Leaf
    }

    pub fn node(left: FormalBracket, right: FormalBracket) -> Self {
        FormalBracket::Node(Box::new(left), Box::new(right))
    }

    /// Number of letters involved.
    pub fn degree(&self) -> usize {
        match self {
            FormalBracket::Leaf => 1,
            FormalBracket::Node(l, r) => l.degree() + r.degree(),
        }
    }

    /// Switch number: 1 at leaves, `2(s1 + s2)` at nodes.
    pub fn switch_number(&self) -> u64 {
        match self {
            FormalBracket::Leaf => 1,
            FormalBracket::Node(l, r) => 2 * (l.switch_number() + r.switch_number()),
        }
    }

    /// The unique factorization of a non-leaf bracket.
    pub fn factorization(&self) -> Option<(&FormalBracket, &FormalBracket)> {
        match self {
            FormalBracket::Leaf => None,
            FormalBracket::Node(l, r) => Some((l, r)),
        }
    }

    /// All tree shapes with exactly `degree` leaves, in canonical order
    /// (left subtree degree ascending, then left shape, then right shape).
    pub fn shapes(degree: usize) -> Vec<FormalBracket> {
        if degree == 0 {
            return Vec::new();
        }
        if degree == 1 {
            return vec![FormalBracket::Leaf];
        }
        let mut out = Vec::new();
        for left_deg in 1..degree {
            for left in FormalBracket::shapes(left_deg) {
                for right in FormalBracket::shapes(degree - left_deg) {
                    out.push(FormalBracket::node(left.clone(), right));
                }
            }
        }
        out
    }

    fn fmt_with_letters(&self, f: &mut fmt::Formatter<'_>, next: &mut usize) -> fmt::Result {
        match self {
            FormalBracket::Leaf => {
                *next += 1;
                write!(f, "X{next}")
            }
            FormalBracket::Node(l, r) => {
                write!(f, "[")?;
                l.fmt_with_letters(f, next)?;
                write!(f, ",")?;
                r.fmt_with_letters(f, next)?;
                write!(f, "]")
            }
        }
    }
}

impl fmt::Display for FormalBracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut next = 0usize;
        self.fmt_with_letters(f, &mut next)
    }
}

/// `beta(1) = 1`, `beta(k) = 2(beta(k-1) + 1)`: an upper bound on the switch
/// number of any bracket of degree `<= k`.
pub fn beta(k: u32) -> Result<u64, BracketError> {
    if k == 0 {
        return Err(BracketError::DegreeZero);
    }
    let mut b: u64 = 1;
    for _ in 1..k {
        b = 2 * (b + 1);
    }
    Ok(b)
}

/// A formal bracket with a per-leaf field assignment and an orientation sign.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ControlLabel {
    pub bracket: FormalBracket,
    /// 0-based field index per leaf position, left to right.
    pub assignment: Vec<usize>,
    pub sign: SignDir,
}

impl ControlLabel {
    pub fn new(
        bracket: FormalBracket,
        assignment: Vec<usize>,
        sign: SignDir,
    ) -> Result<Self, BracketError> {
        if assignment.len() != bracket.degree() {
            return Err(BracketError::AssignmentLength {
                got: assignment.len(),
                expected: bracket.degree(),
            });
        }
        Ok(ControlLabel {
            bracket,
            assignment,
            sign,
        })
    }

    pub fn degree(&self) -> usize {
        self.bracket.degree()
    }

    pub fn switch_number(&self) -> u64 {
        self.bracket.switch_number()
    }

    pub fn flipped(&self) -> ControlLabel {
        ControlLabel {
            bracket: self.bracket.clone(),
            assignment: self.assignment.clone(),
            sign: self.sign.flipped(),
        }
    }

    /// True when the bracket is identically zero by antisymmetry: some node
    /// pairs two structurally identical subtrees carrying the same fields.
    pub fn is_identically_zero(&self) -> bool {
        fn walk(bracket: &FormalBracket, assignment: &[usize]) -> bool {
            match bracket {
                FormalBracket::Leaf => false,
                FormalBracket::Node(l, r) => {
                    let split = l.degree();
                    let (la, ra) = assignment.split_at(split);
                    if l == r && la == ra {
                        return true;
                    }
                    walk(l, la) || walk(r, ra)
                }
            }
        }
        walk(&self.bracket, &self.assignment)
    }

    /// Control values used to track this label's bracket direction: the
    /// single signed direction for degree-1 labels, both signs of every
    /// assigned direction otherwise (duplicates collapse).
    pub fn control_value_set(&self) -> Vec<ControlValue> {
        if self.degree() == 1 {
            return vec![ControlValue {
                field: self.assignment[0],
                sign: self.sign,
            }];
        }
        let mut fields: Vec<usize> = self.assignment.clone();
        fields.sort_unstable();
        fields.dedup();
        let mut out = Vec::with_capacity(2 * fields.len());
        for f in fields {
            out.push(ControlValue::plus(f));
            out.push(ControlValue::minus(f));
        }
        out
    }

    /// The signed iterated Lie bracket of the assigned fields, as a symbolic
    /// field with the sign *not* applied (apply `sign.factor()` at evaluation).
    pub fn bracket_field(&self, system: &System) -> Result<VectorField, BracketError> {
        for &i in &self.assignment {
            if i >= system.control_count() {
                return Err(BracketError::FieldIndex {
                    index: i,
                    count: system.control_count(),
                });
            }
        }
        fn build(bracket: &FormalBracket, assignment: &[usize], system: &System) -> VectorField {
            match bracket {
                FormalBracket::Leaf => system.field(assignment[0]).clone(),
                FormalBracket::Node(l, r) => {
                    let split = l.degree();
                    let (la, ra) = assignment.split_at(split);
                    let lf = build(l, la, system);
                    let rf = build(r, ra, system);
                    // dimensions agree by construction
                    lf.lie_bracket(&rf)
                        .expect("fields share the state dimension")
                }
            }
        }
        Ok(build(&self.bracket, &self.assignment, system))
    }

    /// Canonical text form, e.g. `+[[f1,f2],f1]`.
    pub fn text(&self) -> String {
        fn walk(bracket: &FormalBracket, assignment: &[usize], out: &mut String) {
            match bracket {
                FormalBracket::Leaf => {
                    out.push('f');
                    out.push_str(&(assignment[0] + 1).to_string());
                }
                FormalBracket::Node(l, r) => {
                    let split = l.degree();
                    let (la, ra) = assignment.split_at(split);
                    out.push('[');
                    walk(l, la, out);
                    out.push(',');
                    walk(r, ra, out);
                    out.push(']');
                }
            }
        }
        let mut out = String::new();
        out.push(self.sign.symbol());
        walk(&self.bracket, &self.assignment, &mut out);
        out
    }

    /// Inverse of [`ControlLabel::text`] on canonical forms.
    pub fn parse_text(src: &str, field_count: usize) -> Result<ControlLabel, BracketError> {
        let bytes = src.as_bytes();
        let mut pos = 0usize;
        let err = |message: &str, offset: usize| BracketError::Text {
            message: message.to_string(),
            offset,
        };
        let sign = match bytes.first() {
            Some(b'+') => SignDir::Plus,
            Some(b'-') => SignDir::Minus,
            _ => return Err(err("expected sign prefix '+' or '-'", 0)),
        };
        pos += 1;

        fn parse_node(
            bytes: &[u8],
            pos: &mut usize,
            field_count: usize,
            assignment: &mut Vec<usize>,
        ) -> Result<FormalBracket, BracketError> {
            let err = |message: String, offset: usize| BracketError::Text { message, offset };
            match bytes.get(*pos) {
                Some(b'[') => {
                    *pos += 1;
                    let left = parse_node(bytes, pos, field_count, assignment)?;
                    if bytes.get(*pos) != Some(&b',') {
                        return Err(err("expected ','".into(), *pos));
                    }
                    *pos += 1;
                    let right = parse_node(bytes, pos, field_count, assignment)?;
                    if bytes.get(*pos) != Some(&b']') {
                        return Err(err("expected ']'".into(), *pos));
                    }
                    *pos += 1;
                    Ok(FormalBracket::node(left, right))
                }
                Some(b'f') => {
                    *pos += 1;
                    let start = *pos;
                    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
                        *pos += 1;
                    }
                    if start == *pos {
                        return Err(err("expected field number after 'f'".into(), start));
                    }
                    let digits = std::str::from_utf8(&bytes[start..*pos]).unwrap();
                    let idx: usize = digits
                        .parse()
                        .map_err(|_| err(format!("bad field number '{digits}'"), start))?;
                    if idx == 0 || idx > field_count {
                        return Err(err(
                            format!("field f{idx} out of range 1..{field_count}"),
                            start,
                        ));
                    }
                    assignment.push(idx - 1);
                    Ok(FormalBracket::Leaf)
                }
                _ => Err(err("expected '[' or leaf 'fN'".into(), *pos)),
            }
        }

        let mut assignment = Vec::new();
        let bracket = parse_node(bytes, &mut pos, field_count, &mut assignment)?;
        if pos != bytes.len() {
            return Err(err("trailing input", pos));
        }
        ControlLabel::new(bracket, assignment, sign)
    }
}

impl fmt::Display for ControlLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Whether identically-zero labels are removed from the enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pruning {
    ZeroBrackets,
    Keep,
}

/// All control labels of degree `<= h` over `field_count` fields, both signs,
/// in canonical order: degree, then tree shape, then leaf assignment
/// (lexicographic), then sign (`+` before `-`).
pub fn enumerate_labels(
    field_count: usize,
    h: u32,
    pruning: Pruning,
) -> Result<Vec<ControlLabel>, BracketError> {
    if h == 0 {
        return Err(BracketError::DegreeZero);
    }
    let mut out = Vec::new();
    for degree in 1..=h as usize {
        for shape in FormalBracket::shapes(degree) {
            let mut assignment = vec![0usize; degree];
            loop {
                let candidate = ControlLabel {
                    bracket: shape.clone(),
                    assignment: assignment.clone(),
                    sign: SignDir::Plus,
                };
                if pruning == Pruning::Keep || !candidate.is_identically_zero() {
                    out.push(candidate.clone());
                    out.push(candidate.flipped());
                }
                // next assignment in lexicographic order
                let mut pos = degree;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    assignment[pos] += 1;
                    if assignment[pos] < field_count {
                        break;
                    }
                    assignment[pos] = 0;
                }
                if assignment.iter().all(|&a| a == 0) {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// A label together with its cached symbolic bracket field and control values.
#[derive(Debug, Clone)]
pub struct LabelEntry {
    pub label: ControlLabel,
    /// Unsigned bracket field; multiply by `label.sign.factor()` on evaluation.
    pub field: VectorField,
    pub control_values: Vec<ControlValue>,
}

impl LabelEntry {
    /// `sign * B(g)(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, crate::symexpr::EvalError> {
        let mut v = self.field.eval(x)?;
        if self.label.sign == SignDir::Minus {
            for c in &mut v {
                *c = -*c;
            }
        }
        Ok(v)
    }
}

/// The enumerated label set of a system up to a degree bound, with symbolic
/// bracket fields precomputed once.
#[derive(Debug, Clone)]
pub struct LabelSet {
    entries: Vec<LabelEntry>,
    degree_bound: u32,
    /// Non-blocking audit of primitives that are not smooth everywhere.
    pub smoothness_warnings: Vec<&'static str>,
}

impl LabelSet {
    pub fn new(system: &System, h: u32, pruning: Pruning) -> Result<Self, BracketError> {
        if h > system.max_degree() {
            return Err(BracketError::DegreeAboveMax {
                h,
                k: system.max_degree(),
            });
        }
        let labels = enumerate_labels(system.control_count(), h, pruning)?;
        let mut entries = Vec::with_capacity(labels.len());
        let mut prev: Option<(usize, VectorField)> = None;
        for (i, label) in labels.into_iter().enumerate() {
            // sign-flipped partner reuses the symbolic field of the + label
            let field = match &prev {
                Some((j, f)) if *j + 1 == i && label.sign == SignDir::Minus => f.clone(),
                _ => label.bracket_field(system)?,
            };
            prev = Some((i, field.clone()));
            let control_values = label.control_value_set();
            entries.push(LabelEntry {
                label,
                field,
                control_values,
            });
        }
        let mut warnings: Vec<&'static str> = system
            .fields()
            .iter()
            .flat_map(|f| f.smoothness_warnings())
            .collect();
        warnings.sort_unstable();
        warnings.dedup();
        Ok(LabelSet {
            entries,
            degree_bound: h,
            smoothness_warnings: warnings,
        })
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn degree_bound(&self) -> u32 {
        self.degree_bound
    }

    /// Entries of degree `<= h`, in canonical order.
    pub fn up_to_degree(&self, h: u32) -> impl Iterator<Item = (usize, &LabelEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.label.degree() as u32 <= h)
    }
}
