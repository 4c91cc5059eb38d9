//! Linear temporal logic over finite traces.
//!
//! Formulas use the keyword syntax produced by rule extraction:
//!
//! ```text
//! ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)
//! ```
//!
//! Operator precedence, tightest first: the unary operators `NOT`, `NEXT`,
//! `ALWAYS`, `EVENTUALLY`; then `UNTIL` (right-associative); `AND`; `OR` and
//! `XOR`; and finally `IMPLIES` (right-associative). [`Formula::render`]
//! produces a fully parenthesized canonical form that parses back to the
//! same tree.
//!
//! Semantics are evaluated at step 0 of a non-empty [`Trace`]. `NEXT` is
//! strong (false at the last step) and `UNTIL` is inclusive: the left operand
//! must also hold at the step where the right operand first holds.

mod eval;
mod parser;

use std::fmt;

use indexmap::IndexSet;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use eval::{evaluate, evaluate_all, evaluate_at, EvalError, Trace, TraceError};
pub use parser::{parse_formula, ParseError};

/// Keyword operators recognised by the parser.
pub const KEYWORDS: [&str; 9] = [
    "ALWAYS",
    "EVENTUALLY",
    "NEXT",
    "UNTIL",
    "NOT",
    "AND",
    "OR",
    "XOR",
    "IMPLIES",
];

/// Returns true if `name` can be used as an atom.
///
/// Atoms are identifiers made of ASCII letters, digits and underscores that
/// start with a letter or underscore and are not an operator keyword.
/// Mixed-case acronyms such as `comply_with_GDPR_laws` are accepted.
pub fn is_valid_atom(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_') && !KEYWORDS.contains(&name)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Xor(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Next(Box<Formula>),
    Always(Box<Formula>),
    Eventually(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn atom(name: impl Into<String>) -> Self {
        Formula::Atom(name.into())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn xor(a: Formula, b: Formula) -> Self {
        Formula::Xor(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn next(f: Formula) -> Self {
        Formula::Next(Box::new(f))
    }

    pub fn always(f: Formula) -> Self {
        Formula::Always(Box::new(f))
    }

    pub fn eventually(f: Formula) -> Self {
        Formula::Eventually(Box::new(f))
    }

    pub fn until(a: Formula, b: Formula) -> Self {
        Formula::Until(Box::new(a), Box::new(b))
    }

    /// Canonical, fully parenthesized text form.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Formula::Atom(name) => out.push_str(name),
            Formula::Not(f) => unary(out, "NOT", f),
            Formula::Next(f) => unary(out, "NEXT", f),
            Formula::Always(f) => unary(out, "ALWAYS", f),
            Formula::Eventually(f) => unary(out, "EVENTUALLY", f),
            Formula::And(a, b) => binary(out, "AND", a, b),
            Formula::Or(a, b) => binary(out, "OR", a, b),
            Formula::Xor(a, b) => binary(out, "XOR", a, b),
            Formula::Implies(a, b) => binary(out, "IMPLIES", a, b),
            Formula::Until(a, b) => binary(out, "UNTIL", a, b),
        }
    }

    /// Atom names in first-occurrence order, without duplicates.
    pub fn free_predicates(&self) -> IndexSet<String> {
        let mut names = IndexSet::new();
        self.collect_atoms(&mut names);
        names
    }

    fn collect_atoms(&self, names: &mut IndexSet<String>) {
        match self {
            Formula::Atom(name) => {
                if !names.contains(name) {
                    names.insert(name.clone());
                }
            }
            Formula::Not(f) | Formula::Next(f) | Formula::Always(f) | Formula::Eventually(f) => f.collect_atoms(names),
            Formula::And(a, b)
            | Formula::Or(a, b)
            | Formula::Xor(a, b)
            | Formula::Implies(a, b)
            | Formula::Until(a, b) => {
                a.collect_atoms(names);
                b.collect_atoms(names);
            }
        }
    }

    pub fn mentions(&self, name: &str) -> bool {
        match self {
            Formula::Atom(n) => n == name,
            Formula::Not(f) | Formula::Next(f) | Formula::Always(f) | Formula::Eventually(f) => f.mentions(name),
            Formula::And(a, b)
            | Formula::Or(a, b)
            | Formula::Xor(a, b)
            | Formula::Implies(a, b)
            | Formula::Until(a, b) => a.mentions(name) || b.mentions(name),
        }
    }

    /// Returns a copy with every atom renamed through `rename`.
    pub fn map_atoms(&self, rename: &impl Fn(&str) -> String) -> Formula {
        match self {
            Formula::Atom(n) => Formula::Atom(rename(n)),
            Formula::Not(f) => Formula::not(f.map_atoms(rename)),
            Formula::Next(f) => Formula::next(f.map_atoms(rename)),
            Formula::Always(f) => Formula::always(f.map_atoms(rename)),
            Formula::Eventually(f) => Formula::eventually(f.map_atoms(rename)),
            Formula::And(a, b) => Formula::and(a.map_atoms(rename), b.map_atoms(rename)),
            Formula::Or(a, b) => Formula::or(a.map_atoms(rename), b.map_atoms(rename)),
            Formula::Xor(a, b) => Formula::xor(a.map_atoms(rename), b.map_atoms(rename)),
            Formula::Implies(a, b) => Formula::implies(a.map_atoms(rename), b.map_atoms(rename)),
            Formula::Until(a, b) => Formula::until(a.map_atoms(rename), b.map_atoms(rename)),
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Formula::Atom(_) => 1,
            Formula::Not(f) | Formula::Next(f) | Formula::Always(f) | Formula::Eventually(f) => 1 + f.size(),
            Formula::And(a, b)
            | Formula::Or(a, b)
            | Formula::Xor(a, b)
            | Formula::Implies(a, b)
            | Formula::Until(a, b) => 1 + a.size() + b.size(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Atom(_) => 1,
            Formula::Not(f) | Formula::Next(f) | Formula::Always(f) | Formula::Eventually(f) => 1 + f.depth(),
            Formula::And(a, b)
            | Formula::Or(a, b)
            | Formula::Xor(a, b)
            | Formula::Implies(a, b)
            | Formula::Until(a, b) => 1 + a.depth().max(b.depth()),
        }
    }
}

fn unary(out: &mut String, op: &str, f: &Formula) {
    out.push('(');
    out.push_str(op);
    out.push(' ');
    f.render_into(out);
    out.push(')');
}

fn binary(out: &mut String, op: &str, a: &Formula, b: &Formula) {
    out.push('(');
    a.render_into(out);
    out.push(' ');
    out.push_str(op);
    out.push(' ');
    b.render_into(out);
    out.push(')');
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for Formula {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

impl Serialize for Formula {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_formula(&text).map_err(serde::de::Error::custom)
    }
}

/// Splits a top-level conjunction into its conjuncts.
///
/// `ALWAYS (a AND b AND c)` becomes `[ALWAYS a, ALWAYS b, ALWAYS c]`; a bare
/// conjunction is flattened as is. Any nesting of `ALWAYS` around the
/// conjunction is reapplied to each conjunct. Everything else is returned
/// unchanged as a single element.
pub fn split_top_level_conjunction(f: &Formula) -> Vec<Formula> {
    let mut prefix = 0usize;
    let mut body = f;
    while let Formula::Always(inner) = body {
        prefix += 1;
        body = inner;
    }
    if !matches!(body, Formula::And(..)) {
        return vec![f.clone()];
    }
    let mut conjuncts = Vec::new();
    flatten_and(body, &mut conjuncts);
    conjuncts
        .into_iter()
        .map(|c| {
            let mut wrapped = c.clone();
            for _ in 0..prefix {
                wrapped = Formula::always(wrapped);
            }
            wrapped
        })
        .collect()
}

fn flatten_and<'a>(f: &'a Formula, out: &mut Vec<&'a Formula>) {
    match f {
        Formula::And(a, b) => {
            flatten_and(a, out);
            flatten_and(b, out);
        }
        other => out.push(other),
    }
}
