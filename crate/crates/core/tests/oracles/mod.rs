//! Reference implementations written from the behavioural rules alone,
//! sharing no code with the crate under test. Shared by the property tests
//! and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------- merge

/// Content of one record id in some version: `None` when absent.
pub type Cell = Option<i64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Abort,
    Ours,
    Theirs,
}

/// Brute-force three-way comparator over integer-valued records.
///
/// `base` is what the overlay was written against, `head` the current head,
/// `ours` the overlay's intended state for the ids it touched. Returns the
/// conflicting ids and, unless aborted, the predicted head.
pub fn three_way(
    base: &BTreeMap<String, i64>,
    head: &BTreeMap<String, i64>,
    ours: &BTreeMap<String, Cell>,
    strategy: Strategy,
) -> (Vec<String>, Option<BTreeMap<String, i64>>) {
    let ids: BTreeSet<&String> = base.keys().chain(head.keys()).chain(ours.keys()).collect();
    let mut conflicts = Vec::new();
    let mut result = BTreeMap::new();
    for id in ids {
        let b: Cell = base.get(id).copied();
        let h: Cell = head.get(id).copied();
        let o: Cell = match ours.get(id) {
            Some(cell) => *cell,
            None => b,
        };
        let we_changed = o != b;
        let they_changed = h != b;
        let outcome = match (we_changed, they_changed) {
            (false, _) => h,
            (true, false) => o,
            (true, true) if o == h => h,
            (true, true) => {
                conflicts.push(id.clone());
                match strategy {
                    Strategy::Ours => o,
                    Strategy::Theirs | Strategy::Abort => h,
                }
            }
        };
        if let Some(v) = outcome {
            result.insert(id.clone(), v);
        }
    }
    if strategy == Strategy::Abort && !conflicts.is_empty() {
        return (conflicts, None);
    }
    (conflicts, Some(result))
}

// ------------------------------------------------------------ predicates

#[derive(Clone, Debug, PartialEq)]
pub enum Lit {
    Num(f64),
    Str(String),
    Bool(bool),
}

#[derive(Clone, Debug)]
pub enum Expr {
    Cmp(String, &'static str, Lit),
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
}

pub const OPS: [&str; 8] = ["==", "!=", "<", "<=", ">", ">=", "contains", "prefix"];

fn lit_text(l: &Lit) -> String {
    match l {
        Lit::Num(v) => format!("{v}"),
        Lit::Str(s) => format!("\"{s}\""),
        Lit::Bool(b) => format!("{b}"),
    }
}

/// Fully parenthesised surface syntax.
pub fn render(e: &Expr) -> String {
    match e {
        Expr::Cmp(path, op, lit) => format!("{path} {op} {}", lit_text(lit)),
        Expr::And(items) => items.iter().map(|i| format!("({})", render(i))).collect::<Vec<_>>().join(" AND "),
        Expr::Or(items) => items.iter().map(|i| format!("({})", render(i))).collect::<Vec<_>>().join(" OR "),
        Expr::Not(inner) => format!("NOT ({})", render(inner)),
    }
}

pub fn comparisons(e: &Expr) -> usize {
    match e {
        Expr::Cmp(..) => 1,
        Expr::And(items) | Expr::Or(items) => items.iter().map(comparisons).sum(),
        Expr::Not(inner) => comparisons(inner),
    }
}

/// Tree interpreter. A missing attribute or a type mismatch makes the
/// comparison false; ordering applies to numbers only, substring tests to
/// strings only.
pub fn interpret(e: &Expr, attrs: &BTreeMap<String, Lit>) -> bool {
    match e {
        Expr::Cmp(path, op, lit) => {
            let Some(v) = attrs.get(path) else { return false };
            match (v, lit) {
                (Lit::Num(a), Lit::Num(b)) => match *op {
                    "==" => a == b,
                    "!=" => a != b,
                    "<" => a < b,
                    "<=" => a <= b,
                    ">" => a > b,
                    ">=" => a >= b,
                    _ => false,
                },
                (Lit::Str(a), Lit::Str(b)) => match *op {
                    "==" => a == b,
                    "!=" => a != b,
                    "contains" => a.contains(b.as_str()),
                    "prefix" => a.starts_with(b.as_str()),
                    _ => false,
                },
                (Lit::Bool(a), Lit::Bool(b)) => match *op {
                    "==" => a == b,
                    "!=" => a != b,
                    _ => false,
                },
                _ => false,
            }
        }
        Expr::And(items) => {
            let mut all = true;
            for i in items {
                all &= interpret(i, attrs);
            }
            all
        }
        Expr::Or(items) => {
            let mut any = false;
            for i in items {
                any |= interpret(i, attrs);
            }
            any
        }
        Expr::Not(inner) => !interpret(inner, attrs),
    }
}

// ---------------------------------------------------------------- access

pub const ACTIONS: [&str; 5] = ["read", "write", "execute", "admin", "grant"];

/// Role ladder: reader {read}; writer {read, write}; admin everything;
/// executor {execute}.
pub fn role_allows(role: &str, action: &str) -> bool {
    match role {
        "reader" => action == "read",
        "writer" => action == "read" || action == "write",
        "admin" => true,
        "executor" => action == "execute",
        _ => false,
    }
}

#[derive(Clone, Debug)]
pub struct RefPolicy {
    pub principal: String,
    pub role: &'static str,
    /// `(kind, id)`; id `*` matches every id of the kind.
    pub resource: (&'static str, String),
    pub deny: bool,
}

/// Enumerates every (policy, scope) pair for the principal and its teams.
/// `scopes` lists the resource and its enclosing scopes.
pub fn check(policies: &[RefPolicy], principal: &str, teams: &[String], action: &str, scopes: &[(&'static str, String)]) -> bool {
    let mut allowed = false;
    let mut denied = false;
    for p in policies {
        for s in scopes {
            let is_subject = p.principal == principal || teams.contains(&p.principal);
            let hits = p.resource.0 == s.0 && (p.resource.1 == "*" || p.resource.1 == s.1);
            if is_subject && hits && role_allows(p.role, action) {
                if p.deny {
                    denied = true;
                } else {
                    allowed = true;
                }
            }
        }
    }
    allowed && !denied
}

// ------------------------------------------------------------- hydrology

/// SCS runoff for one day, straight from the textbook form
/// `Q = (P - Ia)^2 / (P - Ia + S)` with `Ia = 0.2 S`.
pub fn scs_runoff(p: f64, cn: f64) -> f64 {
    let s = 1000.0 / cn * 25.4 - 254.0;
    let ia = 0.2 * s;
    if p <= ia {
        0.0
    } else {
        (p - ia).powi(2) / (p - ia + s)
    }
}
