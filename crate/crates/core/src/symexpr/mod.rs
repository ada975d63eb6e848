//! Symbolic arithmetic over named, domain-annotated symbols.
//!
//! Cost and memory models are built once as [`Expr`] trees and then either
//! substituted one binding at a time or compiled into a [`Program`] and
//! evaluated column-wise over a [`BindingTable`] of candidate rows.

mod batch;
mod expr;
mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use batch::{eval_batch, BindingTable, Program};
pub use expr::{Binding, Bindings, Cond, Expr, Node, Op};

/// Errors raised while building, binding or evaluating expressions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("symbol `{0}` is already declared")]
    DuplicateSymbol(String),
    #[error("value {value} for `{name}` lies outside its domain {domain}")]
    DomainViolation {
        name: String,
        value: f64,
        domain: Domain,
    },
    #[error("denominator `{0}` is not provably positive")]
    NonPositiveDenominator(String),
    #[error("missing column for symbol `{0}`")]
    MissingColumn(String),
    #[error("column `{name}` has {got} rows, expected {expected}")]
    RaggedColumn {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("division by zero while evaluating (symbol domains are inconsistent)")]
    DivisionByZero,
    #[error("expression still has free symbols: {0:?}")]
    Unbound(Vec<String>),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// Value set a symbol ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    PositiveInteger,
    NonNegativeReal,
    UnitInterval,
}

impl Domain {
    pub fn contains(self, v: f64) -> bool {
        match self {
            Domain::PositiveInteger => v.is_finite() && v >= 1.0 && v.fract() == 0.0,
            Domain::NonNegativeReal => v.is_finite() && v >= 0.0,
            Domain::UnitInterval => (0.0..=1.0).contains(&v),
        }
    }

    /// Closed interval covering the domain.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Domain::PositiveInteger => (1.0, f64::INFINITY),
            Domain::NonNegativeReal => (0.0, f64::INFINITY),
            Domain::UnitInterval => (0.0, 1.0),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::PositiveInteger => "positive-integer",
            Domain::NonNegativeReal => "nonnegative-real",
            Domain::UnitInterval => "unit-interval-real",
        })
    }
}

/// A named free variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub name: String,
    pub domain: Domain,
    pub default: Option<f64>,
}

/// Declares symbols and hands out the expressions that reference them.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    symbols: BTreeMap<String, Arc<Symbol>>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, domain: Domain) -> Result<Expr, ExprError> {
        self.declare_with_default(name, domain, None)
    }

    pub fn declare_with_default(
        &mut self,
        name: &str,
        domain: Domain,
        default: Option<f64>,
    ) -> Result<Expr, ExprError> {
        if !is_identifier(name) {
            return Err(ExprError::Parse {
                pos: 0,
                msg: format!("`{name}` is not a valid symbol name"),
            });
        }
        if self.symbols.contains_key(name) {
            return Err(ExprError::DuplicateSymbol(name.to_string()));
        }
        if let Some(v) = default {
            if !domain.contains(v) {
                return Err(ExprError::DomainViolation {
                    name: name.to_string(),
                    value: v,
                    domain,
                });
            }
        }
        let sym = Arc::new(Symbol {
            name: name.to_string(),
            domain,
            default,
        });
        self.symbols.insert(name.to_string(), sym.clone());
        Ok(Expr::symbol(sym))
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Symbol>> {
        self.symbols.get(name)
    }

    /// Expression referencing an already declared symbol.
    pub fn expr(&self, name: &str) -> Result<Expr, ExprError> {
        self.get(name)
            .map(|s| Expr::symbol(s.clone()))
            .ok_or_else(|| ExprError::UnknownSymbol(name.to_string()))
    }

    pub fn symbols(&self) -> impl Iterator<Item = &Arc<Symbol>> {
        self.symbols.values()
    }

    /// Builds value bindings, validating names and domains.
    pub fn bind<'a, I>(&self, values: I) -> Result<Bindings, ExprError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut b = Bindings::default();
        for (name, v) in values {
            b.set_value(self, name, v)?;
        }
        Ok(b)
    }

    /// Bindings carrying each symbol's default value, where one exists.
    pub fn defaults(&self) -> Bindings {
        let mut b = Bindings::default();
        for s in self.symbols.values() {
            if let Some(v) = s.default {
                b.insert_unchecked(&s.name, Binding::Value(v));
            }
        }
        b
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
