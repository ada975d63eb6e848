use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops;
use std::sync::Arc;

use super::{ExprError, Symbol, SymbolTable};

/// Binary operators. `Max`/`Min` pick the first operand on ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    CeilDiv,
    Max,
    Min,
}

impl Op {
    #[inline(always)]
    pub(crate) fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => a / b,
            Op::FloorDiv => (a / b).floor(),
            Op::CeilDiv => (a / b).ceil(),
            Op::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
            Op::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    pub(crate) fn is_division(self) -> bool {
        matches!(self, Op::Div | Op::FloorDiv | Op::CeilDiv)
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::FloorDiv => "floordiv",
            Op::CeilDiv => "ceildiv",
            Op::Max => "max",
            Op::Min => "min",
        }
    }

    pub(crate) fn from_name(s: &str) -> Option<Op> {
        Some(match s {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "floordiv" => Op::FloorDiv,
            "ceildiv" => Op::CeilDiv,
            "max" => Op::Max,
            "min" => Op::Min,
            _ => return None,
        })
    }
}

/// Indicator condition: evaluates to 1 when it holds, 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ge,
}

impl Cond {
    #[inline(always)]
    pub(crate) fn eval(self, a: f64, b: f64) -> f64 {
        let hit = match self {
            Cond::Eq => a == b,
            Cond::Ge => a >= b,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ge => "ge",
        }
    }
}

#[derive(Debug)]
pub enum Node {
    Const(f64),
    Sym(Arc<Symbol>),
    Binary(Op, Expr, Expr),
    Ind(Cond, Expr, Expr),
}

/// Immutable, cheaply clonable expression DAG.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

/// Value bound to a symbol during substitution.
#[derive(Debug, Clone)]
pub enum Binding {
    Value(f64),
    Expr(Expr),
}

/// A validated set of symbol bindings.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Binding>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_value(
        &mut self,
        table: &SymbolTable,
        name: &str,
        value: f64,
    ) -> Result<&mut Self, ExprError> {
        let sym = table
            .get(name)
            .ok_or_else(|| ExprError::UnknownSymbol(name.to_string()))?;
        if !sym.domain.contains(value) {
            return Err(ExprError::DomainViolation {
                name: name.to_string(),
                value,
                domain: sym.domain,
            });
        }
        self.map.insert(name.to_string(), Binding::Value(value));
        Ok(self)
    }

    pub fn set_expr(
        &mut self,
        table: &SymbolTable,
        name: &str,
        expr: Expr,
    ) -> Result<&mut Self, ExprError> {
        if table.get(name).is_none() {
            return Err(ExprError::UnknownSymbol(name.to_string()));
        }
        self.map.insert(name.to_string(), Binding::Expr(expr));
        Ok(self)
    }

    pub(crate) fn insert_unchecked(&mut self, name: &str, b: Binding) {
        self.map.insert(name.to_string(), b);
    }

    pub fn get(&self, name: &str) -> Option<&Binding> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Union of two binding sets; entries of `other` win on conflict.
    pub fn merged(&self, other: &Bindings) -> Bindings {
        let mut map = self.map.clone();
        map.extend(other.map.iter().map(|(k, v)| (k.clone(), v.clone())));
        Bindings { map }
    }
}

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(v: f64) -> Self {
        Self::new(Node::Const(v))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub(crate) fn symbol(sym: Arc<Symbol>) -> Self {
        Self::new(Node::Sym(sym))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    fn binary(op: Op, a: Expr, b: Expr) -> Self {
        Self::new(Node::Binary(op, a, b))
    }

    fn checked_division(op: Op, a: &Expr, b: &Expr) -> Result<Self, ExprError> {
        if !b.is_provably_positive() {
            return Err(ExprError::NonPositiveDenominator(b.to_string()));
        }
        Ok(Self::binary(op, a.clone(), b.clone()))
    }

    pub fn checked_div(&self, rhs: &Expr) -> Result<Self, ExprError> {
        Self::checked_division(Op::Div, self, rhs)
    }

    pub fn floor_div(&self, rhs: &Expr) -> Result<Self, ExprError> {
        Self::checked_division(Op::FloorDiv, self, rhs)
    }

    pub fn ceil_div(&self, rhs: &Expr) -> Result<Self, ExprError> {
        Self::checked_division(Op::CeilDiv, self, rhs)
    }

    pub fn max(&self, rhs: &Expr) -> Self {
        Self::binary(Op::Max, self.clone(), rhs.clone())
    }

    pub fn min(&self, rhs: &Expr) -> Self {
        Self::binary(Op::Min, self.clone(), rhs.clone())
    }

    pub fn ind_eq(&self, rhs: &Expr) -> Self {
        Self::new(Node::Ind(Cond::Eq, self.clone(), rhs.clone()))
    }

    pub fn ind_ge(&self, rhs: &Expr) -> Self {
        Self::new(Node::Ind(Cond::Ge, self.clone(), rhs.clone()))
    }

    /// Left-folded sum; empty input gives 0.
    pub fn sum<I: IntoIterator<Item = Expr>>(items: I) -> Self {
        items
            .into_iter()
            .reduce(|a, b| a + b)
            .unwrap_or_else(Expr::zero)
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn ptr_eq(&self, other: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Names of the free symbols.
    pub fn free_symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = BTreeSet::new();
        self.collect_symbols(&mut out, &mut seen);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<String>, seen: &mut BTreeSet<usize>) {
        if !seen.insert(self.key()) {
            return;
        }
        match &*self.0 {
            Node::Const(_) => {}
            Node::Sym(s) => {
                out.insert(s.name.clone());
            }
            Node::Binary(_, a, b) | Node::Ind(_, a, b) => {
                a.collect_symbols(out, seen);
                b.collect_symbols(out, seen);
            }
        }
    }

    /// Tree size, counting shared subexpressions once per occurrence.
    pub fn node_count(&self) -> usize {
        match &*self.0 {
            Node::Const(_) | Node::Sym(_) => 1,
            Node::Binary(_, a, b) | Node::Ind(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Interval enclosing every value over the symbols' domains.
    pub fn range(&self) -> (f64, f64) {
        match &*self.0 {
            Node::Const(v) => (*v, *v),
            Node::Sym(s) => s.domain.bounds(),
            Node::Ind(..) => (0.0, 1.0),
            Node::Binary(op, a, b) => {
                let (al, ah) = a.range();
                let (bl, bh) = b.range();
                match op {
                    Op::Add => (al + bl, ah + bh),
                    Op::Sub => (al - bh, ah - bl),
                    Op::Mul => span(&[
                        bound_mul(al, bl),
                        bound_mul(al, bh),
                        bound_mul(ah, bl),
                        bound_mul(ah, bh),
                    ]),
                    Op::Div | Op::FloorDiv | Op::CeilDiv => {
                        if bl <= 0.0 {
                            return (f64::NEG_INFINITY, f64::INFINITY);
                        }
                        let (lo, hi) = span(&[
                            bound_div(al, bl),
                            bound_div(al, bh),
                            bound_div(ah, bl),
                            bound_div(ah, bh),
                        ]);
                        match op {
                            Op::FloorDiv => (lo.floor(), hi.floor()),
                            Op::CeilDiv => (lo.ceil(), hi.ceil()),
                            _ => (lo, hi),
                        }
                    }
                    Op::Max => (al.max(bl), ah.max(bh)),
                    Op::Min => (al.min(bl), ah.min(bh)),
                }
            }
        }
    }

    pub fn is_provably_positive(&self) -> bool {
        self.range().0 > 0.0
    }

    /// Evaluates under a full binding of values.
    pub fn eval(&self, bindings: &Bindings) -> Result<f64, ExprError> {
        match &*self.0 {
            Node::Const(v) => Ok(*v),
            Node::Sym(s) => match bindings.get(&s.name) {
                Some(Binding::Value(v)) => Ok(*v),
                Some(Binding::Expr(e)) => e.eval(bindings),
                None => Err(ExprError::Unbound(vec![s.name.clone()])),
            },
            Node::Binary(op, a, b) => {
                let x = a.eval(bindings)?;
                let y = b.eval(bindings)?;
                if op.is_division() && y == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                Ok(op.eval(x, y))
            }
            Node::Ind(c, a, b) => Ok(c.eval(a.eval(bindings)?, b.eval(bindings)?)),
        }
    }

    /// Replaces bound symbols and folds every fully constant node.
    pub fn substitute(&self, bindings: &Bindings) -> Result<Expr, ExprError> {
        let mut memo = HashMap::new();
        self.subst_rec(bindings, &mut memo)
    }

    fn subst_rec(
        &self,
        bindings: &Bindings,
        memo: &mut HashMap<usize, Expr>,
    ) -> Result<Expr, ExprError> {
        if let Some(e) = memo.get(&self.key()) {
            return Ok(e.clone());
        }
        let out = match &*self.0 {
            Node::Const(_) => self.clone(),
            Node::Sym(s) => match bindings.get(&s.name) {
                Some(Binding::Value(v)) => Expr::constant(*v),
                Some(Binding::Expr(e)) => e.clone(),
                None => self.clone(),
            },
            Node::Binary(op, a, b) => {
                let na = a.subst_rec(bindings, memo)?;
                let nb = b.subst_rec(bindings, memo)?;
                match (na.as_const(), nb.as_const()) {
                    (Some(x), Some(y)) => {
                        if op.is_division() && y == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        Expr::constant(op.eval(x, y))
                    }
                    _ if na.ptr_eq(a) && nb.ptr_eq(b) => self.clone(),
                    _ => Expr::binary(*op, na, nb),
                }
            }
            Node::Ind(c, a, b) => {
                let na = a.subst_rec(bindings, memo)?;
                let nb = b.subst_rec(bindings, memo)?;
                match (na.as_const(), nb.as_const()) {
                    (Some(x), Some(y)) => Expr::constant(c.eval(x, y)),
                    _ if na.ptr_eq(a) && nb.ptr_eq(b) => self.clone(),
                    _ => Expr::new(Node::Ind(*c, na, nb)),
                }
            }
        };
        memo.insert(self.key(), out.clone());
        Ok(out)
    }

    /// Substitutes and requires a numeric result.
    pub fn substitute_value(&self, bindings: &Bindings) -> Result<f64, ExprError> {
        let e = self.substitute(bindings)?;
        e.as_const()
            .ok_or_else(|| ExprError::Unbound(e.free_symbols().into_iter().collect()))
    }

    /// Local rewrites that never grow the tree: constant folding and
    /// neutral-element / idempotence rules.
    pub fn simplify(&self) -> Expr {
        let mut memo = HashMap::new();
        self.simplify_rec(&mut memo)
    }

    fn simplify_rec(&self, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(e) = memo.get(&self.key()) {
            return e.clone();
        }
        let out = match &*self.0 {
            Node::Const(_) | Node::Sym(_) => self.clone(),
            Node::Binary(op, a, b) => {
                let sa = a.simplify_rec(memo);
                let sb = b.simplify_rec(memo);
                simplify_binary(*op, sa, sb)
            }
            Node::Ind(c, a, b) => {
                let sa = a.simplify_rec(memo);
                let sb = b.simplify_rec(memo);
                match (sa.as_const(), sb.as_const()) {
                    (Some(x), Some(y)) => Expr::constant(c.eval(x, y)),
                    _ if sa == sb => Expr::one(),
                    _ => Expr::new(Node::Ind(*c, sa, sb)),
                }
            }
        };
        memo.insert(self.key(), out.clone());
        out
    }
}

fn simplify_binary(op: Op, a: Expr, b: Expr) -> Expr {
    if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
        if !(op.is_division() && y == 0.0) {
            return Expr::constant(op.eval(x, y));
        }
    }
    let is = |e: &Expr, v: f64| e.as_const() == Some(v);
    match op {
        Op::Add if is(&b, 0.0) => a,
        Op::Add if is(&a, 0.0) => b,
        Op::Sub if is(&b, 0.0) => a,
        Op::Sub if a == b => Expr::zero(),
        Op::Mul if is(&b, 1.0) => a,
        Op::Mul if is(&a, 1.0) => b,
        Op::Mul if is(&a, 0.0) || is(&b, 0.0) => Expr::zero(),
        Op::Div if is(&b, 1.0) => a,
        Op::Max | Op::Min if a == b => a,
        _ => Expr::binary(op, a, b),
    }
}

fn bound_mul(x: f64, y: f64) -> f64 {
    if x == 0.0 || y == 0.0 {
        0.0
    } else {
        x * y
    }
}

fn bound_div(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y.is_infinite() {
        if x.is_infinite() {
            x.signum() * f64::INFINITY
        } else {
            0.0
        }
    } else {
        x / y
    }
}

fn span(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        if self.ptr_eq(other) {
            return true;
        }
        match (&*self.0, &*other.0) {
            (Node::Const(a), Node::Const(b)) => a.to_bits() == b.to_bits(),
            (Node::Sym(a), Node::Sym(b)) => a.name == b.name,
            (Node::Binary(o1, a1, b1), Node::Binary(o2, a2, b2)) => {
                o1 == o2 && a1 == a2 && b1 == b2
            }
            (Node::Ind(c1, a1, b1), Node::Ind(c2, a2, b2)) => c1 == c2 && a1 == a2 && b1 == b2,
            _ => false,
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Self {
        Expr::constant(v)
    }
}

macro_rules! arith {
    ($tr:ident, $method:ident, $op:expr) => {
        impl ops::$tr<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self, rhs)
            }
        }
        impl ops::$tr<&Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self, rhs.clone())
            }
        }
        impl ops::$tr<Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs)
            }
        }
        impl ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs.clone())
            }
        }
        impl ops::$tr<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::binary($op, self, Expr::constant(rhs))
            }
        }
        impl ops::$tr<f64> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::binary($op, self.clone(), Expr::constant(rhs))
            }
        }
        impl ops::$tr<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, Expr::constant(self), rhs)
            }
        }
        impl ops::$tr<&Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, Expr::constant(self), rhs.clone())
            }
        }
    };
}

arith!(Add, add, Op::Add);
arith!(Sub, sub, Op::Sub);
arith!(Mul, mul, Op::Mul);

/// Division panics unless the denominator is provably positive; use
/// [`Expr::checked_div`] for a fallible version.
impl ops::Div<&Expr> for &Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        self.checked_div(rhs)
            .expect("division by a non-positive expression")
    }
}

impl ops::Div<Expr> for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        &self / &rhs
    }
}

impl ops::Div<&Expr> for Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        &self / rhs
    }
}

impl ops::Div<Expr> for &Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        self / &rhs
    }
}

impl ops::Div<f64> for Expr {
    type Output = Expr;
    fn div(self, rhs: f64) -> Expr {
        &self / &Expr::constant(rhs)
    }
}

impl ops::Div<&Expr> for f64 {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        &Expr::constant(self) / rhs
    }
}

impl ops::Div<Expr> for f64 {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        &Expr::constant(self) / &rhs
    }
}

impl ops::Div<f64> for &Expr {
    type Output = Expr;
    fn div(self, rhs: f64) -> Expr {
        self / &Expr::constant(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Domain;
    use super::*;

    fn table() -> (SymbolTable, Expr, Expr, Expr) {
        let mut t = SymbolTable::new();
        let b = t.declare("b", Domain::PositiveInteger).unwrap();
        let s = t.declare("s", Domain::PositiveInteger).unwrap();
        let x = t.declare("x", Domain::NonNegativeReal).unwrap();
        (t, b, s, x)
    }

    #[test]
    fn substitute_product() {
        let (t, b, s, _) = table();
        let e = &b * &s;
        let r = e
            .substitute(&t.bind([("b", 4.0), ("s", 128.0)]).unwrap())
            .unwrap();
        assert_eq!(r.as_const(), Some(512.0));
    }

    #[test]
    fn identity_binding_keeps_structure() {
        let (t, _, _, x) = table();
        let e = x.max(&Expr::zero());
        let mut bind = Bindings::new();
        bind.set_expr(&t, "x", x.clone()).unwrap();
        let r = e.substitute(&bind).unwrap();
        assert_eq!(r, e);
        assert_eq!(r.to_string(), "(max x 0.0)");
    }

    #[test]
    fn ceil_sharding() {
        let mut t = SymbolTable::new();
        let p = t.declare("P", Domain::PositiveInteger).unwrap();
        let dp = t.declare("DP", Domain::PositiveInteger).unwrap();
        let e = p.ceil_div(&dp).unwrap();
        let v = e
            .substitute_value(&t.bind([("P", 100.0), ("DP", 8.0)]).unwrap())
            .unwrap();
        assert_eq!(v, 13.0);
        assert_eq!(
            p.floor_div(&dp)
                .unwrap()
                .substitute_value(&t.bind([("P", 100.0), ("DP", 8.0)]).unwrap())
                .unwrap(),
            12.0
        );
    }

    #[test]
    fn binding_errors() {
        let (t, ..) = table();
        assert!(matches!(
            t.bind([("nope", 1.0)]),
            Err(ExprError::UnknownSymbol(_))
        ));
        assert!(matches!(
            t.bind([("b", 0.5)]),
            Err(ExprError::DomainViolation { .. })
        ));
        assert!(matches!(
            t.bind([("x", -1.0)]),
            Err(ExprError::DomainViolation { .. })
        ));
    }

    #[test]
    fn denominators_must_be_positive() {
        let (_, b, _, x) = table();
        assert!(b.checked_div(&x).is_err());
        assert!(x.checked_div(&b).is_ok());
        assert!(x.checked_div(&(&b - 1.0)).is_err());
        assert!(x.checked_div(&(&x + 1.0)).is_ok());
    }

    #[test]
    fn simplify_rules() {
        let (_, _, _, x) = table();
        assert_eq!((&x + 0.0).simplify(), x);
        assert_eq!(x.min(&x).simplify(), x);
        assert_eq!((1.0 * &x).simplify(), x);
        assert_eq!((&x - &x).simplify().as_const(), Some(0.0));
        let folded = (Expr::constant(2.0) * 3.0 + &x).simplify();
        assert_eq!(folded.to_string(), "(add 6.0 x)");
    }

    #[test]
    fn partial_substitution_leaves_rest() {
        let (t, b, s, _) = table();
        let e = &b * &s + 1.0;
        let r = e.substitute(&t.bind([("b", 2.0)]).unwrap()).unwrap();
        assert_eq!(r.free_symbols().into_iter().collect::<Vec<_>>(), vec!["s"]);
        assert!(matches!(
            r.substitute_value(&Bindings::new()),
            Err(ExprError::Unbound(_))
        ));
    }

    #[test]
    fn indicator_nodes() {
        let (t, b, ..) = table();
        let ge = b.ind_ge(&Expr::constant(2.0));
        let eq = b.ind_eq(&Expr::constant(2.0));
        let at = |v: f64, e: &Expr| e.eval(&t.bind([("b", v)]).unwrap()).unwrap();
        assert_eq!(at(1.0, &ge), 0.0);
        assert_eq!(at(2.0, &ge), 1.0);
        assert_eq!(at(3.0, &ge), 1.0);
        assert_eq!(at(3.0, &eq), 0.0);
        assert_eq!(at(2.0, &eq), 1.0);
    }
}
