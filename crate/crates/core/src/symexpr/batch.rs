//! Column-wise evaluation of expressions over many bindings at once.

use std::collections::HashMap;

use super::expr::{Binding, Bindings, Cond, Expr, Node, Op};
use super::{ExprError, SymbolTable};

const CHUNK: usize = 256;

/// One column per symbol, one row per candidate binding.
#[derive(Debug, Clone, Default)]
pub struct BindingTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    rows: usize,
}

impl BindingTable {
    /// Validates that every column names a declared symbol, has a uniform
    /// length, and only holds values inside the symbol's domain.
    pub fn new<I>(table: &SymbolTable, columns: I) -> Result<Self, ExprError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut out = BindingTable::default();
        for (name, col) in columns {
            let sym = table
                .get(&name)
                .ok_or_else(|| ExprError::UnknownSymbol(name.clone()))?;
            if let Some(&bad) = col.iter().find(|&&v| !sym.domain.contains(v)) {
                return Err(ExprError::DomainViolation {
                    name,
                    value: bad,
                    domain: sym.domain,
                });
            }
            if out.names.is_empty() {
                out.rows = col.len();
            } else if col.len() != out.rows {
                return Err(ExprError::RaggedColumn {
                    name,
                    got: col.len(),
                    expected: out.rows,
                });
            }
            if out.names.contains(&name) {
                return Err(ExprError::DuplicateSymbol(name));
            }
            out.names.push(name);
            out.columns.push(col);
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Row `i` as ordinary bindings.
    pub fn row(&self, i: usize) -> Bindings {
        let mut b = Bindings::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            b.insert_unchecked(name, Binding::Value(col[i]));
        }
        b
    }
}

#[derive(Debug, Clone, Copy)]
enum Operand {
    Slot(usize),
    Const(f64),
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Bin(Op, Operand, Operand, usize),
    Ind(Cond, Operand, Operand, usize),
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Sym(String),
    Bin(Op, OperandKey, OperandKey),
    Ind(Cond, OperandKey, OperandKey),
}

#[derive(Hash, PartialEq, Eq)]
enum OperandKey {
    Slot(usize),
    Const(u64),
}

impl From<Operand> for OperandKey {
    fn from(o: Operand) -> Self {
        match o {
            Operand::Slot(s) => OperandKey::Slot(s),
            Operand::Const(v) => OperandKey::Const(v.to_bits()),
        }
    }
}

/// A flattened, common-subexpression-shared form of one or more
/// expressions, evaluated column-wise.
///
/// Every row is computed with the same scalar operations as
/// [`Expr::eval`], so results are bitwise identical to pointwise
/// evaluation.
#[derive(Debug, Clone)]
pub struct Program {
    inputs: Vec<String>,
    input_slots: Vec<usize>,
    instrs: Vec<Instr>,
    outputs: Vec<Operand>,
    slots: usize,
}

struct Compiler {
    inputs: Vec<String>,
    input_slots: Vec<usize>,
    instrs: Vec<Instr>,
    slots: usize,
    by_ptr: HashMap<usize, Operand>,
    by_key: HashMap<Key, usize>,
}

impl Compiler {
    fn operand(&mut self, e: &Expr) -> Operand {
        let key = node_ptr(e);
        if let Some(&o) = self.by_ptr.get(&key) {
            return o;
        }
        let out = match e.node() {
            Node::Const(v) => Operand::Const(*v),
            Node::Sym(s) => {
                let k = Key::Sym(s.name.clone());
                match self.by_key.get(&k) {
                    Some(&slot) => Operand::Slot(slot),
                    None => {
                        let slot = self.slots;
                        self.slots += 1;
                        self.inputs.push(s.name.clone());
                        self.input_slots.push(slot);
                        self.by_key.insert(k, slot);
                        Operand::Slot(slot)
                    }
                }
            }
            Node::Binary(op, a, b) => {
                let (x, y) = (self.operand(a), self.operand(b));
                match (x, y) {
                    (Operand::Const(p), Operand::Const(q)) if !(op.is_division() && q == 0.0) => {
                        Operand::Const(op.eval(p, q))
                    }
                    _ => self.emit(Key::Bin(*op, x.into(), y.into()), |s| {
                        Instr::Bin(*op, x, y, s)
                    }),
                }
            }
            Node::Ind(c, a, b) => {
                let (x, y) = (self.operand(a), self.operand(b));
                match (x, y) {
                    (Operand::Const(p), Operand::Const(q)) => Operand::Const(c.eval(p, q)),
                    _ => self.emit(Key::Ind(*c, x.into(), y.into()), |s| {
                        Instr::Ind(*c, x, y, s)
                    }),
                }
            }
        };
        self.by_ptr.insert(key, out);
        out
    }

    fn emit(&mut self, key: Key, make: impl FnOnce(usize) -> Instr) -> Operand {
        if let Some(&slot) = self.by_key.get(&key) {
            return Operand::Slot(slot);
        }
        let slot = self.slots;
        self.slots += 1;
        self.instrs.push(make(slot));
        self.by_key.insert(key, slot);
        Operand::Slot(slot)
    }
}

fn node_ptr(e: &Expr) -> usize {
    e.node() as *const Node as usize
}

enum Src<'a> {
    Col(&'a [f64]),
    Val(f64),
}

#[inline(always)]
fn kernel(out: &mut [f64], a: &Src, b: &Src, f: impl Fn(f64, f64) -> f64) {
    match (a, b) {
        (Src::Col(x), Src::Col(y)) => {
            for ((o, &p), &q) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
                *o = f(p, q);
            }
        }
        (Src::Col(x), Src::Val(q)) => {
            for (o, &p) in out.iter_mut().zip(x.iter()) {
                *o = f(p, *q);
            }
        }
        (Src::Val(p), Src::Col(y)) => {
            for (o, &q) in out.iter_mut().zip(y.iter()) {
                *o = f(*p, q);
            }
        }
        (Src::Val(p), Src::Val(q)) => {
            let v = f(*p, *q);
            out.iter_mut().for_each(|o| *o = v);
        }
    }
}

impl Program {
    pub fn compile(exprs: &[Expr]) -> Program {
        let mut c = Compiler {
            inputs: Vec::new(),
            input_slots: Vec::new(),
            instrs: Vec::new(),
            slots: 0,
            by_ptr: HashMap::new(),
            by_key: HashMap::new(),
        };
        let outputs = exprs.iter().map(|e| c.operand(e)).collect();
        Program {
            inputs: c.inputs,
            input_slots: c.input_slots,
            instrs: c.instrs,
            outputs,
            slots: c.slots,
        }
    }

    /// Symbols the program reads.
    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn instruction_count(&self) -> usize {
        self.instrs.len()
    }

    /// Evaluates every output over every row; `result[k][i]` is output `k`
    /// at row `i`.
    pub fn run(&self, table: &BindingTable) -> Result<Vec<Vec<f64>>, ExprError> {
        let cols: Vec<&[f64]> = self
            .inputs
            .iter()
            .map(|n| {
                table
                    .column(n)
                    .ok_or_else(|| ExprError::MissingColumn(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        let rows = table.rows();
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); self.outputs.len()];
        let mut slots: Vec<Vec<f64>> = vec![Vec::new(); self.slots];
        let mut start = 0;
        while start < rows {
            let end = (start + CHUNK).min(rows);
            let n = end - start;
            for (&k, col) in self.input_slots.iter().zip(&cols) {
                slots[k].clear();
                slots[k].extend_from_slice(&col[start..end]);
            }
            for ins in &self.instrs {
                let (a, b, dst) = match *ins {
                    Instr::Bin(_, a, b, d) | Instr::Ind(_, a, b, d) => (a, b, d),
                };
                let mut buf = std::mem::take(&mut slots[dst]);
                buf.resize(n, 0.0);
                {
                    let src = |o: Operand| match o {
                        Operand::Slot(s) => Src::Col(&slots[s][..n]),
                        Operand::Const(v) => Src::Val(v),
                    };
                    let (sa, sb) = (src(a), src(b));
                    match *ins {
                        Instr::Bin(op, ..) => {
                            if op.is_division() {
                                let zero = match &sb {
                                    Src::Col(y) => y.contains(&0.0),
                                    Src::Val(v) => *v == 0.0,
                                };
                                if zero {
                                    return Err(ExprError::DivisionByZero);
                                }
                            }
                            match op {
                                Op::Add => kernel(&mut buf, &sa, &sb, |x, y| Op::Add.eval(x, y)),
                                Op::Sub => kernel(&mut buf, &sa, &sb, |x, y| Op::Sub.eval(x, y)),
                                Op::Mul => kernel(&mut buf, &sa, &sb, |x, y| Op::Mul.eval(x, y)),
                                Op::Div => kernel(&mut buf, &sa, &sb, |x, y| Op::Div.eval(x, y)),
                                Op::FloorDiv => {
                                    kernel(&mut buf, &sa, &sb, |x, y| Op::FloorDiv.eval(x, y))
                                }
                                Op::CeilDiv => {
                                    kernel(&mut buf, &sa, &sb, |x, y| Op::CeilDiv.eval(x, y))
                                }
                                Op::Max => kernel(&mut buf, &sa, &sb, |x, y| Op::Max.eval(x, y)),
                                Op::Min => kernel(&mut buf, &sa, &sb, |x, y| Op::Min.eval(x, y)),
                            }
                        }
                        Instr::Ind(Cond::Eq, ..) => {
                            kernel(&mut buf, &sa, &sb, |x, y| Cond::Eq.eval(x, y))
                        }
                        Instr::Ind(Cond::Ge, ..) => {
                            kernel(&mut buf, &sa, &sb, |x, y| Cond::Ge.eval(x, y))
                        }
                    }
                }
                slots[dst] = buf;
            }
            for (k, o) in self.outputs.iter().enumerate() {
                match *o {
                    Operand::Slot(s) => out[k].extend_from_slice(&slots[s][..n]),
                    Operand::Const(v) => out[k].extend(std::iter::repeat_n(v, n)),
                }
            }
            start = end;
        }
        Ok(out)
    }
}

/// Evaluates `e` at every row of `table`.
pub fn eval_batch(e: &Expr, table: &BindingTable) -> Result<Vec<f64>, ExprError> {
    let mut out = Program::compile(std::slice::from_ref(e)).run(table)?;
    Ok(out.pop().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::super::Domain;
    use super::*;

    #[test]
    fn small_batches() {
        let mut t = SymbolTable::new();
        let b = t.declare("b", Domain::PositiveInteger).unwrap();
        let s = t.declare("s", Domain::PositiveInteger).unwrap();
        let tab = BindingTable::new(
            &t,
            [("b".into(), vec![1.0, 2.0]), ("s".into(), vec![1.0, 3.0])],
        )
        .unwrap();
        assert_eq!(eval_batch(&(&b * &s), &tab).unwrap(), vec![1.0, 6.0]);

        let mut t2 = SymbolTable::new();
        let t1 = t2.declare("t1", Domain::NonNegativeReal).unwrap();
        let tt = t2.declare("t2", Domain::NonNegativeReal).unwrap();
        let tab2 =
            BindingTable::new(&t2, [("t1".into(), vec![10.0]), ("t2".into(), vec![12.0])]).unwrap();
        assert_eq!(eval_batch(&t1.max(&tt), &tab2).unwrap(), vec![12.0]);
    }

    #[test]
    fn missing_and_bad_columns() {
        let mut t = SymbolTable::new();
        let b = t.declare("b", Domain::PositiveInteger).unwrap();
        let _s = t.declare("s", Domain::PositiveInteger).unwrap();
        let tab = BindingTable::new(&t, [("b".into(), vec![1.0])]).unwrap();
        let s = t.expr("s").unwrap();
        assert!(matches!(
            eval_batch(&(&b * &s), &tab),
            Err(ExprError::MissingColumn(_))
        ));
        assert!(BindingTable::new(&t, [("b".into(), vec![0.0])]).is_err());
        assert!(
            BindingTable::new(&t, [("b".into(), vec![1.0]), ("s".into(), vec![1.0, 2.0])]).is_err()
        );
    }

    #[test]
    fn shared_subexpressions_compile_once() {
        let mut t = SymbolTable::new();
        let b = t.declare("b", Domain::PositiveInteger).unwrap();
        let x = &b * 3.0;
        let y = &b * 3.0;
        let p = Program::compile(&[&x + &y, x.max(&y)]);
        // one multiply, one add, one max
        assert_eq!(p.instruction_count(), 3);
    }

    #[test]
    fn long_batches_cross_chunks() {
        let mut t = SymbolTable::new();
        let b = t.declare("b", Domain::PositiveInteger).unwrap();
        let e = (&b * &b).ceil_div(&Expr::constant(3.0)).unwrap();
        let col: Vec<f64> = (1..=3000).map(f64::from).collect();
        let tab = BindingTable::new(&t, [("b".into(), col.clone())]).unwrap();
        let got = eval_batch(&e, &tab).unwrap();
        for (v, g) in col.iter().zip(&got) {
            assert_eq!(*g, (v * v / 3.0).ceil());
        }
    }
}
