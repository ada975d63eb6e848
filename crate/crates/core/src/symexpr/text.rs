//! Canonical prefix text form, e.g. `(add (mul b s) 1.0)`.

use std::fmt;

use super::expr::{Cond, Expr, Node, Op};
use super::{ExprError, SymbolTable};

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(v) => write!(f, "{v:?}"),
            Node::Sym(s) => f.write_str(&s.name),
            Node::Binary(op, a, b) => write!(f, "({} {a} {b})", op.name()),
            Node::Ind(c, a, b) => write!(f, "(ind {} {a} {b})", c.name()),
        }
    }
}

impl Expr {
    /// Parses the canonical form, resolving symbols through `table`.
    pub fn parse(text: &str, table: &SymbolTable) -> Result<Expr, ExprError> {
        let mut p = Parser { src: text, pos: 0 };
        let e = p.expr(table)?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn atom(&mut self) -> Result<&'a str, ExprError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let end = rest
            .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
            .unwrap_or(rest.len());
        if end == 0 {
            return Err(self.err("expected atom"));
        }
        self.pos += end;
        Ok(&rest[..end])
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self, table: &SymbolTable) -> Result<Expr, ExprError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with('(') {
            self.pos += 1;
            let head_pos = self.pos;
            let head = self.atom()?;
            let out = if head == "ind" {
                let cond = match self.atom()? {
                    "eq" => Cond::Eq,
                    "ge" => Cond::Ge,
                    _ => return Err(self.err("unknown indicator condition")),
                };
                let a = self.expr(table)?;
                let b = self.expr(table)?;
                match cond {
                    Cond::Eq => a.ind_eq(&b),
                    Cond::Ge => a.ind_ge(&b),
                }
            } else {
                let op = Op::from_name(head).ok_or(ExprError::Parse {
                    pos: head_pos,
                    msg: format!("unknown operator `{head}`"),
                })?;
                let a = self.expr(table)?;
                let b = self.expr(table)?;
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a.checked_div(&b)?,
                    Op::FloorDiv => a.floor_div(&b)?,
                    Op::CeilDiv => a.ceil_div(&b)?,
                    Op::Max => a.max(&b),
                    Op::Min => a.min(&b),
                }
            };
            self.expect(')')?;
            Ok(out)
        } else {
            let start = self.pos;
            let tok = self.atom()?;
            if super::is_identifier(tok) && !matches!(tok, "inf" | "NaN") {
                table.expr(tok)
            } else {
                tok.parse::<f64>()
                    .map(Expr::constant)
                    .map_err(|_| ExprError::Parse {
                        pos: start,
                        msg: format!("bad number `{tok}`"),
                    })
            }
        }
    }
}
