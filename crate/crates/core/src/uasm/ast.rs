use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::Pc;

/// Register index into [`Program::regs`]. Index 0 is always `pc`.
pub type Reg = usize;
pub const PC: Reg = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnOp {
    Neg,
    Not,
    LNot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Mul,
    Div,
    Rem,
    Add,
    Sub,
    Shl,
    Shr,
    And,
    Xor,
    Or,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub(crate) fn precedence(self) -> u8 {
        use BinOp::*;
        match self {
            Mul | Div | Rem => 7,
            Add | Sub => 6,
            Shl | Shr => 5,
            And => 4,
            Xor => 3,
            Or => 2,
            Eq | Ne | Lt | Le | Gt | Ge => 1,
        }
    }

    pub(crate) fn symbol(self) -> &'static str {
        use BinOp::*;
        match self {
            Mul => "*",
            Div => "/",
            Rem => "%",
            Add => "+",
            Sub => "-",
            Shl => "<<",
            Shr => ">>",
            And => "&",
            Xor => "^",
            Or => "|",
            Eq => "==",
            Ne => "!=",
            Lt => "<",
            Le => "<=",
            Gt => ">",
            Ge => ">=",
        }
    }

    /// 64-bit wrapping semantics. Division and remainder by zero yield 0.
    pub fn apply(self, a: u64, b: u64) -> u64 {
        use BinOp::*;
        match self {
            Mul => a.wrapping_mul(b),
            Div => a.checked_div(b).unwrap_or(0),
            Rem => a.checked_rem(b).unwrap_or(0),
            Add => a.wrapping_add(b),
            Sub => a.wrapping_sub(b),
            Shl => a.wrapping_shl(b as u32),
            Shr => a.wrapping_shr(b as u32),
            And => a & b,
            Xor => a ^ b,
            Or => a | b,
            Eq => (a == b) as u64,
            Ne => (a != b) as u64,
            Lt => (a < b) as u64,
            Le => (a <= b) as u64,
            Gt => (a > b) as u64,
            Ge => (a >= b) as u64,
        }
    }
}

impl UnOp {
    pub fn apply(self, a: u64) -> u64 {
        match self {
            UnOp::Neg => a.wrapping_neg(),
            UnOp::Not => !a,
            UnOp::LNot => (a == 0) as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Const(u64),
    Reg(Reg),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, reg: &mut impl FnMut(Reg) -> u64) -> u64 {
        match self {
            Expr::Const(n) => *n,
            Expr::Reg(r) => reg(*r),
            Expr::Unary(op, e) => op.apply(e.eval(reg)),
            Expr::Binary(op, a, b) => {
                let x = a.eval(reg);
                op.apply(x, b.eval(reg))
            }
        }
    }

    /// Registers read by the expression.
    pub fn regs(&self, out: &mut Vec<Reg>) {
        match self {
            Expr::Const(_) => {}
            Expr::Reg(r) => out.push(*r),
            Expr::Unary(_, e) => e.regs(out),
            Expr::Binary(_, a, b) => {
                a.regs(out);
                b.regs(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    /// `x <- e`; with `x = pc` this is an indirect jump.
    Assign {
        dst: Reg,
        expr: Expr,
    },
    /// `x <- mem[e]`
    Load {
        dst: Reg,
        addr: Expr,
    },
    /// `mem[e] <- x`
    Store {
        src: Reg,
        addr: Expr,
    },
    Beqz {
        cond: Reg,
        target: Pc,
    },
    /// Calls the function whose entry is `target`.
    Call {
        target: Pc,
    },
    Ret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Conditional,
    Call,
    Return,
    Indirect,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Conditional => "cond",
            BranchKind::Call => "call",
            BranchKind::Return => "ret",
            BranchKind::Indirect => "ind",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "cond" => BranchKind::Conditional,
            "call" => BranchKind::Call,
            "ret" => BranchKind::Return,
            "ind" => BranchKind::Indirect,
            _ => return None,
        })
    }
}

impl Instr {
    pub fn branch_kind(&self) -> Option<BranchKind> {
        match self {
            Instr::Beqz { .. } => Some(BranchKind::Conditional),
            Instr::Call { .. } => Some(BranchKind::Call),
            Instr::Ret => Some(BranchKind::Return),
            Instr::Assign { dst: PC, .. } => Some(BranchKind::Indirect),
            _ => None,
        }
    }

    pub fn is_branch(&self) -> bool {
        self.branch_kind().is_some()
    }

    /// Registers the instruction reads.
    pub fn sources(&self) -> Vec<Reg> {
        let mut out = Vec::new();
        match self {
            Instr::Assign { expr, .. } => expr.regs(&mut out),
            Instr::Load { addr, .. } => addr.regs(&mut out),
            Instr::Store { src, addr } => {
                out.push(*src);
                addr.regs(&mut out);
            }
            Instr::Beqz { cond, .. } => out.push(*cond),
            Instr::Call { .. } | Instr::Ret => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tagged {
    pub instr: Instr,
    pub crypto: bool,
    /// 1-based source line.
    pub line: usize,
}

/// A memory cell or register that holds confidential data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cell {
    Mem(u64),
    Reg(Reg),
}

/// A named public input: initial values for memory cells and registers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub mem: BTreeMap<u64, u64>,
    pub regs: BTreeMap<Reg, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub instrs: Vec<Tagged>,
    /// Register names; `regs[0] == "pc"`.
    pub regs: Vec<String>,
    /// The function table: every label with its entry pc.
    pub labels: BTreeMap<String, Pc>,
    pub secrets: Vec<Cell>,
    pub domain: Vec<u64>,
    pub inputs: Vec<InputSpec>,
}

impl Program {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// The pc at which execution halts.
    pub fn end(&self) -> Pc {
        self.instrs.len() as Pc
    }

    pub fn get(&self, pc: Pc) -> Option<&Tagged> {
        self.instrs.get(pc as usize)
    }

    pub fn reg(&self, name: &str) -> Option<Reg> {
        self.regs.iter().position(|r| r == name)
    }

    pub fn input(&self, name: &str) -> Option<&InputSpec> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Half-open pc span of the tagged instructions, `(0, 0)` when none are tagged.
    pub fn crypto_range(&self) -> (Pc, Pc) {
        let first = self.instrs.iter().position(|t| t.crypto);
        let last = self.instrs.iter().rposition(|t| t.crypto);
        match (first, last) {
            (Some(a), Some(b)) => (a as Pc, b as Pc + 1),
            _ => (0, 0),
        }
    }

    pub fn in_crypto_range(&self, pc: Pc) -> bool {
        let (lo, hi) = self.crypto_range();
        (lo..hi).contains(&pc)
    }

    /// Label whose entry is `pc`, for display.
    pub fn label_at(&self, pc: Pc) -> Option<&str> {
        self.labels.iter().find(|(_, &v)| v == pc).map(|(k, _)| k.as_str())
    }

    /// Normalized text: one instruction per line with numeric targets and no
    /// metadata. It parses back to the same instructions. Two programs with equal canonical text behave identically.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for t in &self.instrs {
            use std::fmt::Write;
            let _ = writeln!(s, "{}{}", self.show(&t.instr), if t.crypto { " @c" } else { "" });
        }
        s
    }

    /// Short program fingerprint stored in bundle headers.
    pub fn hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(self.canonical_text().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn show<'a>(&'a self, i: &'a Instr) -> ShowInstr<'a> {
        ShowInstr { p: self, i }
    }

    pub fn show_expr<'a>(&'a self, e: &'a Expr) -> ShowExpr<'a> {
        ShowExpr { p: self, e, parent: 0 }
    }
}

pub struct ShowExpr<'a> {
    p: &'a Program,
    e: &'a Expr,
    parent: u8,
}

impl fmt::Display for ShowExpr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.e {
            Expr::Const(n) => write!(f, "{n}"),
            Expr::Reg(r) => write!(f, "{}", self.p.regs[*r]),
            Expr::Unary(op, e) => {
                let s = match op {
                    UnOp::Neg => "-",
                    UnOp::Not => "~",
                    UnOp::LNot => "!",
                };
                write!(f, "{s}{}", ShowExpr { p: self.p, e, parent: 8 })
            }
            Expr::Binary(op, a, b) => {
                let prec = op.precedence();
                let wrap = prec <= self.parent;
                if wrap {
                    f.write_str("(")?;
                }
                write!(
                    f,
                    "{} {} {}",
                    ShowExpr { p: self.p, e: a, parent: prec - 1 },
                    op.symbol(),
                    ShowExpr { p: self.p, e: b, parent: prec }
                )?;
                if wrap {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

pub struct ShowInstr<'a> {
    p: &'a Program,
    i: &'a Instr,
}

impl fmt::Display for ShowInstr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |x: &Reg| &self.p.regs[*x];
        match self.i {
            Instr::Assign { dst, expr } => write!(f, "assign {}, {}", r(dst), self.p.show_expr(expr)),
            Instr::Load { dst, addr } => write!(f, "load {}, {}", r(dst), self.p.show_expr(addr)),
            Instr::Store { src, addr } => write!(f, "store {}, {}", r(src), self.p.show_expr(addr)),
            Instr::Beqz { cond, target } => write!(f, "beqz {}, {target}", r(cond)),
            Instr::Call { target } => write!(f, "call {target}"),
            Instr::Ret => f.write_str("ret"),
        }
    }
}
