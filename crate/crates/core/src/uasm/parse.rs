//! Line-oriented μAsm text format.
//!
//! ```text
//! ; comment (also `#` and `//`)
//! .name decrypt
//! .secret mem 16 20        ; half-open address range
//! .secret reg k
//! .domain 0 1 2 3          ; values enumerated for each secret cell
//! .input short mem[0]=4 n=2
//! loop:                    ; label, also the function table entry
//!     load x, base + i @c  ; `@c` tags the instruction as crypto
//!     store x, 100
//!     assign i, i + 1
//!     beqz done, loop @c
//!     call f
//!     ret
//!     jmp &loop            ; sugar for `assign pc, &loop`
//! ```
//!
//! Expressions use C operators with C precedence over 64-bit wrapping
//! integers; `&label` is the label's pc. Branch and call targets are labels
//! or plain instruction indices.

use std::collections::BTreeMap;

use super::ast::*;
use super::UasmError;
use crate::trace::Pc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

struct Ctx<'a> {
    line: usize,
    text: &'a str,
    regs: &'a mut Vec<String>,
    labels: &'a BTreeMap<String, Pc>,
}

impl Ctx<'_> {
    fn err(&self, at: &str, msg: impl Into<String>) -> ParseError {
        // `at` is always a subslice of `text`.
        let col = at.as_ptr() as usize - self.text.as_ptr() as usize + 1;
        ParseError { line: self.line, col, msg: msg.into() }
    }

    fn reg(&mut self, name: &str) -> Result<Reg, ParseError> {
        if !is_ident(name) {
            return Err(self.err(name, format!("expected register, found `{name}`")));
        }
        Ok(intern(self.regs, name))
    }

    fn target(&self, s: &str) -> Result<Pc, ParseError> {
        if let Some(v) = parse_num(s) {
            return Ok(v);
        }
        self.labels.get(s).copied().ok_or_else(|| self.err(s, format!("unknown label `{s}`")))
    }
}

fn intern(regs: &mut Vec<String>, name: &str) -> Reg {
    match regs.iter().position(|r| r == name) {
        Some(i) => i,
        None => {
            regs.push(name.to_string());
            regs.len() - 1
        }
    }
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.')
}

fn parse_num(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()
    } else if s.starts_with(|c: char| c.is_ascii_digit()) {
        s.replace('_', "").parse().ok()
    } else {
        None
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = [line.find(';'), line.find('#'), line.find("//")].into_iter().flatten().min();
    match cut {
        Some(i) => &line[..i],
        None => line,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Num(u64),
    Ident(&'a str),
    Label(&'a str),
    Op(&'a str),
    LParen,
    RParen,
}

fn tokenize<'a>(cx: &Ctx, s: &'a str) -> Result<Vec<(Tok<'a>, &'a str)>, ParseError> {
    let mut out = Vec::new();
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let word_end = |mut j: usize| {
            while j < b.len() && ((b[j] as char).is_ascii_alphanumeric() || b[j] == b'_' || b[j] == b'.') {
                j += 1;
            }
            j
        };
        if c.is_ascii_digit() {
            i = word_end(i);
            let w = &s[start..i];
            let v = parse_num(w).ok_or_else(|| cx.err(w, format!("bad number `{w}`")))?;
            out.push((Tok::Num(v), w));
        } else if c.is_ascii_alphabetic() || c == '_' {
            i = word_end(i);
            out.push((Tok::Ident(&s[start..i]), &s[start..i]));
        } else if c == '&' && i + 1 < b.len() && ((b[i + 1] as char).is_ascii_alphabetic() || b[i + 1] == b'_') {
            i = word_end(i + 1);
            out.push((Tok::Label(&s[start + 1..i]), &s[start..i]));
        } else if c == '(' {
            i += 1;
            out.push((Tok::LParen, &s[start..i]));
        } else if c == ')' {
            i += 1;
            out.push((Tok::RParen, &s[start..i]));
        } else {
            let two = s.get(i..i + 2).unwrap_or("");
            let op = if ["<<", ">>", "==", "!=", "<=", ">="].contains(&two) {
                two
            } else if "+-*/%&|^<>~!".contains(c) {
                &s[i..i + 1]
            } else {
                return Err(cx.err(&s[i..], format!("unexpected character `{c}`")));
            };
            i += op.len();
            out.push((Tok::Op(op), op));
        }
    }
    Ok(out)
}

fn binop(op: &str) -> Option<BinOp> {
    use BinOp::*;
    Some(match op {
        "*" => Mul,
        "/" => Div,
        "%" => Rem,
        "+" => Add,
        "-" => Sub,
        "<<" => Shl,
        ">>" => Shr,
        "&" => And,
        "^" => Xor,
        "|" => Or,
        "==" => Eq,
        "!=" => Ne,
        "<" => Lt,
        "<=" => Le,
        ">" => Gt,
        ">=" => Ge,
        _ => return None,
    })
}

struct ExprParser<'a, 'c, 'd> {
    toks: Vec<(Tok<'a>, &'a str)>,
    pos: usize,
    cx: &'c mut Ctx<'d>,
    whole: &'a str,
}

impl<'a> ExprParser<'a, '_, '_> {
    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn here(&self) -> &'a str {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(&self.whole[self.whole.len()..])
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.here();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(self.cx.err(at, "expected expression"));
        };
        self.pos += 1;
        match tok {
            Tok::Num(n) => Ok(Expr::Const(n)),
            Tok::Ident(name) => Ok(Expr::Reg(self.cx.reg(name)?)),
            Tok::Label(l) => Ok(Expr::Const(self.cx.target(l)?)),
            Tok::LParen => {
                let e = self.expr(0)?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.cx.err(self.here(), "expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Tok::Op(o) => {
                let op = match o {
                    "-" => UnOp::Neg,
                    "~" => UnOp::Not,
                    "!" => UnOp::LNot,
                    _ => return Err(self.cx.err(at, format!("unexpected `{o}`"))),
                };
                Ok(Expr::Unary(op, Box::new(self.primary()?)))
            }
            Tok::RParen => Err(self.cx.err(at, "unexpected `)`")),
        }
    }

    fn expr(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.primary()?;
        while let Some(Tok::Op(o)) = self.peek() {
            let Some(op) = binop(o) else { break };
            if op.precedence() <= min_prec {
                break;
            }
            self.pos += 1;
            let rhs = self.expr(op.precedence())?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }
}

fn parse_expr(cx: &mut Ctx, s: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(cx, s)?;
    let mut p = ExprParser { toks, pos: 0, cx, whole: s };
    let e = p.expr(0)?;
    if p.pos != p.toks.len() {
        let at = p.here();
        return Err(p.cx.err(at, format!("unexpected `{}` after expression", at)));
    }
    Ok(e)
}

fn split2<'a>(cx: &Ctx, ops: &'a str, mnemonic: &str) -> Result<(&'a str, &'a str), ParseError> {
    match ops.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => Ok((a.trim(), b.trim())),
        _ => Err(cx.err(ops, format!("`{mnemonic}` expects two operands"))),
    }
}

fn parse_instr(cx: &mut Ctx, body: &str) -> Result<Instr, ParseError> {
    let (mnemonic, ops) = match body.find(char::is_whitespace) {
        Some(i) => (&body[..i], body[i..].trim()),
        None => (body, ""),
    };
    let no_operands = |cx: &Ctx| {
        if ops.is_empty() {
            Ok(())
        } else {
            Err(cx.err(ops, format!("`{mnemonic}` takes no operands")))
        }
    };
    Ok(match mnemonic {
        "assign" => {
            let (x, e) = split2(cx, ops, mnemonic)?;
            Instr::Assign { dst: cx.reg(x)?, expr: parse_expr(cx, e)? }
        }
        "jmp" => Instr::Assign { dst: PC, expr: parse_expr(cx, ops)? },
        "load" => {
            let (x, e) = split2(cx, ops, mnemonic)?;
            let dst = cx.reg(x)?;
            if dst == PC {
                return Err(cx.err(x, "`load` cannot target pc"));
            }
            Instr::Load { dst, addr: parse_expr(cx, e)? }
        }
        "store" => {
            let (x, e) = split2(cx, ops, mnemonic)?;
            Instr::Store { src: cx.reg(x)?, addr: parse_expr(cx, e)? }
        }
        "beqz" => {
            let (x, l) = split2(cx, ops, mnemonic)?;
            Instr::Beqz { cond: cx.reg(x)?, target: cx.target(l)? }
        }
        "call" => {
            if ops.is_empty() {
                return Err(cx.err(body, "`call` expects a function"));
            }
            Instr::Call { target: cx.target(ops)? }
        }
        "ret" => {
            no_operands(cx)?;
            Instr::Ret
        }
        _ => return Err(cx.err(mnemonic, format!("unknown instruction `{mnemonic}`"))),
    })
}

/// Splits a line into optional label and remaining text.
fn split_label(s: &str) -> (Option<&str>, &str) {
    if let Some(i) = s.find(':') {
        let l = s[..i].trim();
        if is_ident(l) {
            return (Some(l), &s[i + 1..]);
        }
    }
    (None, s)
}

fn parse_directive(
    cx: &mut Ctx,
    body: &str,
    prog: &mut Program,
    pending_secret_regs: &mut Vec<String>,
) -> Result<(), ParseError> {
    let mut words = body.split_whitespace();
    let name = words.next().unwrap_or("");
    let num = |cx: &Ctx, w: Option<&str>| -> Result<u64, ParseError> {
        let w = w.ok_or_else(|| cx.err(body, "missing number"))?;
        parse_num(w).ok_or_else(|| cx.err(w, format!("bad number `{w}`")))
    };
    match name {
        ".name" => prog.name = words.next().ok_or_else(|| cx.err(body, "missing name"))?.to_string(),
        ".secret" => match words.next() {
            Some("mem") => {
                let lo = num(cx, words.next())?;
                let hi = num(cx, words.next())?;
                prog.secrets.extend((lo..hi).map(Cell::Mem));
            }
            Some("reg") => pending_secret_regs.extend(words.by_ref().map(str::to_string)),
            _ => return Err(cx.err(body, "expected `.secret mem LO HI` or `.secret reg NAME`")),
        },
        ".domain" => {
            prog.domain = words.by_ref().map(|w| num(cx, Some(w))).collect::<Result<_, _>>()?;
            if prog.domain.is_empty() {
                return Err(cx.err(body, "empty domain"));
            }
        }
        ".input" => {
            let iname = words.next().ok_or_else(|| cx.err(body, "missing input name"))?;
            let mut spec = InputSpec { name: iname.to_string(), ..Default::default() };
            for w in words.by_ref() {
                let (k, v) = w.split_once('=').ok_or_else(|| cx.err(w, "expected KEY=VALUE"))?;
                let v = num(cx, Some(v))?;
                if let Some(a) = k.strip_prefix("mem[").and_then(|r| r.strip_suffix(']')) {
                    spec.mem.insert(num(cx, Some(a))?, v);
                } else {
                    spec.regs.insert(cx.reg(k)?, v);
                }
            }
            prog.inputs.push(spec);
        }
        _ => return Err(cx.err(name, format!("unknown directive `{name}`"))),
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<Program, UasmError> {
    parse_program(text).map_err(UasmError::Parse)
}

fn parse_program(text: &str) -> Result<Program, ParseError> {
    // First pass: label addresses.
    let mut labels = BTreeMap::new();
    let mut pc: Pc = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.starts_with('.') {
            continue;
        }
        let (label, rest) = split_label(line);
        if let Some(l) = label {
            if labels.insert(l.to_string(), pc).is_some() {
                let col = raw.find(l).unwrap_or(0) + 1;
                return Err(ParseError { line: n + 1, col, msg: format!("duplicate label `{l}`") });
            }
        }
        if !rest.trim().is_empty() {
            pc += 1;
        }
    }

    let mut regs = vec!["pc".to_string()];
    let mut prog = Program {
        name: String::new(),
        instrs: Vec::new(),
        regs: Vec::new(),
        labels: BTreeMap::new(),
        secrets: Vec::new(),
        domain: vec![0, 1, 2, 3],
        inputs: Vec::new(),
    };
    let mut secret_regs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        let mut cx = Ctx { line: n + 1, text: raw, regs: &mut regs, labels: &labels };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('.') {
            parse_directive(&mut cx, trimmed, &mut prog, &mut secret_regs)?;
            continue;
        }
        let (_, rest) = split_label(trimmed);
        let mut body = rest.trim();
        if body.is_empty() {
            continue;
        }
        let mut crypto = false;
        if let Some(i) = body.rfind('@') {
            let tag = body[i + 1..].trim();
            if tag != "c" {
                return Err(cx.err(&body[i..], format!("unknown tag `@{tag}`")));
            }
            crypto = true;
            body = body[..i].trim_end();
        }
        let instr = parse_instr(&mut cx, body)?;
        prog.instrs.push(Tagged { instr, crypto, line: n + 1 });
    }
    for r in secret_regs {
        prog.secrets.push(Cell::Reg(intern(&mut regs, &r)));
    }
    prog.secrets.sort_unstable();
    prog.secrets.dedup();
    prog.regs = regs;
    prog.labels = labels;
    Ok(prog)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagged_branch() {
        let p = parse("beqz x, 7 @c").unwrap();
        assert_eq!(p.instrs[0].instr, Instr::Beqz { cond: 1, target: 7 });
        assert!(p.instrs[0].crypto);
        assert_eq!(p.regs, ["pc", "x"]);
    }

    #[test]
    fn malformed_load() {
        let UasmError::Parse(e) = parse("assign x, 1\nload x").unwrap_err() else { panic!() };
        assert_eq!(e.line, 2);
        assert_eq!(e.col, 6);
    }

    #[test]
    fn errors_are_positioned() {
        let UasmError::Parse(e) = parse("  beqz x, nowhere").unwrap_err() else { panic!() };
        assert_eq!((e.line, e.col), (1, 11));
        let UasmError::Parse(e) = parse("assign x, 1 +").unwrap_err() else { panic!() };
        assert_eq!(e.line, 1);
        assert!(parse("frob x").is_err());
        assert!(parse("ret 3").is_err());
        assert!(parse("a:\na:\nret").is_err());
        assert!(parse("ret @q").is_err());
    }

    #[test]
    fn precedence_and_labels() {
        let p = parse("top: assign x, 1 + 2 * 3 == 7\njmp &top").unwrap();
        let mut r = |_| 0;
        let Instr::Assign { expr, .. } = &p.instrs[0].instr else { panic!() };
        assert_eq!(expr.eval(&mut r), 1);
        assert_eq!(p.instrs[1].instr, Instr::Assign { dst: PC, expr: Expr::Const(0) });
        assert_eq!(p.labels["top"], 0);
    }

    #[test]
    fn metadata() {
        let p = parse(
            ".name t\n.secret mem 4 6\n.secret reg k\n.domain 0 9\n.input a mem[4]=1 n=3\nassign y, k + n @c\nret",
        )
        .unwrap();
        assert_eq!(p.name, "t");
        let k = p.reg("k").unwrap();
        assert_eq!(p.secrets, vec![Cell::Mem(4), Cell::Mem(5), Cell::Reg(k)]);
        assert_eq!(p.domain, vec![0, 9]);
        assert_eq!(p.inputs[0].mem[&4], 1);
        assert_eq!(p.inputs[0].regs[&p.reg("n").unwrap()], 3);
        assert_eq!(p.crypto_range(), (0, 1));
    }

    #[test]
    fn canonical_text_round_trips() {
        let src = "f: load x, (a + 3) * b @c\nassign y, -x ^ ~(a - (b - 1))\nstore y, a << 2\nbeqz y, f\ncall f\njmp y + 1\nret @c";
        let p = parse(src).unwrap();
        let q = parse(&p.canonical_text()).unwrap();
        assert_eq!(
            p.instrs.iter().map(|t| (&t.instr, t.crypto)).collect::<Vec<_>>(),
            q.instrs.iter().map(|t| (&t.instr, t.crypto)).collect::<Vec<_>>()
        );
        assert_eq!(p.hash(), q.hash());
    }
}
