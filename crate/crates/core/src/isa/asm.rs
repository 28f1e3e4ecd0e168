//! Two-pass assembler for GISA-32.
//!
//! Source is line oriented: an optional `label:` followed by one instruction
//! or directive, `;` starts a comment. Directives:
//!
//! * `.org VADDR[, LOADADDR]` starts a section at `VADDR`; the optional
//!   second operand is the physical load address (defaults to `VADDR`).
//! * `.word e1, e2, ...` emits little-endian 32-bit words.
//! * `.ascii "text"` emits raw bytes (escapes: `\n \t \0 \\ \"`).
//! * `.space N` emits `N` zero bytes.
//! * `.global name` exports a label into the symbol table.
//! * `DB e1, e2, ...` emits single bytes (the disassembler's fallback form).
//!
//! Operand expressions are sums/differences of numbers (`12`, `0x1F`,
//! `0b101`), character literals (`'a'`) and labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use super::{encode, AluOp, ControlReg, Instruction, JumpCond, Opcode, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("sections overlap at physical {0:#x}")]
    OverlappingSections(u32),
    #[error("malformed image file: {0}")]
    MalformedImage(String),
}

impl AsmError {
    pub fn line(&self) -> Option<usize> {
        match self {
            AsmError::SyntaxError { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Virtual address of the first byte.
    pub vaddr: u32,
    /// Physical load address of the first byte.
    pub load: u32,
    pub bytes: Vec<u8>,
}

impl Section {
    fn contains_va(&self, va: u32) -> bool {
        va >= self.vaddr && (va - self.vaddr) < self.bytes.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub addr: u32,
    /// Set when the address does not fall inside any emitted section.
    pub absolute: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssembledImage {
    pub sections: Vec<Section>,
    /// Physical entry address.
    pub entry: u32,
    /// Exported (`.global`) symbols, sorted by address.
    pub symbols: Vec<Symbol>,
    /// Every label defined in the source, exported or not.
    pub labels: BTreeMap<String, u32>,
}

impl AssembledImage {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.labels.get(name).copied()
    }

    /// Renders the exported symbols in the `HEXADDR NAME` text format.
    pub fn symbols_file(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            let _ = writeln!(out, "{:08X} {}", s.addr, s.name);
        }
        out
    }

    /// Serializes sections as repeated `(u32 load, u32 len, bytes)` records.
    pub fn to_image_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.sections {
            out.extend_from_slice(&s.load.to_le_bytes());
            out.extend_from_slice(&(s.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.bytes);
        }
        out
    }

    /// Parses the image file format. Virtual addresses are unknown in this
    /// format, so each section's `vaddr` equals its load address.
    pub fn from_image_bytes(data: &[u8]) -> Result<AssembledImage, AsmError> {
        let mut sections = Vec::new();
        let mut i = 0;
        while i < data.len() {
            if data.len() - i < 8 {
                return Err(AsmError::MalformedImage(format!("truncated header at {i}")));
            }
            let load = u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
            let len = u32::from_le_bytes(data[i + 4..i + 8].try_into().unwrap()) as usize;
            i += 8;
            if data.len() - i < len {
                return Err(AsmError::MalformedImage(format!("section at {load:#x} truncated")));
            }
            sections.push(Section { vaddr: load, load, bytes: data[i..i + len].to_vec() });
            i += len;
        }
        check_overlap(&sections)?;
        let entry = sections.first().map(|s| s.load).unwrap_or(0);
        Ok(AssembledImage { sections, entry, symbols: Vec::new(), labels: BTreeMap::new() })
    }
}

fn check_overlap(sections: &[Section]) -> Result<(), AsmError> {
    let mut spans: Vec<(u64, u64)> = sections
        .iter()
        .filter(|s| !s.bytes.is_empty())
        .map(|s| (s.load as u64, s.load as u64 + s.bytes.len() as u64))
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(AsmError::OverlappingSections(w[1].0 as u32));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Num(i64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Expr(Vec<(bool, Term)>);

impl Expr {
    fn eval(&self, labels: &BTreeMap<String, u32>) -> Result<i64, AsmError> {
        let mut acc = 0i64;
        for (neg, t) in &self.0 {
            let v = match t {
                Term::Num(n) => *n,
                Term::Label(l) => {
                    *labels.get(l).ok_or_else(|| AsmError::UndefinedLabel(l.clone()))? as i64
                }
            };
            acc = if *neg { acc - v } else { acc + v };
        }
        Ok(acc)
    }

    fn constant(&self) -> Option<i64> {
        self.eval(&BTreeMap::new()).ok()
    }
}

#[derive(Debug, Clone)]
enum Mem {
    Reg(Reg),
    Base(Reg, Expr),
}

#[derive(Debug, Clone)]
enum Item {
    Instr { line: usize, op: Opcode, args: Vec<Operand> },
    Words(usize, Vec<Expr>),
    Bytes(usize, Vec<Expr>),
    Raw(Vec<u8>),
}

#[derive(Debug, Clone)]
enum Operand {
    Reg(Reg),
    Cr(ControlReg),
    Mem(Mem),
    Expr(Expr),
}

struct Parser<'a> {
    line: usize,
    s: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> AsmError {
        AsmError::SyntaxError { line: self.line, msg: msg.into() }
    }

    fn number(&self, tok: &str) -> Result<i64, AsmError> {
        let t = tok.replace('_', "");
        let parsed = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
            i64::from_str_radix(h, 16)
        } else if let Some(b) = t.strip_prefix("0b") {
            i64::from_str_radix(b, 2)
        } else {
            t.parse::<i64>()
        };
        parsed.map_err(|_| self.err(format!("bad number `{tok}`")))
    }

    fn expr(&self, text: &str) -> Result<Expr, AsmError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(self.err("empty expression"));
        }
        let mut terms = Vec::new();
        let mut neg = false;
        let mut cur = String::new();
        let mut chars = text.chars().peekable();
        let mut expect_term = true;
        let flush = |cur: &mut String, neg: bool, terms: &mut Vec<(bool, Term)>| -> Result<(), AsmError> {
            let t = cur.trim().to_string();
            cur.clear();
            if t.is_empty() {
                return Err(self.err("missing operand in expression"));
            }
            let term = if t.starts_with('\'') {
                let inner: Vec<char> = t.trim_matches('\'').chars().collect();
                let c = match inner.as_slice() {
                    [c] => *c,
                    ['\\', 'n'] => '\n',
                    ['\\', '0'] => '\0',
                    ['\\', 't'] => '\t',
                    ['\\', '\\'] => '\\',
                    ['\\', '\''] => '\'',
                    _ => return Err(self.err(format!("bad character literal {t}"))),
                };
                Term::Num(c as i64)
            } else if t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
                Term::Num(self.number(&t)?)
            } else if t.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                Term::Label(t)
            } else {
                return Err(self.err(format!("bad term `{t}`")));
            };
            terms.push((neg, term));
            Ok(())
        };
        while let Some(c) = chars.next() {
            match c {
                '\'' => {
                    cur.push(c);
                    for d in chars.by_ref() {
                        cur.push(d);
                        if d == '\'' && !cur.ends_with("\\'") && cur.len() > 1 {
                            break;
                        }
                    }
                    expect_term = false;
                }
                '+' | '-' if expect_term && cur.trim().is_empty() => {
                    if c == '-' {
                        neg = !neg;
                    }
                }
                '+' | '-' => {
                    flush(&mut cur, neg, &mut terms)?;
                    neg = c == '-';
                    expect_term = true;
                }
                _ => {
                    cur.push(c);
                    if !c.is_whitespace() {
                        expect_term = false;
                    }
                }
            }
        }
        flush(&mut cur, neg, &mut terms)?;
        Ok(Expr(terms))
    }

    fn reg(&self, tok: &str) -> Option<Result<Reg, AsmError>> {
        let t = tok.trim();
        let lower = t.to_ascii_lowercase();
        match lower.as_str() {
            "sp" => return Some(Ok(Reg::SP)),
            "fp" => return Some(Ok(Reg::FP)),
            _ => {}
        }
        let n = lower.strip_prefix('r')?;
        if n.is_empty() || !n.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        Some(match n.parse::<u8>() {
            Ok(v) if v < 8 => Ok(Reg(v)),
            _ => Err(self.err(format!("invalid register `{t}`"))),
        })
    }

    fn operand(&self, tok: &str) -> Result<Operand, AsmError> {
        let t = tok.trim();
        if let Some(r) = self.reg(t) {
            return Ok(Operand::Reg(r?));
        }
        if let Some(inner) = t.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| self.err(format!("unterminated memory operand `{t}`")))?
                .trim();
            let split = inner.find(['+', '-']);
            let (base, off) = match split {
                Some(i) => (&inner[..i], Some(&inner[i..])),
                None => (inner, None),
            };
            let base = self
                .reg(base)
                .ok_or_else(|| self.err(format!("memory operand needs a base register: `{t}`")))??;
            return Ok(Operand::Mem(match off {
                Some(o) => Mem::Base(base, self.expr(o)?),
                None => Mem::Reg(base),
            }));
        }
        if let Some(cr) = ControlReg::from_name(t) {
            return Ok(Operand::Cr(cr));
        }
        Ok(Operand::Expr(self.expr(t)?))
    }

    fn string_lit(&self, text: &str) -> Result<Vec<u8>, AsmError> {
        let t = text.trim();
        let inner = t
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .ok_or_else(|| self.err("expected a quoted string"))?;
        let mut out = Vec::new();
        let mut it = inner.chars();
        while let Some(c) = it.next() {
            if c == '\\' {
                let e = it.next().ok_or_else(|| self.err("dangling escape"))?;
                out.push(match e {
                    'n' => b'\n',
                    't' => b'\t',
                    '0' => 0,
                    '\\' => b'\\',
                    '"' => b'"',
                    _ => return Err(self.err(format!("unknown escape \\{e}"))),
                });
            } else {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
        Ok(out)
    }
}

/// Splits on commas that are not inside brackets or quotes.
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"') | (None, '\'') => quote = Some(c),
            (None, '[') => depth += 1,
            (None, ']') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !s[start..].trim().is_empty() || !out.is_empty() {
        out.push(&s[start..]);
    }
    out
}

fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut prev = '\0';
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q && prev != '\\' => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ';' => return &line[..i],
            None => {}
        }
        prev = c;
    }
    line
}

fn mnemonic(name: &str) -> Option<Opcode> {
    let upper = name.to_ascii_uppercase();
    (0..=255u8)
        .filter_map(Opcode::from_byte)
        .find(|op| op.mnemonic() == upper)
}

struct Pending {
    vaddr: u32,
    load: u32,
    items: Vec<(u32, Item)>,
    size: u32,
}

/// Assembles `source` into an image with two-pass label resolution.
pub fn assemble(source: &str) -> Result<AssembledImage, AsmError> {
    let mut labels: BTreeMap<String, u32> = BTreeMap::new();
    let mut globals: BTreeSet<String> = BTreeSet::new();
    let mut sections: Vec<Pending> = Vec::new();
    let mut cur = Pending { vaddr: 0, load: 0, items: Vec::new(), size: 0 };

    // Pass 1: parse, size and place every item; collect labels.
    for (idx, raw) in source.lines().enumerate() {
        let p = Parser { line: idx + 1, s: raw };
        let mut rest = strip_comment(p.s).trim();
        // Labels (possibly several on one line).
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if name.is_empty()
                || name.contains(char::is_whitespace)
                || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
                || name.starts_with(|c: char| c.is_ascii_digit())
            {
                break;
            }
            if labels.insert(name.to_string(), cur.vaddr.wrapping_add(cur.size)).is_some() {
                return Err(AsmError::DuplicateLabel(name.to_string()));
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        let (head, tail) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim()),
            None => (rest, ""),
        };
        let here = cur.vaddr.wrapping_add(cur.size);
        match head.to_ascii_lowercase().as_str() {
            ".org" => {
                let ops = split_operands(tail);
                let num = |s: &str| -> Result<u32, AsmError> {
                    p.expr(s)?
                        .constant()
                        .map(|v| v as u32)
                        .ok_or_else(|| p.err(".org needs a numeric address"))
                };
                let (vaddr, load) = match ops.as_slice() {
                    [v] => {
                        let v = num(v)?;
                        (v, v)
                    }
                    [v, l] => (num(v)?, num(l)?),
                    _ => return Err(p.err(".org takes one or two operands")),
                };
                let prev = std::mem::replace(&mut cur, Pending { vaddr, load, items: Vec::new(), size: 0 });
                if prev.size > 0 {
                    sections.push(prev);
                }
            }
            ".global" | ".globl" => {
                for name in split_operands(tail) {
                    globals.insert(name.trim().to_string());
                }
            }
            ".word" => {
                let exprs = split_operands(tail)
                    .into_iter()
                    .map(|e| p.expr(e))
                    .collect::<Result<Vec<_>, _>>()?;
                if exprs.is_empty() {
                    return Err(p.err(".word needs operands"));
                }
                let n = exprs.len() as u32 * 4;
                cur.items.push((here, Item::Words(p.line, exprs)));
                cur.size += n;
            }
            ".ascii" => {
                let bytes = p.string_lit(tail)?;
                let n = bytes.len() as u32;
                cur.items.push((here, Item::Raw(bytes)));
                cur.size += n;
            }
            ".space" => {
                let n = p.expr(tail)?.constant().ok_or_else(|| p.err(".space needs a number"))?;
                if !(0..=0x0100_0000).contains(&n) {
                    return Err(p.err(".space size out of range"));
                }
                cur.items.push((here, Item::Raw(vec![0; n as usize])));
                cur.size += n as u32;
            }
            "db" | ".byte" => {
                let exprs = split_operands(tail)
                    .into_iter()
                    .map(|e| p.expr(e))
                    .collect::<Result<Vec<_>, _>>()?;
                let n = exprs.len() as u32;
                cur.items.push((here, Item::Bytes(p.line, exprs)));
                cur.size += n;
            }
            d if d.starts_with('.') => return Err(p.err(format!("unknown directive `{head}`"))),
            _ => {
                let op = mnemonic(head).ok_or_else(|| p.err(format!("unknown mnemonic `{head}`")))?;
                let args = split_operands(tail)
                    .into_iter()
                    .map(|a| p.operand(a))
                    .collect::<Result<Vec<_>, _>>()?;
                cur.items.push((here, Item::Instr { line: p.line, op, args }));
                cur.size += op.len() as u32;
            }
        }
    }
    if cur.size > 0 || sections.is_empty() {
        sections.push(cur);
    }

    // Pass 2: resolve and encode.
    let mut out_sections = Vec::new();
    for sec in sections {
        let mut bytes = Vec::with_capacity(sec.size as usize);
        for (_, item) in sec.items {
            match item {
                Item::Raw(b) => bytes.extend_from_slice(&b),
                Item::Words(line, exprs) => {
                    for e in exprs {
                        let v = e.eval(&labels)?;
                        if v < i32::MIN as i64 || v > u32::MAX as i64 {
                            return Err(AsmError::SyntaxError { line, msg: format!("word {v} out of range") });
                        }
                        bytes.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
                Item::Bytes(line, exprs) => {
                    for e in exprs {
                        let v = e.eval(&labels)?;
                        if !(-128..=255).contains(&v) {
                            return Err(AsmError::SyntaxError { line, msg: format!("byte {v} out of range") });
                        }
                        bytes.push(v as u8);
                    }
                }
                Item::Instr { line, op, args } => {
                    let instr = build(line, op, &args, &labels)?;
                    bytes.extend(encode(&instr).map_err(|e| AsmError::SyntaxError { line, msg: e.to_string() })?);
                }
            }
        }
        out_sections.push(Section { vaddr: sec.vaddr, load: sec.load, bytes });
    }
    out_sections.retain(|s| !s.bytes.is_empty());
    check_overlap(&out_sections)?;

    for g in &globals {
        if !labels.contains_key(g) {
            return Err(AsmError::UndefinedLabel(g.clone()));
        }
    }
    let mut symbols: Vec<Symbol> = globals
        .iter()
        .map(|g| {
            let addr = labels[g];
            Symbol {
                name: g.clone(),
                addr,
                absolute: !out_sections.iter().any(|s| s.contains_va(addr)),
            }
        })
        .collect();
    symbols.sort_by(|a, b| (a.addr, &a.name).cmp(&(b.addr, &b.name)));

    let va_to_load = |va: u32| {
        out_sections
            .iter()
            .find(|s| s.contains_va(va))
            .map(|s| s.load + (va - s.vaddr))
    };
    let entry = ["_start", "start"]
        .iter()
        .find_map(|n| labels.get(*n).and_then(|va| va_to_load(*va)))
        .or_else(|| out_sections.first().map(|s| s.load))
        .unwrap_or(0);

    Ok(AssembledImage { sections: out_sections, entry, symbols, labels })
}

fn build(
    line: usize,
    op: Opcode,
    args: &[Operand],
    labels: &BTreeMap<String, u32>,
) -> Result<Instruction, AsmError> {
    let err = |msg: String| AsmError::SyntaxError { line, msg };
    let shape = || err(format!("bad operands for {}", op.mnemonic()));
    let value = |e: &Expr| e.eval(labels);
    let imm32 = |e: &Expr| -> Result<u32, AsmError> {
        let v = value(e)?;
        if v < i32::MIN as i64 || v > u32::MAX as i64 {
            return Err(err(format!("immediate {v} does not fit 32 bits")));
        }
        Ok(v as u32)
    };
    let imm16 = |e: &Expr| -> Result<i16, AsmError> {
        let v = value(e)?;
        i16::try_from(v).map_err(|_| err(format!("immediate {v} does not fit signed 16 bits")))
    };
    let port = |e: &Expr| -> Result<u8, AsmError> {
        let v = value(e)?;
        u8::try_from(v).map_err(|_| err(format!("port {v} out of range")))
    };
    let mem = |m: &Mem| -> Result<(Reg, i16), AsmError> {
        match m {
            Mem::Reg(r) => Ok((*r, 0)),
            Mem::Base(r, e) => Ok((*r, imm16(e)?)),
        }
    };
    use Operand as A;
    let alu = |aop: AluOp| match args {
        [A::Reg(rd), A::Reg(rs)] => Ok(Instruction::Alu { op: aop, rd: *rd, rs: *rs }),
        _ => Err(shape()),
    };
    let jump = |cond: JumpCond| match args {
        [A::Expr(e)] => Ok(Instruction::Jump { cond, target: imm32(e)? }),
        _ => Err(shape()),
    };
    let none = |i: Instruction| if args.is_empty() { Ok(i) } else { Err(shape()) };
    match op {
        Opcode::Nop => none(Instruction::Nop),
        Opcode::Hlt => none(Instruction::Hlt),
        Opcode::Ret => none(Instruction::Ret),
        Opcode::Syscall => none(Instruction::Syscall),
        Opcode::Iret => none(Instruction::Iret),
        Opcode::Sti => none(Instruction::Sti),
        Opcode::Cli => none(Instruction::Cli),
        Opcode::Brk => none(Instruction::Brk),
        Opcode::Movi => match args {
            [A::Reg(rd), A::Expr(e)] => Ok(Instruction::Movi { rd: *rd, imm: imm32(e)? }),
            _ => Err(shape()),
        },
        Opcode::Mov => match args {
            [A::Reg(rd), A::Reg(rs)] => Ok(Instruction::Mov { rd: *rd, rs: *rs }),
            _ => Err(shape()),
        },
        Opcode::Ld => match args {
            [A::Reg(rd), A::Mem(m)] => {
                let (base, offset) = mem(m)?;
                Ok(Instruction::Ld { rd: *rd, base, offset })
            }
            _ => Err(shape()),
        },
        Opcode::St => match args {
            [A::Mem(m), A::Reg(rs)] => {
                let (base, offset) = mem(m)?;
                Ok(Instruction::St { base, rs: *rs, offset })
            }
            _ => Err(shape()),
        },
        Opcode::Add => alu(AluOp::Add),
        Opcode::Sub => alu(AluOp::Sub),
        Opcode::And => alu(AluOp::And),
        Opcode::Or => alu(AluOp::Or),
        Opcode::Xor => alu(AluOp::Xor),
        Opcode::Cmp => alu(AluOp::Cmp),
        Opcode::Addi => match args {
            [A::Reg(rd), A::Expr(e)] => Ok(Instruction::Addi { rd: *rd, imm: imm16(e)? }),
            _ => Err(shape()),
        },
        Opcode::Jmp => jump(JumpCond::Always),
        Opcode::Jz => jump(JumpCond::Zero),
        Opcode::Jnz => jump(JumpCond::NotZero),
        Opcode::Call => match args {
            [A::Expr(e)] => Ok(Instruction::Call { target: imm32(e)? }),
            _ => Err(shape()),
        },
        Opcode::Push => match args {
            [A::Reg(rs)] => Ok(Instruction::Push { rs: *rs }),
            _ => Err(shape()),
        },
        Opcode::Pop => match args {
            [A::Reg(rd)] => Ok(Instruction::Pop { rd: *rd }),
            _ => Err(shape()),
        },
        Opcode::In => match args {
            [A::Reg(rd), A::Expr(e)] => Ok(Instruction::In { rd: *rd, port: port(e)? }),
            _ => Err(shape()),
        },
        Opcode::Out => match args {
            [A::Expr(e), A::Reg(rs)] => Ok(Instruction::Out { port: port(e)?, rs: *rs }),
            _ => Err(shape()),
        },
        Opcode::Movcr => match args {
            [A::Cr(cr), A::Reg(rs)] => Ok(Instruction::Movcr { cr: *cr, rs: *rs }),
            _ => Err(shape()),
        },
        Opcode::Movrc => match args {
            [A::Reg(rd), A::Cr(cr)] => Ok(Instruction::Movrc { rd: *rd, cr: *cr }),
            _ => Err(shape()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn org_and_symbols() {
        let img = assemble(".org 0x100\n.global start\nstart: MOVI r0,1\nHLT\n").unwrap();
        assert_eq!(img.sections.len(), 1);
        assert_eq!(img.sections[0].load, 0x100);
        assert_eq!(img.sections[0].bytes, [0x02, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01]);
        assert_eq!(img.symbols, vec![Symbol { name: "start".into(), addr: 0x100, absolute: false }]);
        assert_eq!(img.entry, 0x100);
    }

    #[test]
    fn forward_reference_resolves() {
        let img = assemble(".org 0x200\nJMP end\nNOP\nend: HLT\n").unwrap();
        let end = img.symbol("end").unwrap();
        assert_eq!(end, 0x206);
        assert_eq!(&img.sections[0].bytes[1..5], &end.to_le_bytes());
    }

    #[test]
    fn invalid_register_is_syntax_error() {
        let e = assemble("MOVI r9,0").unwrap_err();
        assert!(matches!(e, AsmError::SyntaxError { line: 1, .. }), "{e:?}");
    }

    #[test]
    fn undefined_and_duplicate_labels() {
        assert_eq!(assemble("JMP nowhere").unwrap_err(), AsmError::UndefinedLabel("nowhere".into()));
        assert_eq!(assemble("a: NOP\na: NOP").unwrap_err(), AsmError::DuplicateLabel("a".into()));
    }

    #[test]
    fn memory_operands_and_directives() {
        let src = r#"
            .org 0x1000, 0x2000
        data:
            .word 0x11223344, data+4
            .ascii "hi\n"
            DB 0xFE
        code:
            LD r2, [r1+8]
            ST [r7-4], r3
            LD r0, [r5]
            MOVCR PTBR, r1
            MOVRC r2, epc
            OUT 0xE9, r0
            IN r5, 0x60
            ADDI r1, -1
            MOVI r4, 'A' + 1
        "#;
        let img = assemble(src).unwrap();
        let s = &img.sections[0];
        assert_eq!(s.vaddr, 0x1000);
        assert_eq!(s.load, 0x2000);
        assert_eq!(&s.bytes[0..8], &[0x44, 0x33, 0x22, 0x11, 0x04, 0x10, 0, 0]);
        assert_eq!(&s.bytes[8..12], b"hi\n\xFE");
        assert_eq!(&s.bytes[12..16], &[0x04, 0x21, 0x08, 0x00]);
        assert_eq!(&s.bytes[16..20], &[0x05, 0x73, 0xFC, 0xFF]);
        assert_eq!(&s.bytes[20..24], &[0x04, 0x05, 0x00, 0x00]);
        assert_eq!(&s.bytes[24..26], &[0x18, 0x01]);
        assert_eq!(&s.bytes[26..28], &[0x19, 0x24]);
        assert_eq!(&s.bytes[28..31], &[0x15, 0x00, 0xE9]);
        assert_eq!(&s.bytes[31..34], &[0x14, 0x05, 0x60]);
        assert_eq!(&s.bytes[34..38], &[0x0B, 0x01, 0xFF, 0xFF]);
        assert_eq!(&s.bytes[38..44], &[0x02, 0x04, 0x42, 0, 0, 0]);
    }

    #[test]
    fn overlapping_sections_rejected() {
        let e = assemble(".org 0x100\n.word 1,2\n.org 0x104\n.word 3").unwrap_err();
        assert_eq!(e, AsmError::OverlappingSections(0x104));
    }

    #[test]
    fn comments_inside_strings_survive() {
        let img = assemble(".ascii \"a;b\" ; trailing").unwrap();
        assert_eq!(img.sections[0].bytes, b"a;b");
    }

    #[test]
    fn image_file_round_trip() {
        let img = assemble(".org 0x100\nNOP\n.org 0x2000\n.word 7").unwrap();
        let back = AssembledImage::from_image_bytes(&img.to_image_bytes()).unwrap();
        assert_eq!(back.sections, img.sections);
        assert!(AssembledImage::from_image_bytes(&[1, 2, 3]).is_err());
    }

    #[test]
    fn symbols_file_format() {
        let img = assemble(".org 0x100\n.global kmain, f1\nkmain: NOP\nf1: RET").unwrap();
        assert_eq!(img.symbols_file(), "00000100 kmain\n00000101 f1\n");
    }
}
