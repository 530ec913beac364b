//! Two-pass assembler and a disassembler whose output reassembles to the
//! identical image.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! label:                   ; global symbol (exported in the symbol table)
//! .local:                  ; label starting with '.' is not exported
//! mnemonic op, op          ; registers r0-r7, sp; decimal or 0x immediates
//! .data name "bytes\n"     ; raw bytes, escapes \n \t \r \0 \\ \" \xHH
//! .word name 0x1234        ; 8 little-endian bytes
//! ```
//!
//! Branch and call operands are labels or signed displacements relative to
//! the next instruction. Memory operands are `[base+disp]` where the base is a
//! register or `pc`, or `[label]` for pc-relative addressing. The entry point
//! is `main` when defined, otherwise offset 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::isa::{decode, Insn, Reg};
use super::{DataSegment, Program, DEFAULT_BASE};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("displacement to `{0}` does not fit the operand")]
    DisplacementOverflow(String),
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    assemble_at(source, DEFAULT_BASE)
}

#[derive(Debug)]
enum Target {
    Label(String),
    Disp(i64),
}

#[derive(Debug)]
enum Stmt {
    Insn(Insn),
    /// Instruction whose displacement is resolved in the second pass.
    Branch {
        op: &'static str,
        target: Target,
    },
    /// Memory operand addressed `[label]`, i.e. pc-relative.
    PcRel {
        op: &'static str,
        reg: Reg,
        label: String,
    },
    Data(Vec<u8>),
}

impl Stmt {
    fn len(&self) -> usize {
        match self {
            Stmt::Insn(i) => i.len(),
            Stmt::Branch { .. } | Stmt::PcRel { .. } => 5,
            Stmt::Data(d) => d.len(),
        }
    }
}

pub fn assemble_at(source: &str, base: u64) -> Result<Program, AsmError> {
    let mut stmts: Vec<(usize, usize, Stmt)> = Vec::new();
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut symbols = BTreeMap::new();
    let mut data_segments = Vec::new();
    let mut offset = 0usize;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| AsmError { line, kind };
        let mut text = strip_comment(raw).trim();
        while let Some((name, rest)) = split_label(text) {
            define(&mut labels, &mut symbols, name, offset).map_err(err)?;
            text = rest.trim();
        }
        if text.is_empty() {
            continue;
        }
        let stmt = if let Some(rest) = text.strip_prefix('.') {
            let (dir, rest) = split_word(rest);
            let (name, value) = split_word(rest);
            if !is_ident(name) {
                return Err(err(AsmErrorKind::Syntax(format!("bad data name `{name}`"))));
            }
            let bytes = match dir {
                "data" => parse_string(value).map_err(|m| err(AsmErrorKind::Syntax(m)))?,
                "word" => parse_imm(value)
                    .map_err(|m| err(AsmErrorKind::Syntax(m)))?
                    .to_le_bytes()
                    .to_vec(),
                other => {
                    return Err(err(AsmErrorKind::Syntax(format!(
                        "unknown directive .{other}"
                    ))))
                }
            };
            define(&mut labels, &mut symbols, name, offset).map_err(err)?;
            data_segments.push(DataSegment {
                offset: offset as u64,
                bytes: bytes.clone(),
            });
            Stmt::Data(bytes)
        } else {
            parse_insn(text).map_err(|m| err(AsmErrorKind::Syntax(m)))?
        };
        let len = stmt.len();
        stmts.push((line, offset, stmt));
        offset += len;
    }

    let mut image = Vec::with_capacity(offset);
    for (line, at, stmt) in stmts {
        let err = |kind| AsmError { line, kind };
        let next = (at + stmt.len()) as i64;
        let resolve = |name: &str| {
            labels
                .get(name)
                .map(|&o| o as i64 - next)
                .ok_or_else(|| err(AsmErrorKind::UndefinedLabel(name.to_string())))
        };
        match stmt {
            Stmt::Insn(i) => i.encode(&mut image),
            Stmt::Data(d) => image.extend_from_slice(&d),
            Stmt::Branch { op, target } => {
                let (disp, what) = match target {
                    Target::Label(l) => (resolve(&l)?, l),
                    Target::Disp(d) => (d, d.to_string()),
                };
                let d = i32::try_from(disp)
                    .map_err(|_| err(AsmErrorKind::DisplacementOverflow(what)))?;
                let insn = match op {
                    "jmp" => Insn::Jmp(d),
                    "jz" => Insn::Jz(d),
                    "jnz" => Insn::Jnz(d),
                    _ => Insn::Call(d),
                };
                insn.encode(&mut image);
            }
            Stmt::PcRel { op, reg, label } => {
                let d = i16::try_from(resolve(&label)?)
                    .map_err(|_| err(AsmErrorKind::DisplacementOverflow(label)))?;
                let insn = match op {
                    "load" => Insn::Load {
                        dst: reg,
                        base: Reg::PC,
                        disp: d,
                    },
                    "store" => Insn::Store {
                        base: Reg::PC,
                        disp: d,
                        src: reg,
                    },
                    _ => Insn::Lea {
                        dst: reg,
                        base: Reg::PC,
                        disp: d,
                    },
                };
                insn.encode(&mut image);
            }
        }
    }

    let entry_offset = symbols.get("main").copied().unwrap_or(0);
    Ok(Program {
        image,
        base_addr_canonical: base,
        entry_offset,
        symbols,
        data_segments,
    })
}

fn define(
    labels: &mut HashMap<String, usize>,
    symbols: &mut BTreeMap<String, u64>,
    name: &str,
    offset: usize,
) -> Result<(), AsmErrorKind> {
    if labels.insert(name.to_string(), offset).is_some() {
        return Err(AsmErrorKind::DuplicateLabel(name.to_string()));
    }
    if !name.starts_with('.') {
        symbols.insert(name.to_string(), offset as u64);
    }
    Ok(())
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            ';' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let (head, rest) = text.split_once(':')?;
    let head = head.trim();
    let bare = head.strip_prefix('.').unwrap_or(head);
    (is_ident(bare) && !head.contains(char::is_whitespace)).then_some((head, rest))
}

fn split_word(text: &str) -> (&str, &str) {
    let text = text.trim_start();
    match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_label(s: &str) -> bool {
    is_ident(s.strip_prefix('.').unwrap_or(s))
}

fn parse_imm(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => body.parse::<u64>(),
    }
    .map_err(|_| format!("bad immediate `{s}`"))?;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_signed(s: &str, bits: u32) -> Result<i64, String> {
    let v = parse_imm(s)? as i64;
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    if (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(format!("immediate `{s}` out of range for {bits} bits"))
    }
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    let s = s.trim();
    if s == "sp" {
        return Ok(Reg::SP);
    }
    s.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .and_then(Reg::gp)
        .ok_or_else(|| format!("bad register `{s}`"))
}

enum MemOperand {
    Based(Reg, i16),
    Label(String),
}

fn parse_mem(s: &str) -> Result<MemOperand, String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, got `{s}`"))?
        .trim();
    let split = inner.find(['+', '-']);
    let (base, disp) = match split {
        Some(i) => (
            inner[..i].trim(),
            parse_signed(&inner[i..].replace(' ', ""), 16)? as i16,
        ),
        None => (inner, 0),
    };
    if base == "pc" {
        return Ok(MemOperand::Based(Reg::PC, disp));
    }
    match parse_reg(base) {
        Ok(r) => Ok(MemOperand::Based(r, disp)),
        Err(_) if split.is_none() && is_label(base) => Ok(MemOperand::Label(base.to_string())),
        Err(e) => Err(e),
    }
}

fn parse_string(s: &str) -> Result<Vec<u8>, String> {
    let body = s
        .strip_prefix('"')
        .and_then(|x| x.strip_suffix('"'))
        .ok_or_else(|| format!("expected quoted string, got `{s}`"))?;
    let mut out = Vec::new();
    let mut it = body.bytes();
    while let Some(b) = it.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        let esc = it.next().ok_or("dangling escape")?;
        out.push(match esc {
            b'n' => b'\n',
            b't' => b'\t',
            b'r' => b'\r',
            b'0' => 0,
            b'\\' => b'\\',
            b'"' => b'"',
            b'x' => {
                let hex = [
                    it.next().ok_or("short \\x escape")?,
                    it.next().ok_or("short \\x escape")?,
                ];
                let hex = std::str::from_utf8(&hex).map_err(|_| "bad \\x escape")?;
                u8::from_str_radix(hex, 16).map_err(|_| format!("bad \\x escape `{hex}`"))?
            }
            other => return Err(format!("unknown escape \\{}", other as char)),
        });
    }
    Ok(out)
}

fn parse_insn(text: &str) -> Result<Stmt, String> {
    let (m, rest) = split_word(text);
    let mnemonic = m.to_ascii_lowercase();
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let want = |n: usize| {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!(
                "`{mnemonic}` takes {n} operand(s), got {}",
                ops.len()
            ))
        }
    };
    let u8_imm = |s: &str| {
        parse_imm(s).and_then(|v| u8::try_from(v).map_err(|_| format!("`{s}` does not fit a byte")))
    };
    let insn = match mnemonic.as_str() {
        "nop" => want(0).map(|_| Insn::Nop)?,
        "ret" => want(0).map(|_| Insn::Ret)?,
        "halt" => {
            want(1)?;
            Insn::Halt(u8_imm(ops[0])?)
        }
        "sys" => {
            want(1)?;
            Insn::Sys(u8_imm(ops[0])?)
        }
        "movi" => {
            want(2)?;
            Insn::Movi(parse_reg(ops[0])?, parse_imm(ops[1])?)
        }
        "mov" | "add" | "sub" | "xor" | "cmp" => {
            want(2)?;
            let (a, b) = (parse_reg(ops[0])?, parse_reg(ops[1])?);
            match mnemonic.as_str() {
                "mov" => Insn::Mov(a, b),
                "add" => Insn::Add(a, b),
                "sub" => Insn::Sub(a, b),
                "xor" => Insn::Xor(a, b),
                _ => Insn::Cmp(a, b),
            }
        }
        "cmpi" => {
            want(2)?;
            Insn::Cmpi(parse_reg(ops[0])?, parse_signed(ops[1], 32)? as i32)
        }
        "push" | "pop" => {
            want(1)?;
            let r = parse_reg(ops[0])?;
            if mnemonic == "push" {
                Insn::Push(r)
            } else {
                Insn::Pop(r)
            }
        }
        "jmp" | "jz" | "jnz" | "call" => {
            want(1)?;
            let op: &'static str = match mnemonic.as_str() {
                "jmp" => "jmp",
                "jz" => "jz",
                "jnz" => "jnz",
                _ => "call",
            };
            let target = if is_label(ops[0]) {
                Target::Label(ops[0].to_string())
            } else {
                Target::Disp(parse_imm(ops[0])? as i64)
            };
            return Ok(Stmt::Branch { op, target });
        }
        "load" | "lea" => {
            want(2)?;
            let dst = parse_reg(ops[0])?;
            let op: &'static str = if mnemonic == "load" { "load" } else { "lea" };
            let mem = if op == "lea" && is_label(ops[1]) {
                MemOperand::Label(ops[1].to_string())
            } else {
                parse_mem(ops[1])?
            };
            match mem {
                MemOperand::Label(label) => {
                    return Ok(Stmt::PcRel {
                        op,
                        reg: dst,
                        label,
                    })
                }
                MemOperand::Based(base, disp) if op == "load" => Insn::Load { dst, base, disp },
                MemOperand::Based(base, disp) => Insn::Lea { dst, base, disp },
            }
        }
        "store" => {
            want(2)?;
            let src = parse_reg(ops[1])?;
            match parse_mem(ops[0])? {
                MemOperand::Label(label) => {
                    return Ok(Stmt::PcRel {
                        op: "store",
                        reg: src,
                        label,
                    })
                }
                MemOperand::Based(base, disp) => Insn::Store { base, disp, src },
            }
        }
        other => return Err(format!("unknown mnemonic `{other}`")),
    };
    Ok(Stmt::Insn(insn))
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        match b {
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\\' => s.push_str("\\\\"),
            b'"' => s.push_str("\\\""),
            0x20..=0x7e if b != b';' => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

/// Render `p` as assembly source. Symbols are emitted as labels, data
/// segments as `.data`, and bytes that do not decode as synthetic `.data`
/// runs, so `assemble(disassemble(p))` reproduces the image exactly.
pub fn disassemble(p: &Program) -> String {
    let mut by_offset: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for (name, &off) in &p.symbols {
        by_offset.entry(off).or_default().push(name);
    }
    let segments: BTreeMap<u64, &DataSegment> =
        p.data_segments.iter().map(|s| (s.offset, s)).collect();
    let mut out = String::new();
    let mut off = 0u64;
    let len = p.image.len() as u64;
    let mut raw: Vec<u8> = Vec::new();
    let mut raw_start = 0u64;

    let flush = |out: &mut String, raw: &mut Vec<u8>, start: u64| {
        if !raw.is_empty() {
            let _ = writeln!(out, ".data _raw_{start:x} \"{}\"", escape(raw));
            raw.clear();
        }
    };

    while off < len {
        if let Some(seg) = segments.get(&off).filter(|s| !s.bytes.is_empty()) {
            flush(&mut out, &mut raw, raw_start);
            let names = by_offset.get(&off).cloned().unwrap_or_default();
            let (data_name, others) = match names.split_first() {
                Some((first, rest)) => (first.to_string(), rest.to_vec()),
                None => (format!("_data_{off:x}"), Vec::new()),
            };
            for n in others {
                let _ = writeln!(out, "{n}:");
            }
            let _ = writeln!(out, ".data {data_name} \"{}\"", escape(&seg.bytes));
            off += seg.bytes.len() as u64;
            continue;
        }
        let labels = by_offset.get(&off);
        // A synthetic data run must start where decoding failed; labels
        // break the run so they stay addressable.
        if labels.is_some() {
            flush(&mut out, &mut raw, raw_start);
            for n in labels.into_iter().flatten() {
                let _ = writeln!(out, "{n}:");
            }
        }
        let limit = segments.range(off + 1..).next().map_or(len, |(&o, _)| o);
        let window = &p.image[off as usize..limit as usize];
        match decode(window) {
            Ok(insn) => {
                flush(&mut out, &mut raw, raw_start);
                let next = off + insn.len() as u64;
                let target_label = insn
                    .rel32()
                    .map(|d| next.wrapping_add(d as i64 as u64))
                    .and_then(|t| by_offset.get(&t))
                    .map(|names| names[0]);
                match (insn, target_label) {
                    (_, Some(label)) => {
                        let _ = writeln!(out, "    {} {label}", insn.mnemonic());
                    }
                    _ => {
                        let _ = writeln!(out, "    {insn}");
                    }
                }
                off = next;
            }
            Err(_) => {
                if raw.is_empty() {
                    raw_start = off;
                }
                raw.push(p.image[off as usize]);
                off += 1;
            }
        }
    }
    flush(&mut out, &mut raw, raw_start);
    for n in by_offset.range(len..).flat_map(|(_, v)| v) {
        let _ = writeln!(out, "{n}:");
    }
    out
}
