//! Instrumented execution: per-instruction traces, per-call timings, and the
//! `LFTRACE1` text format.
//!
//! ```text
//! LFTRACE1
//! base 0x555555554000                    (optional; code base of the layout)
//! 0 0x555555554000 5 call ret=0x555555554005 t=1
//! 1 0x555555554010 1 ret t=2
//! end exited 0 ticks=2 instrs=2          (optional footer, then stdout/stderr hex)
//! stdout 414243
//! stderr
//! ```
//!
//! Record lines are `SEQ ADDR LEN MNEMONIC [ret=ADDR] [t=TICK]`, addresses as
//! lowercase 0x-prefixed hex separated by single spaces.

use std::fmt::Write as _;

use serde::Serialize;

use crate::vm::{self, ExecutionResult, Program, RunConfig, Termination, VmError};

pub const TRACE_MAGIC: &str = "LFTRACE1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub addr: u64,
    pub len: u8,
    pub mnemonic: String,
    pub return_addr: Option<u64>,
    /// Completion tick; absent in traces from tools that do not report it.
    pub tick: Option<u64>,
}

impl TraceRecord {
    pub fn is_call(&self) -> bool {
        self.return_addr.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub result: Option<ExecutionResult>,
    pub code_base: Option<u64>,
    pub n_instructions: u64,
    pub m_calls: u64,
}

impl Trace {
    pub fn from_records(
        records: Vec<TraceRecord>,
        result: Option<ExecutionResult>,
        code_base: Option<u64>,
    ) -> Self {
        let m_calls = records.iter().filter(|r| r.is_call()).count() as u64;
        Trace {
            n_instructions: records.len() as u64,
            m_calls,
            records,
            result,
            code_base,
        }
    }

    pub fn calls(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.is_call())
    }

    /// Sorted unique executed instruction addresses.
    pub fn unique_addresses(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.records.iter().map(|r| r.addr).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Number of dynamic calls whose pushed return address is `ret`.
    pub fn call_count(&self, ret: u64) -> u64 {
        self.calls().filter(|r| r.return_addr == Some(ret)).count() as u64
    }
}

/// Execute `p` recording every completed instruction. The embedded result
/// is identical to an uninstrumented [`vm::run`].
pub fn trace(p: &Program, input: &[u8], cfg: &RunConfig) -> Result<Trace, VmError> {
    let (mut st, layout) = vm::boot(p, input, cfg)?;
    let mut records = Vec::new();
    let result = st.run(cfg.budget, |_, rec| {
        records.push(TraceRecord {
            seq: records.len() as u64,
            addr: rec.addr,
            len: rec.len() as u8,
            mnemonic: rec.insn.mnemonic().to_string(),
            return_addr: rec.return_addr,
            tick: Some(rec.tick),
        });
    });
    Ok(Trace::from_records(
        records,
        Some(result),
        Some(layout.code_base),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionTiming {
    pub symbol: String,
    /// Tick at which the CALL completed.
    pub enter_tick: u64,
    /// Tick at which the matching RET completed, or the final tick if the
    /// function never returned.
    pub exit_tick: u64,
    pub duration: u64,
    pub returned: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Timings {
    pub functions: Vec<FunctionTiming>,
    /// Addresses of RET instructions executed at call depth zero.
    pub unmatched_returns: Vec<u64>,
}

impl Timings {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("symbol,enter_tick,exit_tick,duration\n");
        for f in &self.functions {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                f.symbol, f.enter_tick, f.exit_tick, f.duration
            );
        }
        s
    }

    pub fn longest(&self) -> Option<&FunctionTiming> {
        self.functions
            .iter()
            .max_by_key(|f| (f.duration, std::cmp::Reverse(f.enter_tick)))
    }
}

/// Per-dynamic-call durations. Returns are matched to calls by call depth,
/// so runs with corrupted return addresses still produce timings.
pub fn function_timings(p: &Program, input: &[u8], cfg: &RunConfig) -> Result<Timings, VmError> {
    let (mut st, layout) = vm::boot(p, input, cfg)?;
    let mut open: Vec<(usize, u64)> = Vec::new();
    let mut out = Timings::default();
    let name_of = |target: u64| {
        let off = target.wrapping_sub(layout.code_base);
        p.symbol_at(off)
            .map(str::to_string)
            .unwrap_or_else(|| format!("sub_{off:x}"))
    };
    let result = st.run(cfg.budget, |state, rec| {
        if rec.is_call() {
            out.functions.push(FunctionTiming {
                symbol: name_of(state.pc),
                enter_tick: rec.tick,
                exit_tick: rec.tick,
                duration: 0,
                returned: false,
            });
            open.push((out.functions.len() - 1, rec.tick));
        } else if matches!(rec.insn, vm::Insn::Ret) {
            match open.pop() {
                Some((i, enter)) => {
                    let f = &mut out.functions[i];
                    f.exit_tick = rec.tick;
                    f.duration = rec.tick - enter;
                    f.returned = true;
                }
                None => out.unmatched_returns.push(rec.addr),
            }
        }
    });
    for (i, enter) in open {
        let f = &mut out.functions[i];
        f.exit_tick = result.ticks;
        f.duration = result.ticks - enter;
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("missing {TRACE_MAGIC} header")]
    BadMagic,
    #[error("line {0}: {1}")]
    Malformed(usize, String),
    #[error("line {0}: call record lacks ret= field")]
    CallWithoutReturn(usize),
}

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

fn parse_hex(s: &str) -> Option<u64> {
    let h = s.strip_prefix("0x")?;
    (!h.is_empty()
        && h.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
    .then(|| u64::from_str_radix(h, 16).ok())
    .flatten()
}

fn termination_text(t: &Termination) -> String {
    match *t {
        Termination::Exited(c) => format!("exited {c}"),
        Termination::InvalidInstruction(a) => format!("invalid_instruction {}", hex(a)),
        Termination::MemoryFault(a) => format!("memory_fault {}", hex(a)),
        Termination::StackFault => "stack_fault".into(),
        Termination::BudgetExhausted => "budget_exhausted".into(),
    }
}

/// Canonical text form. `parse_trace(&emit_trace(t)) == t`.
pub fn emit_trace(t: &Trace) -> String {
    let mut s = String::with_capacity(t.records.len() * 40);
    s.push_str(TRACE_MAGIC);
    s.push('\n');
    if let Some(b) = t.code_base {
        let _ = writeln!(s, "base {}", hex(b));
    }
    for r in &t.records {
        let _ = write!(s, "{} {} {} {}", r.seq, hex(r.addr), r.len, r.mnemonic);
        if let Some(ret) = r.return_addr {
            let _ = write!(s, " ret={}", hex(ret));
        }
        if let Some(tick) = r.tick {
            let _ = write!(s, " t={tick}");
        }
        s.push('\n');
    }
    if let Some(res) = &t.result {
        let _ = writeln!(
            s,
            "end {} ticks={} instrs={}",
            termination_text(&res.termination),
            res.ticks,
            res.instructions_executed
        );
        let enc = |b: &[u8]| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
        let _ = writeln!(s, "stdout {}", enc(&res.stdout));
        let _ = writeln!(s, "stderr {}", enc(&res.stderr));
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Trace, TraceParseError> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l == TRACE_MAGIC => {}
        _ => return Err(TraceParseError::BadMagic),
    }
    let mut code_base = None;
    let mut records = Vec::new();
    let mut result: Option<ExecutionResult> = None;
    for (i, line) in lines {
        let n = i + 1;
        let bad = |m: &str| TraceParseError::Malformed(n, m.to_string());
        let words: Vec<&str> = line.split(' ').collect();
        match words[0] {
            "base" if records.is_empty() && code_base.is_none() => {
                code_base = Some(
                    words
                        .get(1)
                        .and_then(|w| parse_hex(w))
                        .filter(|_| words.len() == 2)
                        .ok_or_else(|| bad("bad base"))?,
                );
            }
            "end" if result.is_none() => {
                result = Some(parse_end(&words[1..]).ok_or_else(|| bad("bad end line"))?)
            }
            "stdout" | "stderr" if result.is_some() => {
                let bytes = parse_bytes(words.get(1).copied().unwrap_or(""))
                    .filter(|_| words.len() <= 2)
                    .ok_or_else(|| bad("bad stream hex"))?;
                let res = result.as_mut().expect("checked");
                if words[0] == "stdout" {
                    res.stdout = bytes;
                } else {
                    res.stderr = bytes;
                }
            }
            _ if result.is_none() => records.push(parse_record(&words, n)?),
            _ => return Err(bad("unexpected line after end")),
        }
    }
    Ok(Trace::from_records(records, result, code_base))
}

fn parse_bytes(h: &str) -> Option<Vec<u8>> {
    if h.len() % 2 != 0 {
        return None;
    }
    (0..h.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(h.get(i..i + 2)?, 16).ok())
        .collect()
}

fn parse_end(words: &[&str]) -> Option<ExecutionResult> {
    let (termination, rest) = match words {
        ["exited", c, rest @ ..] => (Termination::Exited(c.parse().ok()?), rest),
        ["invalid_instruction", a, rest @ ..] => {
            (Termination::InvalidInstruction(parse_hex(a)?), rest)
        }
        ["memory_fault", a, rest @ ..] => (Termination::MemoryFault(parse_hex(a)?), rest),
        ["stack_fault", rest @ ..] => (Termination::StackFault, rest),
        ["budget_exhausted", rest @ ..] => (Termination::BudgetExhausted, rest),
        _ => return None,
    };
    let [ticks, instrs] = rest else { return None };
    Some(ExecutionResult {
        termination,
        ticks: ticks.strip_prefix("ticks=")?.parse().ok()?,
        instructions_executed: instrs.strip_prefix("instrs=")?.parse().ok()?,
        stdout: Vec::new(),
        stderr: Vec::new(),
    })
}

fn parse_record(words: &[&str], line: usize) -> Result<TraceRecord, TraceParseError> {
    let bad = |m: &str| TraceParseError::Malformed(line, m.to_string());
    if words.len() < 4 || words.len() > 6 {
        return Err(bad("expected `SEQ ADDR LEN MNEMONIC [ret=ADDR] [t=TICK]`"));
    }
    let seq: u64 = words[0].parse().map_err(|_| bad("bad seq"))?;
    let addr = parse_hex(words[1]).ok_or_else(|| bad("bad address"))?;
    let len: u8 = words[2].parse().map_err(|_| bad("bad length"))?;
    let mnemonic = words[3];
    if mnemonic.is_empty()
        || !mnemonic.bytes().all(|b| b.is_ascii_graphic())
        || mnemonic.contains('=')
    {
        return Err(bad("bad mnemonic"));
    }
    let mut return_addr = None;
    let mut tick = None;
    for w in &words[4..] {
        if let Some(v) = w
            .strip_prefix("ret=")
            .filter(|_| return_addr.is_none() && tick.is_none())
        {
            return_addr = Some(parse_hex(v).ok_or_else(|| bad("bad ret="))?);
        } else if let Some(v) = w.strip_prefix("t=").filter(|_| tick.is_none()) {
            tick = Some(v.parse().map_err(|_| bad("bad t="))?);
        } else {
            return Err(bad("unexpected field"));
        }
    }
    if mnemonic == "call" && return_addr.is_none() {
        return Err(TraceParseError::CallWithoutReturn(line));
    }
    Ok(TraceRecord {
        seq,
        addr,
        len,
        mnemonic: mnemonic.to_string(),
        return_addr,
        tick,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::assemble;

    #[test]
    fn halt_trace() {
        let t = trace(&assemble("halt 0").unwrap(), b"", &RunConfig::default()).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].mnemonic, "halt");
        assert_eq!(t.result.unwrap().termination, Termination::Exited(0));
    }

    #[test]
    fn call_record_carries_return() {
        let t = trace(
            &assemble("call f\nhalt 0\nf: ret").unwrap(),
            b"",
            &RunConfig::default(),
        )
        .unwrap();
        let base = t.code_base.unwrap();
        assert!(t.records[0].is_call());
        assert_eq!(t.records[0].return_addr, Some(base + 5));
        assert_eq!((t.n_instructions, t.m_calls), (3, 1));
    }

    #[test]
    fn parses_spec_line() {
        let t = parse_trace("LFTRACE1\n12 0x1004 5 call ret=0x1009\n").unwrap();
        let r = &t.records[0];
        assert_eq!(
            (r.seq, r.addr, r.len, r.return_addr),
            (12, 0x1004, 5, Some(0x1009))
        );
        assert_eq!(emit_trace(&t), "LFTRACE1\n12 0x1004 5 call ret=0x1009\n");
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_trace("x"), Err(TraceParseError::BadMagic));
        assert_eq!(
            parse_trace("LFTRACE1\n0 0x10 5 call"),
            Err(TraceParseError::CallWithoutReturn(2))
        );
        assert!(matches!(
            parse_trace("LFTRACE1\n0 0x10 5"),
            Err(TraceParseError::Malformed(2, _))
        ));
        assert!(matches!(
            parse_trace("LFTRACE1\n0 0X10 5 nop"),
            Err(TraceParseError::Malformed(2, _))
        ));
        assert!(matches!(
            parse_trace("LFTRACE1\n0  0x10 5 nop"),
            Err(TraceParseError::Malformed(2, _))
        ));
    }

    #[test]
    fn leaf_duration() {
        let p = assemble("main: call f\nhalt 0\nf: nop\nnop\nret").unwrap();
        let t = function_timings(&p, b"", &RunConfig::default()).unwrap();
        assert_eq!(t.functions.len(), 1);
        assert_eq!(t.functions[0].symbol, "f");
        assert_eq!(t.functions[0].duration, 3);
        assert!(t.unmatched_returns.is_empty());
    }

    #[test]
    fn wait_dominates_duration() {
        let p = assemble("main: call f\nhalt 0\nf: movi r0, 10000\nsys 3\nret").unwrap();
        let t = function_timings(&p, b"", &RunConfig::default()).unwrap();
        assert!(t.functions[0].duration >= 10_000);
        assert_eq!(
            t.to_csv().lines().next(),
            Some("symbol,enter_tick,exit_tick,duration")
        );
    }

    #[test]
    fn unmatched_return_reported() {
        let p = assemble("main: lea r0, [pc+1]\npush r0\nret\nhalt 0").unwrap();
        let t = function_timings(&p, b"", &RunConfig::default()).unwrap();
        assert_eq!(t.unmatched_returns.len(), 1);
    }
}
