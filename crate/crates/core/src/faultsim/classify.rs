//! Ordered classification rules over fault outcomes.
//!
//! One rule per line, `cond && cond => label`, evaluated top to bottom; the
//! first rule whose conditions all hold decides the label. A final
//! `* => benign` rule is implied. Conditions:
//!
//! ```text
//! exit==N  exit!=N        exited with (or exited with a code other than) N
//! stdout~"text"           stdout contains text (same escapes as .data)
//! stdout!~"text"          stdout does not contain text
//! stderr~"text"  stderr!~"text"
//! term==KIND              exited | invalid_instruction | memory_fault |
//!                         stack_fault | budget_exhausted | crash | hang
//! *                       always
//! ```

use std::fmt;

use serde::Serialize;

use super::FaultOutcome;
use crate::vm::{ExecutionResult, Termination};

pub const BENIGN: &str = "benign";
pub const CRASH: &str = "crash";
pub const HANG: &str = "hang";

/// Labels that describe robustness failures rather than exploitation.
pub fn is_exploit_label(label: &str) -> bool {
    !matches!(label, BENIGN | CRASH | HANG)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TermKind {
    Exited,
    InvalidInstruction,
    MemoryFault,
    StackFault,
    BudgetExhausted,
    /// Any of the three fault terminations.
    Crash,
    /// Alias of `BudgetExhausted`.
    Hang,
}

impl TermKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "exited" => TermKind::Exited,
            "invalid_instruction" => TermKind::InvalidInstruction,
            "memory_fault" => TermKind::MemoryFault,
            "stack_fault" => TermKind::StackFault,
            "budget_exhausted" => TermKind::BudgetExhausted,
            "crash" => TermKind::Crash,
            "hang" => TermKind::Hang,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            TermKind::Exited => "exited",
            TermKind::InvalidInstruction => "invalid_instruction",
            TermKind::MemoryFault => "memory_fault",
            TermKind::StackFault => "stack_fault",
            TermKind::BudgetExhausted => "budget_exhausted",
            TermKind::Crash => "crash",
            TermKind::Hang => "hang",
        }
    }

    fn matches(&self, t: &Termination) -> bool {
        match self {
            TermKind::Crash => t.is_crash(),
            TermKind::Hang | TermKind::BudgetExhausted => *t == Termination::BudgetExhausted,
            k => k.name() == t.kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition {
    Always,
    ExitEq(u8),
    ExitNe(u8),
    StdoutContains(Vec<u8>),
    StdoutLacks(Vec<u8>),
    StderrContains(Vec<u8>),
    StderrLacks(Vec<u8>),
    Term(TermKind),
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

impl Condition {
    pub fn holds(&self, r: &ExecutionResult) -> bool {
        match self {
            Condition::Always => true,
            Condition::ExitEq(c) => r.termination == Termination::Exited(*c),
            Condition::ExitNe(c) => matches!(r.termination, Termination::Exited(x) if x != *c),
            Condition::StdoutContains(s) => contains(&r.stdout, s),
            Condition::StdoutLacks(s) => !contains(&r.stdout, s),
            Condition::StderrContains(s) => contains(&r.stderr, s),
            Condition::StderrLacks(s) => !contains(&r.stderr, s),
            Condition::Term(k) => k.matches(&r.termination),
        }
    }
}

fn quote(bytes: &[u8]) -> String {
    let mut s = String::from("\"");
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s.push('"');
    s
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Always => f.write_str("*"),
            Condition::ExitEq(c) => write!(f, "exit=={c}"),
            Condition::ExitNe(c) => write!(f, "exit!={c}"),
            Condition::StdoutContains(s) => write!(f, "stdout~{}", quote(s)),
            Condition::StdoutLacks(s) => write!(f, "stdout!~{}", quote(s)),
            Condition::StderrContains(s) => write!(f, "stderr~{}", quote(s)),
            Condition::StderrLacks(s) => write!(f, "stderr!~{}", quote(s)),
            Condition::Term(k) => write!(f, "term=={}", k.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationRule {
    pub conditions: Vec<Condition>,
    pub label: String,
}

impl ClassificationRule {
    pub fn new(conditions: Vec<Condition>, label: &str) -> Self {
        ClassificationRule {
            conditions,
            label: label.to_string(),
        }
    }

    pub fn matches(&self, r: &ExecutionResult) -> bool {
        self.conditions.iter().all(|c| c.holds(r))
    }
}

impl fmt::Display for ClassificationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let conds: Vec<String> = self.conditions.iter().map(|c| c.to_string()).collect();
        write!(f, "{} => {}", conds.join(" && "), self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub label: String,
    /// Index of the deciding rule; `None` for the implicit default.
    pub rule: Option<usize>,
}

/// Rules in evaluation order; the implicit default labels everything else
/// benign.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleSet {
    pub rules: Vec<ClassificationRule>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("rule line {line}: {message}")]
pub struct RuleError {
    pub line: usize,
    pub message: String,
}

impl RuleSet {
    pub fn new(rules: Vec<ClassificationRule>) -> Self {
        RuleSet { rules }
    }

    /// Crash and hang rules followed by `extra`.
    pub fn with_defaults(extra: Vec<ClassificationRule>) -> Self {
        let mut rules = vec![
            ClassificationRule::new(vec![Condition::Term(TermKind::Hang)], HANG),
            ClassificationRule::new(vec![Condition::Term(TermKind::Crash)], CRASH),
        ];
        rules.extend(extra);
        RuleSet { rules }
    }

    pub fn classify_result(&self, r: &ExecutionResult) -> Classification {
        match self.rules.iter().position(|rule| rule.matches(r)) {
            Some(i) => Classification {
                label: self.rules[i].label.clone(),
                rule: Some(i),
            },
            None => Classification {
                label: BENIGN.to_string(),
                rule: None,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            rules.push(parse_rule(line).map_err(|message| RuleError {
                line: i + 1,
                message,
            })?);
        }
        Ok(RuleSet { rules })
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

pub fn classify(outcome: &FaultOutcome, rules: &RuleSet) -> Classification {
    rules.classify_result(&outcome.result)
}

pub fn parse_rule(line: &str) -> Result<ClassificationRule, String> {
    let (lhs, label) = line
        .rsplit_once("=>")
        .ok_or("expected `conditions => label`")?;
    let label = label.trim();
    if label.is_empty()
        || !label
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    {
        return Err(format!("bad label `{label}`"));
    }
    let conditions = split_conjunction(lhs)?
        .into_iter()
        .map(parse_condition)
        .collect::<Result<Vec<_>, _>>()?;
    if conditions.is_empty() {
        return Err("rule has no conditions".into());
    }
    Ok(ClassificationRule {
        conditions,
        label: label.to_string(),
    })
}

/// Split on `&&` outside of quoted strings.
fn split_conjunction(s: &str) -> Result<Vec<&str>, String> {
    let mut parts = Vec::new();
    let bytes = s.as_bytes();
    let (mut start, mut i, mut in_str) = (0, 0, false);
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if in_str => i += 1,
            b'"' => in_str = !in_str,
            b'&' if !in_str && bytes.get(i + 1) == Some(&b'&') => {
                parts.push(s[start..i].trim());
                start = i + 2;
                i += 1;
            }
            _ => {}
        }
        i += 1;
    }
    if in_str {
        return Err("unterminated string".into());
    }
    parts.push(s[start..].trim());
    if parts.iter().any(|p| p.is_empty()) {
        return Err("empty condition".into());
    }
    Ok(parts)
}

fn unquote(s: &str) -> Result<Vec<u8>, String> {
    let body = s
        .strip_prefix('"')
        .and_then(|x| x.strip_suffix('"'))
        .ok_or_else(|| format!("expected quoted text, got `{s}`"))?;
    let mut out = Vec::new();
    let mut it = body.bytes();
    while let Some(b) = it.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        out.push(match it.next().ok_or("dangling escape")? {
            b'n' => b'\n',
            b't' => b'\t',
            b'0' => 0,
            b'\\' => b'\\',
            b'"' => b'"',
            b'x' => {
                let h = [it.next().ok_or("short \\x")?, it.next().ok_or("short \\x")?];
                u8::from_str_radix(std::str::from_utf8(&h).map_err(|_| "bad \\x")?, 16)
                    .map_err(|_| "bad \\x")?
            }
            c => return Err(format!("unknown escape \\{}", c as char)),
        });
    }
    Ok(out)
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    if s == "*" {
        return Ok(Condition::Always);
    }
    let code = |v: &str| {
        v.trim()
            .parse::<u8>()
            .map_err(|_| format!("bad exit code `{v}`"))
    };
    if let Some(v) = s.strip_prefix("exit==") {
        return Ok(Condition::ExitEq(code(v)?));
    }
    if let Some(v) = s.strip_prefix("exit!=") {
        return Ok(Condition::ExitNe(code(v)?));
    }
    if let Some(v) = s.strip_prefix("term==") {
        return TermKind::parse(v.trim())
            .map(Condition::Term)
            .ok_or_else(|| format!("unknown termination `{v}`"));
    }
    for (prefix, ctor) in [
        (
            "stdout!~",
            Condition::StdoutLacks as fn(Vec<u8>) -> Condition,
        ),
        ("stdout~", Condition::StdoutContains),
        ("stderr!~", Condition::StderrLacks),
        ("stderr~", Condition::StderrContains),
    ] {
        if let Some(v) = s.strip_prefix(prefix) {
            return Ok(ctor(unquote(v.trim())?));
        }
    }
    Err(format!("unknown condition `{s}`"))
}
