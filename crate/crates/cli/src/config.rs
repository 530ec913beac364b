//! Line-oriented `key = value` scan configuration.
//!
//! ```text
//! # comment
//! include = common.cfg     # path relative to this file
//! fixture = authgate
//! d = 1
//! step2 = on
//! rule = exit==0 => misauthentication
//! ```
//!
//! Later assignments override earlier ones, except `rule`, which appends.
//! Unknown keys are errors.

use std::path::{Path, PathBuf};

use retflip::corpus;
use retflip::faultsim::{CandidateMode, FaultMode, RuleSet, ScanConfig};
use retflip::timing::StopModel;
use retflip::vm::Program;

use crate::{load_program, CliError};

pub const KEYS: &[&str] = &[
    "include",
    "fixture",
    "program",
    "correct",
    "incorrect",
    "candidate_mode",
    "d",
    "low_bits_only",
    "step2",
    "rule",
    "fault_mode",
    "budget",
    "degradation",
    "seed",
    "stack_pages",
    "workers",
    "stop_model",
    "stop_stddev",
    "min_hit_probability",
];

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// Directory relative paths in `value` resolve against.
    pub dir: PathBuf,
    pub origin: String,
}

pub fn read_config(path: &Path) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    read_into(path, &mut Vec::new(), &mut out)?;
    Ok(out)
}

fn read_into(path: &Path, stack: &mut Vec<PathBuf>, out: &mut Vec<Entry>) -> Result<(), CliError> {
    let canon = path
        .canonicalize()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(CliError::Config(format!(
            "{}: include cycle",
            path.display()
        )));
    }
    if stack.len() >= MAX_INCLUDE_DEPTH {
        return Err(CliError::Config(format!(
            "{}: includes nested too deeply",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&canon)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    stack.push(canon);
    for entry in parse_text(&text, &dir, &path.display().to_string())? {
        if entry.key == "include" {
            read_into(&dir.join(&entry.value), stack, out)?;
        } else {
            out.push(entry);
        }
    }
    stack.pop();
    Ok(())
}

/// Parse one file's worth of entries without following includes.
pub fn parse_text(text: &str, dir: &Path, name: &str) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = format!("{name}:{}", i + 1);
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{origin}: expected `key = value`"
            )));
        };
        let (key, value) = (k.trim(), v.trim());
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("{origin}: unknown key `{key}`")));
        }
        out.push(Entry {
            key: key.into(),
            value: value.into(),
            dir: dir.to_path_buf(),
            origin,
        });
    }
    Ok(out)
}

/// `#` starts a comment unless it sits inside a double-quoted string.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

/// A fully resolved scan: program, both inputs and pipeline settings.
#[derive(Clone, Debug)]
pub struct ScanSetup {
    pub program: Program,
    pub correct: Vec<u8>,
    pub incorrect: Vec<u8>,
    pub config: ScanConfig,
}

fn bad(e: &Entry, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {}: {msg}", e.origin, e.key))
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T, CliError> {
    e.value
        .replace('_', "")
        .parse()
        .map_err(|_| bad(e, format!("not a number: `{}`", e.value)))
}

fn flag(e: &Entry) -> Result<bool, CliError> {
    match e.value.as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        v => Err(bad(e, format!("expected on/off, got `{v}`"))),
    }
}

fn read_file(e: &Entry) -> Result<Vec<u8>, CliError> {
    let p = e.dir.join(&e.value);
    std::fs::read(&p).map_err(|err| bad(e, format!("{}: {err}", p.display())))
}

pub fn resolve(entries: &[Entry]) -> Result<ScanSetup, CliError> {
    let mut program: Option<&Entry> = None;
    let mut fixture = None;
    let (mut correct, mut incorrect) = (None, None);
    let mut rules = Vec::new();
    let mut cfg = ScanConfig::default();
    let mut step2 = None;
    let mut stop = cfg.stop_model;
    let mut stddev = None;

    for e in entries {
        match e.key.as_str() {
            "fixture" => {
                fixture = Some(
                    corpus::get(&e.value)
                        .ok_or_else(|| bad(e, format!("no fixture `{}`", e.value)))?,
                );
                program = None;
            }
            "program" => {
                program = Some(e);
                fixture = None;
            }
            "correct" => correct = Some(read_file(e)?),
            "incorrect" => incorrect = Some(read_file(e)?),
            "candidate_mode" => {
                cfg.candidate_mode = match e.value.as_str() {
                    "matched" => CandidateMode::Matched,
                    "exhaustive_offset" => CandidateMode::ExhaustiveOffset,
                    v => {
                        return Err(bad(
                            e,
                            format!("expected matched or exhaustive_offset, got `{v}`"),
                        ))
                    }
                }
            }
            "d" => {
                cfg.d = num(e)?;
                if !(1..=3).contains(&cfg.d) {
                    return Err(bad(e, "must be 1, 2 or 3"));
                }
            }
            "low_bits_only" => cfg.low_bits_only = flag(e)?,
            "step2" => step2 = Some(flag(e)?),
            "rule" => rules.push(retflip::faultsim::parse_rule(&e.value).map_err(|m| bad(e, m))?),
            "fault_mode" => {
                cfg.fault_mode = match e.value.as_str() {
                    "direct_jump" => FaultMode::DirectJump,
                    "memory_corruption" => FaultMode::MemoryCorruption,
                    v => {
                        return Err(bad(
                            e,
                            format!("expected direct_jump or memory_corruption, got `{v}`"),
                        ))
                    }
                }
            }
            "budget" => {
                cfg.run.budget = num(e)?;
                if cfg.run.budget == 0 {
                    return Err(bad(e, "must be positive"));
                }
            }
            "degradation" => {
                cfg.run.degradation = num(e)?;
                if cfg.run.degradation == 0 {
                    return Err(bad(e, "must be positive"));
                }
            }
            "seed" => cfg.run.seed = num(e)?,
            "stack_pages" => {
                cfg.run.stack_pages = num(e)?;
                if cfg.run.stack_pages == 0 {
                    return Err(bad(e, "must be positive"));
                }
            }
            "workers" => cfg.workers = num(e)?,
            "stop_model" => {
                stop =
                    StopModel::preset(&e.value).ok_or_else(|| bad(e, "expected bash or python"))?
            }
            "stop_stddev" => {
                let s: f64 = num(e)?;
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(bad(e, "must be a finite non-negative number"));
                }
                stddev = Some(s);
            }
            "min_hit_probability" => {
                cfg.min_hit_probability = num(e)?;
                if !(0.0..=1.0).contains(&cfg.min_hit_probability) {
                    return Err(bad(e, "must lie in [0, 1]"));
                }
            }
            other => return Err(bad(e, format!("`{other}` is not valid here"))),
        }
    }
    cfg.stop_model = StopModel {
        stddev: stddev.unwrap_or(stop.stddev),
        ..stop
    };

    let (prog, def_correct, def_incorrect) = match (fixture, program) {
        (Some(f), _) => {
            cfg.step2 = f.step2;
            (
                f.program(),
                Some(f.correct.to_vec()),
                Some(f.incorrect.to_vec()),
            )
        }
        (None, Some(e)) => (
            load_program(&e.dir.join(&e.value).to_string_lossy())?,
            None,
            None,
        ),
        (None, None) => return Err(CliError::Config("no `fixture` or `program` given".into())),
    };
    if let Some(s) = step2 {
        cfg.step2 = s;
    }
    cfg.rules = if rules.is_empty() {
        fixture.map_or_else(|| RuleSet::with_defaults(Vec::new()), |f| f.rule_set())
    } else {
        RuleSet::with_defaults(rules)
    };
    let missing = |k: &str| CliError::Config(format!("no `{k}` input given"));
    Ok(ScanSetup {
        program: prog,
        correct: correct.or(def_correct).ok_or_else(|| missing("correct"))?,
        incorrect: incorrect
            .or(def_incorrect)
            .ok_or_else(|| missing("incorrect"))?,
        config: cfg,
    })
}
