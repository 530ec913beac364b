//! Deterministic 64-bit toy machine.
//!
//! `CALL` pushes the address of the following instruction onto a stack held
//! in paged memory and `RET` pops it back into `pc`, so every dynamic call
//! leaves a return address sitting in ordinary memory for its whole lifetime.

mod asm;
mod isa;
mod machine;
mod object;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use asm::{assemble, assemble_at, disassemble, AsmError, AsmErrorKind};
pub use isa::{decode, DecodeError, Insn, Reg, MAX_INSN_LEN};
pub use machine::{ExecRecord, MachineState, Memory, StepEvent};
pub use object::{parse_object, write_object, ObjectError, OBJECT_MAGIC};

pub const PAGE_SIZE: u64 = 4096;
/// Canonical (un-randomized) load address of program images.
pub const DEFAULT_BASE: u64 = 0x5555_5555_4000;
/// Highest possible stack top before randomization.
pub const STACK_TOP: u64 = 0x7fff_ffff_f000;
/// Number of page-granular slots the code base is randomized over.
pub const ASLR_CODE_SLOTS: u64 = 1 << 16;
/// Number of page-granular slots the stack top is randomized over.
pub const ASLR_STACK_SLOTS: u64 = 1 << 20;
const LOAD_ATTEMPTS: usize = 64;

pub const DEFAULT_BUDGET: u64 = 1_000_000;
pub const DEFAULT_STACK_PAGES: u64 = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VmError {
    #[error("program invariant violated: {0}")]
    InvalidProgram(String),
    #[error("stack_pages must be at least 1")]
    NoStack,
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("degradation factor must be at least 1")]
    BadDegradation,
    #[error("could not place code and stack without overlap after {0} attempts")]
    LayoutCollision(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSegment {
    pub offset: u64,
    pub bytes: Vec<u8>,
}

/// An assembled machine image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub image: Vec<u8>,
    pub base_addr_canonical: u64,
    pub entry_offset: u64,
    pub symbols: BTreeMap<String, u64>,
    pub data_segments: Vec<DataSegment>,
}

impl Program {
    pub fn validate(&self) -> Result<(), VmError> {
        let len = self.image.len() as u64;
        let bad = |m: String| Err(VmError::InvalidProgram(m));
        if self.entry_offset >= len {
            return bad(format!(
                "entry {:#x} outside image of {len} bytes",
                self.entry_offset
            ));
        }
        if self.base_addr_canonical % PAGE_SIZE != 0 {
            return bad(format!(
                "base {:#x} not page aligned",
                self.base_addr_canonical
            ));
        }
        if let Some((name, off)) = self.symbols.iter().find(|(_, &o)| o >= len) {
            return bad(format!("symbol {name} at {off:#x} outside image"));
        }
        for seg in &self.data_segments {
            let end = seg.offset + seg.bytes.len() as u64;
            if end > len || self.image[seg.offset as usize..end as usize] != seg.bytes[..] {
                return bad(format!(
                    "data segment at {:#x} does not match image",
                    seg.offset
                ));
            }
        }
        Ok(())
    }

    /// Symbol defined at `offset`, if any (first in name order).
    pub fn symbol_at(&self, offset: u64) -> Option<&str> {
        self.symbols
            .iter()
            .find(|(_, &o)| o == offset)
            .map(|(n, _)| n.as_str())
    }

    pub fn code_pages(&self) -> u64 {
        (self.image.len() as u64).div_ceil(PAGE_SIZE).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadLayout {
    pub aslr_seed: u64,
    pub code_base: u64,
    pub stack_base: u64,
    pub stack_pages: u64,
}

impl LoadLayout {
    pub fn stack_limit(&self) -> u64 {
        self.stack_base - self.stack_pages * PAGE_SIZE
    }

    /// Start addresses of every mapped region.
    pub fn region_bases(&self) -> [u64; 3] {
        [self.code_base, self.stack_limit(), self.stack_base]
    }
}

/// Knobs shared by every execution of a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: u64,
    pub degradation: u64,
    pub stack_pages: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            budget: DEFAULT_BUDGET,
            degradation: 1,
            stack_pages: DEFAULT_STACK_PAGES,
        }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), VmError> {
        if self.budget == 0 {
            return Err(VmError::ZeroBudget);
        }
        if self.degradation == 0 {
            return Err(VmError::BadDegradation);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Termination {
    Exited(u8),
    InvalidInstruction(u64),
    MemoryFault(u64),
    StackFault,
    BudgetExhausted,
}

impl Termination {
    /// Short stable name used by reports and classification rules.
    pub fn kind(&self) -> &'static str {
        match self {
            Termination::Exited(_) => "exited",
            Termination::InvalidInstruction(_) => "invalid_instruction",
            Termination::MemoryFault(_) => "memory_fault",
            Termination::StackFault => "stack_fault",
            Termination::BudgetExhausted => "budget_exhausted",
        }
    }

    pub fn exit_code(&self) -> Option<u8> {
        match *self {
            Termination::Exited(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_crash(&self) -> bool {
        matches!(
            self,
            Termination::InvalidInstruction(_)
                | Termination::MemoryFault(_)
                | Termination::StackFault
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub termination: Termination,
    pub ticks: u64,
    pub instructions_executed: u64,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

/// Map `p` at a seeded randomized layout. The same seed always yields the
/// same layout; the low 12 bits of the code base are never randomized.
pub fn load(
    p: &Program,
    seed: u64,
    stack_pages: u64,
) -> Result<(MachineState, LoadLayout), VmError> {
    p.validate()?;
    if stack_pages == 0 {
        return Err(VmError::NoStack);
    }
    let layout = choose_layout(p, seed, stack_pages)?;
    Ok((MachineState::new(p, layout), layout))
}

fn choose_layout(p: &Program, seed: u64, stack_pages: u64) -> Result<LoadLayout, VmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..LOAD_ATTEMPTS {
        let u = rng.random_range(0..ASLR_CODE_SLOTS);
        let v = rng.random_range(0..ASLR_STACK_SLOTS);
        let code_base = p.base_addr_canonical.wrapping_add(u * PAGE_SIZE);
        let Some(stack_base) = STACK_TOP.checked_sub(v * PAGE_SIZE) else {
            continue;
        };
        let Some(code_end) = code_base.checked_add(p.code_pages() * PAGE_SIZE) else {
            continue;
        };
        let Some(stack_limit) = stack_base.checked_sub(stack_pages * PAGE_SIZE) else {
            continue;
        };
        if code_base < stack_base && stack_limit < code_end {
            continue;
        }
        return Ok(LoadLayout {
            aslr_seed: seed,
            code_base,
            stack_base,
            stack_pages,
        });
    }
    Err(VmError::LayoutCollision(LOAD_ATTEMPTS))
}

/// Load `p` with `cfg` and install `input` as the readable byte stream.
pub fn boot(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
) -> Result<(MachineState, LoadLayout), VmError> {
    cfg.check()?;
    let (mut st, layout) = load(p, cfg.seed, cfg.stack_pages)?;
    st.set_input(input);
    st.degradation = cfg.degradation;
    Ok((st, layout))
}

/// Execute `p` to termination or until `cfg.budget` ticks have elapsed.
pub fn run(p: &Program, input: &[u8], cfg: &RunConfig) -> Result<ExecutionResult, VmError> {
    let (mut st, _) = boot(p, input, cfg)?;
    Ok(st.run(cfg.budget, |_, _| {}))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(src: &str) -> Program {
        assemble(src).unwrap()
    }

    #[test]
    fn exit_zero() {
        let r = run(&prog("movi r0, 0\nsys 0"), b"", &RunConfig::default()).unwrap();
        assert_eq!(r.termination, Termination::Exited(0));
        assert!(r.stdout.is_empty());
        assert_eq!(r.instructions_executed, 2);
    }

    #[test]
    fn infinite_loop_hits_watchdog() {
        let cfg = RunConfig {
            budget: 10_000,
            ..RunConfig::default()
        };
        let r = run(&prog("l: jmp l"), b"", &cfg).unwrap();
        assert_eq!(r.termination, Termination::BudgetExhausted);
        assert_eq!(r.ticks, 10_000);
    }

    #[test]
    fn same_seed_same_state() {
        let p = prog("halt 3");
        let (a, la) = load(&p, 42, 4).unwrap();
        let (b, lb) = load(&p, 42, 4).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la.code_base % PAGE_SIZE, p.base_addr_canonical % PAGE_SIZE);
        assert_eq!(a.pc, la.code_base + p.entry_offset);
        assert_eq!(a.sp, la.stack_base);
    }

    #[test]
    fn seeds_spread_code_base() {
        let p = prog("halt 0");
        let bases: std::collections::BTreeSet<u64> = (0..1000)
            .map(|s| load(&p, s, 1).unwrap().1.code_base)
            .collect();
        assert!(bases.len() >= 2);
        assert!(bases
            .iter()
            .all(|b| b % PAGE_SIZE == DEFAULT_BASE % PAGE_SIZE));
    }

    #[test]
    fn rejects_bad_knobs() {
        let p = prog("halt 0");
        assert_eq!(load(&p, 0, 0).unwrap_err(), VmError::NoStack);
        let cfg = RunConfig {
            budget: 0,
            ..RunConfig::default()
        };
        assert_eq!(run(&p, b"", &cfg).unwrap_err(), VmError::ZeroBudget);
        let mut bad = p.clone();
        bad.entry_offset = 9;
        assert!(matches!(bad.validate(), Err(VmError::InvalidProgram(_))));
        bad.entry_offset = 0;
        bad.base_addr_canonical = 0x1001;
        assert!(matches!(bad.validate(), Err(VmError::InvalidProgram(_))));
    }
}
