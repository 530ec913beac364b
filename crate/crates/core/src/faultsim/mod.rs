//! Re-execution with a simulated bit flip on a stored return address.

mod classify;
mod scan;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use classify::{
    classify, is_exploit_label, parse_rule, Classification, ClassificationRule, Condition,
    RuleError, RuleSet, TermKind, BENIGN, CRASH, HANG,
};
pub use scan::{scan, scan_candidates, CandidateMode, ScanConfig, ScanError};

use crate::analysis::AddressPair;
use crate::tracer::Trace;
use crate::vm::{self, ExecutionResult, Insn, Program, RunConfig, StepEvent, VmError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// The RET that pops the targeted slot lands on `addr_dest` instead of
    /// `addr_src`.
    DirectJump,
    /// The stored slot is XORed with the pair mask the instant it is pushed.
    MemoryCorruption,
}

impl FaultMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultMode::DirectJump => "direct_jump",
            FaultMode::MemoryCorruption => "memory_corruption",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub pair: AddressPair,
    /// 0-based index among the dynamic calls that push `pair.addr_src`.
    pub occurrence: u64,
    pub mode: FaultMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultOutcome {
    pub injection: Injection,
    /// The targeted dynamic call was reached.
    pub fired: bool,
    pub result: ExecutionResult,
    pub instructions_executed: u64,
    /// Unique executed addresses shared with the correct-input trace.
    pub matched_correct_trace: Option<u64>,
    /// Some instruction other than the final pop accessed the targeted slot
    /// between push and pop.
    pub slot_touched: bool,
    /// Address execution continued at after the targeted slot was popped.
    pub resumed_at: Option<u64>,
}

/// Run `p` with `inj` applied. The fault is armed on the `occurrence`-th
/// dynamic CALL that pushes `inj.pair.addr_src`; if that call is never
/// reached the run is left untouched and `fired` is false.
pub fn inject_and_run(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    inj: &Injection,
    correct_addrs: Option<&BTreeSet<u64>>,
) -> Result<FaultOutcome, VmError> {
    let (mut st, _) = vm::boot(p, input, cfg)?;
    let src = inj.pair.addr_src;
    let mut seen = 0u64;
    let mut fired = false;
    let mut slot: Option<u64> = None;
    let mut slot_touched = false;
    let mut resumed_at = None;
    let mut visited: HashSet<u64> = HashSet::new();
    let track = correct_addrs.is_some();

    loop {
        let (rec, done) = match st.step_within(cfg.budget) {
            StepEvent::Executed(rec) => (Some(rec), false),
            StepEvent::Terminated { record, .. } => (record, true),
        };
        if let Some(rec) = rec {
            if track {
                visited.insert(rec.addr);
            }
            if !fired && rec.return_addr == Some(src) {
                if seen == inj.occurrence {
                    fired = true;
                    let at = st.sp;
                    if inj.mode == FaultMode::MemoryCorruption {
                        let v = st.memory.read_u64(at).expect("slot just written");
                        st.memory
                            .write_u64(at, v ^ inj.pair.mask)
                            .expect("slot mapped");
                    }
                    slot = Some(at);
                    st.watch = Some(at);
                    st.watch_hits = 0;
                }
                seen += 1;
            } else if let Some(at) = slot.filter(|&at| st.sp > at) {
                let popped_by_ret = matches!(rec.insn, Insn::Ret) && st.sp == at + 8;
                slot_touched |= st.watch_hits > u64::from(popped_by_ret);
                if popped_by_ret && inj.mode == FaultMode::DirectJump && st.pc == src {
                    st.pc = inj.pair.addr_dest;
                }
                resumed_at = popped_by_ret.then_some(st.pc);
                slot = None;
                st.watch = None;
            }
        }
        if done {
            break;
        }
    }
    if slot.is_some() {
        slot_touched |= st.watch_hits > 0;
    }
    let result = st.result();
    Ok(FaultOutcome {
        injection: inj.clone(),
        fired,
        instructions_executed: result.instructions_executed,
        matched_correct_trace: correct_addrs
            .map(|c| visited.iter().filter(|a| c.contains(a)).count() as u64),
        result,
        slot_touched,
        resumed_at,
    })
}

/// Outcomes for occurrences `0..=N`, where `N` is how many times the call
/// pushing `pair.addr_src` executed in `baseline`. The last attempt never
/// fires.
pub fn sweep_occurrences(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    pair: &AddressPair,
    mode: FaultMode,
    baseline: &Trace,
    correct_addrs: Option<&BTreeSet<u64>>,
) -> Result<Vec<FaultOutcome>, VmError> {
    let n = baseline.call_count(pair.addr_src);
    (0..=n)
        .map(|occurrence| {
            let inj = Injection {
                pair: pair.clone(),
                occurrence,
                mode,
            };
            inject_and_run(p, input, cfg, &inj, correct_addrs)
        })
        .collect()
}
