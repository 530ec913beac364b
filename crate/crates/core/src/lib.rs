//! Return-address bit-flip gadget scanning over a deterministic toy machine.
//!
//! The pipeline traces a victim program under a correct and an incorrect
//! input, differences the traces, pairs every stored return address with
//! executed addresses a few bit flips away, re-runs the program with each
//! flip applied, classifies what happened, and finally checks how long each
//! vulnerable return address stays resident on the stack.

pub mod analysis;
pub mod corpus;
pub mod faultsim;
pub mod memmodel;
pub mod report;
pub mod timing;
pub mod tracer;
pub mod vm;

pub use analysis::{AddressPair, DiffSet, Direction};
pub use faultsim::{FaultMode, FaultOutcome, Injection, RuleSet, ScanConfig};
pub use report::GadgetReport;
pub use tracer::{Trace, TraceRecord};
pub use vm::{ExecutionResult, Program, RunConfig, Termination};

/// Tool version reported by `--version` and embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Run `f` on a dedicated pool of `workers` threads (at least one).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}
