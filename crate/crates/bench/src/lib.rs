//! Shared inputs for the benchmarks.

use retflip::corpus::Fixture;
use retflip::tracer::{trace, Trace};
use retflip::vm::{Program, RunConfig};

/// A fixture's program with its baseline trace on the incorrect input.
pub fn prepared(f: &Fixture) -> (Program, Trace) {
    let p = f.program();
    let t = trace(&p, f.incorrect, &RunConfig::default()).expect("fixture runs");
    (p, t)
}
