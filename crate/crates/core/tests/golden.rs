//! Baseline traces of the bundled fixtures, checked against committed files.
//! Set `UPDATE_GOLDEN=1` to rewrite them after an intended change.

use std::path::PathBuf;

use retflip::corpus;
use retflip::tracer::{emit_trace, parse_trace, trace};
use retflip::vm::RunConfig;

fn golden_path(name: &str, which: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.{which}.trace"))
}

#[test]
fn baselines_match_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for f in corpus::ALL {
        let p = f.program();
        for (which, input) in [("correct", f.correct), ("incorrect", f.incorrect)] {
            let t = trace(&p, input, &RunConfig::default()).unwrap();
            let text = emit_trace(&t);
            let path = golden_path(f.name, which);
            if update {
                std::fs::write(&path, &text).unwrap();
                continue;
            }
            let want = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(text, want, "{} {which}", f.name);
            assert_eq!(parse_trace(&want).unwrap(), t);
        }
    }
}
