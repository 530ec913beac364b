//! Bundled victim programs with their inputs and outcome rules.

use crate::faultsim::{CandidateMode, RuleSet, ScanConfig};
use crate::vm::{assemble, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fixture {
    pub name: &'static str,
    pub source: &'static str,
    /// Input taking the protected path.
    pub correct: &'static [u8],
    /// Input the attacker controls; faults are simulated on this run.
    pub incorrect: &'static [u8],
    /// Outcome rules, one per line.
    pub rules: &'static str,
    /// Label marking a successful attack, if the fixture has one.
    pub exploit_label: Option<&'static str>,
    /// Whether the default scan restricts destinations to the trace diff.
    pub step2: bool,
}

pub const AUTHGATE: Fixture = Fixture {
    name: "authgate",
    source: include_str!("../fixtures/authgate.s"),
    correct: b"hunter2",
    incorrect: b"letmein",
    rules: "exit==0 => misauthentication\n",
    exploit_label: Some("misauthentication"),
    step2: true,
};

pub const TOYCIPHER: Fixture = Fixture {
    name: "toycipher",
    source: include_str!("../fixtures/toycipher.s"),
    correct: b"k3y-0ne!",
    incorrect: b"s3cr3t!!",
    rules: "stdout~\"helloworld\" => plaintext_leak\n",
    exploit_label: Some("plaintext_leak"),
    step2: false,
};

pub const TREECLASS: Fixture = Fixture {
    name: "treeclass",
    source: include_str!("../fixtures/treeclass.s"),
    correct: b"\x01\x01\x01",
    incorrect: b"\x01\x01\x00",
    rules: "stdout~\"approve\" => misclassification\n",
    exploit_label: Some("misclassification"),
    step2: true,
};

pub const STRAIGHTLINE: Fixture = Fixture {
    name: "straightline",
    source: include_str!("../fixtures/straightline.s"),
    correct: b"",
    incorrect: b"",
    rules: "stdout!~\"hello\" => corrupted_output\n",
    exploit_label: None,
    step2: false,
};

pub const ALL: [Fixture; 4] = [AUTHGATE, TOYCIPHER, TREECLASS, STRAIGHTLINE];

pub fn get(name: &str) -> Option<Fixture> {
    ALL.into_iter().find(|f| f.name == name)
}

impl Fixture {
    pub fn program(&self) -> Program {
        assemble(self.source).expect("bundled fixture assembles")
    }

    /// Fixture rules behind the default hang and crash rules.
    pub fn rule_set(&self) -> RuleSet {
        RuleSet::with_defaults(
            RuleSet::parse(self.rules)
                .expect("bundled rules parse")
                .rules,
        )
    }

    pub fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            candidate_mode: CandidateMode::Matched,
            step2: self.step2,
            rules: self.rule_set(),
            ..ScanConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{run, RunConfig, Termination};

    #[test]
    fn baselines() {
        let cfg = RunConfig::default();
        let out = |f: &Fixture, i| run(&f.program(), i, &cfg).unwrap();

        let g = out(&AUTHGATE, AUTHGATE.correct);
        assert_eq!(
            (g.termination, g.stdout.as_slice()),
            (Termination::Exited(0), &b"AUTH OK\n"[..])
        );
        let b = out(&AUTHGATE, AUTHGATE.incorrect);
        assert_eq!(
            (b.termination, b.stdout.as_slice()),
            (Termination::Exited(1), &b"AUTH FAIL\n"[..])
        );

        for i in [TOYCIPHER.correct, TOYCIPHER.incorrect] {
            let r = out(&TOYCIPHER, i);
            assert_eq!(r.termination, Termination::Exited(0));
            assert_eq!(r.stdout.len(), 10);
            assert_ne!(r.stdout, b"helloworld");
        }

        assert_eq!(out(&TREECLASS, TREECLASS.correct).stdout, b"approve\n");
        assert_eq!(out(&TREECLASS, TREECLASS.incorrect).stdout, b"deny\n");

        let s = out(&STRAIGHTLINE, b"");
        assert_eq!(
            (s.termination, s.stdout.as_slice()),
            (Termination::Exited(0), &b"hello\n"[..])
        );
    }

    #[test]
    fn baselines_are_benign() {
        for f in ALL {
            let p = f.program();
            for input in [f.correct, f.incorrect] {
                let r = run(&p, input, &RunConfig::default()).unwrap();
                let label = f.rule_set().classify_result(&r).label;
                if input == f.incorrect || f.exploit_label.is_none() {
                    assert_eq!(label, "benign", "{}", f.name);
                }
            }
        }
    }

    #[test]
    fn lookup() {
        assert_eq!(get("treeclass"), Some(TREECLASS));
        assert_eq!(get("nope"), None);
    }
}
