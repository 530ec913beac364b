use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    inject_and_run, is_exploit_label, FaultMode, FaultOutcome, Injection, RuleSet, BENIGN,
};
use crate::analysis::{self, AddressPair, DiffSet};
use crate::report::{GadgetRecord, GadgetReport, InjectionRecord, StageCounts, TimingRecord};
use crate::timing::{self, StopModel};
use crate::tracer::{self, Trace};
use crate::vm::{Program, RunConfig};
use crate::with_workers;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    Matched,
    ExhaustiveOffset,
}

impl CandidateMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateMode::Matched => "matched",
            CandidateMode::ExhaustiveOffset => "exhaustive_offset",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    pub candidate_mode: CandidateMode,
    pub d: u32,
    pub low_bits_only: bool,
    /// Restrict destinations to addresses only the correct input executes.
    pub step2: bool,
    pub rules: RuleSet,
    pub run: RunConfig,
    pub fault_mode: FaultMode,
    pub workers: usize,
    pub stop_model: StopModel,
    /// Hit probability at or above which a gadget counts as viable.
    pub min_hit_probability: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            candidate_mode: CandidateMode::Matched,
            d: 1,
            low_bits_only: false,
            step2: false,
            rules: RuleSet::with_defaults(Vec::new()),
            run: RunConfig::default(),
            fault_mode: FaultMode::DirectJump,
            workers: 1,
            stop_model: StopModel::BASH_LIKE,
            min_hit_probability: 0.5,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("{stage}: {cause}")]
pub struct ScanError {
    pub stage: &'static str,
    pub cause: String,
}

fn stage<T, E: std::fmt::Display>(stage: &'static str, r: Result<T, E>) -> Result<T, ScanError> {
    r.map_err(|e| ScanError {
        stage,
        cause: e.to_string(),
    })
}

/// Candidate pairs for a scan: return addresses come from the incorrect-input
/// trace, destinations from the diff (step 2 on) or from every address the
/// correct input executed.
pub fn scan_candidates(
    correct: &Trace,
    incorrect: &Trace,
    diff: Option<&DiffSet>,
    cfg: &ScanConfig,
) -> Result<Vec<AddressPair>, ScanError> {
    match cfg.candidate_mode {
        CandidateMode::Matched => {
            let everything;
            let targets = match diff {
                Some(d) => d,
                None => {
                    everything = DiffSet {
                        addresses: correct.unique_addresses().into_iter().collect(),
                    };
                    &everything
                }
            };
            stage(
                "candidates",
                analysis::candidates_matched(
                    incorrect,
                    Some(targets),
                    cfg.d,
                    cfg.low_bits_only,
                    cfg.workers,
                ),
            )
        }
        CandidateMode::ExhaustiveOffset => {
            let mut pairs = analysis::candidates_exhaustive_offset(incorrect);
            if let Some(d) = diff {
                pairs.retain(|p| d.addresses.contains(&p.addr_dest));
            }
            Ok(pairs)
        }
    }
}

/// Trace both inputs, optionally diff them, generate candidates, simulate
/// every dynamic occurrence of every candidate on the incorrect input,
/// classify, and assess timing for each gadget found.
pub fn scan(
    p: &Program,
    correct: &[u8],
    incorrect: &[u8],
    cfg: &ScanConfig,
) -> Result<GadgetReport, ScanError> {
    let good = stage("trace", tracer::trace(p, correct, &cfg.run))?;
    let bad = stage("trace", tracer::trace(p, incorrect, &cfg.run))?;
    let diff = if cfg.step2 {
        Some(stage("diff", analysis::diff_traces(&good, &bad))?)
    } else {
        None
    };
    let pairs = scan_candidates(&good, &bad, diff.as_ref(), cfg)?;

    let injections: Vec<Injection> = pairs
        .iter()
        .flat_map(|pair| {
            let n = bad.call_count(pair.addr_src);
            (0..=n).map(move |occurrence| Injection {
                pair: pair.clone(),
                occurrence,
                mode: cfg.fault_mode,
            })
        })
        .collect();
    let correct_addrs: BTreeSet<u64> = good.records.iter().map(|r| r.addr).collect();
    let outcomes: Vec<FaultOutcome> = stage(
        "simulate",
        with_workers(cfg.workers, || {
            injections
                .par_iter()
                .map(|inj| inject_and_run(p, incorrect, &cfg.run, inj, Some(&correct_addrs)))
                .collect::<Result<Vec<_>, _>>()
        }),
    )?;

    let records: Vec<InjectionRecord> = outcomes
        .iter()
        .map(|o| InjectionRecord::new(o, &cfg.rules.classify_result(&o.result).label))
        .collect();

    // One gadget record per (pair, non-benign label).
    let mut grouped: BTreeMap<((u64, u64), String), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.label != BENIGN {
            grouped
                .entry(((r.src, r.dest), r.label.clone()))
                .or_default()
                .push(i);
        }
    }
    let gadgets: Vec<GadgetRecord> = grouped
        .into_iter()
        .map(|(((src, dest), label), idx)| {
            let first = &outcomes[idx[0]];
            GadgetRecord {
                src,
                dest,
                mask: src ^ dest,
                label,
                occurrences: idx.iter().map(|&i| records[i].occurrence).collect(),
                exit_code: first.result.termination.exit_code(),
                stdout: String::from_utf8_lossy(&first.result.stdout).into_owned(),
            }
        })
        .collect();

    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    for g in &gadgets {
        *labels.entry(g.label.clone()).or_default() += 1;
    }

    let exploit_srcs: BTreeSet<u64> = gadgets
        .iter()
        .filter(|g| is_exploit_label(&g.label))
        .map(|g| g.src)
        .collect();
    let timing: Vec<TimingRecord> = stage(
        "timing",
        with_workers(cfg.workers, || {
            exploit_srcs
                .par_iter()
                .map(|&src| timing_record(p, incorrect, cfg, src))
                .collect::<Result<Vec<_>, _>>()
        }),
    )?;

    let counts = StageCounts {
        correct_trace_len: good.n_instructions,
        incorrect_trace_len: bad.n_instructions,
        return_sites: analysis::return_sites(&bad).len() as u64,
        diff_size: diff.as_ref().map(|d| d.addresses.len() as u64),
        candidates: pairs.len() as u64,
        injections: outcomes.len() as u64,
        fired: outcomes.iter().filter(|o| o.fired).count() as u64,
    };
    Ok(GadgetReport {
        version: crate::VERSION.to_string(),
        config: config_echo(cfg),
        counts,
        labels,
        injections: records,
        gadgets,
        timing,
    })
}

fn timing_record(
    p: &Program,
    input: &[u8],
    cfg: &ScanConfig,
    src: u64,
) -> Result<TimingRecord, crate::vm::VmError> {
    let windows = timing::windows(p, input, &cfg.run, src)?;
    let longest = windows
        .iter()
        .max_by_key(|w| (w.len(), std::cmp::Reverse(w.start_tick)));
    let hit_probability = longest.map_or(0.0, |w| {
        let aimed = StopModel {
            mean: (w.start_tick + w.end_tick) as f64 / 2.0,
            stddev: cfg.stop_model.stddev,
        };
        timing::hit_probability(&windows, &aimed)
    });
    Ok(TimingRecord {
        src,
        windows: windows.len() as u64,
        total_window_ticks: windows.iter().map(|w| w.len()).sum(),
        longest_window_ticks: longest.map_or(0, |w| w.len()),
        hit_probability,
        viable: hit_probability >= cfg.min_hit_probability,
    })
}

fn config_echo(cfg: &ScanConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("candidate_mode", cfg.candidate_mode.as_str().into());
    put("d", cfg.d.to_string());
    put("low_bits_only", cfg.low_bits_only.to_string());
    put("step2", if cfg.step2 { "on" } else { "off" }.into());
    put("fault_mode", cfg.fault_mode.as_str().into());
    put("seed", cfg.run.seed.to_string());
    put("budget", cfg.run.budget.to_string());
    put("degradation", cfg.run.degradation.to_string());
    put("stack_pages", cfg.run.stack_pages.to_string());
    put("stop_stddev", cfg.stop_model.stddev.to_string());
    put("min_hit_probability", cfg.min_hit_probability.to_string());
    put(
        "rules",
        cfg.rules.to_string().trim_end().replace('\n', "; "),
    );
    m
}
