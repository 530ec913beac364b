//! Attack windows, stop-jitter sweeps and ASLR-invariant stack fingerprints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::vm::{self, LoadLayout, MachineState, Program, RunConfig, StepEvent, VmError};
use crate::with_workers;

/// Half-open tick interval `[start_tick, end_tick)` during which the word at
/// `slot_addr` holds the watched return address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttackWindow {
    pub slot_addr: u64,
    pub start_tick: u64,
    pub end_tick: u64,
}

impl AttackWindow {
    pub fn len(&self) -> u64 {
        self.end_tick - self.start_tick
    }

    pub fn is_empty(&self) -> bool {
        self.end_tick == self.start_tick
    }

    pub fn contains(&self, tick: u64) -> bool {
        (self.start_tick..self.end_tick).contains(&tick)
    }
}

/// Normal distribution of the tick at which an attacker manages to stop the
/// victim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopModel {
    pub mean: f64,
    pub stddev: f64,
}

impl StopModel {
    pub const PYTHON_LIKE: StopModel = StopModel {
        mean: 34_000.0,
        stddev: 2_700.0,
    };
    pub const BASH_LIKE: StopModel = StopModel {
        mean: 18_000.0,
        stddev: 300.0,
    };

    pub fn preset(name: &str) -> Option<StopModel> {
        match name {
            "python" | "python-like" => Some(Self::PYTHON_LIKE),
            "bash" | "bash-like" => Some(Self::BASH_LIKE),
            _ => None,
        }
    }

    pub fn centered(&self, mean: f64) -> StopModel {
        StopModel {
            mean,
            stddev: self.stddev,
        }
    }

    /// P(stop < x) for the stop tick `floor(max(0, X))`.
    fn cdf(&self, x: u64) -> f64 {
        if x == 0 {
            return 0.0;
        }
        let x = x as f64;
        if self.stddev == 0.0 {
            return if self.mean.max(0.0) < x { 1.0 } else { 0.0 };
        }
        0.5 * erfc(-(x - self.mean) / (self.stddev * std::f64::consts::SQRT_2))
    }

    /// Draw a stop tick, clamping negative samples to zero.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.stddev == 0.0 {
            return self.mean.max(0.0) as u64;
        }
        let x = Normal::new(self.mean, self.stddev)
            .expect("finite stddev")
            .sample(rng);
        x.max(0.0) as u64
    }
}

/// Every window during which some stack slot holds `addr_src`, sorted by
/// start tick then slot address.
pub fn windows(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    addr_src: u64,
) -> Result<Vec<AttackWindow>, VmError> {
    let (mut st, _) = vm::boot(p, input, cfg)?;
    let mut open: BTreeMap<u64, u64> = BTreeMap::new();
    let mut out = Vec::new();
    loop {
        let (rec, done) = match st.step_within(cfg.budget) {
            StepEvent::Executed(rec) => (Some(rec), false),
            StepEvent::Terminated { record, .. } => (record, true),
        };
        if let Some(rec) = rec {
            let live: BTreeSet<u64> = st
                .live_stack()
                .filter(|&(_, v)| v == addr_src)
                .map(|(a, _)| a)
                .collect();
            open.retain(|&slot, &mut start| {
                let keep = live.contains(&slot);
                if !keep {
                    out.push(AttackWindow {
                        slot_addr: slot,
                        start_tick: start,
                        end_tick: rec.tick,
                    });
                }
                keep
            });
            for slot in live {
                open.entry(slot).or_insert(rec.tick);
            }
        }
        if done {
            break;
        }
    }
    // Whatever is still resident dies with the process.
    for (slot, start) in open {
        out.push(AttackWindow {
            slot_addr: slot,
            start_tick: start,
            end_tick: st.tick,
        });
    }
    out.retain(|w| !w.is_empty());
    out.sort_by_key(|w| (w.start_tick, w.slot_addr));
    Ok(out)
}

/// Disjoint sorted union of the windows' tick intervals.
pub fn merge_intervals(ws: &[AttackWindow]) -> Vec<(u64, u64)> {
    let mut iv: Vec<(u64, u64)> = ws.iter().map(|w| (w.start_tick, w.end_tick)).collect();
    iv.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Probability that a stop drawn from `model` lands inside the union of
/// `ws`.
pub fn hit_probability(ws: &[AttackWindow], model: &StopModel) -> f64 {
    merge_intervals(ws)
        .into_iter()
        .map(|(s, e)| (model.cdf(e) - model.cdf(s)).max(0.0))
        .sum::<f64>()
        .min(1.0)
}

/// State of the stack once every instruction completing at or before
/// `stop_tick` has run. Empty if the process is gone by then.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSnapshot {
    pub stop_tick: u64,
    pub stack_base: u64,
    pub words: BTreeMap<u64, u64>,
}

impl StackSnapshot {
    pub fn holds(&self, value: u64) -> bool {
        self.words.values().any(|&v| v == value)
    }
}

fn run_until(st: &mut MachineState, budget: u64, stop_tick: u64) {
    while st.termination().is_none() {
        match st.next_cost() {
            Some(c) if st.tick.saturating_add(c) > stop_tick => break,
            _ => {
                st.step_within(budget);
            }
        }
    }
}

pub fn snapshot_at(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    stop_tick: u64,
) -> Result<StackSnapshot, VmError> {
    let (snap, _) = snapshot_with_layout(p, input, cfg, stop_tick)?;
    Ok(snap)
}

fn snapshot_with_layout(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    stop_tick: u64,
) -> Result<(StackSnapshot, LoadLayout), VmError> {
    let (mut st, layout) = vm::boot(p, input, cfg)?;
    run_until(&mut st, cfg.budget, stop_tick);
    let words = if st.termination().is_some() {
        BTreeMap::new()
    } else {
        st.live_stack().collect()
    };
    Ok((
        StackSnapshot {
            stop_tick,
            stack_base: layout.stack_base,
            words,
        },
        layout,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub stop_tick: u64,
    pub trials: u64,
    pub hits: u64,
    pub hit_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the highest hit rate (earliest on ties).
    pub best: Option<usize>,
}

impl SweepReport {
    pub fn best_point(&self) -> Option<&SweepPoint> {
        self.best.map(|i| &self.points[i])
    }

    pub fn best_hit_rate(&self) -> f64 {
        self.best_point().map_or(0.0, |p| p.hit_rate)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stop_tick,trials,hits,hit_rate\n");
        for p in &self.points {
            writeln!(s, "{},{},{},{}", p.stop_tick, p.trials, p.hits, p.hit_rate).unwrap();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepParams {
    pub start: u64,
    pub interval: u64,
    /// Number of stop points; `None` covers the whole unfaulted run.
    pub points: Option<u64>,
    pub model: StopModel,
    pub trials: u64,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TimingError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("sweep interval must be positive")]
    ZeroInterval,
    #[error("sweep needs at least one trial")]
    ZeroTrials,
}

/// Restart-and-stop sweep: each stop point draws `trials` jittered stop ticks
/// around itself and counts how often the stack then holds `addr_src`.
pub fn time_sweep(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    addr_src: u64,
    sp: &SweepParams,
) -> Result<SweepReport, TimingError> {
    if sp.interval == 0 {
        return Err(TimingError::ZeroInterval);
    }
    if sp.trials == 0 {
        return Err(TimingError::ZeroTrials);
    }
    let ws = windows(p, input, cfg, addr_src)?;
    let total = vm::run(p, input, cfg)?.ticks;
    let n = sp
        .points
        .unwrap_or_else(|| total.saturating_sub(sp.start) / sp.interval + 1);
    let points: Vec<SweepPoint> = with_workers(sp.workers, || {
        (0..n)
            .into_par_iter()
            .map(|k| {
                let stop_tick = sp.start + k * sp.interval;
                let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
                rng.set_stream(k);
                let model = sp.model.centered(stop_tick as f64);
                let hits = (0..sp.trials)
                    .filter(|_| {
                        let t = model.sample(&mut rng);
                        ws.iter().any(|w| w.contains(t))
                    })
                    .count() as u64;
                SweepPoint {
                    stop_tick,
                    trials: sp.trials,
                    hits,
                    hit_rate: hits as f64 / sp.trials as f64,
                }
            })
            .collect()
    });
    let best = points
        .iter()
        .enumerate()
        .fold(None::<usize>, |b, (i, p)| match b {
            Some(j) if points[j].hits >= p.hits => Some(j),
            _ => Some(i),
        });
    Ok(SweepReport { points, best })
}

/// An invariant stack word, keyed by its signed byte offset from the stack
/// base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Feature {
    pub offset: i64,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Sorted by offset; the first entry is the anchor.
    pub features: Vec<Feature>,
    /// Byte offset of the return-address slot from the anchor feature.
    pub target_offset: i64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FingerprintError {
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("fingerprinting needs at least two seeds")]
    TooFewSeeds,
    #[error("seed {0}: return address not on the stack at the trigger tick")]
    TargetAbsent(u64),
    #[error("no stack word is invariant across seeds")]
    NoInvariantWords,
    #[error("return-address slot offset differs across seeds")]
    UnstableTarget,
}

/// Values that lie near a randomized region base move with ASLR.
const REGION_SLACK: u64 = 64 * 1024;

fn near_region(v: u64, layout: &LoadLayout) -> bool {
    layout
        .region_bases()
        .iter()
        .any(|&b| v.abs_diff(b) <= REGION_SLACK)
}

/// Profile the stack at `trigger_tick` under each seed and keep the words
/// that do not move. `ret_offset` is the return address as an offset from
/// the code base, so it can be rebased per seed.
pub fn fingerprint_stack(
    p: &Program,
    input: &[u8],
    cfg: &RunConfig,
    seeds: &[u64],
    trigger_tick: u64,
    ret_offset: u64,
) -> Result<Fingerprint, FingerprintError> {
    if seeds.len() < 2 {
        return Err(FingerprintError::TooFewSeeds);
    }
    let mut common: Option<BTreeMap<i64, u64>> = None;
    let mut target: Option<i64> = None;
    for &seed in seeds {
        let run = RunConfig { seed, ..*cfg };
        let (snap, layout) = snapshot_with_layout(p, input, &run, trigger_tick)?;
        let want = layout.code_base + ret_offset;
        let slot = snap
            .words
            .iter()
            .find(|&(_, &v)| v == want)
            .map(|(&a, _)| a)
            .ok_or(FingerprintError::TargetAbsent(seed))?;
        let rel = |a: u64| a.wrapping_sub(snap.stack_base) as i64;
        let t = rel(slot);
        if *target.get_or_insert(t) != t {
            return Err(FingerprintError::UnstableTarget);
        }
        let here: BTreeMap<i64, u64> = snap
            .words
            .iter()
            .filter(|&(&a, &v)| a != slot && !near_region(v, &layout))
            .map(|(&a, &v)| (rel(a), v))
            .collect();
        common = Some(match common {
            None => here,
            Some(c) => c
                .into_iter()
                .filter(|(o, v)| here.get(o) == Some(v))
                .collect(),
        });
    }
    let features: Vec<Feature> = common
        .unwrap_or_default()
        .into_iter()
        .map(|(offset, value)| Feature { offset, value })
        .collect();
    let anchor = features
        .first()
        .ok_or(FingerprintError::NoInvariantWords)?
        .offset;
    Ok(Fingerprint {
        target_offset: target.unwrap() - anchor,
        features,
    })
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LocateError {
    #[error("fingerprint not found in snapshot")]
    NotFound,
    #[error("fingerprint matches at {0} positions")]
    Ambiguous(usize),
}

/// Address of the return-address slot in `snap`, found by matching the
/// fingerprint's relative layout anywhere in the snapshot.
pub fn locate(snap: &StackSnapshot, fp: &Fingerprint) -> Result<u64, LocateError> {
    let Some(anchor) = fp.features.first() else {
        return Err(LocateError::NotFound);
    };
    let hits: Vec<u64> = snap
        .words
        .iter()
        .filter(|&(_, &v)| v == anchor.value)
        .map(|(&a, _)| a)
        .filter(|&a| {
            fp.features.iter().all(|f| {
                let at = a.wrapping_add((f.offset - anchor.offset) as u64);
                snap.words.get(&at) == Some(&f.value)
            })
        })
        .collect();
    match hits.as_slice() {
        [] => Err(LocateError::NotFound),
        [a] => Ok(a.wrapping_add(fp.target_offset as u64)),
        many => Err(LocateError::Ambiguous(many.len())),
    }
}

fn signed_hex(v: i64) -> String {
    if v < 0 {
        format!("-0x{:x}", v.unsigned_abs())
    } else {
        format!("0x{v:x}")
    }
}

fn parse_signed_hex(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let mag = i64::try_from(u64::from_str_radix(body.strip_prefix("0x")?, 16).ok()?).ok()?;
    Some(if neg { -mag } else { mag })
}

pub const FINGERPRINT_MAGIC: &str = "LFFP1";

impl Fingerprint {
    pub fn to_text(&self) -> String {
        let mut s = format!("{FINGERPRINT_MAGIC}\n");
        for f in &self.features {
            writeln!(s, "feat {}=0x{:x}", signed_hex(f.offset), f.value).unwrap();
        }
        writeln!(s, "target {}", signed_hex(self.target_offset)).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Fingerprint, String> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(FINGERPRINT_MAGIC) {
            return Err(format!("missing {FINGERPRINT_MAGIC} header"));
        }
        let mut features = Vec::new();
        let mut target = None;
        for l in lines {
            if let Some(rest) = l.strip_prefix("feat ") {
                let (o, v) = rest
                    .split_once('=')
                    .ok_or_else(|| format!("bad feature: {l}"))?;
                let offset = parse_signed_hex(o).ok_or_else(|| format!("bad offset: {o}"))?;
                let value = v
                    .strip_prefix("0x")
                    .and_then(|h| u64::from_str_radix(h, 16).ok())
                    .ok_or_else(|| format!("bad value: {v}"))?;
                features.push(Feature { offset, value });
            } else if let Some(rest) = l.strip_prefix("target ") {
                target = Some(parse_signed_hex(rest).ok_or_else(|| format!("bad target: {rest}"))?);
            } else {
                return Err(format!("unexpected line: {l}"));
            }
        }
        features.sort();
        Ok(Fingerprint {
            features,
            target_offset: target.ok_or("missing target line")?,
        })
    }
}
