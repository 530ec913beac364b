//! Trace differencing and Hamming-distance candidate generation.
//!
//! A candidate pairs a return address stored by some executed CALL
//! (`addr_src`) with an instruction address reachable by flipping bits of it
//! (`addr_dest`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tracer::Trace;
use crate::with_workers;

pub const CANDIDATE_MAGIC: &str = "LFCAND1";
/// Address bits that lie inside a page and survive ASLR.
pub const PAGE_OFFSET_MASK: u64 = 0xfff;

#[inline]
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ZeroToOne,
    OneToZero,
}

impl Direction {
    /// Direction needed to flip bit `bit` of `value`.
    pub fn of(value: u64, bit: u32) -> Direction {
        if value >> bit & 1 == 0 {
            Direction::ZeroToOne
        } else {
            Direction::OneToZero
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        match s {
            "0->1" => Some(Direction::ZeroToOne),
            "1->0" => Some(Direction::OneToZero),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ZeroToOne => "0->1",
            Direction::OneToZero => "1->0",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AddressPair {
    pub addr_src: u64,
    pub addr_dest: u64,
    /// `addr_src ^ addr_dest`.
    pub mask: u64,
    /// Sequence numbers of every dynamic call that pushed `addr_src`.
    pub calls: Vec<u64>,
}

impl AddressPair {
    pub fn new(addr_src: u64, addr_dest: u64, calls: Vec<u64>) -> Self {
        AddressPair {
            addr_src,
            addr_dest,
            mask: addr_src ^ addr_dest,
            calls,
        }
    }

    pub fn distance(&self) -> u32 {
        self.mask.count_ones()
    }

    /// The flipped bit for single-bit pairs.
    pub fn bit_index(&self) -> Option<u32> {
        (self.distance() == 1).then(|| self.mask.trailing_zeros())
    }

    pub fn direction(&self) -> Option<Direction> {
        self.bit_index().map(|b| Direction::of(self.addr_src, b))
    }

    /// Every flipped bit with its direction, lowest bit first.
    pub fn flips(&self) -> Vec<(u32, Direction)> {
        (0..64)
            .filter(|b| self.mask >> b & 1 == 1)
            .map(|b| (b, Direction::of(self.addr_src, b)))
            .collect()
    }

    pub fn key(&self) -> (u64, u64) {
        (self.addr_src, self.addr_dest)
    }
}

/// Addresses executed under the correct input but never under the incorrect one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiffSet {
    pub addresses: BTreeSet<u64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("traces come from different layouts (code base {0:#x} vs {1:#x})")]
    LayoutMismatch(u64, u64),
    #[error("candidate distance must be 1..=3, got {0}")]
    BadDistance(u32),
    #[error("line {0}: {1}")]
    Malformed(usize, String),
}

pub fn diff_traces(correct: &Trace, incorrect: &Trace) -> Result<DiffSet, AnalysisError> {
    if let (Some(a), Some(b)) = (correct.code_base, incorrect.code_base) {
        if a != b {
            return Err(AnalysisError::LayoutMismatch(a, b));
        }
    }
    let wrong: BTreeSet<u64> = incorrect.records.iter().map(|r| r.addr).collect();
    let addresses = correct
        .records
        .iter()
        .map(|r| r.addr)
        .filter(|a| !wrong.contains(a))
        .collect();
    Ok(DiffSet { addresses })
}

/// Unique return addresses in `trace`, each with the sequence numbers of the
/// calls that pushed it.
pub fn return_sites(trace: &Trace) -> BTreeMap<u64, Vec<u64>> {
    let mut sites: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for r in trace.calls() {
        sites
            .entry(r.return_addr.expect("call record"))
            .or_default()
            .push(r.seq);
    }
    sites
}

/// Pairs of (return address, executed address) at Hamming distance exactly
/// `d`. With `targets`, destinations are restricted to that set; otherwise
/// every executed address of `trace` is a destination. With
/// `low_bits_only`, only flips inside the page offset qualify.
///
/// Output is deduplicated on the address pair and sorted by
/// `(addr_src, addr_dest)`.
pub fn candidates_matched(
    trace: &Trace,
    targets: Option<&DiffSet>,
    d: u32,
    low_bits_only: bool,
    workers: usize,
) -> Result<Vec<AddressPair>, AnalysisError> {
    if !(1..=3).contains(&d) {
        return Err(AnalysisError::BadDistance(d));
    }
    let dests: Vec<u64> = match targets {
        Some(t) => t.addresses.iter().copied().collect(),
        None => trace.unique_addresses(),
    };
    let sources: Vec<(u64, Vec<u64>)> = return_sites(trace).into_iter().collect();
    let allowed = if low_bits_only {
        PAGE_OFFSET_MASK
    } else {
        u64::MAX
    };
    let per_source = with_workers(workers, || {
        sources
            .par_iter()
            .map(|(src, calls)| {
                dests
                    .iter()
                    .filter(|&&dst| {
                        let x = src ^ dst;
                        x.count_ones() == d && x & !allowed == 0
                    })
                    .map(|&dst| AddressPair::new(*src, dst, calls.clone()))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    });
    Ok(per_source.into_iter().flatten().collect())
}

/// Twelve pairs per unique return address, one per page-offset bit, whether
/// or not the destination was ever executed.
pub fn candidates_exhaustive_offset(trace: &Trace) -> Vec<AddressPair> {
    let mut out: Vec<AddressPair> = return_sites(trace)
        .into_iter()
        .flat_map(|(src, calls)| {
            (0..12).map(move |b| AddressPair::new(src, src ^ (1 << b), calls.clone()))
        })
        .collect();
    out.sort();
    out
}

pub fn write_candidates(pairs: &[AddressPair]) -> String {
    let mut s = format!("{CANDIDATE_MAGIC}\n");
    for p in pairs {
        let calls: Vec<String> = p.calls.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "src={:#x} dest={:#x} mask={:#x} calls={}",
            p.addr_src,
            p.addr_dest,
            p.mask,
            calls.join(",")
        );
    }
    s
}

pub fn parse_candidates(text: &str) -> Result<Vec<AddressPair>, AnalysisError> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(CANDIDATE_MAGIC) {
        return Err(AnalysisError::Malformed(
            1,
            format!("missing {CANDIDATE_MAGIC} header"),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| AnalysisError::Malformed(n, m.to_string());
        let words: Vec<&str> = line.split(' ').collect();
        let [src, dest, mask, calls] = words.as_slice() else {
            return Err(bad("expected 4 fields"));
        };
        let hex = |w: &str, key: &str| {
            w.strip_prefix(key)
                .and_then(|v| v.strip_prefix("0x"))
                .and_then(|v| u64::from_str_radix(v, 16).ok())
                .ok_or_else(|| bad(&format!("bad {key} field")))
        };
        let (src, dest, mask) = (hex(src, "src=")?, hex(dest, "dest=")?, hex(mask, "mask=")?);
        if src ^ dest != mask {
            return Err(bad("mask does not equal src ^ dest"));
        }
        let calls = calls
            .strip_prefix("calls=")
            .ok_or_else(|| bad("bad calls field"))?;
        let calls = if calls.is_empty() {
            Vec::new()
        } else {
            calls
                .split(',')
                .map(|c| c.parse().map_err(|_| bad("bad call seq")))
                .collect::<Result<_, _>>()?
        };
        out.push(AddressPair::new(src, dest, calls));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::{parse_trace, TraceRecord};

    fn rec(seq: u64, addr: u64, ret: Option<u64>) -> TraceRecord {
        TraceRecord {
            seq,
            addr,
            len: if ret.is_some() { 5 } else { 1 },
            mnemonic: if ret.is_some() { "call" } else { "nop" }.into(),
            return_addr: ret,
            tick: None,
        }
    }

    #[test]
    fn typical_pie_pair_is_one_flip() {
        assert_eq!(hamming(0x555555555478, 0x555555555578), 1);
        assert_eq!(hamming(0xdead, 0xdead), 0);
    }

    #[test]
    fn pair_bit_and_direction() {
        let p = AddressPair::new(0x478, 0x578, vec![0]);
        assert_eq!(p.bit_index(), Some(8));
        assert_eq!(p.direction(), Some(Direction::ZeroToOne));
        let q = AddressPair::new(0x578, 0x478, vec![0]);
        assert_eq!(q.direction(), Some(Direction::OneToZero));
        assert_eq!(AddressPair::new(0, 3, vec![]).bit_index(), None);
    }

    #[test]
    fn diff_is_set_difference() {
        let a = Trace::from_records(
            vec![rec(0, 1, None), rec(1, 2, None), rec(2, 3, None)],
            None,
            Some(0),
        );
        let b = Trace::from_records(vec![rec(0, 1, None), rec(1, 3, None)], None, Some(0));
        assert_eq!(diff_traces(&a, &b).unwrap().addresses, BTreeSet::from([2]));
        assert!(diff_traces(&a, &a).unwrap().addresses.is_empty());
        let c = Trace::from_records(vec![], None, Some(4096));
        assert_eq!(
            diff_traces(&a, &c),
            Err(AnalysisError::LayoutMismatch(0, 4096))
        );
    }

    #[test]
    fn lone_call_has_no_candidates() {
        let t = Trace::from_records(vec![rec(0, 0x1000, Some(0x1005))], None, None);
        assert!(candidates_matched(&t, None, 1, false, 1)
            .unwrap()
            .is_empty());
        assert_eq!(
            candidates_matched(&t, None, 0, false, 1),
            Err(AnalysisError::BadDistance(0))
        );
    }

    #[test]
    fn matched_and_low_bits() {
        // 0x1005 -> 0x1004 (bit 0) and 0x1005 -> 0x3005 (bit 13).
        let t = Trace::from_records(
            vec![
                rec(0, 0x1000, Some(0x1005)),
                rec(1, 0x1004, None),
                rec(2, 0x3005, None),
                rec(3, 0x1000, Some(0x1005)),
            ],
            None,
            None,
        );
        let all = candidates_matched(&t, None, 1, false, 2).unwrap();
        assert_eq!(
            all.iter().map(|p| p.addr_dest).collect::<Vec<_>>(),
            [0x1004, 0x3005]
        );
        assert_eq!(all[0].calls, [0, 3]);
        let low = candidates_matched(&t, None, 1, true, 2).unwrap();
        assert_eq!(low.len(), 1);
        let diff = DiffSet {
            addresses: BTreeSet::from([0x3005]),
        };
        assert_eq!(
            candidates_matched(&t, Some(&diff), 1, false, 1).unwrap()[0].addr_dest,
            0x3005
        );
    }

    #[test]
    fn exhaustive_offset_twelve_per_site() {
        let t =
            parse_trace("LFTRACE1\n0 0x1000 5 call ret=0x1005\n1 0x1010 1 ret\n2 0x1005 1 nop\n")
                .unwrap();
        let pairs = candidates_exhaustive_offset(&t);
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|p| p.mask < 4096 && p.distance() == 1));
        let none = parse_trace("LFTRACE1\n0 0x1000 1 nop\n").unwrap();
        assert!(candidates_exhaustive_offset(&none).is_empty());
    }

    #[test]
    fn candidate_file_round_trip() {
        let pairs = vec![
            AddressPair::new(0x1005, 0x1004, vec![0, 3]),
            AddressPair::new(0x2000, 0x2001, vec![]),
        ];
        let text = write_candidates(&pairs);
        assert!(text.starts_with("LFCAND1\nsrc=0x1005 dest=0x1004 mask=0x1 calls=0,3\n"));
        assert_eq!(parse_candidates(&text).unwrap(), pairs);
        assert!(parse_candidates("LFCAND1\nsrc=0x1 dest=0x2 mask=0x1 calls=").is_err());
    }
}
