//! Flippy-page compatibility probabilities, flip profiles and bait-page
//! placement.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::analysis::{AddressPair, Direction};
use crate::vm::PAGE_SIZE;
use crate::with_workers;

/// Bits in a 4096-byte page.
pub const DEFAULT_PAGE_BITS: u64 = PAGE_SIZE * 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipStatistics {
    /// Mean 0->1 flippable cells per page.
    pub n01: f64,
    /// Mean 1->0 flippable cells per page.
    pub n10: f64,
    /// Bits per page.
    pub s: u64,
    /// Susceptible pages available.
    pub n: u64,
}

impl FlipStatistics {
    pub fn new(n01: f64, n10: f64, n: u64) -> Self {
        FlipStatistics {
            n01,
            n10,
            s: DEFAULT_PAGE_BITS,
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRequirement {
    pub k: u64,
    pub l: u64,
    pub offsets: Vec<(u32, Direction)>,
}

impl FlipRequirement {
    /// Build from explicit offsets; duplicate offsets are rejected.
    pub fn from_offsets(mut offsets: Vec<(u32, Direction)>) -> Result<Self, MemError> {
        offsets.sort();
        let distinct: BTreeSet<u32> = offsets.iter().map(|o| o.0).collect();
        if distinct.len() != offsets.len() {
            return Err(MemError::DuplicateOffset);
        }
        let k = offsets
            .iter()
            .filter(|o| o.1 == Direction::ZeroToOne)
            .count() as u64;
        Ok(FlipRequirement {
            k,
            l: offsets.len() as u64 - k,
            offsets,
        })
    }

    /// A requirement with `k` 0->1 and `l` 1->0 flips at arbitrary distinct
    /// offsets, for when only the counts matter.
    pub fn counts(k: u64, l: u64) -> Self {
        let offsets = (0..k)
            .map(|i| (i as u32, Direction::ZeroToOne))
            .chain((k..k + l).map(|i| (i as u32, Direction::OneToZero)))
            .collect();
        FlipRequirement { k, l, offsets }
    }

    pub fn bits(&self) -> u64 {
        self.k + self.l
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipProfile {
    pub page_id: u64,
    pub flips: Vec<(u32, Direction)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaitModel {
    /// Pages released after the flippy page.
    pub bait_count: u64,
    /// The victim's allocation that receives the return-address slot
    /// (1-based: 1 means its first allocation).
    pub victim_demand: u64,
    /// Chance that, before any victim allocation, an unrelated process takes
    /// the next free page. Applied repeatedly until it fails.
    pub noise_rate: f64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MemError {
    #[error("k + l = {0} exceeds page bits {1}")]
    Domain(u64, u64),
    #[error("flip statistics out of range")]
    BadStatistics,
    #[error("target probability must lie strictly between 0 and 1")]
    BadTarget,
    #[error("per-page probability is zero; no page count suffices")]
    Unattainable,
    #[error("duplicate bit offset in requirement")]
    DuplicateOffset,
    #[error("victim_demand must be at least 1")]
    NoDemand,
    #[error("noise rate must lie in [0, 1]")]
    BadNoise,
    #[error("trial count must be positive")]
    ZeroTrials,
    #[error("line {0}: {1}")]
    Parse(usize, String),
}

fn check(stats: &FlipStatistics, req: &FlipRequirement) -> Result<(), MemError> {
    let s = stats.s as f64;
    if stats.s == 0 || !(0.0..=s).contains(&stats.n01) || !(0.0..=s).contains(&stats.n10) {
        return Err(MemError::BadStatistics);
    }
    if req.bits() > stats.s {
        return Err(MemError::Domain(req.bits(), stats.s));
    }
    Ok(())
}

/// Natural log of the probability that a single page offers every required
/// flip, or `None` when that probability is zero.
fn ln_single_page(stats: &FlipStatistics, req: &FlipRequirement) -> Option<f64> {
    let s = stats.s as f64;
    let mut acc = 0.0;
    for i in 0..req.k {
        let f = (stats.n01 - i as f64) / (s - i as f64);
        if f <= 0.0 {
            return None;
        }
        acc += f.ln();
    }
    for j in 0..req.l {
        let f = (stats.n10 - j as f64) / (s - req.k as f64 - j as f64);
        if f <= 0.0 {
            return None;
        }
        acc += f.ln();
    }
    Some(acc)
}

/// Probability that a single page is compatible with `req`.
pub fn single_page_probability(
    stats: &FlipStatistics,
    req: &FlipRequirement,
) -> Result<f64, MemError> {
    check(stats, req)?;
    Ok(ln_single_page(stats, req).map_or(0.0, f64::exp))
}

/// Probability that at least one of `stats.n` pages is compatible with `req`.
pub fn page_probability(stats: &FlipStatistics, req: &FlipRequirement) -> Result<f64, MemError> {
    check(stats, req)?;
    Ok(match ln_single_page(stats, req) {
        _ if stats.n == 0 => 0.0,
        None => 0.0,
        Some(lp) if lp >= 0.0 => 1.0,
        Some(lp) => -f64::exp_m1(stats.n as f64 * f64::ln_1p(-lp.exp())),
    })
}

/// Smallest page count reaching `target` probability.
pub fn pages_needed(
    stats: &FlipStatistics,
    req: &FlipRequirement,
    target: f64,
) -> Result<u64, MemError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(MemError::BadTarget);
    }
    let p = single_page_probability(stats, req)?;
    if p == 0.0 {
        return Err(MemError::Unattainable);
    }
    if p >= 1.0 {
        return Ok(1);
    }
    let prob = |n: u64| page_probability(&FlipStatistics { n, ..*stats }, req).expect("checked");
    let guess = (f64::ln_1p(-target) / f64::ln_1p(-p)).ceil();
    let mut n = if guess.is_finite() && guess >= 1.0 {
        guess.min(u64::MAX as f64) as u64
    } else {
        1
    };
    while prob(n) < target {
        n += 1;
    }
    while n > 1 && prob(n - 1) >= target {
        n -= 1;
    }
    Ok(n)
}

/// `N,probability` rows for each requested page count.
pub fn probability_curve(
    stats: &FlipStatistics,
    req: &FlipRequirement,
    ns: &[u64],
) -> Result<String, MemError> {
    let mut s = String::from("N,probability\n");
    for &n in ns {
        let p = page_probability(&FlipStatistics { n, ..*stats }, req)?;
        writeln!(s, "{n},{p}").unwrap();
    }
    Ok(s)
}

/// Flips needed in the page holding `slot_addr` to turn the stored
/// `addr_src` into `addr_dest`. Words are stored little-endian, so bit `b` of
/// the word lives at bit offset `(slot mod page) * 8 + b` within the page.
pub fn requirement_of(pair: &AddressPair, slot_addr: u64) -> FlipRequirement {
    let base = (slot_addr % PAGE_SIZE) * 8;
    FlipRequirement::from_offsets(
        pair.flips()
            .into_iter()
            .map(|(b, d)| ((base + b as u64) as u32, d))
            .collect(),
    )
    .expect("distinct bits give distinct offsets")
}

pub fn compatible(profile: &FlipProfile, req: &FlipRequirement) -> bool {
    let have: BTreeSet<(u32, Direction)> = profile.flips.iter().copied().collect();
    req.offsets.iter().all(|o| have.contains(o))
}

pub const PROFILE_MAGIC: &str = "LFPROF1";

pub fn write_profiles(profiles: &[FlipProfile]) -> String {
    let mut s = format!("{PROFILE_MAGIC}\n");
    for p in profiles {
        writeln!(s, "page {}", p.page_id).unwrap();
        for (o, d) in &p.flips {
            writeln!(s, "flip {o} {}", d.as_str()).unwrap();
        }
    }
    s
}

/// Parse a profile file. `flip` lines before any `page` line belong to page 0.
pub fn parse_profiles(text: &str) -> Result<Vec<FlipProfile>, MemError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    match lines.next() {
        Some((_, l)) if l.trim() == PROFILE_MAGIC => {}
        _ => {
            return Err(MemError::Parse(
                1,
                format!("missing {PROFILE_MAGIC} header"),
            ))
        }
    }
    let mut out: Vec<FlipProfile> = Vec::new();
    for (i, l) in lines {
        let bad = |m: &str| MemError::Parse(i + 1, m.to_string());
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["page", id] => out.push(FlipProfile {
                page_id: id.parse().map_err(|_| bad("bad page id"))?,
                flips: Vec::new(),
            }),
            ["flip", off, dir] => {
                let off: u32 = off.parse().map_err(|_| bad("bad offset"))?;
                let dir = Direction::parse(dir).ok_or_else(|| bad("bad direction"))?;
                if out.is_empty() {
                    out.push(FlipProfile {
                        page_id: 0,
                        flips: Vec::new(),
                    });
                }
                let page = out.last_mut().unwrap();
                if page.flips.iter().any(|f| f.0 == off) {
                    return Err(bad("duplicate offset in page"));
                }
                page.flips.push((off, dir));
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaitPoint {
    pub bait_count: u64,
    pub probability: f64,
}

/// Trials per independently seeded chunk. Fixed so results do not depend on
/// the worker count.
const CHUNK: u64 = 1 << 14;

fn check_bait(model: &BaitModel) -> Result<(), MemError> {
    if model.victim_demand == 0 {
        return Err(MemError::NoDemand);
    }
    if !(0.0..=1.0).contains(&model.noise_rate) {
        return Err(MemError::BadNoise);
    }
    Ok(())
}

/// One allocation sequence: true if the victim's `victim_demand`-th page is
/// the flippy one.
fn bait_trial(model: &BaitModel, rng: &mut ChaCha8Rng) -> bool {
    // The flippy page sits under `bait_count` baits on the LIFO free list.
    let flippy = model.bait_count;
    let mut popped = 0u64;
    for draw in 1..=model.victim_demand {
        while popped <= flippy && rng.random_bool(model.noise_rate) {
            popped += 1;
        }
        if popped > flippy {
            return false;
        }
        if draw == model.victim_demand {
            return popped == flippy;
        }
        popped += 1;
    }
    unreachable!("victim_demand >= 1")
}

/// Monte Carlo estimate of the chance the return-address page lands on the
/// flippy page, for each bait count in `baits`.
pub fn bait_simulation(
    model: &BaitModel,
    baits: std::ops::RangeInclusive<u64>,
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<BaitPoint>, MemError> {
    check_bait(model)?;
    if trials == 0 {
        return Err(MemError::ZeroTrials);
    }
    let chunks = trials.div_ceil(CHUNK);
    let jobs: Vec<(u64, u64)> = baits
        .clone()
        .flat_map(|b| (0..chunks).map(move |c| (b, c)))
        .collect();
    let hits: Vec<u64> = with_workers(workers, || {
        jobs.par_iter()
            .map(|&(b, c)| {
                let m = BaitModel {
                    bait_count: b,
                    ..*model
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b << 32 | c);
                let n = CHUNK.min(trials - c * CHUNK);
                (0..n).filter(|_| bait_trial(&m, &mut rng)).count() as u64
            })
            .collect()
    });
    Ok(baits
        .enumerate()
        .map(|(i, b)| {
            let h: u64 = hits[i * chunks as usize..(i + 1) * chunks as usize]
                .iter()
                .sum();
            BaitPoint {
                bait_count: b,
                probability: h as f64 / trials as f64,
            }
        })
        .collect())
}

/// Exact probability for the same allocator model: the flippy page is hit
/// iff exactly `bait_count + 1 - victim_demand` noise allocations precede the
/// victim's target draw, a negative binomial count.
pub fn bait_probability_exact(model: &BaitModel) -> Result<f64, MemError> {
    check_bait(model)?;
    let d = model.victim_demand;
    let Some(x) = (model.bait_count + 1).checked_sub(d) else {
        return Ok(0.0);
    };
    let q = model.noise_rate;
    if q == 0.0 {
        return Ok(if x == 0 { 1.0 } else { 0.0 });
    }
    if q == 1.0 {
        return Ok(0.0);
    }
    Ok((ln_binomial(x + d - 1, x) + x as f64 * q.ln() + d as f64 * (1.0 - q).ln()).exp())
}

pub fn bait_curve_csv(points: &[BaitPoint]) -> String {
    let mut s = String::from("B,probability\n");
    for p in points {
        writeln!(s, "{},{}", p.bait_count, p.probability).unwrap();
    }
    s
}
