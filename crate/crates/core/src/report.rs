//! Scan report model and its JSON-lines / CSV serializations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::faultsim::FaultOutcome;

/// Report format version, bumped on incompatible schema changes.
pub const REPORT_FORMAT: u32 = 1;

/// Addresses are written as `0x` hex strings so JSON consumers that read
/// numbers as doubles do not lose precision.
mod hex {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{v:x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        let h = s
            .strip_prefix("0x")
            .ok_or_else(|| D::Error::custom("expected 0x prefix"))?;
        u64::from_str_radix(h, 16).map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCounts {
    pub correct_trace_len: u64,
    pub incorrect_trace_len: u64,
    pub return_sites: u64,
    pub diff_size: Option<u64>,
    pub candidates: u64,
    pub injections: u64,
    pub fired: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionRecord {
    #[serde(with = "hex")]
    pub src: u64,
    #[serde(with = "hex")]
    pub dest: u64,
    pub occurrence: u64,
    pub mode: String,
    pub fired: bool,
    pub termination: String,
    pub exit_code: Option<u8>,
    pub label: String,
    pub instructions_executed: u64,
    pub matched_correct_trace: Option<u64>,
    pub slot_touched: bool,
}

impl InjectionRecord {
    pub fn new(o: &FaultOutcome, label: &str) -> Self {
        let pair = &o.injection.pair;
        InjectionRecord {
            src: pair.addr_src,
            dest: pair.addr_dest,
            occurrence: o.injection.occurrence,
            mode: o.injection.mode.as_str().to_string(),
            fired: o.fired,
            termination: o.result.termination.kind().to_string(),
            exit_code: o.result.termination.exit_code(),
            label: label.to_string(),
            instructions_executed: o.instructions_executed,
            matched_correct_trace: o.matched_correct_trace,
            slot_touched: o.slot_touched,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GadgetRecord {
    #[serde(with = "hex")]
    pub src: u64,
    #[serde(with = "hex")]
    pub dest: u64,
    #[serde(with = "hex")]
    pub mask: u64,
    pub label: String,
    /// Occurrences that produced this label.
    pub occurrences: Vec<u64>,
    /// Exit code and stdout of the first such occurrence.
    pub exit_code: Option<u8>,
    pub stdout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingRecord {
    #[serde(with = "hex")]
    pub src: u64,
    pub windows: u64,
    pub total_window_ticks: u64,
    pub longest_window_ticks: u64,
    pub hit_probability: f64,
    pub viable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GadgetReport {
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub counts: StageCounts,
    /// Gadget records per label.
    pub labels: BTreeMap<String, u64>,
    pub injections: Vec<InjectionRecord>,
    pub gadgets: Vec<GadgetRecord>,
    pub timing: Vec<TimingRecord>,
}

/// One line of a JSON-lines report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportLine {
    Header {
        format: u32,
        version: String,
        config: BTreeMap<String, String>,
    },
    Counts(StageCounts),
    Labels {
        labels: BTreeMap<String, u64>,
    },
    Injection(InjectionRecord),
    Gadget(GadgetRecord),
    Timing(TimingRecord),
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("line {0}: {1}")]
    Json(usize, serde_json::Error),
    #[error("report {0}")]
    Structure(String),
}

impl GadgetReport {
    pub fn label_count(&self, label: &str) -> u64 {
        self.labels.get(label).copied().unwrap_or(0)
    }

    pub fn gadgets_labeled<'a>(
        &'a self,
        label: &'a str,
    ) -> impl Iterator<Item = &'a GadgetRecord> + 'a {
        self.gadgets.iter().filter(move |g| g.label == label)
    }

    /// Check that per-label counts equal the matching gadget records.
    pub fn check_counts(&self) -> Result<(), ReportError> {
        let mut seen: BTreeMap<String, u64> = BTreeMap::new();
        for g in &self.gadgets {
            *seen.entry(g.label.clone()).or_default() += 1;
        }
        if seen != self.labels {
            return Err(ReportError::Structure(
                "label counts disagree with gadget records".into(),
            ));
        }
        Ok(())
    }

    pub fn lines(&self) -> Vec<ReportLine> {
        let mut v = vec![
            ReportLine::Header {
                format: REPORT_FORMAT,
                version: self.version.clone(),
                config: self.config.clone(),
            },
            ReportLine::Counts(self.counts.clone()),
            ReportLine::Labels {
                labels: self.labels.clone(),
            },
        ];
        v.extend(self.injections.iter().cloned().map(ReportLine::Injection));
        v.extend(self.gadgets.iter().cloned().map(ReportLine::Gadget));
        v.extend(self.timing.iter().cloned().map(ReportLine::Timing));
        v
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in self.lines() {
            s.push_str(&serde_json::to_string(&l).expect("report serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<GadgetReport, ReportError> {
        let mut header = None;
        let mut counts = None;
        let mut labels = None;
        let (mut injections, mut gadgets, mut timing) = (Vec::new(), Vec::new(), Vec::new());
        for (i, l) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            match serde_json::from_str(l).map_err(|e| ReportError::Json(i + 1, e))? {
                ReportLine::Header {
                    format,
                    version,
                    config,
                } => {
                    if format != REPORT_FORMAT {
                        return Err(ReportError::Structure(format!(
                            "format {format} unsupported"
                        )));
                    }
                    header = Some((version, config));
                }
                ReportLine::Counts(c) => counts = Some(c),
                ReportLine::Labels { labels: l } => labels = Some(l),
                ReportLine::Injection(r) => injections.push(r),
                ReportLine::Gadget(g) => gadgets.push(g),
                ReportLine::Timing(t) => timing.push(t),
            }
        }
        let missing = |what: &str| ReportError::Structure(format!("missing {what} line"));
        let (version, config) = header.ok_or_else(|| missing("header"))?;
        let r = GadgetReport {
            version,
            config,
            counts: counts.ok_or_else(|| missing("counts"))?,
            labels: labels.ok_or_else(|| missing("labels"))?,
            injections,
            gadgets,
            timing,
        };
        r.check_counts()?;
        Ok(r)
    }

    /// `label,count` summary.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("label,count\n");
        for (l, c) in &self.labels {
            s.push_str(&format!("{l},{c}\n"));
        }
        s
    }
}
