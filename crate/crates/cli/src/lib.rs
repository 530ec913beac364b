//! Command-line front end. Every subcommand wraps one library operation and
//! prints its canonical serialization.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use retflip::analysis::{self, DiffSet};
use retflip::faultsim::{self, FaultMode, Injection, RuleSet};
use retflip::memmodel::{self, BaitModel, FlipRequirement, FlipStatistics};
use retflip::timing::{self, Fingerprint, StopModel, SweepParams};
use retflip::tracer::{self, Trace};
use retflip::vm::{self, ExecutionResult, Program, RunConfig, VmError};
use retflip::{corpus, AddressPair};

pub use config::ScanSetup;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or unreadable input files.
    #[error("{0}")]
    Config(String),
    /// The program could not be loaded or run.
    #[error("execution failed: {0}")]
    Exec(String),
    /// A result failed an internal consistency check.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Exec(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<VmError> for CliError {
    fn from(e: VmError) -> Self {
        CliError::Exec(e.to_string())
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn version_text() -> String {
    format!(
        "retflip {} (trace {}, object {}, candidates {}, fingerprint {}, profile {}, report {})",
        retflip::VERSION,
        tracer::TRACE_MAGIC,
        vm::OBJECT_MAGIC,
        analysis::CANDIDATE_MAGIC,
        timing::FINGERPRINT_MAGIC,
        memmodel::PROFILE_MAGIC,
        retflip::report::REPORT_FORMAT,
    )
}

/// `fixture:NAME` for a bundled program, otherwise a path to assembly source
/// or an object file.
pub fn load_program(arg: &str) -> Result<Program, CliError> {
    if let Some(name) = arg.strip_prefix("fixture:") {
        return corpus::get(name)
            .map(|f| f.program())
            .ok_or_else(|| config_err(format!("no fixture `{name}`")));
    }
    let text = std::fs::read_to_string(arg).map_err(|e| config_err(format!("{arg}: {e}")))?;
    if text.starts_with(vm::OBJECT_MAGIC) {
        vm::parse_object(&text).map_err(|e| config_err(format!("{arg}: {e}")))
    } else {
        vm::assemble(&text).map_err(|e| config_err(format!("{arg}: {e}")))
    }
}

fn read_text(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let s = s.replace('_', "");
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("{s}: {e}"))
}

/// `a..b` (exclusive), `a..=b`, or a comma-separated list.
fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..=") {
        return Ok((parse_u64(a)?..=parse_u64(b)?).collect());
    }
    if let Some((a, b)) = s.split_once("..") {
        return Ok((parse_u64(a)?..parse_u64(b)?).collect());
    }
    s.split(',').map(parse_u64).collect()
}

#[derive(Debug, Parser)]
#[command(
    name = "retflip",
    about = "Find return addresses one bit flip away from a different outcome"
)]
pub struct Cli {
    /// Print tool and file-format versions.
    #[arg(long = "version")]
    pub version: bool,
    /// Write output here instead of stdout.
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// ASLR seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = vm::DEFAULT_BUDGET)]
    pub budget: u64,
    /// Tick cost of each instruction.
    #[arg(long, default_value_t = 1)]
    pub degradation: u64,
    #[arg(long, default_value_t = vm::DEFAULT_STACK_PAGES)]
    pub stack_pages: u64,
}

impl RunArgs {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            budget: self.budget,
            degradation: self.degradation,
            stack_pages: self.stack_pages,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProgArgs {
    /// Assembly source, object file, or `fixture:NAME`.
    pub program: String,
    /// File whose bytes form the program's input.
    #[arg(long, conflicts_with = "input_str")]
    pub input: Option<PathBuf>,
    /// Literal input text.
    #[arg(long)]
    pub input_str: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

impl ProgArgs {
    fn load(&self) -> Result<(Program, Vec<u8>, RunConfig), CliError> {
        let input = match (&self.input, &self.input_str) {
            (Some(p), _) => {
                std::fs::read(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            (None, Some(s)) => s.clone().into_bytes(),
            (None, None) => Vec::new(),
        };
        Ok((load_program(&self.program)?, input, self.run.config()))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    DirectJump,
    MemoryCorruption,
}

impl From<ModeArg> for FaultMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DirectJump => FaultMode::DirectJump,
            ModeArg::MemoryCorruption => FaultMode::MemoryCorruption,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Bash,
    Python,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble source into an object file.
    Assemble { source: PathBuf },
    /// Disassemble a program back to source.
    Disasm { program: String },
    /// Run a program and print its result as JSON.
    Run(ProgArgs),
    /// Record an instruction trace.
    Trace(ProgArgs),
    /// Per-call function timings as CSV.
    Timings(ProgArgs),
    /// Addresses executed only under the correct input.
    Diff {
        correct: PathBuf,
        incorrect: PathBuf,
    },
    /// Return-address / destination pairs a few bit flips apart.
    Candidates {
        trace: PathBuf,
        /// Restrict destinations to the addresses in this diff file.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        d: u32,
        #[arg(long)]
        low_bits_only: bool,
        /// Emit all twelve page-offset flips per return address.
        #[arg(long)]
        exhaustive_offset: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Re-run with one flipped return address.
    Simulate {
        #[command(flatten)]
        prog: ProgArgs,
        #[arg(long, value_parser = parse_u64)]
        src: u64,
        #[arg(long, value_parser = parse_u64)]
        dest: u64,
        #[arg(long, default_value_t = 0)]
        occurrence: u64,
        #[arg(long, value_enum, default_value = "direct-jump")]
        mode: ModeArg,
    },
    /// Label a run result (JSON from `run` or `simulate`).
    Classify {
        result: PathBuf,
        /// Rule file, one rule per line.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Attack windows of a return address as CSV.
    Windows {
        #[command(flatten)]
        prog: ProgArgs,
        #[arg(long, value_parser = parse_u64)]
        src: u64,
    },
    /// Stop-and-inspect sweep over the run.
    Sweep {
        #[command(flatten)]
        prog: ProgArgs,
        #[arg(long, value_parser = parse_u64)]
        src: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 100)]
        interval: u64,
        /// Number of stop points; defaults to covering the whole run.
        #[arg(long)]
        points: Option<u64>,
        #[arg(long, value_enum, default_value = "bash")]
        preset: Preset,
        /// Override the preset's jitter.
        #[arg(long)]
        stddev: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// Seed for the jitter samples.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Invariant stack words around a return address across ASLR seeds.
    Fingerprint {
        #[command(flatten)]
        prog: ProgArgs,
        /// Profiling seeds: `a..b`, `a..=b` or a comma list.
        #[arg(long, value_parser = parse_seeds)]
        seeds: std::vec::Vec<u64>,
        #[arg(long)]
        trigger: u64,
        /// Return address as an offset from the code base.
        #[arg(long, value_parser = parse_u64)]
        ret_offset: u64,
    },
    /// Find a fingerprinted slot in a stopped run.
    Locate {
        #[command(flatten)]
        prog: ProgArgs,
        #[arg(long)]
        fingerprint: PathBuf,
        #[arg(long)]
        tick: u64,
    },
    /// Compatible-page probability curve as CSV.
    Prob {
        #[command(flatten)]
        flips: FlipArgs,
        /// Page counts: `a..b`, `a..=b` or a comma list.
        #[arg(long, value_parser = parse_seeds, default_value = "2200")]
        pages: std::vec::Vec<u64>,
    },
    /// Smallest page count reaching a target probability.
    Pages {
        #[command(flatten)]
        flips: FlipArgs,
        #[arg(long)]
        target: f64,
    },
    /// Bait-page placement probability per bait count as CSV.
    Baitsim {
        #[arg(long)]
        demand: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        b_min: u64,
        #[arg(long, default_value_t = 60)]
        b_max: u64,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Print the exact distribution instead of sampling.
        #[arg(long)]
        exact: bool,
    },
    /// Full pipeline: trace, diff, candidates, simulation, classification,
    /// timing. Writes a JSON-lines report.
    Scan(ScanArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FlipArgs {
    #[arg(long, default_value_t = 100.0)]
    pub n01: f64,
    #[arg(long, default_value_t = 100.0)]
    pub n10: f64,
    /// Bits per page.
    #[arg(long, default_value_t = memmodel::DEFAULT_PAGE_BITS)]
    pub bits: u64,
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    #[arg(long, default_value_t = 0)]
    pub l: u64,
}

impl FlipArgs {
    fn stats(&self, n: u64) -> FlipStatistics {
        FlipStatistics {
            n01: self.n01,
            n10: self.n10,
            s: self.bits,
            n,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScanArgs {
    /// Configuration file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fixture: Option<String>,
    #[arg(long)]
    pub program: Option<PathBuf>,
    #[arg(long)]
    pub correct: Option<PathBuf>,
    #[arg(long)]
    pub incorrect: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<u32>,
    #[arg(long, value_enum)]
    pub step2: Option<OnOff>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub exhaustive_offset: bool,
    #[arg(long)]
    pub low_bits_only: bool,
    #[arg(long)]
    pub degradation: Option<u64>,
    #[arg(long)]
    pub budget: Option<u64>,
    /// Also write the `label,count` summary here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

impl ScanArgs {
    /// Config-file entries followed by flag overrides.
    pub fn entries(&self) -> Result<Vec<config::Entry>, CliError> {
        let mut out = match &self.config {
            Some(p) => config::read_config(p)?,
            None => Vec::new(),
        };
        let here = std::env::current_dir().unwrap_or_default();
        let mut put = |key: &str, value: String| {
            out.push(config::Entry {
                key: key.into(),
                value,
                dir: here.clone(),
                origin: format!("--{key}"),
            });
        };
        if let Some(f) = &self.fixture {
            put("fixture", f.clone());
        }
        if let Some(p) = &self.program {
            put("program", p.display().to_string());
        }
        if let Some(p) = &self.correct {
            put("correct", p.display().to_string());
        }
        if let Some(p) = &self.incorrect {
            put("incorrect", p.display().to_string());
        }
        if let Some(d) = self.d {
            put("d", d.to_string());
        }
        if let Some(s) = self.step2 {
            put("step2", if s == OnOff::On { "on" } else { "off" }.into());
        }
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        if let Some(w) = self.workers {
            put("workers", w.to_string());
        }
        if let Some(m) = self.mode {
            put("fault_mode", FaultMode::from(m).as_str().into());
        }
        if self.exhaustive_offset {
            put("candidate_mode", "exhaustive_offset".into());
        }
        if self.low_bits_only {
            put("low_bits_only", "on".into());
        }
        if let Some(v) = self.degradation {
            put("degradation", v.to_string());
        }
        if let Some(v) = self.budget {
            put("budget", v.to_string());
        }
        Ok(out)
    }
}

#[derive(serde::Serialize)]
struct SimulateOutput<'a> {
    fired: bool,
    resumed_at: Option<u64>,
    slot_touched: bool,
    result: &'a ExecutionResult,
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("serializable");
    s.push('\n');
    s
}

fn parse_trace_file(p: &Path) -> Result<Trace, CliError> {
    tracer::parse_trace(&read_text(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))
}

fn parse_diff(text: &str) -> Result<DiffSet, CliError> {
    let addresses = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| parse_u64(l).map_err(config_err))
        .collect::<Result<_, _>>()?;
    Ok(DiffSet { addresses })
}

/// Run a scan and check the report before it is written.
pub fn run_scan(setup: &ScanSetup) -> Result<retflip::GadgetReport, CliError> {
    let report = faultsim::scan(
        &setup.program,
        &setup.correct,
        &setup.incorrect,
        &setup.config,
    )
    .map_err(|e| {
        if e.stage == "candidates" {
            CliError::Config(e.to_string())
        } else {
            CliError::Exec(e.to_string())
        }
    })?;
    report
        .check_counts()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(report)
}

/// Execute a subcommand and return what it prints.
pub fn execute(cmd: &Command) -> Result<String, CliError> {
    Ok(match cmd {
        Command::Assemble { source } => {
            let p = vm::assemble(&read_text(source)?).map_err(config_err)?;
            vm::write_object(&p)
        }
        Command::Disasm { program } => vm::disassemble(&load_program(program)?),
        Command::Run(a) => {
            let (p, input, cfg) = a.load()?;
            json(&vm::run(&p, &input, &cfg)?)
        }
        Command::Trace(a) => {
            let (p, input, cfg) = a.load()?;
            tracer::emit_trace(&tracer::trace(&p, &input, &cfg)?)
        }
        Command::Timings(a) => {
            let (p, input, cfg) = a.load()?;
            tracer::function_timings(&p, &input, &cfg)?.to_csv()
        }
        Command::Diff { correct, incorrect } => {
            let d =
                analysis::diff_traces(&parse_trace_file(correct)?, &parse_trace_file(incorrect)?)
                    .map_err(config_err)?;
            d.addresses.iter().map(|a| format!("{a:#x}\n")).collect()
        }
        Command::Candidates {
            trace,
            targets,
            d,
            low_bits_only,
            exhaustive_offset,
            workers,
        } => {
            let t = parse_trace_file(trace)?;
            let pairs = if *exhaustive_offset {
                analysis::candidates_exhaustive_offset(&t)
            } else {
                let targets = targets
                    .as_deref()
                    .map(read_text)
                    .transpose()?
                    .map(|s| parse_diff(&s))
                    .transpose()?;
                analysis::candidates_matched(&t, targets.as_ref(), *d, *low_bits_only, *workers)
                    .map_err(config_err)?
            };
            analysis::write_candidates(&pairs)
        }
        Command::Simulate {
            prog,
            src,
            dest,
            occurrence,
            mode,
        } => {
            let (p, input, cfg) = prog.load()?;
            let inj = Injection {
                pair: AddressPair::new(*src, *dest, vec![]),
                occurrence: *occurrence,
                mode: (*mode).into(),
            };
            let o = faultsim::inject_and_run(&p, &input, &cfg, &inj, None)?;
            json(&SimulateOutput {
                fired: o.fired,
                resumed_at: o.resumed_at,
                slot_touched: o.slot_touched,
                result: &o.result,
            })
        }
        Command::Classify { result, rules } => {
            let v: serde_json::Value =
                serde_json::from_str(&read_text(result)?).map_err(config_err)?;
            let v = v.get("result").cloned().unwrap_or(v);
            let r: ExecutionResult = serde_json::from_value(v).map_err(config_err)?;
            let extra = match rules {
                Some(p) => RuleSet::parse(&read_text(p)?).map_err(config_err)?.rules,
                None => Vec::new(),
            };
            format!(
                "{}\n",
                RuleSet::with_defaults(extra).classify_result(&r).label
            )
        }
        Command::Windows { prog, src } => {
            let (p, input, cfg) = prog.load()?;
            let mut s = String::from("slot_addr,start_tick,end_tick\n");
            for w in timing::windows(&p, &input, &cfg, *src)? {
                s.push_str(&format!(
                    "{:#x},{},{}\n",
                    w.slot_addr, w.start_tick, w.end_tick
                ));
            }
            s
        }
        Command::Sweep {
            prog,
            src,
            start,
            interval,
            points,
            preset,
            stddev,
            trials,
            sample_seed,
            workers,
        } => {
            let (p, input, cfg) = prog.load()?;
            let base = match preset {
                Preset::Bash => StopModel::BASH_LIKE,
                Preset::Python => StopModel::PYTHON_LIKE,
            };
            if stddev.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
                return Err(config_err("--stddev must be a finite non-negative number"));
            }
            let model = StopModel {
                stddev: stddev.unwrap_or(base.stddev),
                ..base
            };
            let sp = SweepParams {
                start: *start,
                interval: *interval,
                points: *points,
                model,
                trials: *trials,
                seed: *sample_seed,
                workers: *workers,
            };
            timing::time_sweep(&p, &input, &cfg, *src, &sp)
                .map_err(|e| match e {
                    timing::TimingError::Vm(v) => v.into(),
                    other => config_err(other),
                })?
                .to_csv()
        }
        Command::Fingerprint {
            prog,
            seeds,
            trigger,
            ret_offset,
        } => {
            let (p, input, cfg) = prog.load()?;
            timing::fingerprint_stack(&p, &input, &cfg, seeds, *trigger, *ret_offset)
                .map_err(|e| match e {
                    timing::FingerprintError::Vm(v) => v.into(),
                    other => CliError::Exec(format!("fingerprint failed: {other}")),
                })?
                .to_text()
        }
        Command::Locate {
            prog,
            fingerprint,
            tick,
        } => {
            let (p, input, cfg) = prog.load()?;
            let fp = Fingerprint::parse(&read_text(fingerprint)?).map_err(config_err)?;
            let snap = timing::snapshot_at(&p, &input, &cfg, *tick)?;
            let slot = timing::locate(&snap, &fp).map_err(|e| CliError::Exec(e.to_string()))?;
            format!("{slot:#x}\n")
        }
        Command::Prob { flips, pages } => {
            let req = FlipRequirement::counts(flips.k, flips.l);
            memmodel::probability_curve(&flips.stats(0), &req, pages).map_err(config_err)?
        }
        Command::Pages { flips, target } => {
            let req = FlipRequirement::counts(flips.k, flips.l);
            format!(
                "{}\n",
                memmodel::pages_needed(&flips.stats(0), &req, *target).map_err(config_err)?
            )
        }
        Command::Baitsim {
            demand,
            noise,
            b_min,
            b_max,
            trials,
            sample_seed,
            workers,
            exact,
        } => {
            let model = BaitModel {
                bait_count: 0,
                victim_demand: *demand,
                noise_rate: *noise,
            };
            let points = if *exact {
                (*b_min..=*b_max)
                    .map(|b| {
                        memmodel::bait_probability_exact(&BaitModel {
                            bait_count: b,
                            ..model
                        })
                        .map(|probability| memmodel::BaitPoint {
                            bait_count: b,
                            probability,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            } else {
                memmodel::bait_simulation(&model, *b_min..=*b_max, *trials, *sample_seed, *workers)
            }
            .map_err(config_err)?;
            memmodel::bait_curve_csv(&points)
        }
        Command::Scan(a) => {
            let setup = config::resolve(&a.entries()?)?;
            let report = run_scan(&setup)?;
            if let Some(p) = &a.summary {
                std::fs::write(p, report.summary_csv())
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            }
            report.to_jsonl()
        }
    })
}

/// Parse arguments, run, and write output. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.version {
        println!("{}", version_text());
        return 0;
    }
    let Some(cmd) = &cli.command else {
        eprintln!("retflip: no subcommand given (see --help)");
        return 2;
    };
    let result = execute(cmd).and_then(|text| match &cli.output {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(config_err)
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("retflip: {e}");
            e.exit_code()
        }
    }
}
