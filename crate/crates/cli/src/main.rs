//! `plevent`: command-line front end.
//!
//! Exit codes: 0 success, 1 bad arguments, configuration or I/O, 2 malformed
//! input (the message names the line), 3 too little data.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use plevent::detect_advanced::{run_advanced, AdvancedConfig, HashingEmbedder};
use plevent::detect_basic::{run_stream_with, EventSource, Execution, StreamOptions};
use plevent::io::{self as pio, EventWriter, ReportHeader};
use plevent::model::{DetectorConfig, GeoMessage, Region};
use plevent::powerlaw::{passes_powerlaw, Rejection};
use plevent::selfsim::{self_similar_verdict, HurstMethod};
use plevent::synth::evaluate;
use plevent::timeseries::bin_counts;
use plevent::Error;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Parse(String),
    Short(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Parse(_) => 2,
            Failure::Short(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Parse(m) | Failure::Short(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Parse { .. } => Failure::Parse(m),
            Error::SeriesTooShort { .. }
            | Error::InsufficientTail { .. }
            | Error::DegenerateTail(_)
            | Error::DegenerateSeries(_)
            | Error::EmptyTail(_) => Failure::Short(m),
            _ => Failure::Usage(m),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(format!("i/o: {e}"))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "plevent", version, about = "Event detection in geo-tagged message streams by power-law verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the Hurst parameter of a stream's message counts.
    Hurst(HurstArgs),
    /// Fit a discrete power law to a list of counts and test it.
    Plfit(PlfitArgs),
    /// Detect events in a message stream.
    Detect(DetectArgs),
    /// Generate a labelled synthetic stream from a scenario file.
    Synth(SynthArgs),
    /// Score an event report against ground-truth labels.
    Eval(EvalArgs),
}

#[derive(Args)]
struct HurstArgs {
    /// Message stream, one JSON record per line (`-` for stdin).
    input: PathBuf,
    /// Estimators to run.
    #[arg(long, value_delimiter = ',', default_values = ["agg_var", "rs", "whittle"])]
    methods: Vec<String>,
    /// Bin width in seconds.
    #[arg(long, default_value_t = 60)]
    d: u64,
    /// Start of the first bin; defaults to the first message.
    #[arg(long)]
    origin: Option<i64>,
}

#[derive(Args)]
struct PlfitArgs {
    /// File of non-negative integers separated by whitespace or commas (`-` for stdin).
    input: Option<PathBuf>,
    /// Counts given inline instead of a file.
    #[arg(long, value_delimiter = ',', conflicts_with = "input")]
    counts: Option<Vec<u64>>,
    #[arg(long, default_value_t = 100)]
    n_boot: usize,
    #[arg(long, default_value_t = 10)]
    min_tail: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha_reject: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Basic,
    Advanced,
}

#[derive(Args)]
struct DetectArgs {
    /// Message stream sorted by timestamp (`-` for stdin).
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// Study area as `min_lat,min_lon,max_lat,max_lon`.
    #[arg(long, value_parser = parse_region, allow_hyphen_values = true)]
    region: Region,
    #[arg(long, value_enum, default_value_t = Mode::Basic)]
    mode: Mode,
    /// Report destination (`-` for stdout).
    #[arg(long, default_value = "-")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    advanced: AdvancedArgs,
    /// Start of the first window; defaults to the first message.
    #[arg(long)]
    origin: Option<i64>,
    /// End of the stream; the last window is processed if it ends by then.
    #[arg(long)]
    end: Option<i64>,
    /// Seconds a message may arrive behind the latest one.
    #[arg(long, default_value_t = 0)]
    slack: i64,
    /// Evaluate nodes and bootstrap replicas on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Parameter set: melbourne, la or sydney.
    #[arg(long, default_value = "melbourne")]
    preset: String,
    /// Query window length in seconds.
    #[arg(long)]
    l: Option<u64>,
    /// Bins per window.
    #[arg(long, conflicts_with = "d")]
    n_min: Option<u32>,
    /// Bin width in seconds; must divide l.
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    m_s: Option<usize>,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    alpha_reject: Option<f64>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    min_tail: Option<usize>,
    #[arg(long)]
    min_nonzero_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> CliResult<DetectorConfig> {
        let mut c = DetectorConfig::preset(&self.preset)
            .ok_or_else(|| Failure::Usage(format!("unknown preset {:?} (expected melbourne, la or sydney)", self.preset)))?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(l, n_min, m_s, max_depth, alpha_reject, n_boot, min_tail, min_nonzero_frac, seed);
        if let Some(d) = self.d {
            let n = DetectorConfig::with_bin_width(c.l, d)?.n_min;
            c.n_min = n;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct AdvancedArgs {
    #[arg(long)]
    n_sw: Option<usize>,
    #[arg(long)]
    verify_len: Option<u64>,
    #[arg(long)]
    verify_rounds: Option<usize>,
    #[arg(long)]
    share_frac: Option<f64>,
    #[arg(long)]
    top_x: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    birch_branching: Option<usize>,
    #[arg(long)]
    t_step: Option<f64>,
    #[arg(long)]
    small_cluster_size: Option<usize>,
    #[arg(long)]
    small_cluster_frac: Option<f64>,
    #[arg(long)]
    dominant_frac: Option<f64>,
}

impl AdvancedArgs {
    fn build(&self) -> CliResult<AdvancedConfig> {
        let mut a = AdvancedConfig::default();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { a.$f = v; })* };
        }
        set!(n_sw, verify_len, verify_rounds, share_frac, top_x, dim, birch_branching, t_step, small_cluster_size, small_cluster_frac, dominant_frac);
        a.validate()?;
        Ok(a)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Stream destination (`-` for stdout).
    #[arg(long, default_value = "-")]
    out: PathBuf,
    /// Label sidecar; defaults to `<out>.labels.json`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Event report (`-` for stdin).
    #[arg(long, default_value = "-")]
    events: PathBuf,
    /// Label sidecar written by `synth`.
    #[arg(long)]
    labels: PathBuf,
}

fn parse_region(s: &str) -> Result<Region, String> {
    let v = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let [a, b, c, d] = v[..] else {
        return Err(format!("expected 4 comma-separated numbers, got {}", v.len()));
    };
    Region::new(a, b, c, d).map_err(|e| e.to_string())
}

fn is_stdio(p: &Path) -> bool {
    p.as_os_str() == "-"
}

fn open_input(p: &Path) -> CliResult<Box<dyn BufRead>> {
    if is_stdio(p) {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    Ok(Box::new(BufReader::new(f)))
}

fn open_output(p: &Path) -> CliResult<Box<dyn Write>> {
    if is_stdio(p) {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let f = File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn read_all_messages(p: &Path) -> CliResult<Vec<GeoMessage>> {
    Ok(pio::read_messages(open_input(p)?).collect::<Result<Vec<_>, _>>()?)
}

fn cmd_hurst(a: &HurstArgs) -> CliResult {
    let methods = a
        .methods
        .iter()
        .map(|m| HurstMethod::parse(m).ok_or_else(|| Failure::Usage(format!("unknown method {m:?} (expected agg_var, rs or whittle)"))))
        .collect::<CliResult<Vec<_>>>()?;
    if a.d == 0 {
        return Err(Failure::Usage("d must be positive".into()));
    }
    let ts: Vec<i64> = read_all_messages(&a.input)?.iter().map(|m| m.ts).collect();
    let (Some(&first), Some(&last)) = (ts.iter().min(), ts.iter().max()) else {
        return Err(Failure::Short("no messages".into()));
    };
    let start = a.origin.unwrap_or(first);
    if start > first {
        return Err(Failure::Usage(format!("origin {start} is after the first message at {first}")));
    }
    let bins = (last - start) as u64 / a.d + 1;
    let series = bin_counts(&ts, start, bins * a.d, a.d)?.to_f64();
    println!("bins {} d {}", series.len(), a.d);
    let mut estimates = Vec::new();
    for m in methods {
        let e = m.estimate(&series)?;
        match (e.ci_low, e.ci_high) {
            (Some(lo), Some(hi)) => println!("{:<8} H = {:.4}  95% CI [{lo:.4}, {hi:.4}]", m.name(), e.h),
            _ => println!("{:<8} H = {:.4}", m.name(), e.h),
        }
        estimates.push(e);
    }
    let verdict = if self_similar_verdict(&estimates) { "self-similar" } else { "not self-similar" };
    println!("verdict {verdict}");
    Ok(())
}

fn parse_counts(r: impl BufRead) -> CliResult<Vec<u64>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v = tok.parse().map_err(|_| Failure::Parse(format!("parse error at line {}: {tok:?} is not a non-negative integer", i + 1)))?;
            out.push(v);
        }
    }
    Ok(out)
}

fn cmd_plfit(a: &PlfitArgs) -> CliResult {
    let data = match (&a.counts, &a.input) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => parse_counts(open_input(p)?)?,
        (None, None) => return Err(Failure::Usage("give an input file or --counts".into())),
    };
    if data.is_empty() {
        return Err(Failure::Short("no counts".into()));
    }
    let config = DetectorConfig { n_boot: a.n_boot, min_tail: a.min_tail, alpha_reject: a.alpha_reject, seed: a.seed, ..Default::default() };
    config.validate()?;
    let check = passes_powerlaw(&data, &config);
    let fit = match (&check.fit, &check.rejection) {
        (Some(f), _) => f,
        (None, Some(Rejection::InsufficientTail { found, min })) => {
            return Err(Failure::Short(format!("insufficient tail: {found} positive values, need at least {min}")))
        }
        (None, Some(Rejection::DegenerateTail)) => return Err(Failure::Short("degenerate tail: all positive values are equal".into())),
        (None, r) => return Err(Failure::Usage(format!("fit failed: {r:?}"))),
    };
    println!("n {}", data.len());
    println!("alpha {:.4}", fit.alpha);
    println!("xmin {}", fit.xmin);
    println!("n_tail {}", fit.n_tail);
    println!("ks {:.4}", fit.ks);
    if let Some(p) = fit.p_value {
        println!("p {p:.4}");
    }
    match &check.rejection {
        None => println!("verdict power-law plausible"),
        Some(Rejection::LowPValue { .. }) => println!("verdict rejected"),
        Some(r) => return Err(Failure::Usage(format!("significance test failed: {r:?}"))),
    }
    Ok(())
}

/// Passes messages through until the first parse error, which it keeps.
struct UntilError<I> {
    inner: I,
    error: Option<Error>,
}

impl<I: Iterator<Item = plevent::Result<GeoMessage>>> Iterator for UntilError<I> {
    type Item = GeoMessage;

    fn next(&mut self) -> Option<GeoMessage> {
        if self.error.is_some() {
            return None;
        }
        match self.inner.next()? {
            Ok(m) => Some(m),
            Err(e) => {
                self.error = Some(e);
                None
            }
        }
    }
}

fn cmd_detect(a: &DetectArgs) -> CliResult {
    let config = a.config.build()?;
    let adv = match a.mode {
        Mode::Advanced => Some(a.advanced.build()?),
        Mode::Basic => None,
    };
    let region = a.region;
    let opts = StreamOptions { origin: a.origin, end: a.end, slack: a.slack };
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let source = if adv.is_some() { EventSource::Advanced } else { EventSource::Basic };
    let mut w = EventWriter::new(open_output(&a.out)?, ReportHeader::new(source, region, config.clone(), adv.clone()))?;
    let mut windows = 0;
    let mut first = None;
    match &adv {
        None => {
            let cell = std::cell::RefCell::new(UntilError { inner: pio::read_messages(open_input(&a.input)?), error: None });
            let stream = std::iter::from_fn(|| cell.borrow_mut().next());
            for report in run_stream_with(stream, region, &config, opts, exec)? {
                let report = report?;
                first.get_or_insert(report.window_start);
                windows += 1;
                for e in &report.events {
                    w.write(e)?;
                }
            }
            if let Some(e) = cell.into_inner().error {
                return Err(e.into());
            }
        }
        Some(adv) => {
            let messages = read_all_messages(&a.input)?;
            let embedder = HashingEmbedder::new(adv.dim);
            for (report, step) in run_advanced(&messages, region, &config, adv, &embedder, opts, exec)? {
                first.get_or_insert(report.window_start);
                windows += 1;
                if step.feed_exhausted {
                    eprintln!("window {}: verification feed ran out after {} rounds", report.window_start, step.rounds_completed);
                }
                for e in &report.events {
                    w.write(e)?;
                }
            }
        }
    }
    w.finish(windows, first)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.scenario).map_err(|e| Failure::Usage(format!("{}: {e}", a.scenario.display())))?;
    let mut sc = pio::parse_scenario(&text)?;
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    let labels = match (&a.labels, is_stdio(&a.out)) {
        (Some(p), _) => p.clone(),
        (None, false) => {
            let mut p = a.out.clone().into_os_string();
            p.push(".labels.json");
            PathBuf::from(p)
        }
        (None, true) => return Err(Failure::Usage("--labels is required when the stream goes to stdout".into())),
    };
    let stream = sc.generate()?;
    let mut out = open_output(&a.out)?;
    for m in &stream.messages {
        pio::write_message(&mut out, m)?;
    }
    out.flush()?;
    let mut lf = open_output(&labels)?;
    pio::write_labels(&mut lf, &stream.truth)?;
    lf.flush()?;
    eprintln!("{} messages, {} bursts, labels in {}", stream.messages.len(), stream.truth.bursts.len(), labels.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let report = pio::read_report(open_input(&a.events)?)?;
    let f = File::open(&a.labels).map_err(|e| Failure::Usage(format!("{}: {e}", a.labels.display())))?;
    let truth = pio::read_labels(BufReader::new(f))?;
    let r = evaluate(&report.events, &truth, &report.eval_scope()?);
    println!("windows {}", report.footer.as_ref().map_or(0, |f| f.windows));
    println!("detected {}", r.n_detected);
    println!("true_detections {}", r.n_true_detections);
    println!("bursts {}/{}", r.n_true, r.n_total);
    if r.precision_undefined {
        println!("precision {:.3} (no detections)", r.precision);
    } else {
        println!("precision {:.3}", r.precision);
    }
    println!("pseudo_recall {:.3}", r.pseudo_recall);
    println!("localized {}", r.n_localized);
    for q in [50.0, 90.0] {
        match r.latency_percentile(q) {
            Some(v) => println!("latency_p{q} {v}"),
            None => println!("latency_p{q} -"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Hurst(a) => cmd_hurst(a),
        Command::Plfit(a) => cmd_plfit(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("plevent: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
