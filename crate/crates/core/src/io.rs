//! On-disk formats.
//!
//! - Message streams: one JSON object per line (`id`, `ts`, `lat`, `lon`,
//!   `text`, optional `hashtags` and `mentions`).
//! - Event reports: JSON lines, a `header` line, one `event` line per
//!   detection, and a `footer` line with totals.
//! - Scenario files: TOML with top-level scenario keys and one `[[burst]]`
//!   table per burst.
//! - Label sidecars: the ground truth of a generated stream as one JSON document.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::detect_advanced::AdvancedConfig;
use crate::detect_basic::{Event, EventSource};
use crate::error::{Error, Result};
use crate::model::{DetectorConfig, GeoMessage, Region};
use crate::powerlaw::PowerLawFit;
use crate::synth::{BurstSpec, EvalScope, GroundTruth, SyntheticScenario};
use crate::timeseries::CountSeries;

fn io_err(e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("i/o: {e}"))
}

/// Iterator over the messages of a line-delimited stream.
///
/// Blank lines are skipped. Hashtags and mentions are derived from the text
/// when a record carries neither.
pub struct MessageReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> MessageReader<R> {
    pub fn new(reader: R) -> Self {
        MessageReader { lines: reader.lines(), line: 0 }
    }
}

impl<R: BufRead> Iterator for MessageReader<R> {
    type Item = Result<GeoMessage>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let line = self.line;
            let raw = match raw {
                Ok(r) => r,
                Err(e) => return Some(Err(Error::Parse { line, msg: e.to_string() })),
            };
            if raw.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<GeoMessage>(&raw)
                .map_err(|e| Error::Parse { line, msg: e.to_string() })
                .and_then(|m| {
                    m.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                    Ok(m.with_derived_tags())
                });
            return Some(parsed);
        }
    }
}

pub fn read_messages<R: BufRead>(reader: R) -> MessageReader<R> {
    MessageReader::new(reader)
}

pub fn write_message<W: Write>(w: &mut W, message: &GeoMessage) -> Result<()> {
    serde_json::to_writer(&mut *w, message).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)
}

pub const REPORT_FORMAT: &str = "plevent-events";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub format: String,
    pub version: u32,
    pub mode: EventSource,
    pub region: Region,
    pub config: DetectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advanced: Option<AdvancedConfig>,
}

impl ReportHeader {
    pub fn new(mode: EventSource, region: Region, config: DetectorConfig, advanced: Option<AdvancedConfig>) -> Self {
        ReportHeader { format: REPORT_FORMAT.into(), version: REPORT_VERSION, mode, region, config, advanced }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFooter {
    pub windows: usize,
    /// Start of the first processed window; windows are contiguous from there.
    pub first_window: Option<i64>,
    pub events: usize,
}

/// Flat form of an [`Event`] as written to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub node_path: String,
    pub region: Region,
    pub window_start: i64,
    pub l: u64,
    pub p_value: Option<f64>,
    pub alpha: f64,
    pub xmin: u64,
    pub ks: f64,
    pub n_tail: usize,
    pub source: EventSource,
    pub message_ids: Vec<String>,
    pub top_tags: Vec<(String, usize)>,
    pub counts: Vec<u64>,
}

impl From<&Event> for EventRecord {
    fn from(e: &Event) -> Self {
        EventRecord {
            node_path: e.node_path.clone(),
            region: e.region,
            window_start: e.window_start,
            l: e.l,
            p_value: e.fit.p_value,
            alpha: e.fit.alpha,
            xmin: e.fit.xmin,
            ks: e.fit.ks,
            n_tail: e.fit.n_tail,
            source: e.source,
            message_ids: e.message_ids.clone(),
            top_tags: e.top_tags.clone(),
            counts: e.series.counts.clone(),
        }
    }
}

impl From<EventRecord> for Event {
    fn from(r: EventRecord) -> Self {
        Event {
            fit: PowerLawFit { alpha: r.alpha, xmin: r.xmin, ks: r.ks, n_tail: r.n_tail, n: r.counts.len(), p_value: r.p_value },
            series: CountSeries { start_ts: r.window_start, l: r.l, counts: r.counts },
            node_path: r.node_path,
            region: r.region,
            window_start: r.window_start,
            l: r.l,
            message_ids: r.message_ids,
            source: r.source,
            top_tags: r.top_tags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ReportLine {
    Header(ReportHeader),
    Event(EventRecord),
    Footer(ReportFooter),
}

fn write_line<W: Write>(w: &mut W, line: &ReportLine) -> Result<()> {
    serde_json::to_writer(&mut *w, line).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)
}

/// Streams an event report: the header on creation, events as they come,
/// the footer on [`EventWriter::finish`].
pub struct EventWriter<W: Write> {
    out: W,
    events: usize,
}

impl<W: Write> EventWriter<W> {
    pub fn new(mut out: W, header: ReportHeader) -> Result<Self> {
        write_line(&mut out, &ReportLine::Header(header))?;
        Ok(EventWriter { out, events: 0 })
    }

    pub fn write(&mut self, event: &Event) -> Result<()> {
        self.events += 1;
        write_line(&mut self.out, &ReportLine::Event(event.into()))
    }

    pub fn finish(mut self, windows: usize, first_window: Option<i64>) -> Result<W> {
        let footer = ReportFooter { windows, first_window, events: self.events };
        write_line(&mut self.out, &ReportLine::Footer(footer))?;
        self.out.flush().map_err(io_err)?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: ReportHeader,
    pub events: Vec<Event>,
    /// Missing when the producer stopped before finishing.
    pub footer: Option<ReportFooter>,
}

impl Report {
    /// The windows covered by the report, for [`crate::synth::evaluate`].
    pub fn eval_scope(&self) -> Result<EvalScope> {
        let f = self.footer.as_ref().ok_or(Error::Parse { line: 0, msg: "report has no footer".into() })?;
        let l = self.header.config.l as i64;
        let windows = match f.first_window {
            Some(first) => (0..f.windows as i64).map(|k| (first + k * l, first + (k + 1) * l)).collect(),
            None => Vec::new(),
        };
        Ok(EvalScope { windows, min_tail: self.header.config.min_tail })
    }
}

pub fn read_report<R: BufRead>(reader: R) -> Result<Report> {
    let mut header = None;
    let mut events = Vec::new();
    let mut footer = None;
    for (i, raw) in reader.lines().enumerate() {
        let line = i + 1;
        let raw = raw.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(&raw).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let misplaced = |what: &str| Error::Parse { line, msg: format!("unexpected {what} line") };
        match parsed {
            ReportLine::Header(h) if header.is_none() => {
                if h.format != REPORT_FORMAT || h.version != REPORT_VERSION {
                    return Err(Error::Parse { line, msg: format!("unsupported report {} v{}", h.format, h.version) });
                }
                header = Some(h);
            }
            ReportLine::Header(_) => return Err(misplaced("header")),
            _ if header.is_none() => return Err(misplaced("non-header first")),
            _ if footer.is_some() => return Err(misplaced("trailing")),
            ReportLine::Event(e) => events.push(e.into()),
            ReportLine::Footer(f) => {
                if f.events != events.len() {
                    return Err(Error::Parse { line, msg: format!("footer counts {} events, report has {}", f.events, events.len()) });
                }
                footer = Some(f);
            }
        }
    }
    let header = header.ok_or(Error::Parse { line: 1, msg: "empty report".into() })?;
    Ok(Report { header, events, footer })
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    region: Region,
    #[serde(default)]
    origin: i64,
    duration: f64,
    background_rate: f64,
    background_vocab: Vec<String>,
    seed: u64,
    #[serde(default, rename = "burst")]
    bursts: Vec<BurstSpec>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses a TOML scenario file and validates it.
pub fn parse_scenario(text: &str) -> Result<SyntheticScenario> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        msg: e.message().to_string(),
    })?;
    let r = f.region;
    let region = Region::new(r.min_lat, r.min_lon, r.max_lat, r.max_lon)?;
    let sc = SyntheticScenario {
        region,
        origin: f.origin,
        duration: f.duration,
        background_rate: f.background_rate,
        background_vocab: f.background_vocab,
        bursts: f.bursts,
        seed: f.seed,
    };
    sc.validate()?;
    Ok(sc)
}

pub fn format_scenario(sc: &SyntheticScenario) -> Result<String> {
    let f = ScenarioFile {
        region: sc.region,
        origin: sc.origin,
        duration: sc.duration,
        background_rate: sc.background_rate,
        background_vocab: sc.background_vocab.clone(),
        seed: sc.seed,
        bursts: sc.bursts.clone(),
    };
    toml::to_string(&f).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_labels<W: Write>(w: &mut W, truth: &GroundTruth) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, truth).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)
}

pub fn read_labels<R: std::io::Read>(reader: R) -> Result<GroundTruth> {
    serde_json::from_reader(reader).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
}
