//! Per-node power-law verification over tumbling query windows.
//!
//! Each window is partitioned with a quad-tree; every node (root, internal
//! and leaf) is visited once in pre-order, its subtree's messages are binned
//! into a count series and the series is tested for a power law. Passing
//! nodes become events. Children are always visited, whatever the parent's
//! outcome, so a burst is reported at every scale where it shows.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DetectorConfig, GeoMessage, QueryWindow, Region};
use crate::powerlaw::{passes_powerlaw_exec, PowerLawFit};
use crate::quadtree::QuadTree;
use crate::rng;
use crate::timeseries::{bin_counts_n, CountSeries};

/// Number of hashtags/mentions reported per event.
pub const TOP_TAGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Basic,
    Advanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub node_path: String,
    pub region: Region,
    pub window_start: i64,
    /// Span of the series the event was verified on, in seconds.
    pub l: u64,
    pub message_ids: Vec<String>,
    pub fit: PowerLawFit,
    pub series: CountSeries,
    pub source: EventSource,
    pub top_tags: Vec<(String, usize)>,
}

impl Event {
    pub fn window_end(&self) -> i64 {
        self.window_start + self.l as i64
    }
}

/// Whether independent per-node work may run on the rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// Most frequent hashtags and mentions, ties broken alphabetically.
pub fn top_tags<'a>(messages: impl IntoIterator<Item = &'a GeoMessage>, limit: usize) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for m in messages {
        for t in m.hashtags.iter().chain(&m.mentions) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(limit);
    v
}

/// The time frame a set of nodes is verified over.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frame {
    pub start: i64,
    pub span: u64,
    pub bins: usize,
}

/// Builds a quad-tree over `messages` and tests every node.
///
/// Seeds are derived from `seed_key` and the node path, so the result does
/// not depend on the order in which nodes are evaluated.
pub(crate) fn detect_tree(
    messages: Vec<GeoMessage>,
    region: &Region,
    frame: Frame,
    config: &DetectorConfig,
    seed_key: &str,
    source: EventSource,
    exec: Execution,
) -> Result<Vec<Event>> {
    let inside: Vec<GeoMessage> = messages.into_iter().filter(|m| region.contains(m.lat, m.lon)).collect();
    let root_ts: Vec<i64> = inside.iter().map(|m| m.ts).collect();
    let root_series = bin_counts_n(&root_ts, frame.start, frame.span, frame.bins)?;
    // every subtree series is dominated by the root series
    if !testable(&root_series, config) {
        return Ok(Vec::new());
    }
    let tree = QuadTree::build(*region, config.m_s, config.max_depth, inside)?;
    let nodes = tree.nodes();

    let visit = |node: &&crate::quadtree::QuadNode| -> Result<Option<Event>> {
        let members = tree.collect_subtree(node);
        let ts: Vec<i64> = members.iter().map(|m| m.ts).collect();
        let series = bin_counts_n(&ts, frame.start, frame.span, frame.bins)?;
        if !testable(&series, config) {
            return Ok(None);
        }
        let seed = rng::derive_str(config.seed, &format!("{seed_key}/{}", node.path));
        let check = passes_powerlaw_exec(&series.counts, config, seed, exec == Execution::Parallel);
        if !check.passed {
            return Ok(None);
        }
        Ok(Some(Event {
            node_path: node.path.clone(),
            region: node.region,
            window_start: frame.start,
            l: frame.span,
            message_ids: members.iter().map(|m| m.id.clone()).collect(),
            fit: check.fit.expect("passing check carries a fit"),
            top_tags: top_tags(members.iter().copied(), TOP_TAGS),
            series,
            source,
        }))
    };

    let results: Vec<Result<Option<Event>>> = match exec {
        Execution::Parallel => nodes.par_iter().map(visit).collect(),
        Execution::Sequential => nodes.iter().map(visit).collect(),
    };
    let mut events = Vec::new();
    for r in results {
        if let Some(e) = r? {
            events.push(e);
        }
    }
    Ok(events)
}

/// Whether a node's series is fitted at all: it needs `min_tail` non-zero
/// bins and a `min_nonzero_frac` share of non-zero bins.
pub fn testable(series: &CountSeries, config: &DetectorConfig) -> bool {
    let nz = series.nonzero_bins();
    nz >= config.min_tail && nz as f64 >= config.min_nonzero_frac * series.len() as f64
}

/// Runs the detector on one query window; events are ordered by node path.
pub fn detect_window(window: &QueryWindow, region: &Region, config: &DetectorConfig) -> Result<Vec<Event>> {
    detect_window_with(window, region, config, Execution::Parallel)
}

pub fn detect_window_with(window: &QueryWindow, region: &Region, config: &DetectorConfig, exec: Execution) -> Result<Vec<Event>> {
    config.validate()?;
    if window.l != config.l {
        return Err(Error::Config(format!("window length {} differs from configured l = {}", window.l, config.l)));
    }
    let frame = Frame { start: window.start_ts, span: config.l, bins: config.n_min as usize };
    detect_tree(
        window.messages.clone(),
        region,
        frame,
        config,
        &format!("basic/{}", window.start_ts),
        EventSource::Basic,
        exec,
    )
}

/// Options for cutting a message stream into tumbling windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamOptions {
    /// Start of the first window; defaults to the first message's timestamp.
    pub origin: Option<i64>,
    /// Known end of the stream; windows ending at or before it are complete.
    /// Without it, a window is complete once a later message has been seen.
    pub end: Option<i64>,
    /// Seconds a message may lag behind the latest one seen.
    pub slack: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub window_start: i64,
    pub n_messages: usize,
    pub events: Vec<Event>,
}

/// Cuts an ordered stream into complete tumbling windows.
///
/// Only the open window (plus slack) is buffered.
pub struct Windows<I> {
    input: I,
    l: u64,
    opts: StreamOptions,
    next_start: Option<i64>,
    buffer: Vec<GeoMessage>,
    latest: Option<i64>,
    exhausted: bool,
    failed: bool,
}

impl<I: Iterator<Item = GeoMessage>> Windows<I> {
    pub fn new(input: I, l: u64, opts: StreamOptions) -> Self {
        Windows { input, l, opts, next_start: opts.origin, buffer: Vec::new(), latest: None, exhausted: false, failed: false }
    }

    fn window_is_complete(&self, start: i64) -> bool {
        let end = start + self.l as i64;
        if self.exhausted {
            let horizon = self.opts.end.or(self.latest).unwrap_or(i64::MIN);
            end <= horizon
        } else {
            self.latest.is_some_and(|t| t >= end + self.opts.slack)
        }
    }

    fn pull(&mut self) -> Result<()> {
        match self.input.next() {
            None => self.exhausted = true,
            Some(m) => {
                if let Some(latest) = self.latest {
                    if m.ts < latest - self.opts.slack {
                        return Err(Error::OutOfOrder { id: m.id, ts: m.ts, latest, slack: self.opts.slack });
                    }
                }
                let start = *self.next_start.get_or_insert(m.ts);
                if m.ts < start {
                    return Err(Error::OutOfOrder {
                        id: m.id,
                        ts: m.ts,
                        latest: self.latest.unwrap_or(start),
                        slack: self.opts.slack,
                    });
                }
                self.latest = Some(self.latest.map_or(m.ts, |l| l.max(m.ts)));
                if self.opts.end.map_or(true, |e| m.ts < e) {
                    self.buffer.push(m);
                }
            }
        }
        Ok(())
    }
}

impl<I: Iterator<Item = GeoMessage>> Iterator for Windows<I> {
    type Item = Result<QueryWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(start) = self.next_start {
                if self.window_is_complete(start) {
                    let end = start + self.l as i64;
                    let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.buffer).into_iter().partition(|m| m.ts < end);
                    self.buffer = rest;
                    self.next_start = Some(end);
                    return Some(QueryWindow::new(start, self.l, mine));
                }
            }
            if self.exhausted {
                return None;
            }
            if let Err(e) = self.pull() {
                self.failed = true;
                return Some(Err(e));
            }
        }
    }
}

/// Runs [`detect_window`] on consecutive tumbling windows of `messages`.
pub fn run_stream<'a, I>(
    messages: I,
    region: Region,
    config: &'a DetectorConfig,
    opts: StreamOptions,
) -> Result<impl Iterator<Item = Result<WindowReport>> + 'a>
where
    I: IntoIterator<Item = GeoMessage>,
    I::IntoIter: 'a,
{
    run_stream_with(messages, region, config, opts, Execution::Parallel)
}

pub fn run_stream_with<'a, I>(
    messages: I,
    region: Region,
    config: &'a DetectorConfig,
    opts: StreamOptions,
    exec: Execution,
) -> Result<impl Iterator<Item = Result<WindowReport>> + 'a>
where
    I: IntoIterator<Item = GeoMessage>,
    I::IntoIter: 'a,
{
    config.validate()?;
    let windows = Windows::new(messages.into_iter(), config.l, opts);
    Ok(windows.map(move |w| {
        let w = w?;
        let events = detect_window_with(&w, &region, config, exec)?;
        Ok(WindowReport { window_start: w.start_ts, n_messages: w.len(), events })
    }))
}
