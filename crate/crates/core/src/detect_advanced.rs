//! Semantic clustering in front of the power-law check.
//!
//! Messages of the last `n_sw` query windows are embedded and clustered
//! with a CF-tree whose radius threshold grows until the clustering is
//! neither fragmented nor dominated by one cluster. Each cluster's share of
//! the newest window goes through the basic per-node detector. Candidates
//! then have to reappear in `verify_rounds` re-clusterings that add
//! successive verification feeds and embed raw text instead of keywords,
//! and finally most of their messages must carry one of their own top tags.

use std::collections::{HashMap, HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect_basic::{detect_tree, top_tags, Event, EventSource, Execution, Frame, StreamOptions, Windows, WindowReport};
use crate::error::{Error, Result};
use crate::model::{tokenize, DetectorConfig, GeoMessage, QueryWindow, Region};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvancedConfig {
    /// Query windows kept in the sliding buffer.
    pub n_sw: usize,
    /// Length of one verification feed, in seconds.
    pub verify_len: u64,
    pub verify_rounds: usize,
    /// Shared-message share (of the smaller set) that makes two clusters match.
    pub share_frac: f64,
    /// Hashtags and mentions considered in the clean-up.
    pub top_x: usize,
    pub dim: usize,
    pub birch_branching: usize,
    pub t_step: f64,
    pub small_cluster_size: usize,
    pub small_cluster_frac: f64,
    pub dominant_frac: f64,
}

impl Default for AdvancedConfig {
    fn default() -> Self {
        AdvancedConfig {
            n_sw: 6,
            verify_len: 300,
            verify_rounds: 3,
            share_frac: 0.5,
            top_x: 10,
            dim: 256,
            birch_branching: 50,
            t_step: 0.05,
            small_cluster_size: 10,
            small_cluster_frac: 0.05,
            dominant_frac: 0.5,
        }
    }
}

impl AdvancedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        for (name, v) in [
            ("share_frac", self.share_frac),
            ("small_cluster_frac", self.small_cluster_frac),
            ("dominant_frac", self.dominant_frac),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.n_sw == 0 {
            return bad("n_sw must be positive");
        }
        if self.verify_len == 0 {
            return bad("verify_len must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.birch_branching < 2 {
            return bad("birch_branching must be at least 2");
        }
        if !(self.t_step > 0.0 && self.t_step <= MAX_THRESHOLD) {
            return bad("t_step must lie in (0, 2]");
        }
        if self.top_x == 0 {
            return bad("top_x must be positive");
        }
        Ok(())
    }
}

/// Largest distance between unit vectors.
pub const MAX_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Hashtags, mentions and words longer than three characters.
    Keywords,
    /// Every token of the text.
    Text,
}

/// Maps a message to a unit vector (or zero when it has no usable tokens).
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, message: &GeoMessage, mode: EmbedMode) -> Vec<f64>;
}

/// Signed feature hashing of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim }
    }

    pub fn embed_tokens<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens {
            let bucket = (rng::derive_str(0, t) % self.dim as u64) as usize;
            let sign = if rng::derive_str(1, t) >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        normalize(&mut v);
        v
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, message: &GeoMessage, mode: EmbedMode) -> Vec<f64> {
        match mode {
            EmbedMode::Text => self.embed_tokens(tokenize(&message.text).tokens.iter().map(String::as_str)),
            EmbedMode::Keywords => {
                let toks = tokenize(&message.text);
                let words = toks.tokens.iter().filter(|t| t.chars().count() > 3);
                self.embed_tokens(message.hashtags.iter().chain(&message.mentions).chain(words).map(String::as_str))
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Clustering feature: count, linear sum and sum of squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeature {
    pub n: usize,
    pub linear_sum: Vec<f64>,
    pub square_sum: f64,
}

impl ClusterFeature {
    pub fn empty(dim: usize) -> Self {
        ClusterFeature { n: 0, linear_sum: vec![0.0; dim], square_sum: 0.0 }
    }

    pub fn from_point(x: &[f64]) -> Self {
        ClusterFeature { n: 1, linear_sum: x.to_vec(), square_sum: x.iter().map(|v| v * v).sum() }
    }

    pub fn add(&mut self, other: &ClusterFeature) {
        self.n += other.n;
        self.linear_sum.iter_mut().zip(&other.linear_sum).for_each(|(a, b)| *a += b);
        self.square_sum += other.square_sum;
    }

    pub fn merged(&self, other: &ClusterFeature) -> ClusterFeature {
        let mut m = self.clone();
        m.add(other);
        m
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.linear_sum.iter().map(|v| v / n).collect()
    }

    /// Root-mean-square distance of members to the centroid.
    pub fn radius(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        let c2: f64 = self.linear_sum.iter().map(|v| (v / n) * (v / n)).sum();
        (self.square_sum / n - c2).max(0.0).sqrt()
    }
}

/// A clustering feature plus the cached squared norm of its linear sum.
#[derive(Debug, Clone)]
struct Summary {
    cf: ClusterFeature,
    ls2: f64,
}

impl Summary {
    fn new(cf: ClusterFeature) -> Self {
        let ls2 = cf.linear_sum.iter().map(|v| v * v).sum();
        Summary { cf, ls2 }
    }

    fn add(&mut self, other: &ClusterFeature) {
        self.cf.add(other);
        self.ls2 = self.cf.linear_sum.iter().map(|v| v * v).sum();
    }

    fn dot(&self, p: &Point) -> f64 {
        p.nz.iter().map(|&(i, v)| self.cf.linear_sum[i] * v).sum()
    }

    /// Squared distance from the centroid to `p`.
    fn dist2(&self, p: &Point) -> f64 {
        let n = self.cf.n.max(1) as f64;
        self.ls2 / (n * n) - 2.0 * self.dot(p) / n + p.norm2
    }

    /// Radius after absorbing `p`.
    fn radius_with(&self, p: &Point) -> f64 {
        let n = (self.cf.n + 1) as f64;
        let ls2 = self.ls2 + 2.0 * self.dot(p) + p.norm2;
        ((self.cf.square_sum + p.norm2) / n - ls2 / (n * n)).max(0.0).sqrt()
    }
}

/// A point with its non-zero coordinates listed (hashed embeddings are sparse).
struct Point {
    cf: ClusterFeature,
    nz: Vec<(usize, f64)>,
    norm2: f64,
}

impl Point {
    fn new(x: &[f64]) -> Self {
        let nz: Vec<(usize, f64)> = x.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
        let cf = ClusterFeature::from_point(x);
        let norm2 = cf.square_sum;
        Point { cf, nz, norm2 }
    }
}

#[derive(Debug, Clone)]
struct SubCluster {
    sum: Summary,
    members: Vec<usize>,
}

#[derive(Debug, Clone)]
enum CfKind {
    Leaf(Vec<SubCluster>),
    Branch(Vec<CfNode>),
}

#[derive(Debug, Clone)]
struct CfNode {
    sum: Summary,
    kind: CfKind,
}

impl CfNode {
    fn leaf(dim: usize) -> Self {
        CfNode { sum: Summary::new(ClusterFeature::empty(dim)), kind: CfKind::Leaf(Vec::new()) }
    }

    /// Inserts one point; returns the new sibling when this node had to split.
    fn insert(&mut self, p: &Point, idx: usize, threshold: f64, branching: usize) -> Option<CfNode> {
        self.sum.add(&p.cf);
        let dim = p.cf.linear_sum.len();
        match &mut self.kind {
            CfKind::Leaf(subs) => {
                match nearest(subs.iter().map(|s| &s.sum), p) {
                    Some(i) if subs[i].sum.radius_with(p) <= threshold => {
                        subs[i].sum.add(&p.cf);
                        subs[i].members.push(idx);
                    }
                    _ => subs.push(SubCluster { sum: Summary::new(p.cf.clone()), members: vec![idx] }),
                }
                if subs.len() <= branching {
                    return None;
                }
                let (a, b) = split_by_seeds(std::mem::take(subs), |s| &s.sum.cf);
                *subs = a;
                self.sum = total(subs.iter().map(|s| &s.sum.cf), dim);
                let sum = total(b.iter().map(|s| &s.sum.cf), dim);
                Some(CfNode { sum, kind: CfKind::Leaf(b) })
            }
            CfKind::Branch(children) => {
                let i = nearest(children.iter().map(|c| &c.sum), p).expect("branch has children");
                if let Some(sibling) = children[i].insert(p, idx, threshold, branching) {
                    children.insert(i + 1, sibling);
                }
                if children.len() <= branching {
                    return None;
                }
                let (a, b) = split_by_seeds(std::mem::take(children), |c| &c.sum.cf);
                *children = a;
                self.sum = total(children.iter().map(|c| &c.sum.cf), dim);
                let sum = total(b.iter().map(|c| &c.sum.cf), dim);
                Some(CfNode { sum, kind: CfKind::Branch(b) })
            }
        }
    }

    fn leaves<'a>(&'a self, out: &mut Vec<&'a SubCluster>) {
        match &self.kind {
            CfKind::Leaf(subs) => out.extend(subs.iter()),
            CfKind::Branch(children) => children.iter().for_each(|c| c.leaves(out)),
        }
    }
}

fn sum_cf<'a>(cfs: impl Iterator<Item = &'a ClusterFeature>, dim: usize) -> ClusterFeature {
    let mut total = ClusterFeature::empty(dim);
    cfs.for_each(|c| total.add(c));
    total
}

fn total<'a>(cfs: impl Iterator<Item = &'a ClusterFeature>, dim: usize) -> Summary {
    Summary::new(sum_cf(cfs, dim))
}

/// Index of the entry whose centroid is closest to `p` (first on ties).
fn nearest<'a>(entries: impl Iterator<Item = &'a Summary>, p: &Point) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in entries.enumerate() {
        let d = s.dist2(p);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
}

/// Splits entries around the two most distant centroids.
fn split_by_seeds<T>(entries: Vec<T>, cf: impl Fn(&T) -> &ClusterFeature) -> (Vec<T>, Vec<T>) {
    let centroids: Vec<Sparse> = entries.iter().map(|e| Sparse::centroid(cf(e))).collect();
    let d = |i: usize, j: usize| centroids[i].norm2 + centroids[j].norm2 - 2.0 * centroids[i].dot(&centroids[j]);
    let (mut s1, mut s2, mut far) = (0, 1, f64::NEG_INFINITY);
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let dij = d(i, j);
            if dij > far {
                (s1, s2, far) = (i, j, dij);
            }
        }
    }
    // ties go to the smaller side so equidistant entries cannot pile up
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, e) in entries.into_iter().enumerate() {
        let (da, db) = (d(i, s1), d(i, s2));
        let to_b = i == s2 || (i != s1 && (db < da - 1e-12 || ((db - da).abs() <= 1e-12 && b.len() < a.len())));
        if to_b {
            b.push(e);
        } else {
            a.push(e);
        }
    }
    (a, b)
}

struct Sparse {
    nz: Vec<(usize, f64)>,
    norm2: f64,
}

impl Sparse {
    fn centroid(cf: &ClusterFeature) -> Self {
        let n = cf.n.max(1) as f64;
        let nz: Vec<(usize, f64)> =
            cf.linear_sum.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v / n)).collect();
        let norm2 = nz.iter().map(|(_, v)| v * v).sum();
        Sparse { nz, norm2 }
    }

    fn dot(&self, other: &Sparse) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.nz.len() && j < other.nz.len() {
            match self.nz[i].0.cmp(&other.nz[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.nz[i].1 * other.nz[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// A leaf subcluster: member indices plus its clustering feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub cf: ClusterFeature,
}

/// Single-pass CF-tree clustering. Clusters come out ordered by their
/// smallest member index; members keep input order.
pub fn birch_cluster(embeddings: &[Vec<f64>], threshold: f64, branching: usize) -> Vec<Cluster> {
    let points: Vec<Point> = embeddings.iter().map(|x| Point::new(x)).collect();
    birch_points(&points, threshold, branching)
}

fn birch_points(points: &[Point], threshold: f64, branching: usize) -> Vec<Cluster> {
    let Some(dim) = points.first().map(|p| p.cf.linear_sum.len()) else { return Vec::new() };
    let mut root = CfNode::leaf(dim);
    for (i, p) in points.iter().enumerate() {
        if let Some(sibling) = root.insert(p, i, threshold, branching) {
            let old = std::mem::replace(&mut root, CfNode::leaf(dim));
            let sum = Summary::new(old.sum.cf.merged(&sibling.sum.cf));
            root = CfNode { sum, kind: CfKind::Branch(vec![old, sibling]) };
        }
    }
    let mut subs = Vec::new();
    root.leaves(&mut subs);
    let mut out: Vec<Cluster> = subs.into_iter().map(|s| Cluster { members: s.members.clone(), cf: s.sum.cf.clone() }).collect();
    out.sort_by_key(|c| c.members[0]);
    out
}

/// Grows the radius threshold by `t_step` until fewer than
/// `small_cluster_frac` of the items sit in small clusters or the largest
/// cluster holds more than `dominant_frac` of them.
pub fn select_threshold(embeddings: &[Vec<f64>], adv: &AdvancedConfig) -> (f64, Vec<Cluster>) {
    let n = embeddings.len() as f64;
    let points: Vec<Point> = embeddings.iter().map(|x| Point::new(x)).collect();
    let mut step = 1;
    loop {
        let t = adv.t_step * step as f64;
        let clusters = birch_points(&points, t, adv.birch_branching);
        let small: usize = clusters.iter().map(|c| c.members.len()).filter(|&s| s < adv.small_cluster_size).sum();
        let largest = clusters.iter().map(|c| c.members.len()).max().unwrap_or(0);
        let done = (small as f64) < adv.small_cluster_frac * n || largest as f64 > adv.dominant_frac * n;
        if done || adv.t_step * (step + 1) as f64 > MAX_THRESHOLD + 1e-12 {
            return (t, clusters);
        }
        step += 1;
    }
}

/// Source of verification messages following the sliding buffer.
pub trait VerifyFeed {
    /// Messages with `start <= ts < end`, or `None` when the feed does not
    /// reach `end`.
    fn take(&mut self, start: i64, end: i64) -> Option<Vec<GeoMessage>>;
}

/// A feed over an in-memory stream sorted by (ts, id) that is known to
/// cover timestamps before `end`.
#[derive(Debug, Clone, Copy)]
pub struct SliceFeed<'a> {
    pub messages: &'a [GeoMessage],
    pub end: i64,
}

impl VerifyFeed for SliceFeed<'_> {
    fn take(&mut self, start: i64, end: i64) -> Option<Vec<GeoMessage>> {
        if end > self.end {
            return None;
        }
        let lo = self.messages.partition_point(|m| m.ts < start);
        let hi = self.messages.partition_point(|m| m.ts < end);
        Some(self.messages[lo..hi].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvancedStep {
    pub events: Vec<Event>,
    pub threshold: f64,
    pub n_clusters: usize,
    pub n_candidates: usize,
    pub rounds_completed: usize,
    /// Candidates left after each completed verification round.
    pub survivors: Vec<usize>,
    /// The verification feed ran out before all rounds were done.
    pub feed_exhausted: bool,
}

/// One detection step over `buffer` (oldest window first). Events refer to
/// the newest window.
#[allow(clippy::too_many_arguments)]
pub fn detect_advanced_step(
    buffer: &[QueryWindow],
    feed: &mut dyn VerifyFeed,
    region: &Region,
    config: &DetectorConfig,
    adv: &AdvancedConfig,
    embedder: &dyn Embedder,
    exec: Execution,
) -> Result<AdvancedStep> {
    config.validate()?;
    adv.validate()?;
    let newest = buffer.last().ok_or_else(|| Error::InvalidArgument("empty sliding buffer".into()))?;
    if buffer.iter().any(|w| w.l != config.l) {
        return Err(Error::Config(format!("buffered window length differs from configured l = {}", config.l)));
    }
    let pool: Vec<GeoMessage> =
        buffer.iter().flat_map(|w| w.messages.iter()).filter(|m| region.contains(m.lat, m.lon)).cloned().collect();
    let frame = Frame { start: newest.start_ts, span: config.l, bins: config.n_min as usize };
    let key = format!("advanced/{}", newest.start_ts);
    let (threshold, clusters, mut candidates) =
        cluster_and_detect(&pool, EmbedMode::Keywords, frame, region, config, adv, embedder, &key, exec)?;
    let n_clusters = clusters;
    let n_candidates = candidates.len();

    let mut rounds_completed = 0;
    let mut survivors = Vec::new();
    let mut feed_exhausted = false;
    let mut verify_pool = pool;
    let mut fed_until = newest.end_ts();
    for round in 0..adv.verify_rounds {
        if candidates.is_empty() {
            break;
        }
        let vframe = verify_frame(newest.start_ts, config, (round as u64 + 1) * adv.verify_len);
        let end = vframe.start + vframe.span as i64;
        let Some(fresh) = feed.take(fed_until, end) else {
            feed_exhausted = true;
            candidates.clear();
            break;
        };
        fed_until = end;
        verify_pool.extend(fresh.into_iter().filter(|m| region.contains(m.lat, m.lon)));
        let (_, _, verified) =
            cluster_and_detect(&verify_pool, EmbedMode::Text, vframe, region, config, adv, embedder, &format!("{key}/verify{round}"), exec)?;
        let verified_sets: Vec<HashSet<&str>> =
            verified.iter().map(|e| e.message_ids.iter().map(String::as_str).collect()).collect();
        candidates.retain(|c| verified_sets.iter().any(|v| shares(c, v, adv.share_frac)));
        rounds_completed += 1;
        survivors.push(candidates.len());
    }

    let by_id: HashMap<&str, &GeoMessage> = newest.messages.iter().map(|m| (m.id.as_str(), m)).collect();
    candidates.retain(|c| dominated_by_tags(c, &by_id, adv));
    for c in &mut candidates {
        c.source = EventSource::Advanced;
    }
    candidates.sort_by(|a, b| (a.node_path.as_str(), &a.message_ids).cmp(&(b.node_path.as_str(), &b.message_ids)));
    Ok(AdvancedStep { events: candidates, threshold, n_clusters, n_candidates, rounds_completed, survivors, feed_exhausted })
}

/// The newest window extended by at least `extra` seconds, keeping the
/// configured bin width and ending on a whole-second boundary.
fn verify_frame(start: i64, config: &DetectorConfig, extra: u64) -> Frame {
    let (l, n) = (config.l, u64::from(config.n_min));
    let step = n / gcd(l, n);
    let need = (extra * n).div_ceil(l);
    let bins = n + need.div_ceil(step) * step;
    Frame { start, span: bins * l / n, bins: bins as usize }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn shares(candidate: &Event, verified: &HashSet<&str>, share_frac: f64) -> bool {
    let common = candidate.message_ids.iter().filter(|id| verified.contains(id.as_str())).count();
    common as f64 > share_frac * candidate.message_ids.len().min(verified.len()) as f64
}

fn dominated_by_tags(event: &Event, by_id: &HashMap<&str, &GeoMessage>, adv: &AdvancedConfig) -> bool {
    let msgs: Vec<&GeoMessage> = event.message_ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
    let top: HashSet<String> = top_tags(msgs.iter().copied(), adv.top_x).into_iter().map(|t| t.0).collect();
    let tagged = msgs.iter().filter(|m| m.hashtags.iter().chain(&m.mentions).any(|t| top.contains(t))).count();
    tagged as f64 > adv.dominant_frac * event.message_ids.len() as f64
}

/// Clusters `pool`, then runs the per-node detector on each cluster's
/// messages inside `frame`. Returns (threshold, cluster count, events).
#[allow(clippy::too_many_arguments)]
fn cluster_and_detect(
    pool: &[GeoMessage],
    mode: EmbedMode,
    frame: Frame,
    region: &Region,
    config: &DetectorConfig,
    adv: &AdvancedConfig,
    embedder: &dyn Embedder,
    key: &str,
    exec: Execution,
) -> Result<(f64, usize, Vec<Event>)> {
    if pool.is_empty() {
        return Ok((0.0, 0, Vec::new()));
    }
    let embeddings: Vec<Vec<f64>> = match exec {
        Execution::Parallel => pool.par_iter().map(|m| embedder.embed(m, mode)).collect(),
        Execution::Sequential => pool.iter().map(|m| embedder.embed(m, mode)).collect(),
    };
    let (threshold, clusters) = select_threshold(&embeddings, adv);
    let end = frame.start + frame.span as i64;
    let mut events = Vec::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        let members: Vec<GeoMessage> = cluster
            .members
            .iter()
            .map(|&i| &pool[i])
            .filter(|m| m.ts >= frame.start && m.ts < end)
            .cloned()
            .collect();
        if members.len() < config.min_tail {
            continue;
        }
        events.extend(detect_tree(members, region, frame, config, &format!("{key}/{ci}"), EventSource::Advanced, exec)?);
    }
    Ok((threshold, clusters.len(), events))
}

/// Runs [`detect_advanced_step`] once per tumbling window of a sorted
/// in-memory stream; the window's predecessors fill the sliding buffer and
/// the messages after it serve as the verification feed.
pub fn run_advanced(
    messages: &[GeoMessage],
    region: Region,
    config: &DetectorConfig,
    adv: &AdvancedConfig,
    embedder: &dyn Embedder,
    opts: StreamOptions,
    exec: Execution,
) -> Result<Vec<(WindowReport, AdvancedStep)>> {
    config.validate()?;
    adv.validate()?;
    let end = opts.end.or_else(|| messages.last().map(|m| m.ts + 1)).unwrap_or(i64::MIN);
    let mut buffer: VecDeque<QueryWindow> = VecDeque::with_capacity(adv.n_sw + 1);
    let mut out = Vec::new();
    for w in Windows::new(messages.iter().cloned(), config.l, opts) {
        buffer.push_back(w?);
        if buffer.len() > adv.n_sw {
            buffer.pop_front();
        }
        let mut feed = SliceFeed { messages, end };
        let step = detect_advanced_step(buffer.make_contiguous(), &mut feed, &region, config, adv, embedder, exec)?;
        let newest = buffer.back().expect("just pushed");
        let report = WindowReport { window_start: newest.start_ts, n_messages: newest.len(), events: step.events.clone() };
        out.push((report, step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn msg(id: &str, text: &str) -> GeoMessage {
        GeoMessage::new(id, 0, 0.5, 0.5, text).unwrap()
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn embedding_is_unit_or_zero() {
        let e = HashingEmbedder::new(64);
        let v = e.embed(&msg("a", "Fire near the #bridge @cfa"), EmbedMode::Keywords);
        assert_eq!(v.len(), 64);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert!(e.embed(&msg("b", ""), EmbedMode::Text).iter().all(|&x| x == 0.0));
        // only short words: nothing survives keyword filtering
        assert!(e.embed(&msg("c", "a big red cat"), EmbedMode::Keywords).iter().all(|&x| x == 0.0));
        assert_eq!(e.embed(&msg("d", "same text"), EmbedMode::Text), e.embed(&msg("e", "same text"), EmbedMode::Text));
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        let e = HashingEmbedder::new(256);
        let mut g = rng::rng(11);
        let word = |g: &mut rng::Rng, p: char| format!("{p}{}", g.gen_range(0..1_000_000u32));
        let mut within = 0;
        for _ in 0..1000 {
            let a: Vec<String> = (0..5).map(|_| word(&mut g, 'a')).collect();
            let b: Vec<String> = (0..5).map(|_| word(&mut g, 'b')).collect();
            let c = cosine(&e.embed_tokens(a.iter().map(String::as_str)), &e.embed_tokens(b.iter().map(String::as_str)));
            within += usize::from(c.abs() < 0.35);
        }
        assert!(within >= 990, "{within}");
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        normalize(&mut v);
        v
    }

    fn blob(center: &[f64], spread: f64, n: usize, g: &mut rng::Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| center.iter().map(|c| c + spread * Distribution::<f64>::sample(&StandardNormal, g)).collect())
            .collect()
    }

    #[test]
    fn zero_threshold_keeps_points_apart() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| unit(vec![1.0, i as f64 * 0.1, 0.0])).collect();
        let c = birch_cluster(&pts, 0.0, 4);
        assert_eq!(c.len(), 30);
    }

    #[test]
    fn max_threshold_absorbs_near_identical_points() {
        let pts = vec![unit(vec![1.0, 0.0]), unit(vec![1.0, 0.01]), unit(vec![1.0, -0.01])];
        assert_eq!(birch_cluster(&pts, 2.0, 50).len(), 1);
    }

    #[test]
    fn separated_blobs_form_two_clusters() {
        let mut g = rng::rng(5);
        let mut pts = blob(&[0.0, 0.0, 0.0], 0.05 / 3f64.sqrt(), 20, &mut g);
        pts.extend(blob(&[1.5, 0.0, 0.0], 0.05 / 3f64.sqrt(), 20, &mut g));
        let c = birch_cluster(&pts, 0.2, 50);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].members, (0..20).collect::<Vec<_>>());
        assert_eq!(c[1].members, (20..40).collect::<Vec<_>>());
    }

    #[test]
    fn branching_splits_keep_every_point() {
        let mut g = rng::rng(9);
        let pts: Vec<Vec<f64>> = (0..500).map(|_| unit(blob(&[0.0; 8], 1.0, 1, &mut g).remove(0))).collect();
        let c = birch_cluster(&pts, 0.3, 3);
        let mut all: Vec<usize> = c.iter().flat_map(|c| c.members.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn identical_vectors_stop_at_first_step() {
        let pts = vec![unit(vec![1.0, 2.0, 3.0]); 40];
        let (t, c) = select_threshold(&pts, &AdvancedConfig::default());
        assert_eq!(t, 0.05);
        assert_eq!(c.len(), 1);
        let (_, c) = select_threshold(&pts[..1], &AdvancedConfig::default());
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn threshold_absorbs_stragglers_into_blobs() {
        let mut g = rng::rng(21);
        let centers = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            pts.extend(blob(c, 0.03, 65, &mut g).into_iter().map(unit));
            truth.extend(std::iter::repeat(k).take(65));
        }
        for _ in 0..5 {
            pts.push(unit(blob(&[0.0; 4], 1.0, 1, &mut g).remove(0)));
            truth.push(9);
        }
        let (_, clusters) = select_threshold(&pts, &AdvancedConfig::default());
        let small: usize = clusters.iter().map(|c| c.members.len()).filter(|&s| s < 10).sum();
        assert!(small < 10);
        for c in clusters.iter().filter(|c| c.members.len() >= 10) {
            let mut counts = [0usize; 10];
            c.members.iter().for_each(|&i| counts[truth[i]] += 1);
            assert!(*counts.iter().max().unwrap() as f64 >= 0.9 * c.members.len() as f64);
        }
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut g = rng::rng(seed);
        (0..n).map(|_| unit(blob(&vec![0.0; dim], 1.0, 1, &mut g).remove(0))).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cf_is_additive(seed in any::<u64>(), n in 1usize..40, split in 0usize..40) {
            let pts = random_points(seed, n, 6);
            let k = split.min(n);
            let sum = |s: &[Vec<f64>]| sum_cf(s.iter().map(|p| ClusterFeature::from_point(p)).collect::<Vec<_>>().iter(), 6);
            let joined = sum(&pts[..k]).merged(&sum(&pts[k..]));
            let whole = sum(&pts);
            prop_assert_eq!(joined.n, whole.n);
            prop_assert!((joined.square_sum - whole.square_sum).abs() < 1e-9);
            for (a, b) in joined.linear_sum.iter().zip(&whole.linear_sum) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn leaf_radii_match_members(seed in any::<u64>(), n in 1usize..120, t in 0.0f64..1.5, b in 2usize..8) {
            let pts = random_points(seed, n, 5);
            for c in birch_cluster(&pts, t, b) {
                let centroid = c.cf.centroid();
                let r = (c.members.iter().map(|&i| dist2(&pts[i], &centroid)).sum::<f64>() / c.members.len() as f64).sqrt();
                prop_assert!((r - c.cf.radius()).abs() < 1e-6);
                prop_assert!(c.cf.radius() <= t + 1e-9);
            }
        }
    }

    fn shared_event(ids: &[&str]) -> Event {
        let fit = crate::powerlaw::fit_discrete(&[1, 1, 1, 2, 2, 3, 4, 5, 8, 13, 1, 2], 10).unwrap();
        Event {
            node_path: String::new(),
            region: Region::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            window_start: 0,
            l: 1800,
            message_ids: ids.iter().map(|s| s.to_string()).collect(),
            fit,
            series: crate::timeseries::bin_counts_n(&[], 0, 1800, 80).unwrap(),
            source: EventSource::Basic,
            top_tags: vec![],
        }
    }

    #[test]
    fn match_uses_smaller_set() {
        let c = shared_event(&["a", "b", "c", "d"]);
        let v: HashSet<&str> = ["a", "b", "x"].into_iter().collect();
        assert!(shares(&c, &v, 0.5));
        let v: HashSet<&str> = ["a", "x", "y", "z"].into_iter().collect();
        assert!(!shares(&c, &v, 0.5));
    }

    #[test]
    fn cleanup_needs_tag_majority() {
        let msgs = [msg("a", "#fire now"), msg("b", "#fire again"), msg("c", "nothing"), msg("d", "@cfa here")];
        let by_id: HashMap<&str, &GeoMessage> = msgs.iter().map(|m| (m.id.as_str(), m)).collect();
        let adv = AdvancedConfig::default();
        assert!(dominated_by_tags(&shared_event(&["a", "b", "c", "d"]), &by_id, &adv));
        assert!(!dominated_by_tags(&shared_event(&["a", "c", "d2", "c2"]), &by_id, &adv));
        let few = AdvancedConfig { top_x: 1, ..adv };
        assert!(!dominated_by_tags(&shared_event(&["a", "c", "d"]), &by_id, &few));
    }

    struct Scripted(Vec<Option<Vec<GeoMessage>>>);

    impl VerifyFeed for Scripted {
        fn take(&mut self, _: i64, _: i64) -> Option<Vec<GeoMessage>> {
            if self.0.is_empty() {
                None
            } else {
                self.0.remove(0)
            }
        }
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let cfg = DetectorConfig::default();
        let r = detect_advanced_step(
            &[],
            &mut Scripted(vec![]),
            &Region::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            &cfg,
            &AdvancedConfig::default(),
            &HashingEmbedder::new(16),
            Execution::Sequential,
        );
        assert!(r.is_err());
    }

    #[test]
    fn no_candidates_skip_verification() {
        let cfg = DetectorConfig::default();
        let w = QueryWindow::new(0, cfg.l, (0..30).map(|i| GeoMessage { ts: i * 50, ..msg(&format!("m{i}"), "quiet day") }).collect()).unwrap();
        let step = detect_advanced_step(
            &[w],
            &mut Scripted(vec![]),
            &Region::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            &cfg,
            &AdvancedConfig::default(),
            &HashingEmbedder::new(64),
            Execution::Sequential,
        )
        .unwrap();
        assert!(step.events.is_empty());
        assert_eq!(step.n_candidates, 0);
        assert_eq!(step.rounds_completed, 0);
        assert!(!step.feed_exhausted);
    }
}
