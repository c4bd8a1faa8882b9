//! Labelled synthetic streams, an exact fGn generator, and the
//! precision / pseudo-recall evaluator.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::detect_basic::Event;
use crate::error::{Error, Result};
use crate::model::{GeoMessage, Region};
use crate::powerlaw::sample_discrete;
use crate::rng;

/// Autocovariance of unit-variance fGn at lag `k`.
pub fn fgn_autocov(h: f64, k: usize) -> f64 {
    let k = k as f64;
    let e = 2.0 * h;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// Exact fractional Gaussian noise by circulant embedding (Davies-Harte).
///
/// `n` must be a power of two. The output has zero mean, unit variance and
/// autocovariance [`fgn_autocov`].
pub fn gen_fgn(h: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidArgument(format!("H = {h} outside (0, 1)")));
    }
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("length {n} is not a power of two")));
    }
    let m = 2 * n;
    // first row of the 2n circulant: γ(0..=n), then γ(n-1..=1)
    let mut row: Vec<Complex<f64>> = (0..=n).map(|k| Complex::new(fgn_autocov(h, k), 0.0)).collect();
    row.extend((1..n).rev().map(|k| Complex::new(fgn_autocov(h, k), 0.0)));
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);
    let eig: Vec<f64> = row.iter().map(|c| c.re.max(0.0)).collect();

    let mut g = rng::rng(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut g) };
    let mut w = vec![Complex::new(0.0, 0.0); m];
    w[0] = Complex::new((eig[0] / m as f64).sqrt() * z(), 0.0);
    w[n] = Complex::new((eig[n] / m as f64).sqrt() * z(), 0.0);
    for k in 1..n {
        let s = (eig[k] / (2.0 * m as f64)).sqrt();
        let c = Complex::new(s * z(), s * z());
        w[k] = c;
        w[m - k] = c.conj();
    }
    fft.process(&mut w);
    Ok(w[..n].iter().map(|c| c.re).collect())
}

/// One injected burst. Times are seconds from the scenario start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstSpec {
    pub lat: f64,
    pub lon: f64,
    /// Standard deviation of message positions around the epicentre, in degrees.
    pub spatial_sigma: f64,
    pub start: f64,
    pub end: f64,
    /// Width of the bins whose counts are drawn from the power law.
    pub bin_d: f64,
    pub alpha: f64,
    pub xmin: u64,
    pub tag: String,
    /// Share of burst messages carrying `#tag`; the rest mention the tag word plainly.
    pub tag_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub region: Region,
    /// Timestamp of the scenario start.
    pub origin: i64,
    pub duration: f64,
    /// Background messages per second over the whole region.
    pub background_rate: f64,
    pub background_vocab: Vec<String>,
    pub bursts: Vec<BurstSpec>,
    pub seed: u64,
}

/// Words per background message.
pub const BACKGROUND_WORDS: usize = 5;
/// Suffixes turning a burst tag into the topic words every burst message carries.
pub const TOPIC_SUFFIXES: [&str; 3] = ["news", "live", "crowd"];

/// Ground truth for one burst, in absolute timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstTruth {
    pub id: usize,
    pub tag: String,
    pub start: i64,
    pub end: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bursts: Vec<BurstTruth>,
    /// Label of every burst message; messages not listed are background.
    pub labels: BTreeMap<String, Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub burst: usize,
    pub ts: i64,
}

impl GroundTruth {
    pub fn label(&self, id: &str) -> Option<usize> {
        self.labels.get(id).map(|l| l.burst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    /// Sorted by (ts, id).
    pub messages: Vec<GeoMessage>,
    pub truth: GroundTruth,
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.duration > 0.0) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if !(self.background_rate > 0.0) {
            return bad(format!("background rate {} must be positive", self.background_rate));
        }
        if self.background_vocab.is_empty() {
            return bad("background vocabulary is empty".into());
        }
        for (i, b) in self.bursts.iter().enumerate() {
            if !(0.0 <= b.start && b.start < b.end && b.end <= self.duration) {
                return bad(format!("burst {i}: window [{}, {}) outside [0, {})", b.start, b.end, self.duration));
            }
            if !(b.alpha > 1.0) || b.xmin == 0 {
                return bad(format!("burst {i}: need alpha > 1 and xmin >= 1"));
            }
            if !(b.bin_d > 0.0) || !(b.spatial_sigma >= 0.0) || !(0.0..=1.0).contains(&b.tag_frac) {
                return bad(format!("burst {i}: bin width, sigma or tag share out of range"));
            }
            if !self.region.contains(b.lat, b.lon) {
                return bad(format!("burst {i}: epicentre outside the region"));
            }
            if b.tag.is_empty() || !b.tag.chars().all(|c| c.is_alphanumeric()) || b.tag != b.tag.to_lowercase() {
                return bad(format!("burst {i}: tag {:?} must be a lowercase alphanumeric word", b.tag));
            }
        }
        Ok(())
    }

    /// Generates the labelled stream. Deterministic in `seed`.
    pub fn generate(&self) -> Result<SyntheticStream> {
        self.validate()?;
        let mut messages = self.background(&mut rng::rng(rng::derive_str(self.seed, "background")))?;
        let mut truth = GroundTruth::default();
        for (j, b) in self.bursts.iter().enumerate() {
            let burst = self.burst(j, b, rng::derive_str(self.seed, &format!("burst/{j}")))?;
            truth.labels.extend(burst.iter().map(|m| (m.id.clone(), Label { burst: j, ts: m.ts })));
            truth.bursts.push(BurstTruth {
                id: j,
                tag: b.tag.clone(),
                start: self.origin + b.start.floor() as i64,
                end: self.origin + b.end.ceil() as i64,
                lat: b.lat,
                lon: b.lon,
            });
            messages.extend(burst);
        }
        messages.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        Ok(SyntheticStream { messages, truth })
    }

    fn words(&self, g: &mut rng::Rng, k: usize) -> Vec<&str> {
        (0..k).map(|_| self.background_vocab[g.gen_range(0..self.background_vocab.len())].as_str()).collect()
    }

    fn background(&self, g: &mut rng::Rng) -> Result<Vec<GeoMessage>> {
        let mean = self.background_rate * self.duration;
        let n = Poisson::new(mean).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(g) as usize;
        let r = &self.region;
        (0..n)
            .map(|k| {
                let ts = self.origin + (g.gen::<f64>() * self.duration).floor() as i64;
                let lat = g.gen_range(r.min_lat..=r.max_lat);
                let lon = g.gen_range(r.min_lon..=r.max_lon);
                let mut words: Vec<String> = self.words(g, BACKGROUND_WORDS).into_iter().map(String::from).collect();
                words.push(noise_word(g));
                let text = words.join(" ");
                GeoMessage::new(format!("bg{k:07}"), ts, lat, lon, text)
            })
            .collect()
    }

    fn burst(&self, j: usize, b: &BurstSpec, seed: u64) -> Result<Vec<GeoMessage>> {
        let n_bins = ((b.end - b.start) / b.bin_d).ceil() as usize;
        let counts = sample_discrete(b.alpha, b.xmin, n_bins, seed)?;
        let mut g = rng::rng(rng::derive(seed, u64::MAX));
        let mut out = Vec::new();
        for (bin, &c) in counts.iter().enumerate() {
            let lo = b.start + bin as f64 * b.bin_d;
            let hi = (lo + b.bin_d).min(b.end);
            for _ in 0..c {
                let ts = self.origin + (lo + g.gen::<f64>() * (hi - lo)).floor() as i64;
                let (lat, lon) = self.scatter(b, &mut g);
                let tag = if g.gen::<f64>() < b.tag_frac { format!("#{}", b.tag) } else { b.tag.clone() };
                let mut words = vec![tag];
                words.extend(TOPIC_SUFFIXES.iter().map(|s| format!("{}{s}", b.tag)));
                words.push(noise_word(&mut g));
                out.push(GeoMessage::new(format!("b{j}-{:06}", out.len()), ts, lat, lon, words.join(" "))?);
            }
        }
        Ok(out)
    }

    /// Gaussian position around the epicentre, redrawn until inside the region.
    fn scatter(&self, b: &BurstSpec, g: &mut rng::Rng) -> (f64, f64) {
        let r = &self.region;
        for _ in 0..1000 {
            let lat = b.lat + b.spatial_sigma * Distribution::<f64>::sample(&StandardNormal, g);
            let lon = b.lon + b.spatial_sigma * Distribution::<f64>::sample(&StandardNormal, g);
            if r.contains(lat, lon) {
                return (lat, lon);
            }
        }
        (b.lat, b.lon)
    }
}

/// A random six-letter word, so that no two messages have identical text.
fn noise_word(g: &mut rng::Rng) -> String {
    (0..6).map(|_| char::from(b'a' + g.gen_range(0..26u8))).collect()
}

/// Precision and pseudo-recall of a detection run against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_detected: usize,
    /// Detections matching some burst.
    pub n_true_detections: usize,
    /// Distinct bursts matched by at least one detection.
    pub n_true: usize,
    /// Bursts with at least `min_tail` messages inside the evaluated windows.
    pub n_total: usize,
    pub precision: f64,
    pub pseudo_recall: f64,
    /// Set when nothing was detected and precision defaults to 1.
    pub precision_undefined: bool,
    /// Matched bursts with some matching event whose region contains the epicentre.
    pub n_localized: usize,
    /// Per matched burst: end of the first matching window minus burst start, in seconds.
    pub latencies: Vec<i64>,
}

impl EvalReport {
    /// Nearest-rank percentile of the latencies.
    pub fn latency_percentile(&self, q: f64) -> Option<i64> {
        if self.latencies.is_empty() {
            return None;
        }
        let mut v = self.latencies.clone();
        v.sort_unstable();
        let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        Some(v[rank.min(v.len()) - 1])
    }
}

/// Which windows were evaluated and how many messages make a burst detectable.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScope {
    /// Half-open `[start, end)` spans.
    pub windows: Vec<(i64, i64)>,
    pub min_tail: usize,
}

/// Share of an event's messages that must carry a burst's label to match it.
pub const MATCH_PURITY: f64 = 0.5;

pub fn evaluate(events: &[Event], truth: &GroundTruth, scope: &EvalScope) -> EvalReport {
    let mut matched: BTreeMap<usize, (i64, bool)> = BTreeMap::new();
    let mut n_true_detections = 0;
    for e in events {
        let Some(burst) = matching_burst(e, truth) else { continue };
        n_true_detections += 1;
        let b = &truth.bursts[burst];
        let localized = e.region.contains(b.lat, b.lon);
        let latency = e.window_end() - b.start;
        let slot = matched.entry(burst).or_insert((latency, localized));
        slot.0 = slot.0.min(latency);
        slot.1 |= localized;
    }

    let mut in_scope = vec![0usize; truth.bursts.len()];
    let mut sorted = scope.windows.clone();
    sorted.sort_unstable();
    for label in truth.labels.values() {
        let i = sorted.partition_point(|w| w.0 <= label.ts);
        if i > 0 && label.ts < sorted[i - 1].1 {
            in_scope[label.burst] += 1;
        }
    }
    let n_total = in_scope.iter().filter(|&&c| c >= scope.min_tail).count();

    let n_detected = events.len();
    let n_true = matched.len();
    EvalReport {
        n_detected,
        n_true_detections,
        n_true,
        n_total,
        precision: if n_detected == 0 { 1.0 } else { n_true_detections as f64 / n_detected as f64 },
        pseudo_recall: if n_total == 0 { 0.0 } else { n_true as f64 / n_total as f64 },
        precision_undefined: n_detected == 0,
        n_localized: matched.values().filter(|m| m.1).count(),
        latencies: matched.values().map(|m| m.0).collect(),
    }
}

fn matching_burst(event: &Event, truth: &GroundTruth) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for id in &event.message_ids {
        if let Some(b) = truth.label(id) {
            *counts.entry(b).or_default() += 1;
        }
    }
    let (&burst, &hits) = counts.iter().max_by_key(|(b, c)| (**c, std::cmp::Reverse(**b)))?;
    let b = &truth.bursts[burst];
    let overlaps = event.window_start < b.end && b.start < event.window_end();
    (hits as f64 > MATCH_PURITY * event.message_ids.len() as f64 && overlaps).then_some(burst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect_basic::EventSource;
    use crate::powerlaw::{fit_discrete, significance_pvalue, PowerLawFit};
    use crate::timeseries::CountSeries;

    fn region() -> Region {
        Region::new(-38.0, 144.7, -37.6, 145.2).unwrap()
    }

    fn vocab() -> Vec<String> {
        ["tram", "coffee", "river", "lane", "market"].map(String::from).to_vec()
    }

    fn burst(tag: &str, start: f64, end: f64) -> BurstSpec {
        BurstSpec {
            lat: -37.81,
            lon: 144.96,
            spatial_sigma: 0.005,
            start,
            end,
            bin_d: 22.5,
            alpha: 2.0,
            xmin: 1,
            tag: tag.into(),
            tag_frac: 0.6,
        }
    }

    fn scenario(bursts: Vec<BurstSpec>, rate: f64, duration: f64, seed: u64) -> SyntheticScenario {
        SyntheticScenario { region: region(), origin: 1_000_000, duration, background_rate: rate, background_vocab: vocab(), bursts, seed }
    }

    #[test]
    fn background_count_is_poisson() {
        let s = scenario(vec![], 0.1, 1e5, 3).generate().unwrap();
        let n = s.messages.len() as f64;
        assert!((n - 1e4).abs() <= 3.0 * 100.0, "{n}");
        assert!(s.truth.labels.is_empty() && s.truth.bursts.is_empty());
        assert!(s.messages.iter().all(|m| region().contains(m.lat, m.lon)));
        assert!(s.messages.windows(2).all(|w| w[0].order_key() <= w[1].order_key()));
    }

    #[test]
    fn burst_counts_pass_the_fit() {
        let mut passed = 0;
        for seed in 0..50 {
            let counts = sample_discrete(2.0, 1, 100, seed).unwrap();
            let fit = fit_discrete(&counts, 10).unwrap();
            if significance_pvalue(&counts, &fit, 100, 10, seed).unwrap() >= 0.05 {
                passed += 1;
            }
        }
        assert!(passed >= 40, "{passed}/50");
    }

    #[test]
    fn labels_cover_burst_messages_exactly() {
        let sc = scenario(vec![burst("fire", 100.0, 1900.0), burst("parade", 3000.0, 4800.0)], 0.01, 7200.0, 9);
        let s = sc.generate().unwrap();
        let mut per_burst = [0usize; 2];
        for m in &s.messages {
            match s.truth.labels.get(&m.id) {
                Some(l) => {
                    per_burst[l.burst] += 1;
                    assert_eq!(l.ts, m.ts);
                    let b = &s.truth.bursts[l.burst];
                    assert!(b.start <= m.ts && m.ts < b.end);
                    assert!(crate::model::tokenize(&m.text).tokens.contains(&b.tag));
                }
                None => assert!(m.id.starts_with("bg")),
            }
        }
        assert_eq!(per_burst.iter().sum::<usize>(), s.truth.labels.len());
        assert!(per_burst.iter().all(|&c| c >= 80), "{per_burst:?}");
        assert_eq!(s.truth.bursts[1].start, 1_003_000);
        assert_eq!(sc.generate().unwrap(), s);
    }

    #[test]
    fn tag_share_follows_tag_frac() {
        let s = scenario(vec![burst("storm", 0.0, 3600.0)], 0.001, 3600.0, 4).generate().unwrap();
        let burst: Vec<_> = s.messages.iter().filter(|m| s.truth.label(&m.id).is_some()).collect();
        let tagged = burst.iter().filter(|m| m.hashtags == ["storm"]).count() as f64 / burst.len() as f64;
        assert!((tagged - 0.6).abs() < 0.1, "{tagged} of {}", burst.len());
    }

    #[test]
    fn invalid_scenarios() {
        assert!(scenario(vec![], 0.0, 10.0, 1).generate().is_err());
        assert!(scenario(vec![burst("x", 50.0, 20.0)], 0.1, 100.0, 1).generate().is_err());
        assert!(scenario(vec![burst("x", 0.0, 200.0)], 0.1, 100.0, 1).generate().is_err());
        assert!(scenario(vec![burst("Has Space", 0.0, 50.0)], 0.1, 100.0, 1).generate().is_err());
        let mut b = burst("x", 0.0, 50.0);
        b.alpha = 1.0;
        assert!(scenario(vec![b], 0.1, 100.0, 1).generate().is_err());
    }

    fn truth() -> GroundTruth {
        let mut t = GroundTruth::default();
        for (j, start) in [(0usize, 0i64), (1, 3600)] {
            t.bursts.push(BurstTruth { id: j, tag: format!("t{j}"), start, end: start + 1800, lat: -37.81, lon: 144.96 });
            for k in 0..20 {
                t.labels.insert(format!("b{j}-{k}"), Label { burst: j, ts: start + 10 * k as i64 });
            }
        }
        t
    }

    fn event(ids: &[String], window_start: i64, region: Region) -> Event {
        Event {
            node_path: String::new(),
            region,
            window_start,
            l: 1800,
            message_ids: ids.to_vec(),
            fit: PowerLawFit { alpha: 2.0, xmin: 1, ks: 0.0, n_tail: 10, n: 80, p_value: Some(0.5) },
            series: CountSeries { start_ts: window_start, l: 1800, counts: vec![0; 80] },
            source: EventSource::Basic,
            top_tags: vec![],
        }
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|k| format!("{prefix}{k}")).collect()
    }

    fn scope() -> EvalScope {
        EvalScope { windows: vec![(0, 1800), (1800, 3600), (3600, 5400)], min_tail: 10 }
    }

    #[test]
    fn evaluate_with_no_events() {
        let r = evaluate(&[], &truth(), &scope());
        assert_eq!((r.precision, r.pseudo_recall, r.n_total), (1.0, 0.0, 2));
        assert!(r.precision_undefined);
        assert_eq!(r.latency_percentile(50.0), None);
    }

    #[test]
    fn evaluate_perfect_detection() {
        let ev = [event(&ids("b0-", 20), 0, region()), event(&ids("b1-", 20), 3600, region())];
        let r = evaluate(&ev, &truth(), &scope());
        assert_eq!((r.precision, r.pseudo_recall), (1.0, 1.0));
        assert_eq!((r.n_localized, r.latencies.clone()), (2, vec![1800, 1800]));
        assert!(!r.precision_undefined);
    }

    #[test]
    fn evaluate_two_matches_and_noise() {
        let t = GroundTruth { bursts: truth().bursts[..1].to_vec(), labels: truth().labels.into_iter().filter(|(_, l)| l.burst == 0).collect() };
        let mut half = ids("b0-", 6);
        half.extend(ids("bg", 4));
        let ev = [event(&ids("b0-", 20), 0, region()), event(&half, 0, region().quadrant(3)), event(&ids("bg", 30), 0, region())];
        let r = evaluate(&ev, &t, &scope());
        assert_eq!((r.n_detected, r.n_true_detections, r.n_true, r.n_total), (3, 2, 1, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.pseudo_recall, 1.0);
    }

    #[test]
    fn evaluate_needs_purity_and_overlap() {
        let mut mixed = ids("b0-", 5);
        mixed.extend(ids("bg", 5));
        let ev = [event(&mixed, 0, region()), event(&ids("b0-", 20), 1800, region())];
        let r = evaluate(&ev, &truth(), &scope());
        assert_eq!(r.n_true_detections, 0);
    }

    #[test]
    fn n_total_counts_bursts_inside_windows() {
        let r = evaluate(&[], &truth(), &EvalScope { windows: vec![(0, 1800)], min_tail: 10 });
        assert_eq!(r.n_total, 1);
        let r = evaluate(&[], &truth(), &EvalScope { windows: vec![(0, 100)], min_tail: 11 });
        assert_eq!(r.n_total, 0);
    }

    #[test]
    fn latency_percentiles() {
        let r = EvalReport {
            n_detected: 0,
            n_true_detections: 0,
            n_true: 0,
            n_total: 0,
            precision: 1.0,
            pseudo_recall: 0.0,
            precision_undefined: true,
            n_localized: 0,
            latencies: vec![40, 10, 30, 20],
        };
        assert_eq!(r.latency_percentile(50.0), Some(20));
        assert_eq!(r.latency_percentile(100.0), Some(40));
        assert_eq!(r.latency_percentile(0.0), Some(10));
    }

    // fGn has known zero mean; centring on the sample mean would bias
    // long-memory lags downward by about n^(2H-2)
    fn lag_autocov(x: &[f64], k: usize) -> f64 {
        (0..x.len() - k).map(|i| x[i] * x[i + k]).sum::<f64>() / (x.len() - k) as f64
    }

    #[test]
    fn fgn_autocov_closed_form() {
        assert_eq!(fgn_autocov(0.8, 0), 1.0);
        assert!((fgn_autocov(0.8, 1) - (2f64.powf(1.6) - 2.0) / 2.0).abs() < 1e-12);
        assert!(fgn_autocov(0.5, 3).abs() < 1e-12);
    }

    #[test]
    fn fgn_lag_one() {
        let x = gen_fgn(0.5, 8192, 1).unwrap();
        assert!((lag_autocov(&x, 1) / lag_autocov(&x, 0)).abs() < 0.05);
        let x = gen_fgn(0.8, 8192, 1).unwrap();
        let r1 = lag_autocov(&x, 1) / lag_autocov(&x, 0);
        assert!((r1 - (2f64.powf(1.6) / 2.0 - 1.0)).abs() < 0.05, "{r1}");
        assert_eq!(gen_fgn(0.8, 64, 5).unwrap(), gen_fgn(0.8, 64, 5).unwrap());
        assert!(gen_fgn(0.8, 100, 5).is_err());
        assert!(gen_fgn(1.0, 64, 5).is_err());
    }

    #[test]
    fn fgn_autocov_matches_over_seeds() {
        for h in [0.6, 0.9] {
            for k in 1..=4 {
                let mean = (0..20).map(|s| lag_autocov(&gen_fgn(h, 8192, s).unwrap(), k)).sum::<f64>() / 20.0;
                assert!((mean - fgn_autocov(h, k)).abs() < 0.05, "H={h} k={k}: {mean}");
            }
        }
    }
}
