//! Core domain types: messages, regions, query windows and detector settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One geo-tagged post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoMessage {
    pub id: String,
    /// Seconds since the epoch.
    pub ts: i64,
    pub lat: f64,
    pub lon: f64,
    pub text: String,
    #[serde(default)]
    pub hashtags: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<String>,
}

impl GeoMessage {
    /// Builds a message and derives hashtags and mentions from `text`.
    pub fn new(id: impl Into<String>, ts: i64, lat: f64, lon: f64, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        let msg = GeoMessage {
            id: id.into(),
            ts,
            lat,
            lon,
            text,
            hashtags: tokens.hashtags,
            mentions: tokens.mentions,
        };
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidArgument(format!(
                "message {}: coordinates ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        Ok(())
    }

    /// Fills hashtags and mentions from the text when both lists are empty.
    pub fn with_derived_tags(mut self) -> Self {
        if self.hashtags.is_empty() && self.mentions.is_empty() {
            let t = tokenize(&self.text);
            self.hashtags = t.hashtags;
            self.mentions = t.mentions;
        }
        self
    }

    /// Canonical stream order: timestamp, then id.
    pub fn order_key(&self) -> (i64, &str) {
        (self.ts, self.id.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tokens {
    pub tokens: Vec<String>,
    pub hashtags: Vec<String>,
    pub mentions: Vec<String>,
}

/// Lowercases `text` and splits it on non-alphanumeric characters.
///
/// A run prefixed by `#` becomes a hashtag and one prefixed by `@` a
/// mention, both with the prefix stripped. Hashtag words also stay in the
/// token list (they are content words); mentions do not. Duplicates are
/// preserved.
pub fn tokenize(text: &str) -> Tokens {
    let lower = text.to_lowercase();
    let mut out = Tokens::default();
    let mut current = String::new();
    let mut prefix: Option<char> = None;

    let flush = |current: &mut String, prefix: Option<char>, out: &mut Tokens| {
        if current.is_empty() {
            return;
        }
        let tok = std::mem::take(current);
        match prefix {
            Some('#') => {
                out.tokens.push(tok.clone());
                out.hashtags.push(tok);
            }
            Some('@') => out.mentions.push(tok),
            _ => out.tokens.push(tok),
        }
    };

    for c in lower.chars() {
        if c.is_alphanumeric() {
            current.push(c);
        } else {
            flush(&mut current, prefix, &mut out);
            prefix = if c == '#' || c == '@' { Some(c) } else { None };
        }
    }
    flush(&mut current, prefix, &mut out);
    out
}

/// Axis-aligned lat/lon rectangle. No antimeridian wrap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl Region {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self> {
        let ok = min_lat < max_lat
            && min_lon < max_lon
            && (-90.0..=90.0).contains(&min_lat)
            && (-90.0..=90.0).contains(&max_lat)
            && (-180.0..=180.0).contains(&min_lon)
            && (-180.0..=180.0).contains(&max_lon);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid region [{min_lat}, {max_lat}] x [{min_lon}, {max_lon}]"
            )));
        }
        Ok(Region { min_lat, min_lon, max_lat, max_lon })
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.min_lat >= self.min_lat
            && other.max_lat <= self.max_lat
            && other.min_lon >= self.min_lon
            && other.max_lon <= self.max_lon
    }

    pub fn mid_lat(&self) -> f64 {
        0.5 * (self.min_lat + self.max_lat)
    }

    pub fn mid_lon(&self) -> f64 {
        0.5 * (self.min_lon + self.max_lon)
    }

    /// Quadrant `idx` in (SW, SE, NW, NE) order.
    pub fn quadrant(&self, idx: usize) -> Region {
        let (mlat, mlon) = (self.mid_lat(), self.mid_lon());
        let (min_lat, max_lat) = if idx >= 2 { (mlat, self.max_lat) } else { (self.min_lat, mlat) };
        let (min_lon, max_lon) = if idx % 2 == 1 { (mlon, self.max_lon) } else { (self.min_lon, mlon) };
        Region { min_lat, min_lon, max_lat, max_lon }
    }
}

/// Messages observed in `[start_ts, start_ts + l)`, sorted by (ts, id).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWindow {
    pub start_ts: i64,
    pub l: u64,
    pub messages: Vec<GeoMessage>,
}

impl QueryWindow {
    pub fn new(start_ts: i64, l: u64, mut messages: Vec<GeoMessage>) -> Result<Self> {
        let end = start_ts + l as i64;
        if let Some(m) = messages.iter().find(|m| m.ts < start_ts || m.ts >= end) {
            return Err(Error::OutOfWindow { ts: m.ts, start: start_ts, end });
        }
        messages.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        Ok(QueryWindow { start_ts, l, messages })
    }

    pub fn end_ts(&self) -> i64 {
        self.start_ts + self.l as i64
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Settings of the power-law detectors.
///
/// The bin width is `l / n_min` and need not be a whole number of seconds
/// (the Melbourne preset bins every 22.5 s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Query window length in seconds.
    pub l: u64,
    /// Number of bins per window.
    pub n_min: u32,
    /// Quad-tree split threshold.
    pub m_s: usize,
    /// Maximum quad-tree depth.
    pub max_depth: u32,
    pub alpha_reject: f64,
    pub n_boot: usize,
    pub min_tail: usize,
    /// Share of bins that must be non-zero before a node's series is fitted.
    #[serde(default = "default_nonzero_frac")]
    pub min_nonzero_frac: f64,
    pub seed: u64,
}

fn default_nonzero_frac() -> f64 {
    0.5
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            l: 1800,
            n_min: 80,
            m_s: 15,
            max_depth: 8,
            alpha_reject: 0.05,
            n_boot: 100,
            min_tail: 10,
            min_nonzero_frac: default_nonzero_frac(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// Builds a config from a window length and an integral bin width.
    pub fn with_bin_width(l: u64, d: u64) -> Result<Self> {
        if d == 0 || l % d != 0 {
            return Err(Error::Config(format!("l = {l} must equal n_min * d for integer n_min (d = {d})")));
        }
        let n_min = u32::try_from(l / d).map_err(|_| Error::Config("n_min overflows".into()))?;
        let cfg = DetectorConfig { l, n_min, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named parameter sets: `melbourne`, `la`, `sydney`.
    pub fn preset(name: &str) -> Option<Self> {
        let (l, n_min, m_s) = match name {
            "melbourne" => (1800, 80, 15),
            "la" => (1200, 150, 50),
            "sydney" => (3600, 100, 50),
            _ => return None,
        };
        Some(DetectorConfig { l, n_min, m_s, ..Default::default() })
    }

    pub fn d(&self) -> f64 {
        self.l as f64 / f64::from(self.n_min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("l must be positive".into()));
        }
        if self.n_min == 0 {
            return Err(Error::Config("n_min must be positive".into()));
        }
        if self.m_s == 0 {
            return Err(Error::Config("m_s must be positive".into()));
        }
        if !(self.alpha_reject > 0.0 && self.alpha_reject < 1.0) {
            return Err(Error::Config(format!("alpha_reject = {} must lie in (0, 1)", self.alpha_reject)));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_nonzero_frac) {
            return Err(Error::Config(format!("min_nonzero_frac = {} must lie in [0, 1]", self.min_nonzero_frac)));
        }
        if self.min_tail < 2 {
            return Err(Error::Config("min_tail must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_routes_prefixes() {
        let t = tokenize("Fire at #Bourke St @abcnews now");
        assert_eq!(t.tokens, s(&["fire", "at", "bourke", "st", "now"]));
        assert_eq!(t.hashtags, s(&["bourke"]));
        assert_eq!(t.mentions, s(&["abcnews"]));
    }

    #[test]
    fn tokenize_empty() {
        assert_eq!(tokenize(""), Tokens::default());
    }

    #[test]
    fn tokenize_keeps_duplicates() {
        assert_eq!(tokenize("#A #a").hashtags, s(&["a", "a"]));
    }

    #[test]
    fn bare_prefix_is_dropped() {
        let t = tokenize("# @ ##x a#b");
        assert_eq!(t.hashtags, s(&["x", "b"]));
        assert_eq!(t.tokens, s(&["x", "a", "b"]));
        assert!(t.mentions.is_empty());
    }

    #[test]
    fn quadrants_tile_the_parent() {
        let r = Region::new(0.0, 0.0, 2.0, 4.0).unwrap();
        assert_eq!(r.quadrant(0), Region::new(0.0, 0.0, 1.0, 2.0).unwrap());
        assert_eq!(r.quadrant(1), Region::new(0.0, 2.0, 1.0, 4.0).unwrap());
        assert_eq!(r.quadrant(2), Region::new(1.0, 0.0, 2.0, 2.0).unwrap());
        assert_eq!(r.quadrant(3), Region::new(1.0, 2.0, 2.0, 4.0).unwrap());
    }

    #[test]
    fn region_rejects_inverted_bounds() {
        assert!(Region::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(Region::new(0.0, 170.0, 1.0, -170.0).is_err());
    }

    #[test]
    fn window_sorts_and_checks_bounds() {
        let a = GeoMessage::new("b", 5, 0.0, 0.0, "").unwrap();
        let b = GeoMessage::new("a", 5, 0.0, 0.0, "").unwrap();
        let c = GeoMessage::new("c", 1, 0.0, 0.0, "").unwrap();
        let w = QueryWindow::new(0, 10, vec![a.clone(), b, c]).unwrap();
        let ids: Vec<_> = w.messages.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        let late = GeoMessage { ts: 10, ..a };
        assert!(matches!(QueryWindow::new(0, 10, vec![late]), Err(Error::OutOfWindow { .. })));
    }

    #[test]
    fn presets_are_consistent() {
        for name in ["melbourne", "la", "sydney"] {
            let cfg = DetectorConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        let m = DetectorConfig::preset("melbourne").unwrap();
        assert_eq!((m.l, m.n_min, m.m_s), (1800, 80, 15));
        assert!((m.d() - 22.5).abs() < 1e-12);
        assert!(DetectorConfig::preset("paris").is_none());
    }

    #[test]
    fn bin_width_must_divide_window() {
        assert!(DetectorConfig::with_bin_width(1800, 7).is_err());
        assert_eq!(DetectorConfig::with_bin_width(1800, 30).unwrap().n_min, 60);
    }

    #[test]
    fn invalid_coordinates() {
        assert!(GeoMessage::new("x", 0, 91.0, 0.0, "").is_err());
        assert!(GeoMessage::new("x", 0, 0.0, -180.5, "").is_err());
    }
}
