//! Count series built from message timestamps, and their block aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Message counts per bin over `[start_ts, start_ts + l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSeries {
    pub start_ts: i64,
    /// Total span in seconds; bin width is `l / counts.len()`.
    pub l: u64,
    pub counts: Vec<u64>,
}

impl CountSeries {
    pub fn d(&self) -> f64 {
        self.l as f64 / self.counts.len() as f64
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn nonzero_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn aggregate(&self, m: usize) -> Result<AggregatedSeries> {
        aggregate(&self.to_f64(), m)
    }
}

/// Block means of a parent series over non-overlapping blocks of size `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSeries {
    pub m: usize,
    pub values: Vec<f64>,
}

/// Counts `timestamps` into `l / d` bins of width `d` starting at `start_ts`.
pub fn bin_counts(timestamps: &[i64], start_ts: i64, l: u64, d: u64) -> Result<CountSeries> {
    if d == 0 || l == 0 || l % d != 0 {
        return Err(Error::BinWidth { l, d });
    }
    let n = usize::try_from(l / d).map_err(|_| Error::BinWidth { l, d })?;
    bin_counts_n(timestamps, start_ts, l, n)
}

/// Counts `timestamps` into `n` equal bins spanning `[start_ts, start_ts + l)`.
///
/// Bin widths may be fractional; the bin of `ts` is `floor((ts - start) * n / l)`,
/// computed in integer arithmetic.
pub fn bin_counts_n(timestamps: &[i64], start_ts: i64, l: u64, n: usize) -> Result<CountSeries> {
    if l == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("empty series (l = {l}, n = {n})")));
    }
    let end = start_ts + l as i64;
    let mut counts = vec![0u64; n];
    for &ts in timestamps {
        if ts < start_ts || ts >= end {
            return Err(Error::OutOfWindow { ts, start: start_ts, end });
        }
        let offset = (ts - start_ts) as u128;
        let idx = (offset * n as u128 / u128::from(l)) as usize;
        counts[idx] += 1;
    }
    Ok(CountSeries { start_ts, l, counts })
}

/// Means of consecutive blocks of `m` values; a trailing remainder is dropped.
pub fn aggregate(values: &[f64], m: usize) -> Result<AggregatedSeries> {
    if m == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    if m > values.len() {
        return Err(Error::SeriesTooShort { len: values.len(), min: m });
    }
    let inv = 1.0 / m as f64;
    let values = values.chunks_exact(m).map(|c| c.iter().sum::<f64>() * inv).collect();
    Ok(AggregatedSeries { m, values })
}
