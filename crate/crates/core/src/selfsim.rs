//! Hurst-parameter estimation.
//!
//! Three estimators, each reporting the points it regressed or optimised
//! over so that callers can plot or audit them:
//!
//! - aggregate variance: slope of `log(V_m / V)` against `log m` is `-β`,
//!   and `H = 1 - β/2`;
//! - rescaled range: slope of `log E[R/S](n)` against `log n` is `H`;
//! - Whittle: approximate maximum likelihood of the fGn spectral density
//!   against the periodogram, with an asymptotic confidence interval.
//!
//! A series is called self-similar when every estimate lies strictly
//! inside `(0.5, 1)`.

use std::f64::consts::PI;
use std::fmt;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zeta::hurwitz;

/// Shortest series any estimator accepts.
pub const MIN_LEN: usize = 64;

/// Smallest R/S block; R/S of very short blocks is pinned near 1.
const RS_MIN_BLOCK: usize = 4;

/// Whittle search bracket for H.
const WHITTLE_LO: f64 = 0.01;
const WHITTLE_HI: f64 = 0.99;
const WHITTLE_TOL: f64 = 1e-6;

/// 97.5% standard normal quantile.
const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HurstMethod {
    AggVar,
    Rs,
    Whittle,
}

impl HurstMethod {
    pub const ALL: [HurstMethod; 3] = [HurstMethod::AggVar, HurstMethod::Rs, HurstMethod::Whittle];

    pub fn name(self) -> &'static str {
        match self {
            HurstMethod::AggVar => "agg_var",
            HurstMethod::Rs => "rs",
            HurstMethod::Whittle => "whittle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn estimate(self, series: &[f64]) -> Result<HurstEstimate> {
        match self {
            HurstMethod::AggVar => hurst_agg_var(series, None),
            HurstMethod::Rs => hurst_rs(series, None),
            HurstMethod::Whittle => hurst_whittle(series),
        }
    }
}

impl fmt::Display for HurstMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstEstimate {
    pub method: HurstMethod,
    pub h: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// (scale, statistic): `(m, V_m/V)` for agg_var, `(n, mean R/S)` for R/S,
    /// `(frequencies, standard error)` for Whittle.
    pub diagnostics: Vec<(f64, f64)>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn check_series(x: &[f64]) -> Result<f64> {
    if x.len() < MIN_LEN {
        return Err(Error::SeriesTooShort { len: x.len(), min: MIN_LEN });
    }
    let v = variance(x);
    let scale = x.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    if !(v > 1e-24 * scale * scale) {
        return Err(Error::DegenerateSeries("zero variance".into()));
    }
    Ok(v)
}

fn powers_of_two(lo: usize, hi: usize) -> Vec<usize> {
    std::iter::successors(Some(lo), |&m| m.checked_mul(2)).take_while(|&m| m <= hi).collect()
}

/// Least-squares slope of `ln y` on `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Aggregate-variance estimate. Default blocks: powers of two in `[2, len/8]`.
pub fn hurst_agg_var(series: &[f64], block_sizes: Option<&[usize]>) -> Result<HurstEstimate> {
    let v = check_series(series)?;
    let sizes = match block_sizes {
        Some(s) => s.to_vec(),
        None => powers_of_two(2, series.len() / 8),
    };
    let mut diag = Vec::new();
    for &m in &sizes {
        if m < 2 || series.len() / m < 2 {
            continue;
        }
        let agg: Vec<f64> = series.chunks_exact(m).map(mean).collect();
        let vm = variance(&agg);
        if vm > 0.0 {
            diag.push((m as f64, vm / v));
        }
    }
    if diag.len() < 2 {
        return Err(Error::SeriesTooShort { len: series.len(), min: MIN_LEN });
    }
    let beta = -loglog_slope(&diag);
    Ok(HurstEstimate { method: HurstMethod::AggVar, h: 1.0 - beta / 2.0, ci_low: None, ci_high: None, diagnostics: diag })
}

/// Rescaled adjusted range of one block, `None` if the block is flat.
fn rescaled_range(block: &[f64]) -> Option<f64> {
    let m = mean(block);
    let (mut w, mut lo, mut hi) = (0.0f64, 0.0f64, 0.0f64);
    let mut ss = 0.0;
    for &x in block {
        let dev = x - m;
        w += dev;
        lo = lo.min(w);
        hi = hi.max(w);
        ss += dev * dev;
    }
    let s = (ss / block.len() as f64).sqrt();
    (s > 0.0).then(|| (hi - lo) / s)
}

/// R/S estimate. Default blocks: powers of two in `[4, len/4]`.
pub fn hurst_rs(series: &[f64], block_sizes: Option<&[usize]>) -> Result<HurstEstimate> {
    check_series(series)?;
    let sizes = match block_sizes {
        Some(s) => s.to_vec(),
        None => powers_of_two(RS_MIN_BLOCK, series.len() / 4),
    };
    let mut diag = Vec::new();
    for &n in &sizes {
        if n < 2 || n > series.len() {
            continue;
        }
        let rs: Vec<f64> = series.chunks_exact(n).filter_map(rescaled_range).collect();
        // scales whose blocks are all flat are dropped
        if !rs.is_empty() {
            diag.push((n as f64, mean(&rs)));
        }
    }
    if diag.len() < 3 {
        return Err(Error::DegenerateSeries(format!("only {} usable R/S scales", diag.len())));
    }
    let h = loglog_slope(&diag);
    Ok(HurstEstimate { method: HurstMethod::Rs, h, ci_low: None, ci_high: None, diagnostics: diag })
}

/// fGn spectral density at `lambda` up to an H-dependent constant factor.
///
/// The aliasing sum `Σ_{j≥1} (2πj ± λ)^{-2H-1}` is evaluated exactly with
/// the Hurwitz zeta function.
pub(crate) fn fgn_spectrum_shape(lambda: f64, h: f64) -> f64 {
    let s = 2.0 * h + 1.0;
    let two_pi = 2.0 * PI;
    let aliases = two_pi.powf(-s) * (hurwitz(s, 1.0 + lambda / two_pi) + hurwitz(s, 1.0 - lambda / two_pi));
    (1.0 - lambda.cos()) * (lambda.powf(-s) + aliases)
}

struct Periodogram {
    freqs: Vec<f64>,
    values: Vec<f64>,
    n: usize,
}

impl Periodogram {
    fn new(series: &[f64]) -> Self {
        let n = series.len();
        let m = mean(series);
        let sd = variance(series).sqrt();
        let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new((x - m) / sd, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (n - 1) / 2;
        let freqs = (1..=k).map(|j| 2.0 * PI * j as f64 / n as f64).collect();
        let values = (1..=k).map(|j| buf[j].norm_sqr() / (2.0 * PI * n as f64)).collect();
        Periodogram { freqs, values, n }
    }

    /// Whittle objective with the scale profiled out.
    fn objective(&self, h: f64) -> f64 {
        let mut sum_log = 0.0;
        let mut sum_ratio = 0.0;
        for (&lam, &i) in self.freqs.iter().zip(&self.values) {
            let f = fgn_spectrum_shape(lam, h);
            sum_log += f.ln();
            sum_ratio += i / f;
        }
        let m = self.freqs.len() as f64;
        sum_log + m * (sum_ratio / m).ln()
    }

    /// Asymptotic standard error of the Whittle estimate at `h`.
    fn std_error(&self, h: f64) -> f64 {
        let eps = 1e-5;
        let dlam = 2.0 * PI / self.n as f64;
        // g = ∂/∂H log f; integrals over (-π, π) use symmetry
        let (mut ig, mut ig2) = (0.0, 0.0);
        for &lam in &self.freqs {
            let g = ((fgn_spectrum_shape(lam, h + eps)).ln() - (fgn_spectrum_shape(lam, h - eps)).ln()) / (2.0 * eps);
            ig += 2.0 * g * dlam;
            ig2 += 2.0 * g * g * dlam;
        }
        let info = ig2 - ig * ig / (2.0 * PI);
        (4.0 * PI / (self.n as f64 * info)).sqrt()
    }
}

fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Whittle estimate with a 95% asymptotic confidence interval.
pub fn hurst_whittle(series: &[f64]) -> Result<HurstEstimate> {
    check_series(series)?;
    let pg = Periodogram::new(series);
    let h = golden_min(|h| pg.objective(h), WHITTLE_LO, WHITTLE_HI, WHITTLE_TOL);
    let at_edge = h - WHITTLE_LO < 1e-3 || WHITTLE_HI - h < 1e-3;
    if at_edge || !pg.objective(h).is_finite() {
        return Err(Error::NotConverged(format!(
            "Whittle optimum H = {h:.4} on the search bracket [{WHITTLE_LO}, {WHITTLE_HI}] over {} frequencies",
            pg.freqs.len()
        )));
    }
    let se = pg.std_error(h);
    Ok(HurstEstimate {
        method: HurstMethod::Whittle,
        h,
        ci_low: Some(h - Z_975 * se),
        ci_high: Some(h + Z_975 * se),
        diagnostics: vec![(pg.freqs.len() as f64, se)],
    })
}

/// True iff every estimate lies strictly inside (0.5, 1).
pub fn self_similar_verdict(estimates: &[HurstEstimate]) -> bool {
    !estimates.is_empty() && estimates.iter().all(|e| e.h > 0.5 && e.h < 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::gen_fgn;
    use rand::Rng;

    fn est(h: f64) -> HurstEstimate {
        HurstEstimate { method: HurstMethod::AggVar, h, ci_low: None, ci_high: None, diagnostics: vec![] }
    }

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..n).map(|_| r.gen::<f64>()).collect()
    }

    #[test]
    fn verdict_examples() {
        assert!(self_similar_verdict(&[est(0.68), est(0.68), est(0.97)]));
        assert!(!self_similar_verdict(&[est(0.5)]));
        assert!(!self_similar_verdict(&[est(0.9), est(0.45)]));
        assert!(!self_similar_verdict(&[]));
    }

    #[test]
    fn constant_and_short_series_rejected() {
        let c = vec![4.0; 128];
        for m in HurstMethod::ALL {
            assert!(matches!(m.estimate(&c), Err(Error::DegenerateSeries(_))), "{m}");
            assert!(matches!(m.estimate(&uniform(63, 1)), Err(Error::SeriesTooShort { .. })), "{m}");
            assert!(m.estimate(&uniform(64, 1)).is_ok(), "{m}");
        }
    }

    #[test]
    fn white_noise_estimates() {
        let x = uniform(4096, 3);
        let av = hurst_agg_var(&x, None).unwrap().h;
        assert!((0.4..=0.6).contains(&av), "{av}");
        let rs = hurst_rs(&x, None).unwrap().h;
        assert!((0.4..=0.65).contains(&rs), "{rs}");
        let w = hurst_whittle(&uniform(8192, 4)).unwrap().h;
        assert!((0.45..=0.55).contains(&w), "{w}");
    }

    #[test]
    fn fgn_examples() {
        let av = hurst_agg_var(&gen_fgn(0.8, 4096, 10).unwrap(), None).unwrap().h;
        assert!((0.7..=0.9).contains(&av), "{av}");
        let rs = hurst_rs(&gen_fgn(0.9, 4096, 11).unwrap(), None).unwrap().h;
        assert!((0.8..=1.0).contains(&rs), "{rs}");
        let w = hurst_whittle(&gen_fgn(0.7, 8192, 12).unwrap()).unwrap();
        assert!((0.65..=0.75).contains(&w.h), "{}", w.h);
        assert!(w.ci_low.unwrap() <= w.h && w.h <= w.ci_high.unwrap());
    }

    #[test]
    fn scale_and_shift_invariance() {
        let x = gen_fgn(0.75, 1024, 5).unwrap();
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v + 100.0).collect();
        for m in HurstMethod::ALL {
            let (a, b) = (m.estimate(&x).unwrap().h, m.estimate(&y).unwrap().h);
            assert!((a - b).abs() < 1e-6, "{m}: {a} vs {b}");
        }
    }

    /// Aliasing sum truncated at ±200 terms with an integral tail correction.
    fn spectrum_truncated(lambda: f64, h: f64) -> f64 {
        let s = 2.0 * h + 1.0;
        let two_pi = 2.0 * PI;
        let k = 200;
        let mut b = 0.0;
        for j in 1..=k {
            let j = j as f64;
            b += (two_pi * j + lambda).powf(-s) + (two_pi * j - lambda).powf(-s);
        }
        let edge = two_pi * (k as f64 + 0.5);
        b += ((edge + lambda).powf(1.0 - s) + (edge - lambda).powf(1.0 - s)) / (two_pi * (s - 1.0));
        (1.0 - lambda.cos()) * (lambda.powf(-s) + b)
    }

    #[test]
    fn spectrum_matches_truncated_sum() {
        for &h in &[0.3, 0.5, 0.7, 0.95] {
            for &lam in &[0.001, 0.1, 1.0, 2.5, 3.1] {
                let exact = fgn_spectrum_shape(lam, h);
                let approx = spectrum_truncated(lam, h);
                assert!(((exact - approx) / exact).abs() < 1e-6, "h={h} lam={lam}: {exact} vs {approx}");
            }
        }
    }

    #[test]
    fn white_noise_spectrum_is_flat() {
        // for H = 1/2 the shape is 1/2 at every frequency
        for &lam in &[0.01, 0.7, 2.0, 3.0] {
            assert!((fgn_spectrum_shape(lam, 0.5) - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn rs_drops_flat_scales() {
        // flat in every 4-block, varied across longer blocks
        let x: Vec<f64> = (0..256).map(|i| ((i / 4) % 3) as f64).collect();
        let e = hurst_rs(&x, Some(&[4, 8, 16, 32])).unwrap();
        assert_eq!(e.diagnostics.len(), 3);
        assert!(e.diagnostics.iter().all(|d| d.0 >= 8.0));
    }
}
