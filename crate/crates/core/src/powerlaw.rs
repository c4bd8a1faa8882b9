//! Discrete power-law fitting and goodness-of-fit.
//!
//! A discrete power law on `x >= xmin` has mass `x^-alpha / ζ(alpha, xmin)`
//! where ζ is the Hurwitz zeta function. Fitting follows the usual recipe
//! for empirical heavy tails:
//!
//! 1. for every candidate `xmin` (distinct positive values with a large
//!    enough tail) maximise the log-likelihood in `alpha`;
//! 2. keep the `xmin` whose fitted tail has the smallest KS distance to the
//!    empirical tail;
//! 3. the p-value is the share of semi-parametric bootstrap replicas (model
//!    draws above `xmin`, resampled body below it, each refitted from
//!    scratch) whose KS distance is at least the observed one.
//!
//! Zeros are never tail members but do count toward the body share.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DetectorConfig;
use crate::rng;
use crate::zeta::hurwitz;

pub const ALPHA_MIN: f64 = 1.01;
pub const ALPHA_MAX: f64 = 6.0;
pub const ALPHA_TOL: f64 = 1e-4;
pub const DEFAULT_MIN_TAIL: usize = 10;

/// Largest value the sampler will return; reachable only for alpha close to 1.
const SAMPLE_CAP: u64 = 1_000_000_000_000_000;
const SAMPLER_TABLE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub xmin: u64,
    pub ks: f64,
    pub n_tail: usize,
    /// Size of the full sample, tail and body.
    pub n: usize,
    pub p_value: Option<f64>,
}

/// Distinct values of the positive part of a sample with suffix statistics.
struct TailTable {
    values: Vec<u64>,
    counts: Vec<usize>,
    /// Number of samples >= values[i].
    suffix_n: Vec<usize>,
    /// Sum of ln(x) over samples >= values[i].
    suffix_log: Vec<f64>,
}

impl TailTable {
    fn new(data: &[u64]) -> Self {
        let mut pos: Vec<u64> = data.iter().copied().filter(|&x| x >= 1).collect();
        pos.sort_unstable();
        let mut values = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for x in pos {
            if values.last() == Some(&x) {
                *counts.last_mut().unwrap() += 1;
            } else {
                values.push(x);
                counts.push(1);
            }
        }
        let k = values.len();
        let mut suffix_n = vec![0; k];
        let mut suffix_log = vec![0.0; k];
        let (mut n, mut s) = (0usize, 0.0f64);
        for i in (0..k).rev() {
            n += counts[i];
            s += counts[i] as f64 * (values[i] as f64).ln();
            suffix_n[i] = n;
            suffix_log[i] = s;
        }
        TailTable { values, counts, suffix_n, suffix_log }
    }

    fn positives(&self) -> usize {
        self.suffix_n.first().copied().unwrap_or(0)
    }

    /// MLE of alpha for the tail starting at distinct index `i`.
    fn mle(&self, i: usize) -> f64 {
        let n = self.suffix_n[i] as f64;
        let slog = self.suffix_log[i];
        let xmin = self.values[i] as f64;
        let loglik = |a: f64| -a * slog - n * hurwitz(a, xmin).ln();
        golden_max(loglik, ALPHA_MIN, ALPHA_MAX, ALPHA_TOL)
    }

    /// KS distance between the tail from distinct index `i` and the model.
    fn ks(&self, i: usize, alpha: f64) -> f64 {
        let xmin = self.values[i] as f64;
        let z0 = hurwitz(alpha, xmin);
        let n = self.suffix_n[i] as f64;
        let mut cum = 0usize;
        let mut d: f64 = 0.0;
        let k = self.values.len();
        let mut z_next = z0;
        for j in i..k {
            let v = self.values[j] as f64;
            cum += self.counts[j];
            let emp = cum as f64 / n;
            // ζ(α, v + 1) = ζ(α, v) - v^-α
            let z_at = z_next;
            let cdf_v = 1.0 - (z_at - v.powf(-alpha)) / z0;
            d = d.max((emp - cdf_v).abs());
            if j + 1 < k {
                let next = self.values[j + 1] as f64;
                z_next = hurwitz(alpha, next);
                if next > v + 1.0 {
                    // model CDF just below the next support point
                    let cdf_gap = 1.0 - z_next / z0;
                    d = d.max((emp - cdf_gap).abs());
                }
            }
        }
        d
    }
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
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
    let mid = 0.5 * (a + b);
    // the optimum may sit on the bracket edge
    [lo, mid, hi]
        .into_iter()
        .map(|x| (x, f(x)))
        .fold((mid, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

/// Fits a discrete power law with the KS-minimising `xmin`.
///
/// Candidates are the distinct values `>= 1` whose tail has at least
/// `min_tail` members and at least two distinct values.
pub fn fit_discrete(data: &[u64], min_tail: usize) -> Result<PowerLawFit> {
    let table = TailTable::new(data);
    let positives = table.positives();
    if positives < min_tail.max(1) {
        return Err(Error::InsufficientTail { found: positives, min: min_tail });
    }
    if table.values.len() < 2 {
        return Err(Error::DegenerateTail(format!("all {positives} positive values equal {}", table.values[0])));
    }
    let mut best: Option<PowerLawFit> = None;
    for i in 0..table.values.len() - 1 {
        if table.suffix_n[i] < min_tail {
            break;
        }
        let alpha = table.mle(i);
        let ks = table.ks(i, alpha);
        if best.as_ref().map_or(true, |b| ks < b.ks) {
            best = Some(PowerLawFit {
                alpha,
                xmin: table.values[i],
                ks,
                n_tail: table.suffix_n[i],
                n: data.len(),
                p_value: None,
            });
        }
    }
    // i = 0 always qualifies once the checks above pass
    Ok(best.expect("at least one xmin candidate"))
}

/// Fits `alpha` by maximum likelihood for a fixed `xmin`.
pub fn fit_fixed_xmin(data: &[u64], xmin: u64) -> Result<PowerLawFit> {
    if xmin == 0 {
        return Err(Error::InvalidArgument("xmin must be at least 1".into()));
    }
    let tail: Vec<u64> = data.iter().copied().filter(|&x| x >= xmin).collect();
    let table = TailTable::new(&tail);
    match table.values.len() {
        0 => return Err(Error::EmptyTail(xmin)),
        1 => return Err(Error::DegenerateTail(format!("all tail values equal {}", table.values[0]))),
        _ => {}
    }
    let alpha = table.mle(0);
    Ok(PowerLawFit { alpha, xmin, ks: table.ks(0, alpha), n_tail: tail.len(), n: data.len(), p_value: None })
}

/// KS distance between the tail `x >= xmin` of `data` and the power law.
pub fn ks_distance(data: &[u64], alpha: f64, xmin: u64) -> Result<f64> {
    if xmin == 0 || alpha <= 1.0 {
        return Err(Error::InvalidArgument(format!("need alpha > 1 and xmin >= 1, got {alpha}, {xmin}")));
    }
    let tail: Vec<u64> = data.iter().copied().filter(|&x| x >= xmin).collect();
    if tail.is_empty() {
        return Err(Error::EmptyTail(xmin));
    }
    let table = TailTable::new(&tail);
    Ok(table.ks(0, alpha))
}

/// Discrete power law with inverse-transform sampling.
#[derive(Debug, Clone)]
pub struct DiscretePowerLaw {
    alpha: f64,
    xmin: u64,
    z0: f64,
    /// survival[t] = P(X >= xmin + t)
    survival: Vec<f64>,
}

impl DiscretePowerLaw {
    pub fn new(alpha: f64, xmin: u64) -> Result<Self> {
        if !(alpha > 1.0) || xmin == 0 {
            return Err(Error::InvalidArgument(format!("need alpha > 1 and xmin >= 1, got {alpha}, {xmin}")));
        }
        let z0 = hurwitz(alpha, xmin as f64);
        let mut survival = Vec::with_capacity(SAMPLER_TABLE + 1);
        let mut z = z0;
        for t in 0..=SAMPLER_TABLE {
            survival.push(z / z0);
            z -= ((xmin + t as u64) as f64).powf(-alpha);
        }
        Ok(DiscretePowerLaw { alpha, xmin, z0, survival })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn xmin(&self) -> u64 {
        self.xmin
    }

    pub fn pmf(&self, x: u64) -> f64 {
        if x < self.xmin {
            0.0
        } else {
            (x as f64).powf(-self.alpha) / self.z0
        }
    }

    /// P(X >= x).
    pub fn survival(&self, x: u64) -> f64 {
        if x <= self.xmin {
            return 1.0;
        }
        let t = (x - self.xmin) as usize;
        if t < self.survival.len() {
            self.survival[t]
        } else {
            hurwitz(self.alpha, x as f64) / self.z0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        // u in (0, 1]; X = x iff S(x + 1) < u <= S(x)
        let u = 1.0 - rng.gen::<f64>();
        let last = self.survival.len() - 1;
        if u > self.survival[last] {
            // survival is decreasing: first t with survival[t+1] < u
            let (mut lo, mut hi) = (0usize, last);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if self.survival[mid] >= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return self.xmin + lo as u64;
        }
        let mut lo = self.xmin + last as u64;
        let mut hi = lo.saturating_mul(2);
        while self.survival(hi) >= u {
            if hi >= SAMPLE_CAP {
                return SAMPLE_CAP;
            }
            lo = hi;
            hi = hi.saturating_mul(2).min(SAMPLE_CAP);
        }
        // invariant: S(lo) >= u > S(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.survival(mid) >= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// `n` iid draws from the discrete power law, deterministic in `seed`.
pub fn sample_discrete(alpha: f64, xmin: u64, n: usize, seed: u64) -> Result<Vec<u64>> {
    let dist = DiscretePowerLaw::new(alpha, xmin)?;
    let mut r = rng::rng(seed);
    Ok((0..n).map(|_| dist.sample(&mut r)).collect())
}

/// Outcome of the bootstrap significance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub n_boot: usize,
    /// Replicas whose refit failed; counted as exceeding the observed KS.
    pub failed_replicas: usize,
}

/// Semi-parametric bootstrap p-value for `fit` on `data`.
pub fn significance_pvalue(data: &[u64], fit: &PowerLawFit, n_boot: usize, min_tail: usize, seed: u64) -> Result<f64> {
    significance_test(data, fit, n_boot, min_tail, seed, true).map(|s| s.p_value)
}

/// Like [`significance_pvalue`], with diagnostics. Replicas use per-index
/// seeds, so `parallel` does not change the result.
pub fn significance_test(
    data: &[u64],
    fit: &PowerLawFit,
    n_boot: usize,
    min_tail: usize,
    seed: u64,
    parallel: bool,
) -> Result<Significance> {
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be positive".into()));
    }
    let model = DiscretePowerLaw::new(fit.alpha, fit.xmin)?;
    let body: Vec<u64> = data.iter().copied().filter(|&x| x < fit.xmin).collect();
    let n = data.len();
    let tail_share = fit.n_tail as f64 / n as f64;

    let replica = |r: usize| -> Option<f64> {
        let mut g = rng::rng(rng::derive(seed, r as u64));
        let synthetic: Vec<u64> = (0..n)
            .map(|_| {
                if body.is_empty() || g.gen::<f64>() < tail_share {
                    model.sample(&mut g)
                } else {
                    body[g.gen_range(0..body.len())]
                }
            })
            .collect();
        fit_discrete(&synthetic, min_tail).ok().map(|f| f.ks)
    };

    let results: Vec<Option<f64>> = if parallel {
        (0..n_boot).into_par_iter().map(replica).collect()
    } else {
        (0..n_boot).map(replica).collect()
    };
    let failed = results.iter().filter(|r| r.is_none()).count();
    let exceed = results.iter().filter(|r| r.map_or(true, |ks| ks >= fit.ks)).count();
    Ok(Significance { p_value: exceed as f64 / n_boot as f64, n_boot, failed_replicas: failed })
}

/// Why a series was not accepted as power-law distributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rejection {
    InsufficientTail { found: usize, min: usize },
    DegenerateTail,
    LowPValue { p_value: f64 },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawCheck {
    pub passed: bool,
    pub fit: Option<PowerLawFit>,
    pub rejection: Option<Rejection>,
}

/// The accept/reject rule: rejected only when `p < alpha_reject`.
pub fn accept(p_value: f64, alpha_reject: f64) -> bool {
    p_value >= alpha_reject
}

/// Fits, tests, and decides with the settings of `config`.
pub fn passes_powerlaw(data: &[u64], config: &DetectorConfig) -> PowerLawCheck {
    passes_powerlaw_exec(data, config, config.seed, true)
}

pub(crate) fn passes_powerlaw_exec(data: &[u64], config: &DetectorConfig, seed: u64, parallel: bool) -> PowerLawCheck {
    let reject = |fit, rejection| PowerLawCheck { passed: false, fit, rejection: Some(rejection) };
    let mut fit = match fit_discrete(data, config.min_tail) {
        Ok(f) => f,
        Err(Error::InsufficientTail { found, min }) => return reject(None, Rejection::InsufficientTail { found, min }),
        Err(Error::DegenerateTail(_)) => return reject(None, Rejection::DegenerateTail),
        Err(e) => return reject(None, Rejection::Failed(e.to_string())),
    };
    let p = match significance_test(data, &fit, config.n_boot, config.min_tail, seed, parallel) {
        Ok(s) => s.p_value,
        Err(e) => return reject(Some(fit), Rejection::Failed(e.to_string())),
    };
    fit.p_value = Some(p);
    if accept(p, config.alpha_reject) {
        PowerLawCheck { passed: true, fit: Some(fit), rejection: None }
    } else {
        reject(Some(fit), Rejection::LowPValue { p_value: p })
    }
}
