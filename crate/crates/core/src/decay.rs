//! Tail fits, correlation estimates, CLT checks and tower decay diagnostics.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::expansion::point_rng;
use crate::maps::{MapModel, Point};
use crate::tower::{csv_err, StepRecord};

/// A series indexed by time with standard errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatSeries {
    pub name: String,
    pub n: Vec<usize>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Optional per-point censored fraction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub censored: Vec<f64>,
}

impl StatSeries {
    pub fn new(name: &str) -> StatSeries {
        StatSeries { name: name.to_string(), ..Default::default() }
    }

    pub fn push(&mut self, n: usize, value: f64, stderr: f64) {
        self.n.push(n);
        self.value.push(value);
        self.stderr.push(stderr);
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    pub fn get(&self, n: usize) -> Option<f64> {
        self.n.iter().position(|&k| k == n).map(|i| self.value[i])
    }

    /// Points with `lo <= n <= hi`.
    pub fn window(&self, lo: usize, hi: usize) -> StatSeries {
        let mut s = StatSeries::new(&self.name);
        for i in 0..self.len() {
            if self.n[i] >= lo && self.n[i] <= hi {
                s.push(self.n[i], self.value[i], self.stderr[i]);
                if let Some(&c) = self.censored.get(i) {
                    s.censored.push(c);
                }
            }
        }
        s
    }

    /// Keeps the points closest to `per_decade` logarithmically spaced
    /// targets per decade, which balances log-log regressions.
    pub fn log_thin(&self, per_decade: usize) -> StatSeries {
        let mut s = StatSeries::new(&self.name);
        let mut last_bucket = i64::MIN;
        for i in 0..self.len() {
            let n = self.n[i].max(1) as f64;
            let bucket = (n.log10() * per_decade as f64).floor() as i64;
            if bucket != last_bucket {
                s.push(self.n[i], self.value[i], self.stderr[i]);
                last_bucket = bucket;
            }
        }
        s
    }

    pub fn is_non_increasing(&self) -> bool {
        self.value.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Least-squares line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
}

/// Ordinary least squares on `(x, y)` pairs.
pub fn ols(pts: &[(f64, f64)]) -> Linear {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = if pts.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Linear { slope, intercept, slope_se, r2 }
}

/// Parametric tail families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `C n^{-gamma}`, parameter `gamma`.
    Polynomial,
    /// `C rho^n`, parameter `rho`.
    Exponential,
    /// `C exp(-c sqrt(n))`, parameter `c`.
    StretchedExponential,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Polynomial, Family::Exponential, Family::StretchedExponential];

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "polynomial" | "poly" => Ok(Family::Polynomial),
            "exponential" | "exp" => Ok(Family::Exponential),
            "stretched" | "stretched_exponential" => Ok(Family::StretchedExponential),
            other => Err(Error::config("fit.family", format!("unknown family `{other}`"))),
        }
    }
}

/// Result of a tail fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub family: Family,
    pub param: f64,
    /// 95% confidence half-width of `param`.
    pub param_ci: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub window: (usize, usize),
    pub points: usize,
}

/// Fits `family` to the positive values of `s` in `[lo, hi]`.
pub fn tail_fit(s: &StatSeries, family: Family, lo: usize, hi: usize) -> Result<TailFit> {
    let w = s.window(lo, hi);
    let pts: Vec<(f64, f64)> = (0..w.len())
        .filter(|&i| w.value[i] > 0.0)
        .map(|i| {
            let n = w.n[i] as f64;
            let x = match family {
                Family::Polynomial => n.ln(),
                Family::Exponential => n,
                Family::StretchedExponential => n.sqrt(),
            };
            (x, w.value[i].ln())
        })
        .collect();
    if pts.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "tail fit needs at least 10 positive points in [{lo}, {hi}], found {}",
            pts.len()
        )));
    }
    let l = ols(&pts);
    let (param, ci) = match family {
        Family::Polynomial => (-l.slope, 1.96 * l.slope_se),
        Family::Exponential => (l.slope.exp(), 1.96 * l.slope_se * l.slope.exp()),
        Family::StretchedExponential => (-l.slope, 1.96 * l.slope_se),
    };
    Ok(TailFit { family, param, param_ci: ci, prefactor: l.intercept.exp(), r2: l.r2, window: (lo, hi), points: pts.len() })
}

/// Fits every family and returns them sorted by decreasing `R^2`.
pub fn rank_families(s: &StatSeries, lo: usize, hi: usize) -> Result<Vec<TailFit>> {
    let mut fits = Family::ALL.iter().map(|&f| tail_fit(s, f, lo, hi)).collect::<Result<Vec<_>>>()?;
    fits.sort_by(|a, b| b.r2.total_cmp(&a.r2));
    Ok(fits)
}

/// Bounded observable on the ambient space; planar points use their first
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    Identity,
    /// `x - c`.
    Centered { c: f64 },
    /// `cos(2 pi k x)`.
    Cosine { k: u32 },
    Constant { c: f64 },
    /// Indicator of `[lo, hi)`.
    Indicator { lo: f64, hi: f64 },
}

impl Observable {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Observable::Identity => x,
            Observable::Centered { c } => x - c,
            Observable::Cosine { k } => (2.0 * std::f64::consts::PI * k as f64 * x).cos(),
            Observable::Constant { c } => c,
            Observable::Indicator { lo, hi } => f64::from(u8::from(x >= lo && x < hi)),
        }
    }

    pub fn at(&self, p: Point) -> f64 {
        match p {
            Point::Line(x) => self.eval(x),
            Point::Plane([s, _]) => self.eval(s),
        }
    }

    /// Parses `x`, `x-0.5`, `cos`, `cos:3`, `const:1` or `ind:0.1:0.2`.
    pub fn parse(s: &str) -> Result<Observable> {
        let bad = || Error::config("observable", format!("cannot parse observable `{s}`"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let s = s.trim();
        if s == "x" || s == "identity" {
            return Ok(Observable::Identity);
        }
        if let Some(c) = s.strip_prefix("x-") {
            return Ok(Observable::Centered { c: num(c)? });
        }
        if s == "cos" {
            return Ok(Observable::Cosine { k: 1 });
        }
        if let Some(k) = s.strip_prefix("cos:") {
            return Ok(Observable::Cosine { k: k.trim().parse().map_err(|_| bad())? });
        }
        if let Some(c) = s.strip_prefix("const:") {
            return Ok(Observable::Constant { c: num(c)? });
        }
        if let Some(r) = s.strip_prefix("ind:") {
            let (lo, hi) = r.split_once(':').ok_or_else(bad)?;
            return Ok(Observable::Indicator { lo: num(lo)?, hi: num(hi)? });
        }
        Err(bad())
    }
}

/// Monte Carlo sizes for correlation estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationConfig {
    pub n_max: usize,
    pub sample: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub seed: u64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig { n_max: 50, sample: 100_000, burn_in: 1000, batches: 32, seed: 0 }
    }
}

impl CorrelationConfig {
    fn validate(&self) -> Result<()> {
        if self.sample < self.batches || self.batches < 2 {
            return Err(Error::config("correlation.sample", "need at least two batches and one start per batch"));
        }
        Ok(())
    }
}

/// Orbit of a Lebesgue-uniform start after burn-in; singular orbits are
/// redrawn from the same stream.
fn stationary_orbit(m: &MapModel, seed: u64, index: u64, burn_in: usize, len: usize, out: &mut Vec<Point>) -> Result<()> {
    let mut r = point_rng(seed, index);
    for _ in 0..64 {
        let x = m.uniform_point(r.gen(), r.gen());
        let mut orbit = m.orbit(x);
        out.clear();
        let mut ok = true;
        for j in 0..burn_in + len {
            match orbit.advance() {
                Ok(st) if j >= burn_in => out.push(st.point),
                Ok(_) => {}
                Err(Error::SingularOrbit { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok(());
        }
    }
    Err(Error::Numerical(format!("start {index} keeps hitting the singular set")))
}

#[derive(Clone, Default)]
struct CovSums {
    count: f64,
    psi0: f64,
    phi: Vec<f64>,
    prod: Vec<f64>,
}

impl CovSums {
    fn new(n: usize) -> CovSums {
        CovSums { count: 0.0, psi0: 0.0, phi: vec![0.0; n + 1], prod: vec![0.0; n + 1] }
    }

    fn merge(&mut self, o: &CovSums) {
        self.count += o.count;
        self.psi0 += o.psi0;
        for k in 0..self.phi.len() {
            self.phi[k] += o.phi[k];
            self.prod[k] += o.prod[k];
        }
    }

    fn cov(&self, k: usize) -> f64 {
        self.prod[k] / self.count - (self.phi[k] / self.count) * (self.psi0 / self.count)
    }
}

/// Signed `Cov_mu(phi o f^n, psi)` for `n = 0..=n_max` with batch-means
/// standard errors, and the pooled mean of `phi`.
pub fn covariance(m: &MapModel, phi: &Observable, psi: &Observable, cfg: &CorrelationConfig) -> Result<(StatSeries, f64)> {
    cfg.validate()?;
    let n = cfg.n_max;
    let per = cfg.sample / cfg.batches;
    let batches: Vec<CovSums> = (0..cfg.batches)
        .into_par_iter()
        .map(|b| {
            let mut acc = CovSums::new(n);
            let mut pts = Vec::with_capacity(n + 1);
            let lo = b * per;
            let hi = if b + 1 == cfg.batches { cfg.sample } else { lo + per };
            for i in lo..hi {
                stationary_orbit(m, cfg.seed, i as u64, cfg.burn_in, n + 1, &mut pts)?;
                let p0 = psi.at(pts[0]);
                acc.count += 1.0;
                acc.psi0 += p0;
                for (k, &pt) in pts.iter().enumerate() {
                    let v = phi.at(pt);
                    acc.phi[k] += v;
                    acc.prod[k] += v * p0;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = CovSums::new(n);
    for b in &batches {
        total.merge(b);
    }
    let nb = batches.len() as f64;
    let mut s = StatSeries::new("covariance");
    for k in 0..=n {
        let vals: Vec<f64> = batches.iter().map(|b| b.cov(k)).collect();
        let mean = vals.iter().sum::<f64>() / nb;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nb - 1.0);
        s.push(k, total.cov(k), (var / nb).sqrt());
    }
    let mean_phi = total.phi.iter().sum::<f64>() / (total.count * (n + 1) as f64);
    Ok((s, mean_phi))
}

/// Correlation function `C_n = |Cov_mu(phi o f^n, psi)|`.
pub fn correlation(m: &MapModel, phi: &Observable, psi: &Observable, cfg: &CorrelationConfig) -> Result<StatSeries> {
    let (mut s, _) = covariance(m, phi, psi, cfg)?;
    s.name = "correlation".into();
    s.value.iter_mut().for_each(|v| *v = v.abs());
    Ok(s)
}

/// Result of a central limit check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub sigma2: f64,
    pub sigma2_stderr: f64,
    /// Number of covariance terms kept in the Green-Kubo sum.
    pub gk_terms: usize,
    pub mean: f64,
    /// Kolmogorov-Smirnov distance, absent when the variance degenerates.
    pub ks: Option<f64>,
    pub degenerate: bool,
    /// Empirical variance of the normalized Birkhoff sums.
    pub empirical_variance: f64,
    pub n: usize,
    pub sample: usize,
}

/// Compares normalized Birkhoff sums of `phi` with `Normal(0, sigma^2)`,
/// `sigma^2` from a Green-Kubo sum truncated at the noise floor.
pub fn clt_check(m: &MapModel, phi: &Observable, n: usize, sample: usize, seed: u64) -> Result<CltReport> {
    if sample < 2 {
        return Err(Error::EmptySample("clt needs at least two samples".into()));
    }
    let cfg = CorrelationConfig { n_max: n.min(200), sample, burn_in: 1000, batches: 32.min(sample), seed };
    let (cov, mean) = covariance(m, phi, phi, &cfg)?;
    let mut sigma2 = cov.value[0];
    let mut var_se = cov.stderr[0].powi(2);
    let mut terms = 1;
    for k in 1..cov.len() {
        if cov.value[k].abs() < 2.0 * cov.stderr[k] {
            break;
        }
        sigma2 += 2.0 * cov.value[k];
        var_se += 4.0 * cov.stderr[k].powi(2);
        terms += 1;
    }
    let sums: Vec<f64> = (0..sample)
        .into_par_iter()
        .map(|i| {
            let mut pts = Vec::with_capacity(n);
            stationary_orbit(m, seed ^ 0x5bd1_e995, i as u64, 1000, n, &mut pts)?;
            Ok(pts.iter().map(|&p| phi.at(p) - mean).sum::<f64>() / (n as f64).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    let mu = sums.iter().sum::<f64>() / sample as f64;
    let empirical_variance = sums.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (sample as f64 - 1.0);
    let degenerate = sigma2 < 1e-12;
    let ks = if degenerate {
        None
    } else {
        let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut sorted = sums;
        sorted.sort_by(f64::total_cmp);
        let nn = sorted.len() as f64;
        let mut d = 0.0f64;
        for (i, &v) in sorted.iter().enumerate() {
            let c = normal.cdf(v);
            d = d.max((c - i as f64 / nn).abs()).max(((i + 1) as f64 / nn - c).abs());
        }
        Some(d)
    };
    Ok(CltReport { sigma2, sigma2_stderr: var_se.sqrt(), gk_terms: terms, mean, ks, degenerate, empirical_variance, n, sample })
}

/// Terminal case of a descent chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentCase {
    /// Reached a time outside `F`.
    I,
    /// Reached a time with `Leb(A_k) < 2 Leb(Gamma_k)`.
    II,
    /// Fell to `k <= R_0`.
    III,
    /// No `k < n` with `Leb(A_n)/Leb(A_k) < (k/n)^gamma` exists.
    Stuck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    pub n: usize,
    pub chain: Vec<usize>,
    pub case: DescentCase,
}

/// Per-step diagnostics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub n: usize,
    pub leb_a: f64,
    pub leb_b: f64,
    pub leb_delta: f64,
    pub a_ratio: Option<f64>,
    pub a1: Option<f64>,
    pub b1: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub h: Option<f64>,
    pub in_e: bool,
    pub in_f: bool,
    /// Running sum of `h_j`.
    pub media: f64,
}

/// Inputs of [`decay_diagnostics`] beyond the step history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub r0: usize,
    pub theta: f64,
    pub gamma: f64,
    /// Threshold for `E_n`; defaults to `(theta/12)^(gamma+1)`.
    pub alpha: Option<f64>,
    /// Ratios use only steps whose reference set holds this many particles.
    pub min_particles: usize,
}

impl DiagnosticsConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| (self.theta / 12.0).powf(self.gamma + 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayDiagnostics {
    pub rows: Vec<DiagnosticRow>,
    pub a0_hat: f64,
    pub a1_hat: f64,
    pub b1_hat: f64,
    pub c1_hat: f64,
    pub c2_hat: f64,
    /// `((1 + a1) b1 + c1) / (a1 (1 - b1 - c1))` from the measured constants.
    pub a0_from_flows: f64,
    pub alpha: f64,
    pub ab_holds: bool,
    pub flows_hold: bool,
    pub c2_holds: bool,
    pub descents: Vec<DescentTrace>,
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

/// Ratio series and descent traces of a tower history. `gamma_leb` gives
/// `Leb(Gamma_n)` by time when available.
pub fn decay_diagnostics(records: &[StepRecord], gamma_leb: Option<&StatSeries>, cfg: &DiagnosticsConfig) -> Result<DecayDiagnostics> {
    if records.is_empty() || records.iter().enumerate().any(|(i, r)| r.n != i) {
        return Err(Error::InsufficientData("incomplete step history".into()));
    }
    let alpha = cfg.alpha();
    let mp = cfg.min_particles;
    let ratio = |num: f64, den: f64, count: usize| (count >= mp && den > 0.0).then(|| num / den);
    let mut rows: Vec<DiagnosticRow> = Vec::with_capacity(records.len());
    let (mut e_count, mut media) = (0usize, 0.0);
    for (i, r) in records.iter().enumerate() {
        let prev = i.checked_sub(1).map(|k| &records[k]);
        let next = records.get(i + 1);
        let a_ratio = ratio(r.leb_b, r.leb_a, r.count_a);
        let a1 = prev.and_then(|p| ratio(r.flow_b_to_a, p.leb_b, p.count_b));
        let b1 = prev.and_then(|p| ratio(r.flow_a_to_b, p.leb_a, p.count_a));
        let c1 = prev.and_then(|p| ratio(r.flow_a_to_r, p.leb_a, p.count_a));
        let c2 = next.and_then(|q| ratio(r.leb_delta, q.leb_delta, q.count_a + q.count_b));
        let h = prev.and_then(|p| ratio(r.leb_a_prev_hyp, p.leb_a, p.count_a));
        let in_e = h.is_some_and(|h| h < alpha);
        e_count += usize::from(in_e);
        media += h.unwrap_or(0.0);
        let in_f = r.n > 0 && e_count as f64 / r.n as f64 > 1.0 - cfg.theta / 12.0;
        rows.push(DiagnosticRow {
            n: r.n,
            leb_a: r.leb_a,
            leb_b: r.leb_b,
            leb_delta: r.leb_delta,
            a_ratio,
            a1,
            b1,
            c1,
            c2,
            h,
            in_e,
            in_f,
            media,
        });
    }
    let active = |r: &&DiagnosticRow| r.n > cfg.r0;
    let a0_hat = max_of(rows.iter().filter(active).filter_map(|r| r.a_ratio));
    let a1_hat = rows.iter().filter(active).filter_map(|r| r.a1).fold(f64::INFINITY, f64::min);
    let b1_hat = max_of(rows.iter().filter(active).filter_map(|r| r.b1));
    let c1_hat = max_of(rows.iter().filter_map(|r| r.c1));
    let c2_hat = max_of(rows.iter().filter_map(|r| r.c2));
    let eta = 1.0 - b1_hat - c1_hat;
    let a0_from_flows = if a1_hat.is_finite() && a1_hat > 0.0 && eta > 0.0 {
        ((1.0 + a1_hat) * b1_hat + c1_hat) / (a1_hat * eta)
    } else {
        f64::INFINITY
    };
    let ab_holds = rows.iter().all(|r| r.a_ratio.is_none_or(|a| a <= a0_hat));
    let flows_hold = b1_hat + c1_hat < 1.0;
    let c2_holds = c2_hat.is_finite() && rows.iter().all(|r| r.c2.is_none_or(|c| c <= c2_hat));

    let leb_a = |k: usize| records[k].leb_a;
    let gamma_at = |k: usize| gamma_leb.and_then(|g| g.get(k));
    let in_f = |k: usize| rows[k].in_f;
    let mut descents = Vec::new();
    for start in 1..records.len() {
        if !in_f(start) || start <= cfg.r0 {
            continue;
        }
        if gamma_at(start).is_none_or(|g| leb_a(start) < 2.0 * g) {
            continue;
        }
        let mut chain = vec![start];
        let mut cur = start;
        let case = loop {
            let k = (1..cur).rev().find(|&k| leb_a(k) > 0.0 && leb_a(cur) / leb_a(k) < (k as f64 / cur as f64).powf(cfg.gamma));
            let Some(k) = k else { break DescentCase::Stuck };
            chain.push(k);
            if k <= cfg.r0 {
                break DescentCase::III;
            }
            if !in_f(k) {
                break DescentCase::I;
            }
            if gamma_at(k).is_none_or(|g| leb_a(k) < 2.0 * g) {
                break DescentCase::II;
            }
            cur = k;
        };
        descents.push(DescentTrace { n: start, chain, case });
    }
    Ok(DecayDiagnostics {
        rows,
        a0_hat,
        a1_hat,
        b1_hat,
        c1_hat,
        c2_hat,
        a0_from_flows,
        alpha,
        ab_holds,
        flows_hold,
        c2_holds,
        descents,
    })
}

/// Whether halving `delta0` strictly decreased the measured constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerunComparison {
    pub a0: (f64, f64),
    pub b1: (f64, f64),
    pub c1: (f64, f64),
    pub a0_decreases: bool,
    pub b1_decreases: bool,
    pub c1_decreases: bool,
}

pub fn compare_rerun(base: &DecayDiagnostics, half: &DecayDiagnostics) -> RerunComparison {
    RerunComparison {
        a0: (base.a0_hat, half.a0_hat),
        b1: (base.b1_hat, half.b1_hat),
        c1: (base.c1_hat, half.c1_hat),
        a0_decreases: half.a0_hat < base.a0_hat,
        b1_decreases: half.b1_hat < base.b1_hat,
        c1_decreases: half.c1_hat < base.c1_hat,
    }
}

/// Checks `Leb(Delta_0) = sum Leb(R = n) + Leb(Delta_n)` at every step.
pub fn conservation_residual(records: &[StepRecord], leb_delta0: f64) -> f64 {
    let mut captured = 0.0;
    let mut worst = 0.0f64;
    for r in records {
        captured += r.leb_r_eq_n;
        worst = worst.max((leb_delta0 - captured - r.leb_delta).abs());
    }
    worst
}

fn header(path: &Path, seed: u64) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# master_seed={seed}")?;
    Ok(f)
}

/// Writes `n,<value_col>,stderr` rows, plus `censored_fraction` when the
/// series carries one.
pub fn write_series_csv(path: &Path, s: &StatSeries, value_col: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(header(path, seed)?);
    let cens = s.censored.len() == s.len() && !s.is_empty();
    let mut head = vec!["n", value_col, "stderr"];
    if cens {
        head.push("censored_fraction");
    }
    w.write_record(&head).map_err(csv_err)?;
    for i in 0..s.len() {
        let mut row = vec![s.n[i].to_string(), s.value[i].to_string(), s.stderr[i].to_string()];
        if cens {
            row.push(s.censored[i].to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

impl DecayDiagnostics {
    /// Writes `n,leb_A,leb_B,leb_Delta,h_n,in_E_n,in_F` rows.
    pub fn write_csv(&self, path: &Path, seed: u64) -> Result<()> {
        let mut w = csv::Writer::from_writer(header(path, seed)?);
        w.write_record(["n", "leb_A", "leb_B", "leb_Delta", "h_n", "in_E_n", "in_F"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.leb_a.to_string(),
                r.leb_b.to_string(),
                r.leb_delta.to_string(),
                r.h.map_or(String::new(), |h| h.to_string()),
                u8::from(r.in_e).to_string(),
                u8::from(r.in_f).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(f: impl Fn(f64) -> f64, range: std::ops::RangeInclusive<usize>) -> StatSeries {
        let mut s = StatSeries::new("synthetic");
        for n in range {
            s.push(n, f(n as f64), 0.0);
        }
        s
    }

    #[test]
    fn polynomial_recovery() {
        let s = synth(|n| 7.0 * n.powi(-2), 10..=1000);
        let f = tail_fit(&s, Family::Polynomial, 10, 1000).unwrap();
        assert!((f.param - 2.0).abs() < 0.01 && f.r2 > 0.9999);
        assert!((f.prefactor - 7.0).abs() < 1e-9);
    }

    #[test]
    fn exponential_recovery() {
        let s = synth(|n| 0.5f64.powf(n), 1..=60);
        let f = tail_fit(&s, Family::Exponential, 1, 60).unwrap();
        assert!((f.param - 0.5).abs() < 1e-9);
        let p = tail_fit(&s, Family::Polynomial, 1, 60).unwrap();
        assert!(p.r2 < f.r2);
        assert_eq!(rank_families(&s, 1, 60).unwrap()[0].family, Family::Exponential);
    }

    #[test]
    fn too_few_points() {
        let s = synth(|n| 1.0 / n, 1..=5);
        assert!(matches!(tail_fit(&s, Family::Polynomial, 1, 5), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn observable_parsing() {
        assert_eq!(Observable::parse("x").unwrap(), Observable::Identity);
        assert_eq!(Observable::parse("x-0.5").unwrap(), Observable::Centered { c: 0.5 });
        assert_eq!(Observable::parse("cos:3").unwrap(), Observable::Cosine { k: 3 });
        assert_eq!(Observable::parse("ind:0.1:0.2").unwrap(), Observable::Indicator { lo: 0.1, hi: 0.2 });
        assert!(Observable::parse("sin").is_err());
    }

    #[test]
    fn doubling_cosine_is_uncorrelated() {
        let m = MapModel::doubling();
        let cfg = CorrelationConfig { n_max: 5, sample: 20_000, burn_in: 100, batches: 32, seed: 3 };
        let c = Observable::Cosine { k: 1 };
        let (s, _) = covariance(&m, &c, &c, &cfg).unwrap();
        assert!((s.value[0] - 0.5).abs() < 3.0 * s.stderr[0] + 1e-3);
        for k in 1..=5 {
            assert!(s.value[k].abs() < 4.0 * s.stderr[k], "k={k} {} {}", s.value[k], s.stderr[k]);
        }
    }

    #[test]
    fn covariance_is_deterministic() {
        let m = MapModel::lsv(0.5).unwrap();
        let cfg = CorrelationConfig { n_max: 3, sample: 2000, burn_in: 50, batches: 32, seed: 9 };
        let a = covariance(&m, &Observable::Identity, &Observable::Identity, &cfg).unwrap();
        let b = covariance(&m, &Observable::Identity, &Observable::Identity, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_observable_is_degenerate() {
        let m = MapModel::doubling();
        let r = clt_check(&m, &Observable::Constant { c: 1.0 }, 100, 200, 1).unwrap();
        assert!(r.degenerate && r.ks.is_none());
    }

    #[test]
    fn doubling_diagnostics() {
        use crate::expansion::ExpansionConfig;
        use crate::tower::{run_tower, TowerConfig};
        let m = MapModel::doubling();
        let exp = ExpansionConfig::for_model(&m, 0.5);
        let run = run_tower(&m, &exp, &TowerConfig { p: Some(0.0), n_max: 30, particles: 4000, ..Default::default() }).unwrap();
        let cfg = DiagnosticsConfig { r0: 12, theta: 1.0, gamma: 1.8, alpha: None, min_particles: 100 };
        let d = decay_diagnostics(&run.records, None, &cfg).unwrap();
        assert!(d.rows.iter().filter_map(|r| r.h).all(|h| h > 0.99));
        assert!(d.rows.iter().all(|r| !r.in_e && !r.in_f));
        assert!(d.descents.is_empty());
        assert!(d.flows_hold && d.c2_holds && d.ab_holds);
        assert!(conservation_residual(&run.records, run.summary.leb_delta0) < 1e-12);
        assert!(decay_diagnostics(&run.records[1..], None, &cfg).is_err());
    }
}
