//! Orbit statistics: expansion and recurrence times, the sets `Gamma_n`,
//! and hyperbolic times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay::StatSeries;
use crate::error::{Error, Result};
use crate::geometry::IntervalSet;
use crate::maps::{truncated, MapModel, Point};

/// Parameters of the expansion, recurrence and hyperbolic-time conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub lambda: f64,
    pub eps_rec: f64,
    pub delta_rec: f64,
    pub sigma: f64,
    pub delta_hyp: f64,
    pub b: f64,
    pub horizon: usize,
    /// Expansion threshold as a fraction of `lambda`.
    pub threshold_factor: f64,
}

impl ExpansionConfig {
    /// Defaults for a model: `sigma = exp(-lambda/4)`, `eps_rec = lambda/20`,
    /// `b` half of its admissible bound, `delta_rec = delta_hyp = 0.1`.
    pub fn for_model(m: &MapModel, beta: f64) -> ExpansionConfig {
        let lambda = m.lambda;
        ExpansionConfig {
            lambda,
            eps_rec: lambda / 20.0,
            delta_rec: 0.1,
            sigma: (-lambda / 4.0).exp(),
            delta_hyp: 0.1,
            b: 0.5 * b_bound(beta),
            horizon: 1000,
            threshold_factor: 0.5,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> ExpansionConfig {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self, beta: f64) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("expansion.lambda", "lambda must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::config("expansion.sigma", "sigma must lie in (0, 1)"));
        }
        if !(self.b > 0.0 && self.b < b_bound(beta)) {
            return Err(Error::config("expansion.b", format!("b must lie in (0, {})", b_bound(beta))));
        }
        if !(self.delta_rec > 0.0 && self.delta_rec < 0.5 && self.delta_hyp > 0.0 && self.delta_hyp < 0.5) {
            return Err(Error::config("expansion.delta", "truncation radii must lie in (0, 0.5)"));
        }
        if !(self.eps_rec > 0.0) {
            return Err(Error::config("expansion.eps_rec", "eps_rec must be positive"));
        }
        if self.horizon < 1000 {
            return Err(Error::config("expansion.horizon", "horizon must be at least 1000"));
        }
        if !(self.threshold_factor > 0.0 && self.threshold_factor < 1.0) {
            return Err(Error::config("expansion.threshold_factor", "threshold factor must lie in (0, 1)"));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.threshold_factor * self.lambda
    }

    fn censor_start(&self) -> usize {
        self.horizon - self.horizon / 10
    }
}

/// `min{1/2, 1/(4 beta)}`.
pub fn b_bound(beta: f64) -> f64 {
    if beta > 0.0 {
        (0.5f64).min(1.0 / (4.0 * beta))
    } else {
        0.5
    }
}

/// A time certified on `[N, horizon]`, or censored by the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Certified {
    At(usize),
    Censored,
}

impl Certified {
    pub fn value(&self) -> Option<usize> {
        match *self {
            Certified::At(n) => Some(n),
            Certified::Censored => None,
        }
    }

    /// Whether the time exceeds `n` (censored times exceed every `n`).
    pub fn exceeds(&self, n: usize) -> bool {
        match *self {
            Certified::At(v) => v > n,
            Certified::Censored => true,
        }
    }
}

/// Expansion and recurrence times of one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrbitTimes {
    pub expansion: Certified,
    pub recurrence: Certified,
}

impl OrbitTimes {
    pub fn in_gamma(&self, n: usize) -> bool {
        self.expansion.exceeds(n) || self.recurrence.exceeds(n)
    }

    /// First `n` with the point outside `Gamma_n`.
    pub fn exit_time(&self) -> Option<usize> {
        Some(self.expansion.value()?.max(self.recurrence.value()?))
    }
}

/// Streaming computation of `E(x)` and `R(x)`.
pub fn orbit_times(m: &MapModel, c: &ExpansionConfig, x: Point) -> Result<OrbitTimes> {
    let mut orbit = m.orbit(x);
    let thr = c.threshold();
    let (mut sum_e, mut sum_r) = (0.0, 0.0);
    let (mut fail_e, mut fail_r) = (0usize, 0usize);
    for n in 1..=c.horizon {
        let s = orbit.advance()?;
        sum_e += s.log_expansion;
        sum_r += -truncated(s.singular_distance, c.delta_rec).ln();
        if sum_e < thr * n as f64 {
            fail_e = n;
        }
        if sum_r > 2.0 * c.eps_rec * n as f64 {
            fail_r = n;
        }
    }
    let certify = |fail: usize| {
        if fail >= c.censor_start() {
            Certified::Censored
        } else {
            Certified::At(fail + 1)
        }
    };
    Ok(OrbitTimes { expansion: certify(fail_e), recurrence: certify(fail_r) })
}

pub fn expansion_time(m: &MapModel, c: &ExpansionConfig, x: Point) -> Result<Certified> {
    Ok(orbit_times(m, c, x)?.expansion)
}

pub fn recurrence_time(m: &MapModel, c: &ExpansionConfig, x: Point) -> Result<Certified> {
    Ok(orbit_times(m, c, x)?.recurrence)
}

/// A stored orbit with prefix sums of its Birkhoff terms.
#[derive(Clone, Debug)]
pub struct OrbitRecord {
    pub start: Point,
    /// `f^j(x)` for `j < len`.
    pub points: Vec<Point>,
    /// Prefix sums of `log ||Df^{-1}||^{-1}`; entry `j` sums terms `< j`.
    pub log_expansion_sums: Vec<f64>,
    /// Prefix sums of `-log dist_delta` with the recurrence radius.
    pub recurrence_sums: Vec<f64>,
    /// Raw per-step log-expansions.
    pub log_expansion_terms: Vec<f64>,
    /// Raw distances to the singular set.
    pub singular_distance: Vec<f64>,
}

impl OrbitRecord {
    pub fn compute(m: &MapModel, c: &ExpansionConfig, x: Point, len: usize) -> Result<OrbitRecord> {
        let mut orbit = m.orbit(x);
        let mut points = Vec::with_capacity(len);
        let mut le = Vec::with_capacity(len + 1);
        let mut rs = Vec::with_capacity(len + 1);
        let mut dist = Vec::with_capacity(len);
        let mut terms = Vec::with_capacity(len);
        le.push(0.0);
        rs.push(0.0);
        for j in 0..len {
            let s = orbit.advance()?;
            points.push(s.point);
            le.push(le[j] + s.log_expansion);
            rs.push(rs[j] - truncated(s.singular_distance, c.delta_rec).ln());
            dist.push(s.singular_distance);
            terms.push(s.log_expansion);
        }
        Ok(OrbitRecord {
            start: x,
            points,
            log_expansion_sums: le,
            recurrence_sums: rs,
            log_expansion_terms: terms,
            singular_distance: dist,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Log-expansion at step `j`.
    pub fn log_expansion(&self, j: usize) -> f64 {
        self.log_expansion_terms[j]
    }
}

/// Hyperbolic times of one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicTimeRecord {
    pub point: Vec<f64>,
    pub times: Vec<usize>,
    pub density: f64,
}

/// Hyperbolic times `n <= len` from per-step log-expansions and singular
/// distances, in linear time.
///
/// The product condition for all `k <= n` says the prefix sums of
/// `log|f'| + log sigma` reach a running maximum at `n`. The distance
/// condition is `log dist_delta(z_j) - c j >= -c n` for all `j < n` with
/// `c = -b log sigma`, tracked as a running minimum.
pub fn detect_hyperbolic(log_exp: &[f64], dist: &[f64], sigma: f64, b: f64, delta: f64) -> Vec<usize> {
    let ls = sigma.ln();
    let c = -b * ls;
    let mut out = Vec::new();
    let (mut s, mut smax) = (0.0f64, 0.0f64);
    let mut tmin = f64::INFINITY;
    for (j, (&le, &d)) in log_exp.iter().zip(dist).enumerate() {
        smax = smax.max(s);
        tmin = tmin.min(truncated(d, delta).ln() - c * j as f64);
        s += le + ls;
        let n = j + 1;
        if s >= smax && tmin >= -c * n as f64 {
            out.push(n);
        }
    }
    out
}

/// Incremental form of [`detect_hyperbolic`] for orbits revealed one step
/// at a time.
#[derive(Clone, Copy, Debug)]
pub struct HyperbolicTracker {
    log_sigma: f64,
    c: f64,
    delta: f64,
    s: f64,
    smax: f64,
    tmin: f64,
    j: usize,
}

impl HyperbolicTracker {
    pub fn new(sigma: f64, b: f64, delta: f64) -> HyperbolicTracker {
        let ls = sigma.ln();
        HyperbolicTracker { log_sigma: ls, c: -b * ls, delta, s: 0.0, smax: 0.0, tmin: f64::INFINITY, j: 0 }
    }

    /// Feeds the data of `f^j(x)`; returns whether `j + 1` is hyperbolic.
    pub fn push(&mut self, log_exp: f64, dist: f64) -> bool {
        self.smax = self.smax.max(self.s);
        self.tmin = self.tmin.min(truncated(dist, self.delta).ln() - self.c * self.j as f64);
        self.s += log_exp + self.log_sigma;
        self.j += 1;
        self.s >= self.smax && self.tmin >= -self.c * self.j as f64
    }
}

pub fn hyperbolic_times(m: &MapModel, c: &ExpansionConfig, x: Point) -> Result<HyperbolicTimeRecord> {
    let rec = OrbitRecord::compute(m, c, x, c.horizon)?;
    let le: Vec<f64> = (0..rec.len()).map(|j| rec.log_expansion(j)).collect();
    let times = detect_hyperbolic(&le, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
    let density = times.len() as f64 / c.horizon as f64;
    Ok(HyperbolicTimeRecord { point: x.coords(), times, density })
}

/// Deterministic per-point generator.
pub fn point_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Lebesgue-uniform sample point number `index`.
pub fn sample_point(m: &MapModel, seed: u64, index: u64) -> Point {
    let mut r = point_rng(seed, index);
    let u: f64 = r.gen();
    let v: f64 = r.gen();
    m.uniform_point(u, v)
}

/// Monte Carlo estimate of `Leb(Gamma_n)` for `n = 1..=horizon`.
pub fn gamma_fraction(m: &MapModel, c: &ExpansionConfig, sample: usize, seed: u64) -> Result<StatSeries> {
    let times = sample_orbit_times(m, c, sample, seed)?;
    Ok(gamma_series(&times, c.horizon))
}

/// Orbit times of `sample` Lebesgue-uniform points; singular orbits count
/// as censored.
pub fn sample_orbit_times(m: &MapModel, c: &ExpansionConfig, sample: usize, seed: u64) -> Result<Vec<OrbitTimes>> {
    if sample < 1000 {
        return Err(Error::InsufficientData("gamma_fraction needs at least 1000 samples".into()));
    }
    (0..sample as u64)
        .into_par_iter()
        .map(|i| match orbit_times(m, c, sample_point(m, seed, i)) {
            Err(Error::SingularOrbit { .. }) => {
                Ok(OrbitTimes { expansion: Certified::Censored, recurrence: Certified::Censored })
            }
            other => other,
        })
        .collect()
}

/// Fraction in `Gamma_n` with binomial standard errors.
pub fn gamma_series(times: &[OrbitTimes], horizon: usize) -> StatSeries {
    let total = times.len() as f64;
    let mut exits = vec![0usize; horizon + 2];
    let mut censored = 0usize;
    for t in times {
        match t.exit_time() {
            Some(e) => exits[e.min(horizon + 1)] += 1,
            None => censored += 1,
        }
    }
    let cf = censored as f64 / total;
    let mut inside = times.len() - censored;
    let mut s = StatSeries::new("gamma_fraction");
    for (n, &e) in exits.iter().enumerate().skip(1).take(horizon) {
        // Points with exit time e leave Gamma_n for n >= e.
        inside -= e;
        let p = (inside + censored) as f64 / total;
        s.push(n, p, (p * (1.0 - p) / total).sqrt());
        s.censored.push(cf);
    }
    s
}

/// Monte Carlo estimate of `(1/n) sum_j Leb(A cap H_j) / Leb(A)` for the
/// part `A` of `base` outside `Gamma_n`.
pub fn theta_density(m: &MapModel, c: &ExpansionConfig, base: &IntervalSet, n: usize, sample: usize, seed: u64) -> Result<f64> {
    if sample < 1000 {
        return Err(Error::InsufficientData("theta_density needs at least 1000 samples".into()));
    }
    if !(base.measure() > 0.0) {
        return Err(Error::Domain("base must have positive measure".into()));
    }
    let n = n.min(c.horizon);
    let pieces = base.pieces().to_vec();
    let total = base.measure();
    let vals: Vec<Option<f64>> = (0..sample as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = point_rng(seed, i);
            let mut u: f64 = r.gen::<f64>() * total;
            let mut x = pieces[pieces.len() - 1].1;
            for &(lo, hi) in &pieces {
                if u <= hi - lo {
                    x = lo + u;
                    break;
                }
                u -= hi - lo;
            }
            let p = Point::Line(x);
            let t = orbit_times(m, c, p).ok()?;
            if t.in_gamma(n) {
                return None;
            }
            let rec = OrbitRecord::compute(m, c, p, n).ok()?;
            let le: Vec<f64> = (0..rec.len()).map(|j| rec.log_expansion(j)).collect();
            let h = detect_hyperbolic(&le, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
            Some(h.len() as f64 / n as f64)
        })
        .collect();
    let kept: Vec<f64> = vals.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::EmptySample("every sampled point of the base lies in Gamma_n".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Largest `delta_rec` from a decreasing ladder for which at least 99% of a
/// pilot sample has an uncensored recurrence time.
pub fn calibrate_delta_rec(m: &MapModel, c: &ExpansionConfig, pilot: usize, seed: u64) -> Result<f64> {
    let ladder = [0.4, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 1e-4, 1e-5, 1e-6];
    for &d in &ladder {
        let mut cc = c.clone();
        cc.delta_rec = d;
        let ok = (0..pilot as u64)
            .into_par_iter()
            .filter(|&i| {
                orbit_times(m, &cc, sample_point(m, seed, i)).is_ok_and(|t| t.recurrence != Certified::Censored)
            })
            .count();
        if ok as f64 >= 0.99 * pilot as f64 {
            return Ok(d);
        }
    }
    Err(Error::NotFound("no recurrence radius satisfies the pilot criterion".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: &MapModel, beta: f64) -> ExpansionConfig {
        ExpansionConfig::for_model(m, beta)
    }

    #[test]
    fn doubling_times_are_one() {
        let m = MapModel::doubling();
        let c = cfg(&m, 0.0);
        let t = orbit_times(&m, &c, Point::Line(0.1234)).unwrap();
        assert_eq!(t.expansion, Certified::At(1));
        assert_eq!(t.recurrence, Certified::At(1));
        let h = hyperbolic_times(&m, &c.with_horizon(1000), Point::Line(0.77)).unwrap();
        assert_eq!(h.times.len(), 1000);
    }

    #[test]
    fn gauss_golden_point() {
        let m = MapModel::gauss(10_000).unwrap().with_lambda(0.96);
        let c = cfg(&m, 2.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let t = orbit_times(&m, &c, Point::Line(g));
        // The float orbit of the golden point drifts off the fixed point, so
        // only check the first steps through the record.
        let rec = OrbitRecord::compute(&m, &c, Point::Line(g), 30).unwrap();
        let le: Vec<f64> = (0..30).map(|j| rec.log_expansion(j)).collect();
        let h = detect_hyperbolic(&le, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
        assert_eq!(h, (1..=30).collect::<Vec<_>>());
        assert!(t.is_ok());
        assert!((le[0] - 0.9624236501192069).abs() < 1e-12);
    }

    #[test]
    fn gauss_near_singular_recurrence() {
        let m = MapModel::gauss(10_000).unwrap();
        let mut c = cfg(&m, 2.0);
        c.delta_rec = 0.1;
        c.eps_rec = 0.05;
        let x = 1.0 / (3.0 + 1e-6);
        let t = orbit_times(&m, &c, Point::Line(x)).unwrap();
        assert!(t.recurrence.exceeds(1));
    }

    #[test]
    fn lsv_slow_escape() {
        let m = MapModel::lsv(0.5).unwrap();
        let c = cfg(&m, 0.0).with_horizon(100_000);
        let t = orbit_times(&m, &c, Point::Line(1e-4)).unwrap();
        assert!(t.expansion.exceeds(50));
        let c = cfg(&m, 0.0);
        let rec = OrbitRecord::compute(&m, &c, Point::Line(1e-4), 1000).unwrap();
        let escape = rec.points.iter().position(|p| p.as_line().unwrap() >= 0.5).unwrap();
        let le: Vec<f64> = (0..rec.len()).map(|j| rec.log_expansion(j)).collect();
        let h = detect_hyperbolic(&le, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
        assert!(h.first().is_none_or(|&n| n >= escape), "escape {escape}, first {:?}", h.first());
    }

    #[test]
    fn theta_doubling_is_one() {
        let m = MapModel::doubling();
        let c = cfg(&m, 0.0);
        let base = IntervalSet::from_pairs(crate::geometry::Ambient::Circle, [(0.2, 0.3)]);
        assert_eq!(theta_density(&m, &c, &base, 100, 1000, 1).unwrap(), 1.0);
    }

    #[test]
    fn theta_empty_sample_is_error() {
        let m = MapModel::lsv(0.5).unwrap();
        let mut c = cfg(&m, 0.0);
        c.threshold_factor = 0.99;
        c.lambda = 5.0;
        let base = IntervalSet::from_pairs(crate::geometry::Ambient::Interval, [(0.55, 0.65)]);
        assert!(matches!(theta_density(&m, &c, &base, 100, 1000, 1), Err(Error::EmptySample(_))));
    }

    #[test]
    fn tracker_matches_batch() {
        let le = [0.1, 0.9, -0.3, 0.7, 0.7, 0.2, 1.5, -1.0, 0.6, 0.6];
        let d = [0.5, 0.01, 0.3, 0.001, 0.2, 0.5, 0.05, 0.9, 0.02, 0.4];
        let want = detect_hyperbolic(&le, &d, 0.8, 0.1, 0.1);
        let mut t = HyperbolicTracker::new(0.8, 0.1, 0.1);
        let got: Vec<usize> = (0..le.len()).filter(|&j| t.push(le[j], d[j])).map(|j| j + 1).collect();
        assert_eq!(want, got);
    }
}
