//! The induced return map `F = f^R` on the base and its verification.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{circle_dist, lift_near};
use crate::maps::{BranchMap, MapModel};
use crate::preballs::{push_forward_offsets, BaseGeometry, ScaledOffsets, LINEAR_OFFSET};
use crate::tower::{csv_err, PartitionElement};

/// Endpoint tolerance of the Markov check, in image coordinates.
pub const MARKOV_TOL: f64 = 1e-9;
/// Relative tolerance of the chain-rule cross-check.
pub const CHAIN_RULE_TOL: f64 = 1e-9;
/// Work budget, in derivative evaluations, for automatic sample sizes.
const SAMPLE_BUDGET: f64 = 2e8;

/// Result of checking one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementCheck {
    pub id: usize,
    pub r: usize,
    /// Largest `|F(endpoint) - endpoint of Delta^i|` over `U^0..U^3`.
    pub endpoint_residual: f64,
    /// Same, for `U^0` alone.
    pub markov_residual: f64,
    pub monotone: bool,
    pub log_min_slope: f64,
    pub log_max_slope: f64,
    /// Largest `|log F'(x) - log F'(y)| / |F(x) - F(y)|` over the sample.
    pub distortion_lip: f64,
    /// `|finite difference / chain-rule product - 1|` at the center.
    pub chain_rule_residual: f64,
    /// Distance from the stored center to the pull-back of the base point
    /// along the itinerary.
    pub center_shift: f64,
    /// Whether the shift is within a few ulps or maps to within tolerance.
    pub located: bool,
    pub samples: usize,
}

impl ElementCheck {
    pub fn markov_ok(&self) -> bool {
        self.markov_residual <= MARKOV_TOL && self.monotone && self.located
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovFailure {
    pub id: usize,
    pub residual: f64,
    pub monotone: bool,
    pub located: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub elements: usize,
    pub passed: usize,
    pub pass_fraction: f64,
    pub max_residual: f64,
    pub tolerance: f64,
    pub samples_per_element: usize,
    pub failures: Vec<MarkovFailure>,
}

impl MarkovReport {
    pub fn from_checks(checks: &[ElementCheck]) -> MarkovReport {
        let failures: Vec<MarkovFailure> = checks
            .iter()
            .filter(|c| !c.markov_ok())
            .map(|c| MarkovFailure { id: c.id, residual: c.markov_residual, monotone: c.monotone, located: c.located })
            .collect();
        let n = checks.len();
        MarkovReport {
            elements: n,
            passed: n - failures.len(),
            pass_fraction: if n > 0 { (n - failures.len()) as f64 / n as f64 } else { 1.0 },
            max_residual: checks.iter().map(|c| c.markov_residual).fold(0.0, f64::max),
            tolerance: MARKOV_TOL,
            samples_per_element: checks.iter().map(|c| c.samples).min().unwrap_or(0),
            failures,
        }
    }

    pub fn passes(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    /// `min |F'|` over elements and samples; may be `inf` when it overflows.
    pub lambda_hat: f64,
    pub log_lambda_hat: f64,
    pub argmin: Option<usize>,
    pub chain_rule_max_residual: f64,
    pub chain_rule_ok: bool,
}

impl ExpansionReport {
    pub fn from_checks(checks: &[ElementCheck]) -> Result<ExpansionReport> {
        let best = checks.iter().min_by(|a, b| a.log_min_slope.total_cmp(&b.log_min_slope));
        let Some(best) = best else {
            return Err(Error::EmptySample("no partition elements".into()));
        };
        let log_lambda_hat = best.log_min_slope;
        let chain_rule_max_residual = checks.iter().map(|c| c.chain_rule_residual).fold(0.0, f64::max);
        if log_lambda_hat <= 0.0 {
            return Err(Error::Verification(format!(
                "element {} is not expanding: min |F'| = {}",
                best.id,
                log_lambda_hat.exp()
            )));
        }
        Ok(ExpansionReport {
            lambda_hat: log_lambda_hat.exp(),
            log_lambda_hat,
            argmin: Some(best.id),
            chain_rule_max_residual,
            chain_rule_ok: chain_rule_max_residual <= CHAIN_RULE_TOL,
        })
    }
}

/// Outcome of a separation-time computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "s")]
pub enum Separation {
    /// `F^s x` and `F^s y` lie in different elements, earlier iterates share one.
    Separated(usize),
    /// Still together after `depth_max` iterates.
    Truncated(usize),
    /// An iterate left the resolved elements at step `s`.
    Censored(usize),
}

impl Separation {
    pub fn value(&self) -> usize {
        match *self {
            Separation::Separated(s) | Separation::Truncated(s) | Separation::Censored(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub pairs: usize,
    pub b_tilde: f64,
    pub k_hat: f64,
    /// `b_tilde * diam * exp(b_tilde * diam)`.
    pub k_bound: f64,
    pub k_consistent: bool,
    /// Largest `dist(x, y) * lambda^s(x, y)` over the sample.
    pub max_scaled_distance: f64,
    pub separation_consistent: bool,
    pub separated_pairs: usize,
    pub censored_pairs: usize,
    pub truncated_pairs: usize,
    pub max_separation: usize,
    /// Per-element estimates, sorted by element id.
    pub per_element: Vec<(usize, f64)>,
}

/// The return map on the base with element lookup.
#[derive(Clone, Debug)]
pub struct InducedMap {
    model: MapModel,
    p: f64,
    wraps: bool,
    /// Clipped `Delta^0..Delta^3` as offsets from `p`.
    targets: [(f64, f64); 4],
    elements: Vec<PartitionElement>,
    index: Vec<(f64, f64, usize)>,
}

impl InducedMap {
    pub fn new(model: &MapModel, geom: &BaseGeometry, elements: Vec<PartitionElement>) -> Result<InducedMap> {
        let bm = model.require_branches()?;
        let amb = bm.ambient();
        let wraps = amb.wraps();
        let p = geom.p;
        let mut targets = [(0.0, 0.0); 4];
        for (t, r) in targets.iter_mut().zip(geom.radii()) {
            *t = if wraps { (-r, r) } else { ((p - r).max(0.0) - p, (p + r).min(1.0) - p) };
        }
        let mut index: Vec<(f64, f64, usize)> =
            elements.iter().enumerate().filter(|(_, e)| e.u[0].1 > e.u[0].0).map(|(i, e)| (e.u[0].0, e.u[0].1, i)).collect();
        index.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(InducedMap { model: model.clone(), p, wraps, targets, elements, index })
    }

    pub fn elements(&self) -> &[PartitionElement] {
        &self.elements
    }

    pub fn model(&self) -> &MapModel {
        &self.model
    }

    fn bm(&self) -> &dyn BranchMap {
        self.model.require_branches().expect("checked at construction")
    }

    /// Index (into [`Self::elements`]) of the element whose `U^0` contains `x`.
    pub fn element_at(&self, x: f64) -> Option<usize> {
        let x = if self.wraps { x.rem_euclid(1.0) } else { x };
        let probe = |x: f64| {
            let k = self.index.partition_point(|e| e.0 <= x);
            let &(lo, hi, i) = self.index.get(k.checked_sub(1)?)?;
            (x >= lo && x < hi).then_some(i)
        };
        probe(x).or_else(|| if self.wraps { probe(x + 1.0) } else { None })
    }

    /// Pull-back of the base point along the itinerary of element `i`.
    fn center_chain(&self, i: usize) -> (Vec<f64>, Vec<usize>) {
        let bm = self.bm();
        let e = &self.elements[i];
        let cs = e.symbols();
        let mut zs = vec![0.0; cs.len() + 1];
        zs[cs.len()] = self.p;
        for j in (0..cs.len()).rev() {
            let y = if self.wraps { zs[j + 1].rem_euclid(1.0) } else { zs[j + 1] };
            zs[j] = bm.inverse(cs[j], y);
        }
        (zs, cs)
    }

    /// `F(x)` for `x` in element `i`.
    pub fn apply_in(&self, i: usize, x: f64) -> f64 {
        let (zs, cs) = self.center_chain(i);
        let dx = if self.wraps { lift_near(x, zs[0]) - zs[0] } else { x - zs[0] };
        let e = push_forward_offsets(self.bm(), &zs, &cs, &ScaledOffsets::plain(&[dx]));
        let y = self.p + e[0];
        if self.wraps {
            y.rem_euclid(1.0)
        } else {
            y
        }
    }

    /// Element index and `F(x)`, or `None` when `x` is in no resolved element.
    pub fn apply(&self, x: f64) -> Option<(usize, f64)> {
        let i = self.element_at(x)?;
        Some((i, self.apply_in(i, x)))
    }

    pub fn return_time(&self, x: f64) -> Option<usize> {
        self.element_at(x).map(|i| self.elements[i].r)
    }

    pub fn separation_time(&self, x: f64, y: f64, depth_max: usize) -> Separation {
        let (mut x, mut y) = (x, y);
        for s in 0..depth_max {
            let (Some(ex), Some(ey)) = (self.element_at(x), self.element_at(y)) else {
                return Separation::Censored(s);
            };
            if ex != ey {
                return Separation::Separated(s);
            }
            x = self.apply_in(ex, x);
            y = self.apply_in(ey, y);
        }
        Separation::Truncated(depth_max)
    }

    /// Samples per element that keeps the total work within budget.
    pub fn auto_samples(&self) -> usize {
        let work: f64 = self.elements.iter().map(|e| e.r as f64).sum::<f64>().max(1.0);
        (SAMPLE_BUDGET / work).clamp(4.0, 100.0) as usize
    }

    /// Checks every element with `samples` image points each (0 picks
    /// [`Self::auto_samples`]).
    pub fn element_checks(&self, samples: usize) -> Vec<ElementCheck> {
        let s = if samples == 0 { self.auto_samples() } else { samples };
        (0..self.elements.len()).into_par_iter().map(|i| self.check_element(&self.elements[i], s)).collect()
    }

    /// Checks `e` against the itinerary it claims; `e` need not belong to
    /// this map, which allows corrupted copies.
    pub fn check_element(&self, e: &PartitionElement, samples: usize) -> ElementCheck {
        let bm = self.bm();
        let samples = samples.max(2);
        let cs = e.symbols();
        let mut zs = vec![0.0; cs.len() + 1];
        zs[cs.len()] = self.p;
        for j in (0..cs.len()).rev() {
            let y = if self.wraps { zs[j + 1].rem_euclid(1.0) } else { zs[j + 1] };
            zs[j] = bm.inverse(cs[j], y);
        }

        // Endpoints, pushed forward from the stored offsets.
        let fwd = push_forward_offsets(bm, &zs, &cs, &e.offsets);
        let mut endpoint_residual = 0.0f64;
        let mut markov_residual = 0.0f64;
        for (i, &(tlo, thi)) in self.targets.iter().enumerate() {
            let r = (fwd[2 * i] - tlo).abs().max((fwd[2 * i + 1] - thi).abs());
            let r = if r.is_nan() { f64::INFINITY } else { r };
            endpoint_residual = endpoint_residual.max(r);
            if i == 0 {
                markov_residual = r;
            }
        }

        // Image samples pulled back with running log-derivatives.
        let (tlo, thi) = self.targets[0];
        let t: Vec<f64> = (0..samples).map(|k| tlo + (thi - tlo) * (k as f64 + 0.5) / samples as f64).collect();
        let mut off = ScaledOffsets::plain(&t);
        let mut logd = vec![0.0f64; samples];
        let mut monotone = true;
        let mut linear = false;
        let mut center_log = 0.0;
        for j in (0..cs.len()).rev() {
            let scale = if self.wraps { 1.0 } else { zs[j + 1].abs() };
            if !linear && off.m.iter().all(|v| v.abs() <= LINEAR_OFFSET * scale) {
                linear = true;
                off.normalize();
            }
            if linear {
                let d = bm.derivative(cs[j], zs[j]);
                off.m.iter_mut().for_each(|v| *v /= d);
                if off.m.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-100 {
                    off.normalize();
                }
            } else {
                for v in off.m.iter_mut() {
                    *v = bm.inverse_offset(cs[j], zs[j], *v);
                }
            }
            let f = off.log_scale.exp();
            let sign0 = bm.derivative(cs[j], zs[j]).signum();
            for (k, v) in off.m.iter().enumerate() {
                let d = bm.derivative(cs[j], zs[j] + v * f);
                if d.signum() != sign0 || d == 0.0 {
                    monotone = false;
                }
                logd[k] += d.abs().ln();
            }
            center_log += bm.derivative(cs[j], zs[j]).abs().ln();
        }
        let increasing = off.m.windows(2).all(|w| w[1] > w[0]);
        let decreasing = off.m.windows(2).all(|w| w[1] < w[0]);
        monotone &= increasing || decreasing;
        let log_min_slope = logd.iter().copied().fold(f64::INFINITY, f64::min);
        let log_max_slope = logd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut distortion_lip = 0.0f64;
        for a in 0..samples {
            for b in a + 1..samples {
                distortion_lip = distortion_lip.max((logd[a] - logd[b]).abs() / (t[b] - t[a]));
            }
        }

        // Chain rule against a central difference at the center.
        let w = (e.offsets.m[1] - e.offsets.m[0]).abs();
        let eta = 1e-6 * w;
        let fd = push_forward_offsets(bm, &zs, &cs, &ScaledOffsets { m: vec![-eta, eta], log_scale: e.offsets.log_scale });
        let log_fd = (fd[1] - fd[0]).abs().ln() - (2.0 * eta).ln() - e.offsets.log_scale;
        let chain_rule_residual = (log_fd - center_log).exp_m1().abs();
        let chain_rule_residual = if chain_rule_residual.is_nan() { f64::INFINITY } else { chain_rule_residual };

        let center_shift = if self.wraps { circle_dist(zs[0], e.center) } else { (zs[0] - e.center).abs() };
        let ulps = 4.0 * f64::EPSILON * e.center.abs().max(f64::MIN_POSITIVE);
        let located = center_shift <= ulps || center_shift * center_log.exp() <= MARKOV_TOL;

        ElementCheck {
            id: e.id,
            r: e.r,
            center_shift,
            located,
            endpoint_residual,
            markov_residual,
            monotone,
            log_min_slope,
            log_max_slope,
            distortion_lip,
            chain_rule_residual,
            samples,
        }
    }

    pub fn verify_markov(&self, samples: usize) -> MarkovReport {
        MarkovReport::from_checks(&self.element_checks(samples))
    }

    pub fn verify_expansion(&self, samples: usize) -> Result<ExpansionReport> {
        ExpansionReport::from_checks(&self.element_checks(samples))
    }

    /// Log-ratio `log |F'(x) / F'(y)|` for the points of element `i` with
    /// images `p + u` and `p + v`.
    fn log_ratio(&self, i: usize, u: f64, v: f64) -> f64 {
        let bm = self.bm();
        let (zs, cs) = self.center_chain(i);
        let mut off = ScaledOffsets::plain(&[u, v]);
        let mut linear = false;
        let mut acc = 0.0;
        for j in (0..cs.len()).rev() {
            let scale = if self.wraps { 1.0 } else { zs[j + 1].abs() };
            if !linear && off.m.iter().all(|x| x.abs() <= LINEAR_OFFSET * scale) {
                linear = true;
                off.normalize();
            }
            if linear {
                let d = bm.derivative(cs[j], zs[j]);
                off.m.iter_mut().for_each(|x| *x /= d);
                if off.m.iter().fold(0.0f64, |a, x| a.max(x.abs())) < 1e-100 {
                    off.normalize();
                }
            } else {
                for x in off.m.iter_mut() {
                    *x = bm.inverse_offset(cs[j], zs[j], *x);
                }
            }
            let f = off.log_scale.exp();
            let dx = bm.derivative(cs[j], zs[j] + off.m[0] * f).abs();
            let dy = bm.derivative(cs[j], zs[j] + off.m[1] * f).abs();
            acc += dx.ln() - dy.ln();
        }
        acc
    }

    /// Estimates the distortion constants from `pairs` random same-element
    /// pairs; `log_lambda` is the expansion bound used for separation.
    pub fn verify_distortion(&self, log_lambda: f64, pairs: usize, depth_max: usize, seed: u64) -> Result<DistortionReport> {
        if self.elements.is_empty() {
            return Err(Error::EmptySample("no partition elements".into()));
        }
        if pairs == 0 {
            return Err(Error::EmptySample("pair sample is empty".into()));
        }
        let (tlo, thi) = self.targets[0];
        let diam = thi - tlo;
        let results: Vec<(usize, f64, f64, Separation, f64)> = (0..pairs)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let i = rng.gen_range(0..self.elements.len());
                let u = rng.gen_range(tlo..thi);
                let v = rng.gen_range(tlo..thi);
                let lr = self.log_ratio(i, u, v);
                let lip = if u != v { lr.abs() / (u - v).abs() } else { 0.0 };
                let s = self.separation_time(self.p + u, self.p + v, depth_max);
                (i, lip, lr, s, (u - v).abs())
            })
            .collect();
        let mut per: HashMap<usize, f64> = HashMap::new();
        let (mut b_tilde, mut log_k, mut max_scaled) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
        let (mut separated, mut censored, mut truncated, mut max_sep) = (0, 0, 0, 0);
        for &(i, lip, lr, s, dist) in &results {
            let id = self.elements[i].id;
            let slot = per.entry(id).or_insert(0.0);
            *slot = slot.max(lip);
            b_tilde = b_tilde.max(lip);
            match s {
                Separation::Separated(s) => {
                    separated += 1;
                    max_sep = max_sep.max(s);
                    let lk = lr.exp_m1().abs().ln() + s as f64 * log_lambda;
                    log_k = log_k.max(lk);
                    if dist > 0.0 {
                        max_scaled = max_scaled.max((dist.ln() + s as f64 * log_lambda).exp());
                    }
                }
                Separation::Censored(_) => censored += 1,
                Separation::Truncated(_) => truncated += 1,
            }
        }
        let k_hat = if log_k.is_finite() { log_k.exp() } else { 0.0 };
        let k_bound = b_tilde * diam * (b_tilde * diam).exp();
        let mut per_element: Vec<(usize, f64)> = per.into_iter().collect();
        per_element.sort_by_key(|e| e.0);
        Ok(DistortionReport {
            pairs,
            b_tilde,
            k_hat,
            k_bound,
            k_consistent: k_hat <= k_bound * (1.0 + 1e-6) + 1e-12,
            max_scaled_distance: max_scaled,
            separation_consistent: max_scaled <= 1.0 + 1e-6,
            separated_pairs: separated,
            censored_pairs: censored,
            truncated_pairs: truncated,
            max_separation: max_sep,
            per_element,
        })
    }

    /// Writes `lo,hi,R,min_slope,max_slope,distortion_lip` per element.
    pub fn write_csv(&self, path: &Path, checks: &[ElementCheck], seed: u64) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# master_seed={seed}")?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["lo", "hi", "R", "min_slope", "max_slope", "distortion_lip"]).map_err(csv_err)?;
        for c in checks {
            let e = self.elements.iter().find(|e| e.id == c.id).unwrap_or(&self.elements[0]);
            w.write_record([
                e.u[0].0.to_string(),
                e.u[0].1.to_string(),
                e.r.to_string(),
                c.log_min_slope.exp().to_string(),
                c.log_max_slope.exp().to_string(),
                c.distortion_lip.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary written next to the element table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedSummary {
    pub markov: MarkovReport,
    pub expansion: Option<ExpansionReport>,
    pub distortion: Option<DistortionReport>,
    pub master_seed: u64,
}

impl InducedSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?)?;
        Ok(())
    }
}
