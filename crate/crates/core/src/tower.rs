//! Inductive construction of return domains over the base ball.
//!
//! The unpartitioned set is tracked on a deterministic particle grid over
//! `Delta_0`: every grid cell carries its own orbit, its collar counter and
//! its status. Whenever a particle enters `Delta_0^3` after time `R_0`, the
//! component of `f^{-n}(Delta_0^3)` containing it is built by exact branch
//! pull-back and accepted or rejected once, with the outcome memoized under
//! its branch word. Acceptance paints the earlier collars and dead regions
//! into the time-`n` picture of the candidate, so it does not depend on
//! particle resolution.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{detect_hyperbolic, ExpansionConfig, HyperbolicTracker};
use crate::geometry::{lift_near, Ambient, IntervalSet};
use crate::maps::{BranchMap, MapModel, Orbit, Point};
use crate::preballs::{pull_back_offsets, BaseGeometry, Chain, ScaledOffsets};

/// Ring widths below this are merged into the last ring.
pub const RING_TRUNCATION: f64 = 1e-12;

/// Measure below which painted overlaps are treated as empty.
const TOL_PAINT: f64 = 1e-11;

/// The rings `delta0 (1 + sigma^{k/2}) < d < delta0 (1 + sigma^{(k-1)/2})`
/// partitioning the collar `Delta_0^1 \ Delta_0^0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSystem {
    pub delta0: f64,
    pub sigma: f64,
    pub k_ring: usize,
}

impl RingSystem {
    pub fn new(delta0: f64, sigma: f64) -> RingSystem {
        let mut k = 1;
        while delta0 * (sigma.powf((k as f64 - 1.0) / 2.0) - sigma.powf(k as f64 / 2.0)) >= RING_TRUNCATION {
            k += 1;
        }
        RingSystem { delta0, sigma, k_ring: k }
    }

    /// Outer radius of ring `k`.
    pub fn outer(&self, k: usize) -> f64 {
        self.delta0 * (1.0 + self.sigma.powf((k as f64 - 1.0) / 2.0))
    }

    /// Inner radius of ring `k`; the last ring reaches down to `delta0`.
    pub fn inner(&self, k: usize) -> f64 {
        if k >= self.k_ring {
            self.delta0
        } else {
            self.delta0 * (1.0 + self.sigma.powf(k as f64 / 2.0))
        }
    }

    /// Ring containing a point at distance `d` from the base point. Points on
    /// a ring boundary go to the inner ring.
    pub fn ring_index(&self, d: f64) -> Result<usize> {
        if !(d > self.delta0 && d <= 2.0 * self.delta0) {
            return Err(Error::Domain(format!(
                "distance {d} is outside the collar ({}, {}]",
                self.delta0,
                2.0 * self.delta0
            )));
        }
        let q = d / self.delta0 - 1.0;
        let u = 2.0 * q.ln() / self.sigma.ln();
        let k = if u.is_finite() && u >= 0.0 { u.floor() as usize + 1 } else { 1 };
        Ok(k.min(self.k_ring))
    }
}

/// `C_0^{-1} sigma^{N_0/2} delta_0 (sigma^{-1/2} - 1)`.
pub fn collar_epsilon_bound(g: &BaseGeometry, c: &ExpansionConfig) -> f64 {
    g.delta0 * c.sigma.powf(g.n0 as f64 / 2.0) * (c.sigma.powf(-0.5) - 1.0) / g.c0
}

/// How the fattened set `A^eps` is realised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    #[default]
    Fattened,
    /// `A^eps` is replaced by `A`.
    Zero,
}

/// Tower parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub delta0: f64,
    pub delta1: f64,
    pub r0: usize,
    pub n_max: usize,
    /// Collar fattening; half the admissible bound when absent.
    pub epsilon: Option<f64>,
    pub epsilon_mode: EpsilonMode,
    pub particles: usize,
    /// Base point; chosen automatically when absent.
    pub p: Option<f64>,
    /// Permits `epsilon` at or above the collar bound (negative controls).
    pub allow_unsafe_epsilon: bool,
}

impl Default for TowerConfig {
    fn default() -> TowerConfig {
        TowerConfig {
            delta0: 0.01,
            delta1: 0.05,
            r0: 12,
            n_max: 60,
            epsilon: None,
            epsilon_mode: EpsilonMode::Fattened,
            particles: 20_000,
            p: None,
            allow_unsafe_epsilon: false,
        }
    }
}

/// A finished return domain. Arcs are given at time 0; on the circle `lo`
/// is normalized and `hi` may exceed 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionElement {
    pub id: usize,
    /// `U^0, U^1, U^2, U^3`.
    pub u: [(f64, f64); 4],
    pub r: usize,
    pub n_hyp: usize,
    pub m: usize,
    /// Pull-back of the base point.
    pub center: f64,
    /// `log |U^0|`, valid when the arc is below floating resolution.
    pub log_measure: f64,
    /// Endpoints of `U^0..U^3` as offsets from `center`, in the order
    /// `lo0, hi0, lo1, hi1, ...` before orientation sorting.
    pub offsets: ScaledOffsets,
    pub itinerary: Vec<u32>,
    pub collar_ok: bool,
}

impl PartitionElement {
    pub fn len0(&self) -> f64 {
        self.u[0].1 - self.u[0].0
    }

    /// Whether `U^0` is resolved well enough for exact set checks.
    pub fn resolvable(&self) -> bool {
        self.len0() >= 1e-9
    }

    pub fn symbols(&self) -> Vec<usize> {
        self.itinerary.iter().map(|&s| s as usize).collect()
    }
}

/// Run-length encoding of an itinerary.
pub fn rle(word: &[u32]) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for &s in word {
        match out.last_mut() {
            Some((v, c)) if *v == s => *c += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Measures and flows of one step. Flows compare step `n - 1` with step `n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub n: usize,
    pub leb_delta: f64,
    pub leb_a: f64,
    pub leb_b: f64,
    /// Filled one step late, when the next images are known.
    pub leb_aeps: f64,
    pub leb_r_eq_n: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub new_elements: usize,
    pub elements_total: usize,
    /// `Leb(B_{n-1} ∩ A_n)`.
    pub flow_b_to_a: f64,
    /// `Leb(A_{n-1} ∩ B_n)`.
    pub flow_a_to_b: f64,
    /// `Leb(A_{n-1} ∩ {R = n})`.
    pub flow_a_to_r: f64,
    /// `Leb(B_{n-1} ∩ {R = n})`.
    pub flow_b_to_r: f64,
    /// `Leb(A_{n-1} ∩ H_n)` where `H_n` holds points with hyperbolic time `n`.
    pub leb_a_prev_hyp: f64,
    pub collar_failures: Vec<usize>,
    pub particle_collar_violations: usize,
}

/// Outcome of the collar check at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollarReport {
    pub n: usize,
    pub passed: bool,
    pub failures: Vec<usize>,
}

/// Set-level snapshot of the tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerState {
    pub n: usize,
    pub delta: IntervalSet,
    pub a: IntervalSet,
    pub b: IntervalSet,
    pub aeps: IntervalSet,
    /// Level sets of `t_n` for positive values.
    pub t_levels: Vec<(usize, IntervalSet)>,
    pub elements: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct Key {
    h: u32,
    a: u64,
    b: u64,
}

fn extend_hash(k: (u64, u64), s: usize) -> (u64, u64) {
    let a = (k.0 ^ (s as u64).wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(27);
    let b = (k.1.rotate_left(13) ^ (s as u64)).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ 0x94d0_49bb_1331_11eb;
    (a, b)
}

const HASH_SEED: (u64, u64) = (0x243f_6a88_85a3_08d3, 0x1319_8a2e_0370_7344);

fn prefix_hashes(syms: &[usize]) -> Vec<(u64, u64)> {
    let mut out = Vec::with_capacity(syms.len() + 1);
    let mut k = HASH_SEED;
    out.push(k);
    for &s in syms {
        k = extend_hash(k, s);
        out.push(k);
    }
    out
}

fn key(h: usize, k: (u64, u64)) -> Key {
    Key { h: h as u32, a: k.0, b: k.1 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Alive,
    Captured(usize),
    Lost,
}

struct Particle<'a> {
    x0: f64,
    orbit: Orbit<'a>,
    pos: Vec<f64>,
    sym: Vec<u32>,
    hash: (u64, u64),
    t: usize,
    status: Status,
    tracker: HyperbolicTracker,
    aeps: bool,
}

/// Earlier collars and dead regions painted into a time-`h` window.
struct Paint {
    dead: IntervalSet,
    b1: IntervalSet,
    b2: IntervalSet,
}

/// The tower under construction.
pub struct Tower<'a> {
    model: &'a MapModel,
    bm: &'a dyn BranchMap,
    amb: Ambient,
    exp: ExpansionConfig,
    cfg: TowerConfig,
    geom: BaseGeometry,
    rings: RingSystem,
    eps: f64,
    eps_bound: f64,
    n: usize,
    cell: f64,
    particles: Vec<Particle<'a>>,
    memo: HashMap<Key, Option<usize>>,
    elements: Vec<PartitionElement>,
    records: Vec<StepRecord>,
    /// Resolvable `U^0` pieces sorted by `lo`.
    resolved: Vec<(f64, f64, usize)>,
    leb_delta0: f64,
    captured_total: usize,
    zeros: Vec<f64>,
    evaluations: usize,
}

impl<'a> Tower<'a> {
    pub fn new(model: &'a MapModel, exp: &ExpansionConfig, cfg: &TowerConfig) -> Result<Tower<'a>> {
        let bm = model.require_branches()?;
        if cfg.particles == 0 {
            return Err(Error::config("tower.particles", "at least one particle is required"));
        }
        let geom = BaseGeometry::build(model, cfg.delta0, cfg.delta1, cfg.p)?;
        let amb = bm.ambient();
        let r3 = geom.radii()[3];
        if amb.wraps() && 2.0 * r3 + 2.0 * cfg.delta0 >= 0.5 {
            return Err(Error::config(
                "base.delta0",
                format!("delta0 = {} is too large for the circle chart (need 4 sqrt(delta0) + 2 delta0 < 1/2)", cfg.delta0),
            ));
        }
        let eps_bound = collar_epsilon_bound(&geom, exp);
        let eps = cfg.epsilon.unwrap_or(0.5 * eps_bound);
        if !(eps > 0.0) {
            return Err(Error::config("base.eps_collar", "epsilon must be positive"));
        }
        if eps >= eps_bound && !cfg.allow_unsafe_epsilon {
            return Err(Error::config(
                "collar_epsilon_bound",
                format!("epsilon = {eps:e} must be strictly below collar_epsilon_bound = {eps_bound:e}"),
            ));
        }
        let rings = RingSystem::new(cfg.delta0, exp.sigma);
        let (lo, hi) = if amb.wraps() {
            (geom.p - cfg.delta0, geom.p + cfg.delta0)
        } else {
            ((geom.p - cfg.delta0).max(0.0), (geom.p + cfg.delta0).min(1.0))
        };
        let cell = (hi - lo) / cfg.particles as f64;
        let particles = (0..cfg.particles)
            .map(|i| {
                let x0 = amb.normalize(lo + (i as f64 + 0.5) * cell);
                Particle {
                    x0,
                    orbit: model.orbit(Point::Line(x0)),
                    pos: if amb.wraps() { vec![x0] } else { Vec::new() },
                    sym: Vec::new(),
                    hash: HASH_SEED,
                    t: 0,
                    status: Status::Alive,
                    tracker: HyperbolicTracker::new(exp.sigma, exp.b, exp.delta_hyp),
                    aeps: true,
                }
            })
            .collect();
        let leb_delta0 = cell * cfg.particles as f64;
        let records = vec![StepRecord {
            n: 0,
            leb_delta: leb_delta0,
            leb_a: leb_delta0,
            leb_aeps: leb_delta0,
            count_a: cfg.particles,
            ..Default::default()
        }];
        Ok(Tower {
            model,
            bm,
            amb,
            exp: exp.clone(),
            cfg: cfg.clone(),
            geom,
            rings,
            eps,
            eps_bound,
            n: 0,
            cell,
            particles,
            memo: HashMap::new(),
            elements: Vec::new(),
            records,
            resolved: Vec::new(),
            leb_delta0,
            captured_total: 0,
            zeros: Vec::new(),
            evaluations: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.n
    }

    pub fn geometry(&self) -> &BaseGeometry {
        &self.geom
    }

    pub fn rings(&self) -> &RingSystem {
        &self.rings
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn epsilon_bound(&self) -> f64 {
        self.eps_bound
    }

    pub fn elements(&self) -> &[PartitionElement] {
        &self.elements
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn model(&self) -> &MapModel {
        self.model
    }

    /// Number of distinct components evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    fn p_near(&self, v: f64) -> f64 {
        if self.amb.wraps() {
            lift_near(self.geom.p, v)
        } else {
            self.geom.p
        }
    }

    fn clip(&self, lo: f64, hi: f64) -> (f64, f64) {
        if self.amb.wraps() {
            (lo, hi)
        } else {
            (lo.max(0.0), hi.min(1.0))
        }
    }

    fn anchors_for<'b>(&'b mut self, particle_pos: &'b [f64], h: usize) -> &'b [f64] {
        if self.amb.wraps() {
            particle_pos
        } else {
            if self.zeros.len() <= h {
                self.zeros.resize(h + 1, 0.0);
            }
            &self.zeros[..=h]
        }
    }

    /// Evaluates the component of `f^{-h}(Delta_0^3)` along the chain,
    /// returning the element index when it is accepted.
    fn component(&mut self, anchors: &[f64], syms: &[usize], h: usize, hint: Option<(u64, u64)>) -> Result<Option<usize>> {
        let wraps = self.amb.wraps();
        if !wraps {
            let k = key(h, hint.unwrap_or_else(|| prefix_hashes(syms)[h]));
            if let Some(&o) = self.memo.get(&k) {
                return Ok(o);
            }
        }
        let bm = self.bm;
        let p = self.geom.p;
        let chain = Chain::new(bm, anchors, syms);
        let z = chain.pull_back(self.p_near(anchors[h]), h);
        let (zs, cs): (Vec<f64>, Vec<usize>) = if wraps {
            let zs: Vec<f64> = z.iter().map(|&v| self.amb.normalize(v)).collect();
            let cs = zs[..h].iter().map(|&v| bm.branch_at(v).unwrap_or(0)).collect();
            (zs, cs)
        } else {
            (z, syms.to_vec())
        };
        let hs = prefix_hashes(&cs);
        let k = key(h, hs[h]);
        if let Some(&o) = self.memo.get(&k) {
            return Ok(o);
        }
        self.evaluations += 1;
        let out = self.evaluate(&zs, &cs, &hs, h, p)?;
        self.memo.insert(k, out);
        Ok(out)
    }

    fn evaluate(&mut self, zs: &[f64], cs: &[usize], hs: &[(u64, u64)], h: usize, p: f64) -> Result<Option<usize>> {
        let bm = self.bm;
        let radii = self.geom.radii();
        let anchors: &[f64] = if self.amb.wraps() { zs } else { &vec![0.0; h + 1] };
        let chain = Chain::new(bm, anchors, cs);
        let log_exp: Vec<f64> = (0..h).map(|j| bm.derivative(cs[j], zs[j]).abs().ln()).collect();
        let dist: Vec<f64> = (0..h).map(|j| bm.singular_distance(zs[j])).collect();
        let times = detect_hyperbolic(&log_exp, &dist, self.exp.sigma, self.exp.b, self.exp.delta_hyp);
        let (t3lo, t3hi) = self.clip(p - radii[3], p + radii[3]);
        let lo_m = h.saturating_sub(self.geom.n0).max(1);
        let mut witness = None;
        for &m in times.iter().rev() {
            if m > h {
                continue;
            }
            if m < lo_m {
                break;
            }
            let a = chain.pull_back_to(t3lo, h, m);
            let b = chain.pull_back_to(t3hi, h, m);
            let zm = zs[m];
            if self.amb.dist(a, zm) <= self.geom.delta1 && self.amb.dist(b, zm) <= self.geom.delta1 {
                witness = Some(m);
                break;
            }
        }
        let Some(n_hyp) = witness else { return Ok(None) };

        let (wlo, whi) = self.clip(p - radii[3] - self.eps, p + radii[3] + self.eps);
        let paint = self.paint(anchors, cs, Some(hs), h, wlo, whi)?;
        let wamb = paint.dead.ambient();
        let t3 = IntervalSet::from_pairs(wamb, [(t3lo, t3hi)]);
        if t3.intersection(&paint.dead)?.measure() > TOL_PAINT {
            return Ok(None);
        }
        let admissible = match self.cfg.epsilon_mode {
            EpsilonMode::Zero => t3.intersection(&paint.b1)?.measure() <= TOL_PAINT,
            EpsilonMode::Fattened => {
                let a = paint.dead.union(&paint.b1)?.complement();
                t3.difference(&a.fatten(self.eps))?.measure() <= TOL_PAINT
            }
        };
        if !admissible {
            return Ok(None);
        }
        let (c1lo, c1hi) = self.clip(p - radii[1], p + radii[1]);
        let t1 = IntervalSet::from_pairs(wamb, [(c1lo, c1hi)]);
        let collar_ok = t1.intersection(&paint.b2)?.measure() <= TOL_PAINT;

        let mut e = Vec::with_capacity(8);
        for r in radii {
            let (lo, hi) = self.clip(p - r, p + r);
            e.push(lo - p);
            e.push(hi - p);
        }
        let offsets = pull_back_offsets(bm, zs, cs, &e);
        let c0 = zs[0];
        let shift = if self.amb.wraps() { c0 - self.amb.normalize(c0) } else { 0.0 };
        let mut u = [(0.0, 0.0); 4];
        for (i, ui) in u.iter_mut().enumerate() {
            let (a, b) = (c0 + offsets.value(2 * i), c0 + offsets.value(2 * i + 1));
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            *ui = (a - shift, b - shift);
        }
        let log_measure = (offsets.m[1] - offsets.m[0]).abs().ln() + offsets.log_scale;
        let id = self.elements.len();
        let el = PartitionElement {
            id,
            u,
            r: h,
            n_hyp,
            m: h - n_hyp,
            center: zs[0],
            log_measure,
            offsets,
            itinerary: cs.iter().map(|&s| s as u32).collect(),
            collar_ok,
        };
        self.insert_resolved(&el)?;
        self.elements.push(el);
        Ok(Some(id))
    }

    /// Paints dead regions and `{t_{h-1} >= 1}`, `{t_{h-1} >= 2}` into the
    /// window `[wlo, whi]` of time-`h` coordinates along the chain.
    fn paint(&mut self, anchors: &[f64], syms: &[usize], hs: Option<&[(u64, u64)]>, h: usize, wlo: f64, whi: f64) -> Result<Paint> {
        let wamb = Ambient::Window { lo: wlo, hi: whi };
        let mut dead = IntervalSet::empty(wamb);
        let mut b1 = IntervalSet::empty(wamb);
        let mut b2 = IntervalSet::empty(wamb);
        let first = self.cfg.r0 + 1;
        if h <= first {
            return Ok(Paint { dead, b1, b2 });
        }
        let bm = self.bm;
        let chain = Chain::new(bm, anchors, syms);
        let wl = chain.pull_back(wlo, h);
        let wr = chain.pull_back(whi, h);
        let owned;
        let hs = match hs {
            Some(h) => h,
            None if !self.amb.wraps() => {
                owned = prefix_hashes(syms);
                &owned
            }
            None => &[][..],
        };
        let d0 = self.geom.delta0;
        for g in first..h {
            let (a, b) = if wl[g] <= wr[g] { (wl[g], wr[g]) } else { (wr[g], wl[g]) };
            let pg = self.p_near(0.5 * (a + b));
            if b < pg - 2.0 * d0 || a > pg + 2.0 * d0 {
                continue;
            }
            let hint = hs.get(g).copied();
            if self.component(&anchors[..=g], &syms[..g], g, hint)?.is_none() {
                continue;
            }
            let (clo, chi) = self.clip(a, b);
            let image = |lo: f64, hi: f64| -> Option<(f64, f64)> {
                if lo <= clo && chi <= hi {
                    return Some((wlo, whi));
                }
                let (lo, hi) = (lo.max(clo), hi.min(chi));
                if hi <= lo {
                    return None;
                }
                let u = chain.push_forward(lo, g, h);
                let v = chain.push_forward(hi, g, h);
                let (u, v) = if u <= v { (u, v) } else { (v, u) };
                Some((u.max(wlo), v.min(whi)))
            };
            let set = |pairs: &[(f64, f64)]| IntervalSet::from_pairs(wamb, pairs.iter().filter_map(|&(l, r)| image(l, r)));
            let full = set(&[(pg - 2.0 * d0, pg + 2.0 * d0)]);
            let ring_set = |k: usize| {
                if k > self.rings.k_ring {
                    IntervalSet::empty(wamb)
                } else {
                    let o = self.rings.outer(k);
                    set(&[(pg - o, pg - d0), (pg + d0, pg + o)])
                }
            };
            let r1 = ring_set(h - g);
            let r2 = ring_set(h - g + 1);
            dead = dead.union(&set(&[(pg - d0, pg + d0)]))?;
            b1 = b1.difference(&full)?.union(&r1)?;
            b2 = b2.difference(&full)?.union(&r2)?;
        }
        Ok(Paint { dead, b1, b2 })
    }

    fn insert_resolved(&mut self, el: &PartitionElement) -> Result<()> {
        if !el.resolvable() {
            return Ok(());
        }
        let (lo, hi) = el.u[0];
        let pieces = if self.amb.wraps() && hi > 1.0 { vec![(0.0, hi - 1.0), (lo, 1.0)] } else { vec![(lo, hi)] };
        for (lo, hi) in pieces {
            let i = self.resolved.partition_point(|r| r.0 < lo);
            let tol = |a: f64, b: f64| 1e-6 * (b - a).min(hi - lo);
            for j in [i.wrapping_sub(1), i] {
                if let Some(&(a, b, other)) = self.resolved.get(j) {
                    let overlap = b.min(hi) - a.max(lo);
                    if overlap > tol(a, b) {
                        return Err(Error::InconsistentState {
                            step: el.r,
                            detail: format!("U0 of element {} overlaps element {other} by {overlap:e}", el.id),
                        });
                    }
                }
            }
            self.resolved.insert(i, (lo, hi, el.id));
        }
        Ok(())
    }

    /// Advances the tower by one step.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let h = self.n + 1;
        let mut parts = std::mem::take(&mut self.particles);
        let res = self.step_particles(&mut parts, h);
        self.particles = parts;
        res?;
        self.n = h;
        Ok(self.records.last().unwrap())
    }

    fn step_particles(&mut self, parts: &mut [Particle<'a>], h: usize) -> Result<()> {
        let wraps = self.amb.wraps();
        let p = self.geom.p;
        let radii = self.geom.radii();
        let active = h > self.cfg.r0;
        let elements_before = self.elements.len();
        let w = self.cell;
        let mut rec = StepRecord { n: h, ..Default::default() };
        let mut aeps_count = 0usize;

        for part in parts.iter_mut() {
            if part.status != Status::Alive && part.status != Status::Lost {
                continue;
            }
            let t_prev = part.t;
            if part.status == Status::Lost {
                part.t = t_prev.saturating_sub(1);
                if t_prev == 0 {
                    aeps_count += 1;
                }
                continue;
            }
            let step = match part.orbit.advance() {
                Ok(s) => s,
                Err(_) => {
                    part.status = Status::Lost;
                    part.t = t_prev.saturating_sub(1);
                    continue;
                }
            };
            let sym = step.branch.unwrap_or(0);
            let hyp = part.tracker.push(step.log_expansion, step.singular_distance);
            part.sym.push(sym as u32);
            part.hash = extend_hash(part.hash, sym);
            let y = match part.orbit.point() {
                Point::Line(v) => v,
                Point::Plane(_) => unreachable!("one-dimensional orbit"),
            };
            if wraps {
                part.pos.push(y);
            }
            if t_prev == 0 && hyp {
                rec.leb_a_prev_hyp += w;
            }
            if !active {
                aeps_count += 1;
                rec.count_a += 1;
                continue;
            }
            let syms: Vec<usize> = part.sym.iter().map(|&s| s as usize).collect();
            let pos = std::mem::take(&mut part.pos);

            // Membership of the previous state in A^eps.
            part.aeps = if t_prev == 0 || self.cfg.epsilon_mode == EpsilonMode::Zero {
                t_prev == 0
            } else {
                let (lo, hi) = self.clip(y - self.eps, y + self.eps);
                let anchors = self.anchors_for(&pos, h).to_vec();
                let paint = self.paint(&anchors, &syms, None, h, lo, hi)?;
                let a = paint.dead.union(&paint.b1)?.complement();
                a.measure() > 1e-3 * self.eps
            };
            if part.aeps {
                aeps_count += 1;
            }

            let d = self.amb.dist(y, p);
            let mut accepted = false;
            if d <= radii[3] {
                let anchors = self.anchors_for(&pos, h).to_vec();
                let hint = if wraps { None } else { Some(part.hash) };
                accepted = self.component(&anchors, &syms, h, hint)?.is_some();
            }
            part.pos = pos;
            if accepted && d <= radii[0] {
                part.status = Status::Captured(h);
                part.pos = Vec::new();
                part.sym = Vec::new();
                self.captured_total += 1;
                rec.leb_r_eq_n += w;
                if t_prev == 0 {
                    rec.flow_a_to_r += w;
                } else {
                    rec.flow_b_to_r += w;
                }
                continue;
            }
            part.t = if accepted && d <= radii[1] {
                if t_prev > 1 {
                    rec.particle_collar_violations += 1;
                }
                self.rings.ring_index(d)?
            } else {
                t_prev.saturating_sub(1)
            };
            if part.t == 0 {
                rec.count_a += 1;
                if t_prev > 0 {
                    rec.flow_b_to_a += w;
                }
            } else {
                rec.count_b += 1;
                if t_prev == 0 {
                    rec.flow_a_to_b += w;
                }
            }
        }
        for part in parts.iter() {
            if part.status == Status::Lost {
                if part.t == 0 {
                    rec.count_a += 1;
                } else {
                    rec.count_b += 1;
                }
            }
        }
        if let Some(prev) = self.records.last_mut() {
            prev.leb_aeps = if active { aeps_count as f64 * w } else { prev.leb_delta };
        }
        rec.leb_a = rec.count_a as f64 * w;
        rec.leb_b = rec.count_b as f64 * w;
        rec.leb_delta = (rec.count_a + rec.count_b) as f64 * w;
        rec.leb_aeps = rec.leb_a;
        rec.new_elements = self.elements.len() - elements_before;
        rec.elements_total = self.elements.len();
        rec.collar_failures = self.elements[elements_before..].iter().filter(|e| !e.collar_ok).map(|e| e.id).collect();

        // Bookkeeping and disjointness of the new elements from Delta_n.
        let alive = rec.count_a + rec.count_b;
        if alive + self.captured_total != self.cfg.particles {
            return Err(Error::InconsistentState { step: h, detail: "particle count is not conserved".into() });
        }
        let captured_mass: f64 = self.records.iter().map(|r| r.leb_r_eq_n).sum::<f64>() + rec.leb_r_eq_n;
        if (self.leb_delta0 - rec.leb_delta - captured_mass).abs() > 1e-12 {
            return Err(Error::InconsistentState {
                step: h,
                detail: format!("measure not conserved: {} != {} + {}", self.leb_delta0, rec.leb_delta, captured_mass),
            });
        }
        for el in &self.elements[elements_before..] {
            if !el.resolvable() {
                continue;
            }
            let (lo, hi) = el.u[0];
            let margin = 1e-3 * (hi - lo);
            let inside = |x: f64| {
                let x = if wraps { lift_near(x, 0.5 * (lo + hi)) } else { x };
                x > lo + margin && x < hi - margin
            };
            if let Some(bad) = parts.iter().find(|q| matches!(q.status, Status::Alive) && inside(q.x0)) {
                return Err(Error::InconsistentState {
                    step: h,
                    detail: format!("unpartitioned point {} lies in U0 of element {}", bad.x0, el.id),
                });
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Collar check for step `n` (vacuous for `n <= R_0`).
    pub fn collar_check(&self, n: usize) -> CollarReport {
        let failures = self.records.get(n).map(|r| r.collar_failures.clone()).unwrap_or_default();
        CollarReport { n, passed: failures.is_empty(), failures }
    }

    /// Set-level snapshot built from the particle cells.
    pub fn state(&self) -> TowerState {
        let half = 0.5 * self.cell;
        let mut delta = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut aeps = Vec::new();
        let mut levels: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
        for q in &self.particles {
            if matches!(q.status, Status::Captured(_)) {
                continue;
            }
            let c = (q.x0 - half, q.x0 + half);
            delta.push(c);
            if q.t == 0 {
                a.push(c);
            } else {
                b.push(c);
                levels.entry(q.t).or_default().push(c);
            }
            if q.t == 0 || q.aeps {
                aeps.push(c);
            }
        }
        let amb = self.amb;
        TowerState {
            n: self.n,
            delta: IntervalSet::from_pairs(amb, delta),
            a: IntervalSet::from_pairs(amb, a),
            b: IntervalSet::from_pairs(amb, b),
            aeps: IntervalSet::from_pairs(amb, aeps),
            t_levels: levels.into_iter().map(|(k, v)| (k, IntervalSet::from_pairs(amb, v))).collect(),
            elements: self.elements.len(),
        }
    }

    /// Return time of the particle cell containing `x`, if captured.
    pub fn particle_return_times(&self) -> Vec<(f64, Option<usize>)> {
        self.particles
            .iter()
            .map(|q| (q.x0, if let Status::Captured(r) = q.status { Some(r) } else { None }))
            .collect()
    }

    pub fn summary(&self) -> TowerSummary {
        let last = self.records.last().unwrap();
        TowerSummary {
            steps: self.n,
            elements: self.elements.len(),
            leb_delta0: self.leb_delta0,
            unpartitioned: last.leb_delta,
            unpartitioned_fraction: last.leb_delta / self.leb_delta0,
            collar_failures: self.records.iter().map(|r| r.collar_failures.len()).sum(),
            particle_collar_violations: self.records.iter().map(|r| r.particle_collar_violations).sum(),
            lost_particles: self.particles.iter().filter(|q| q.status == Status::Lost).count(),
            evaluations: self.evaluations,
            epsilon: self.eps,
            epsilon_bound: self.eps_bound,
            k_ring: self.rings.k_ring,
            warnings: self.geom.warnings.clone(),
        }
    }

    pub fn manifest(&self) -> TowerManifest {
        TowerManifest {
            model: self.model.clone(),
            config: self.cfg.clone(),
            expansion: self.exp.clone(),
            geometry: self.geom.clone(),
            summary: self.summary(),
            steps: self.records.clone(),
            elements: self.elements.iter().map(ElementRow::from_element).collect(),
            master_seed: 0,
        }
    }

    /// Runs to `n_max`.
    pub fn run(&mut self) -> Result<()> {
        while self.n < self.cfg.n_max {
            self.step()?;
        }
        Ok(())
    }
}

/// Summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerSummary {
    pub steps: usize,
    pub elements: usize,
    pub leb_delta0: f64,
    pub unpartitioned: f64,
    pub unpartitioned_fraction: f64,
    pub collar_failures: usize,
    pub particle_collar_violations: usize,
    pub lost_particles: usize,
    pub evaluations: usize,
    pub epsilon: f64,
    pub epsilon_bound: f64,
    pub k_ring: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementRow {
    pub id: usize,
    pub lo: f64,
    pub hi: f64,
    pub r: usize,
    pub n_hyp: usize,
    pub m: usize,
    pub log_measure: f64,
    pub collar_ok: bool,
    pub center: f64,
    pub u: [(f64, f64); 4],
    pub offsets: ScaledOffsets,
    /// Run-length encoded `(symbol, count)` pairs.
    pub itinerary: Vec<(u32, u32)>,
}

impl ElementRow {
    pub fn from_element(e: &PartitionElement) -> ElementRow {
        ElementRow {
            id: e.id,
            lo: e.u[0].0,
            hi: e.u[0].1,
            r: e.r,
            n_hyp: e.n_hyp,
            m: e.m,
            log_measure: e.log_measure,
            collar_ok: e.collar_ok,
            center: e.center,
            u: e.u,
            offsets: e.offsets.clone(),
            itinerary: rle(&e.itinerary),
        }
    }

    pub fn element(&self) -> PartitionElement {
        let itinerary = self.itinerary.iter().flat_map(|&(s, c)| std::iter::repeat_n(s, c as usize)).collect();
        PartitionElement {
            id: self.id,
            u: self.u,
            r: self.r,
            n_hyp: self.n_hyp,
            m: self.m,
            center: self.center,
            log_measure: self.log_measure,
            offsets: self.offsets.clone(),
            itinerary,
            collar_ok: self.collar_ok,
        }
    }
}

/// Structured record of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TowerManifest {
    pub model: MapModel,
    pub config: TowerConfig,
    pub expansion: ExpansionConfig,
    pub geometry: BaseGeometry,
    pub summary: TowerSummary,
    pub steps: Vec<StepRecord>,
    pub elements: Vec<ElementRow>,
    #[serde(default)]
    pub master_seed: u64,
}

impl TowerManifest {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TowerManifest> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: TowerManifest =
            serde_json::from_reader(f).map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
        for (i, e) in m.elements.iter().enumerate() {
            let len: usize = e.itinerary.iter().map(|&(_, c)| c as usize).sum();
            if e.id != i || len != e.r || e.offsets.m.len() != 8 {
                return Err(Error::Parse(format!("manifest {}: element {i} is malformed", path.display())));
            }
        }
        Ok(m)
    }

    /// The induced map on the recorded elements.
    pub fn induced(&self) -> Result<crate::induced::InducedMap> {
        crate::induced::InducedMap::new(&self.model, &self.geometry, self.elements.iter().map(ElementRow::element).collect())
    }

    /// Per-step CSV with a seed comment line.
    pub fn write_csv(&self, path: &Path, seed: u64) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# master_seed={seed}")?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["n", "leb_delta_n", "leb_R_eq_n", "elements_cumulative"]).map_err(csv_err)?;
        for r in &self.steps {
            w.write_record([r.n.to_string(), r.leb_delta.to_string(), r.leb_r_eq_n.to_string(), r.elements_total.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Finished run.
pub struct TowerRun {
    pub state: TowerState,
    pub summary: TowerSummary,
    pub manifest: TowerManifest,
    pub elements: Vec<PartitionElement>,
    pub records: Vec<StepRecord>,
    pub particle_return_times: Vec<(f64, Option<usize>)>,
}

impl TowerRun {
    /// The induced map on the finished elements.
    pub fn induced(&self, model: &MapModel) -> Result<crate::induced::InducedMap> {
        crate::induced::InducedMap::new(model, &self.manifest.geometry, self.elements.clone())
    }
}

/// Builds the tower to `cfg.n_max` on a thread with a large stack, since
/// component evaluation recurses through earlier return times.
pub fn run_tower(m: &MapModel, exp: &ExpansionConfig, cfg: &TowerConfig) -> Result<TowerRun> {
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(1 << 30)
            .spawn_scoped(s, || {
                let mut t = Tower::new(m, exp, cfg)?;
                t.run()?;
                Ok(TowerRun {
                    state: t.state(),
                    summary: t.summary(),
                    manifest: t.manifest(),
                    elements: t.elements.clone(),
                    records: t.records.clone(),
                    particle_return_times: t.particle_return_times(),
                })
            })
            .map_err(Error::Io)?
            .join()
            .map_err(|_| Error::Numerical("tower thread panicked".into()))?
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma() -> f64 {
        2f64.powf(-0.25)
    }

    #[test]
    fn ring_examples() {
        let rs = RingSystem::new(0.01, sigma());
        assert_eq!(rs.ring_index(0.016).unwrap(), 6);
        let b = 0.01 * (1.0 + sigma().sqrt());
        assert_eq!(rs.ring_index(b * (1.0 + 1e-15)).unwrap(), 1);
        assert_eq!(rs.ring_index(b * (1.0 - 1e-15)).unwrap(), 2);
        assert!(matches!(rs.ring_index(0.005), Err(Error::Domain(_))));
        assert!(rs.ring_index(0.01 * (1.0 + 1e-13)).unwrap() == rs.k_ring);
    }

    #[test]
    fn rings_tile_the_collar() {
        let rs = RingSystem::new(0.01, sigma());
        assert_eq!(rs.outer(1), 0.02);
        for k in 1..rs.k_ring {
            assert!((rs.inner(k) - rs.outer(k + 1)).abs() < 1e-18);
        }
        assert_eq!(rs.inner(rs.k_ring), 0.01);
    }

    #[test]
    fn collar_bound_examples() {
        let exp = ExpansionConfig::for_model(&MapModel::doubling(), 1.0);
        let mut g = BaseGeometry {
            p: 0.0,
            n0: 5,
            delta0: 0.01,
            delta1: 0.05,
            c0: 32.0,
            d0: 1.0,
            ambient: Ambient::Circle,
            warnings: vec![],
        };
        let b = collar_epsilon_bound(&g, &exp);
        let expect = 2f64.powf(-5.0 / 8.0) * 0.01 * (2f64.powf(0.125) - 1.0) / 32.0;
        assert!((b - expect).abs() < 1e-18);
        assert!((b - 1.8e-5).abs() < 1e-6);
        g.n0 = 0;
        let b0 = collar_epsilon_bound(&g, &exp);
        assert!((b0 - 0.01 * (2f64.powf(0.125) - 1.0) / 32.0).abs() < 1e-18);
    }

    fn small_cfg(n_max: usize) -> TowerConfig {
        TowerConfig { p: Some(0.0), n_max, particles: 4000, ..Default::default() }
    }

    #[test]
    fn no_elements_before_r0() {
        let m = MapModel::doubling();
        let exp = ExpansionConfig::for_model(&m, 1.0);
        let run = run_tower(&m, &exp, &small_cfg(12)).unwrap();
        assert_eq!(run.summary.elements, 0);
        assert!((run.summary.unpartitioned - 0.02).abs() < 1e-15);
        assert!(run.records.iter().all(|r| r.leb_b == 0.0 && (r.leb_aeps - r.leb_delta).abs() < 1e-15));
    }

    #[test]
    fn doubling_elements_return_onto_base() {
        let m = MapModel::doubling();
        let exp = ExpansionConfig::for_model(&m, 1.0);
        let run = run_tower(&m, &exp, &small_cfg(30)).unwrap();
        assert!(run.summary.elements >= 1);
        let bm = m.require_branches().unwrap();
        for e in run.elements.iter().filter(|e| e.resolvable()) {
            let mut a = e.u[0].0;
            let mut b = e.u[0].1;
            for &s in &e.itinerary {
                a = bm.forward(s as usize, a);
                b = bm.forward(s as usize, b);
            }
            assert!((b - a - 0.02).abs() < 1e-9, "image length {}", b - a);
            assert!(crate::geometry::circle_dist(0.5 * (a + b), 0.0) < 1e-9);
        }
        for w in run.records.windows(2) {
            assert!(w[1].leb_delta <= w[0].leb_delta);
            assert!((w[0].leb_delta - w[1].leb_delta - w[1].leb_r_eq_n).abs() < 1e-15);
        }
    }

    #[test]
    fn epsilon_above_bound_is_rejected() {
        let m = MapModel::doubling();
        let exp = ExpansionConfig::for_model(&m, 1.0);
        let cfg = TowerConfig { epsilon: Some(1.0), ..small_cfg(20) };
        match Tower::new(&m, &exp, &cfg) {
            Err(Error::Config { constraint, .. }) => assert_eq!(constraint, "collar_epsilon_bound"),
            _ => panic!("expected a config error"),
        }
    }
}
