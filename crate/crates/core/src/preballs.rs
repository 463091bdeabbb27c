//! Hyperbolic pre-balls, the dense pre-image base point and the return to
//! the base neighbourhood.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{detect_hyperbolic, sample_point, ExpansionConfig, OrbitRecord};
use crate::geometry::{lift_near, Ambient, Arc};
use crate::maps::{periodic_point, BranchMap, MapModel, Point};

/// A branch sequence realised by an orbit segment: `anchors[j]` lies in
/// branch `symbols[j]` and `anchors[j + 1]` is its image.
#[derive(Clone, Copy)]
pub struct Chain<'a> {
    pub map: &'a dyn BranchMap,
    pub anchors: &'a [f64],
    pub symbols: &'a [usize],
}

impl<'a> Chain<'a> {
    pub fn new(map: &'a dyn BranchMap, anchors: &'a [f64], symbols: &'a [usize]) -> Chain<'a> {
        Chain { map, anchors, symbols }
    }

    /// Pulls `y`, given near `anchors[h]`, back to times `0..=h`.
    pub fn pull_back_into(&self, y: f64, h: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(h + 1, 0.0);
        out[h] = y;
        for j in (0..h).rev() {
            out[j] = self.map.local_inverse(self.symbols[j], out[j + 1], self.anchors[j + 1]);
        }
    }

    pub fn pull_back(&self, y: f64, h: usize) -> Vec<f64> {
        let mut v = Vec::new();
        self.pull_back_into(y, h, &mut v);
        v
    }

    /// Pulls `y` from time `h` down to time `to`.
    pub fn pull_back_to(&self, y: f64, h: usize, to: usize) -> f64 {
        let mut v = y;
        for j in (to..h).rev() {
            v = self.map.local_inverse(self.symbols[j], v, self.anchors[j + 1]);
        }
        v
    }

    /// Pushes `x`, given near `anchors[from]`, forward to time `to`.
    pub fn push_forward(&self, x: f64, from: usize, to: usize) -> f64 {
        let amb = self.map.ambient();
        let mut v = x;
        for j in from..to {
            let lifted = if amb.wraps() { lift_near(v, self.anchors[j]) } else { v };
            let shift = if amb.wraps() { lifted - lift_near(lifted, 0.5) } else { 0.0 };
            v = self.map.forward(self.symbols[j], lifted - shift);
        }
        if amb.wraps() && to > from {
            lift_near(v, self.anchors[to])
        } else {
            v
        }
    }
}

/// Offsets below this fraction of the orbit scale are propagated linearly.
pub const LINEAR_OFFSET: f64 = 1e-14;

/// Offsets from an orbit point, stored as `m[i] * exp(log_scale)` so that
/// preimages far below floating resolution keep their relative geometry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaledOffsets {
    pub m: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledOffsets {
    pub fn plain(e: &[f64]) -> ScaledOffsets {
        ScaledOffsets { m: e.to_vec(), log_scale: 0.0 }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.m[i] * self.log_scale.exp()
    }

    /// Rescales so that the largest entry has modulus one.
    pub fn normalize(&mut self) {
        let s = self.m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if s > 0.0 && s.is_finite() {
            self.m.iter_mut().for_each(|v| *v /= s);
            self.log_scale += s.ln();
        }
    }

    fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0f64, |a, v| a.max(v.abs())) * self.log_scale.exp()
    }

    fn to_plain(&mut self) {
        let f = self.log_scale.exp();
        self.m.iter_mut().for_each(|v| *v *= f);
        self.log_scale = 0.0;
    }
}

fn offset_scale(bm: &dyn BranchMap, z: f64) -> f64 {
    if bm.ambient().wraps() {
        1.0
    } else {
        z.abs()
    }
}

/// Pulls offsets `e` from `zs[h]` back along the orbit `zs` with branches
/// `cs` (`zs.len() == cs.len() + 1`) to offsets from `zs[0]`.
pub fn pull_back_offsets(bm: &dyn BranchMap, zs: &[f64], cs: &[usize], e: &[f64]) -> ScaledOffsets {
    let mut o = ScaledOffsets::plain(e);
    let mut linear = false;
    for j in (0..cs.len()).rev() {
        if !linear && o.max_abs() <= LINEAR_OFFSET * offset_scale(bm, zs[j + 1]) {
            linear = true;
            o.normalize();
        }
        if linear {
            let d = bm.derivative(cs[j], zs[j]);
            o.m.iter_mut().for_each(|v| *v /= d);
            if o.m.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-100 {
                o.normalize();
            }
        } else {
            for v in o.m.iter_mut() {
                *v = bm.inverse_offset(cs[j], zs[j], *v);
            }
        }
    }
    o.normalize();
    o
}

/// Inverse of [`pull_back_offsets`]: pushes offsets from `zs[0]` forward to
/// plain offsets from `zs[h]`.
pub fn push_forward_offsets(bm: &dyn BranchMap, zs: &[f64], cs: &[usize], o: &ScaledOffsets) -> Vec<f64> {
    let mut o = o.clone();
    let mut linear = true;
    for j in 0..cs.len() {
        if linear && o.max_abs() > LINEAR_OFFSET * offset_scale(bm, zs[j]) {
            linear = false;
            o.to_plain();
        }
        if linear {
            let d = bm.derivative(cs[j], zs[j]);
            o.m.iter_mut().for_each(|v| *v *= d);
            if o.m.iter().fold(0.0f64, |a, v| a.max(v.abs())) > 1e100 {
                o.normalize();
            }
        } else {
            for v in o.m.iter_mut() {
                *v = bm.forward_offset(cs[j], zs[j], *v);
            }
        }
    }
    o.to_plain();
    o.m
}

/// Orbit positions (normalized) and branch symbols of `x` for `n` steps.
pub fn orbit_chain(m: &MapModel, x: f64, n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut o = m.orbit(Point::Line(x));
    let mut pos = Vec::with_capacity(n + 1);
    let mut sym = Vec::with_capacity(n);
    for j in 0..n {
        let s = o.advance()?;
        pos.push(s.point.as_line().unwrap());
        sym.push(s.branch.ok_or(Error::SingularOrbit { step: j })?);
    }
    pos.push(o.point().as_line().unwrap());
    Ok((pos, sym))
}

/// Lemma checks for one hyperbolic pre-ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreballReport {
    pub center: f64,
    pub n: usize,
    pub preball: Arc,
    pub delta1: f64,
    /// Largest sampled backward contraction for `k = 1..n-1` (index `k-1`).
    pub contraction: Vec<f64>,
    pub contraction_violations: usize,
    /// Volume distortion over the sample.
    pub d1_hat: f64,
    /// `sigma^{-1/2}`.
    pub kappa_hat: f64,
    /// `kappa_hat^{-n}`.
    pub containment_radius: f64,
    /// Largest distance from the center to the pre-ball.
    pub radius: f64,
    pub contained: bool,
    /// Largest one-step residual of the endpoint chains.
    pub bijection_residual: f64,
    pub monotone: bool,
}

impl PreballReport {
    pub fn passes(&self) -> bool {
        self.contraction_violations == 0 && self.contained && self.monotone && self.bijection_residual <= 1e-9
    }
}

/// Pulls `B(f^n x, delta1)` back along the orbit of `x` and checks the
/// pre-ball properties on 100 sampled points.
pub fn preball(m: &MapModel, c: &ExpansionConfig, x: f64, n: usize, delta1: f64) -> Result<PreballReport> {
    let bm = m.require_branches()?;
    let amb = bm.ambient();
    if amb.wraps() && 2.0 * delta1 >= 1.0 {
        return Err(Error::ShrinkRadius { max_radius: 0.5 * (1.0 - 1e-9) });
    }
    if n == 0 {
        return Err(Error::Domain("hyperbolic time must be positive".into()));
    }
    let (pos, sym) = orbit_chain(m, x, n)?;
    let rec = OrbitRecord::compute(m, c, Point::Line(x), n)?;
    let hyp = detect_hyperbolic(&rec.log_expansion_terms, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
    if hyp.last() != Some(&n) {
        return Err(Error::Domain(format!("{n} is not a hyperbolic time of {x}")));
    }
    let chain = Chain::new(bm, &pos, &sym);
    let y = pos[n];
    let (mut lo, mut hi) = (y - delta1, y + delta1);
    if !amb.wraps() {
        lo = lo.max(0.0);
        hi = hi.min(1.0);
    }
    let elo = chain.pull_back(lo, n);
    let ehi = chain.pull_back(hi, n);
    let (mut residual, mut monotone) = (0.0f64, true);
    for e in [&elo, &ehi] {
        for j in 0..n {
            let (a, b) = bm.branch_domain(sym[j]);
            let v = if amb.wraps() { lift_near(e[j], pos[j]) } else { e[j] };
            let inside = if amb.wraps() {
                (lift_near(elo[j], pos[j]) - lift_near(ehi[j], pos[j])).abs() < b - a
            } else {
                v >= a - 1e-9 && v <= b + 1e-9
            };
            monotone &= inside;
            let fwd = bm.forward(sym[j], v);
            let r = if amb.wraps() { (fwd - lift_near(e[j + 1], fwd)).abs() } else { (fwd - e[j + 1]).abs() };
            residual = residual.max(r);
        }
    }
    let (v0, v1) = if elo[0] <= ehi[0] { (elo[0], ehi[0]) } else { (ehi[0], elo[0]) };
    let arc = Arc::new(v0, v1.max(v0 + f64::MIN_POSITIVE), amb)?;
    let samples = 100;
    let mut logs = vec![vec![0.0; n]; samples];
    let mut buf = Vec::new();
    for (i, l) in logs.iter_mut().enumerate() {
        let t = lo + (hi - lo) * (i as f64 + 0.5) / samples as f64;
        chain.pull_back_into(t, n, &mut buf);
        for j in 0..n {
            l[j] = bm.derivative(sym[j], buf[j]).abs().ln();
        }
    }
    let half = c.sigma.sqrt();
    let mut contraction = Vec::with_capacity(n.saturating_sub(1));
    let mut violations = 0;
    for k in 1..n {
        let worst = logs.iter().map(|l| -l[n - k..].iter().sum::<f64>()).fold(f64::NEG_INFINITY, f64::max).exp();
        if worst > half.powi(k as i32) * (1.0 + 1e-9) {
            violations += 1;
        }
        contraction.push(worst);
    }
    let totals: Vec<f64> = logs.iter().map(|l| l.iter().sum()).collect();
    let d1_hat = (totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - totals.iter().cloned().fold(f64::INFINITY, f64::min))
    .exp();
    let kappa_hat = 1.0 / half;
    let containment_radius = half.powi(n as i32);
    let radius = amb.dist(x, v0).max(amb.dist(x, v1));
    Ok(PreballReport {
        center: x,
        n,
        preball: arc,
        delta1,
        contraction,
        contraction_violations: violations,
        d1_hat,
        kappa_hat,
        containment_radius,
        radius,
        contained: radius <= containment_radius,
        bijection_residual: residual,
        monotone,
    })
}

/// The uniform time `N_eps` with the two constants it is built from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverTime {
    pub n_eps: usize,
    pub n_prime: usize,
    /// Containment rate used for `n_prime`: the smallest sampled
    /// `|(f^n)'(x)|^{1/n}` over hyperbolic times.
    pub kappa_cover: f64,
    /// `sigma^{-1/2}`, the rate implied by backward contraction.
    pub kappa_sigma: f64,
    /// Sampled measure of points with no hyperbolic time in `[n_prime, n_eps]`.
    pub uncovered: f64,
}

/// Empirical `N_eps` for a one-dimensional model.
pub fn uniform_cover_time(m: &MapModel, c: &ExpansionConfig, eps: f64, sample: usize, seed: u64) -> Result<CoverTime> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::Domain(format!("eps must lie in (0, 0.1), got {eps}")));
    }
    m.require_branches()?;
    let per_point: Vec<(f64, Vec<usize>)> = (0..sample as u64)
        .into_par_iter()
        .map(|i| {
            let p = sample_point(m, seed, i);
            let rec = OrbitRecord::compute(m, c, p, c.horizon).ok()?;
            let h = detect_hyperbolic(&rec.log_expansion_terms, &rec.singular_distance, c.sigma, c.b, c.delta_hyp);
            let rate = h
                .iter()
                .map(|&n| (rec.log_expansion_sums[n] / n as f64).exp())
                .fold(f64::INFINITY, f64::min);
            Some((rate, h))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|o| o.unwrap_or((f64::INFINITY, Vec::new())))
        .collect();
    let kappa_cover = per_point.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if !(kappa_cover.is_finite() && kappa_cover > 1.0) {
        return Err(Error::NotFound("no sampled hyperbolic times".into()));
    }
    let n_prime = ((10.0 / eps).ln() / kappa_cover.ln() - 1e-9).ceil().max(1.0) as usize;
    let firsts: Vec<usize> = per_point
        .iter()
        .map(|(_, h)| h.iter().copied().find(|&n| n >= n_prime).unwrap_or(usize::MAX))
        .collect();
    let target = eps / 10.0;
    for n in n_prime..=c.horizon {
        let unc = firsts.iter().filter(|&&f| f > n).count() as f64 / sample as f64;
        if unc <= target {
            return Ok(CoverTime { n_eps: n, n_prime, kappa_cover, kappa_sigma: c.sigma.powf(-0.5), uncovered: unc });
        }
    }
    Err(Error::NotFound(format!("horizon {} exhausted before covering", c.horizon)))
}

/// Base point with a dense pre-image tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseBase {
    pub p: f64,
    pub n0: usize,
    /// Largest `max(|(f^m)'|, |(f^m)'|^{-1})` over admissible tree points.
    pub c0: f64,
    /// Largest distance from a point of the ambient space to the tree.
    pub density: f64,
    pub tree_points: usize,
}

/// Candidate base points: periodic points of period one and two, scored by
/// their distance to the singular set and (on the interval) to branch and
/// ambient boundaries.
pub fn base_candidates(bm: &dyn BranchMap, min_singular_distance: f64) -> Vec<f64> {
    let amb = bm.ambient();
    let nb = bm.branch_count().min(4);
    let mut words: Vec<Vec<usize>> = (0..nb).map(|b| vec![b]).collect();
    for a in 0..nb {
        for b in 0..nb {
            if a != b {
                words.push(vec![a, b]);
            }
        }
    }
    let mut cands: Vec<(f64, usize, f64)> = Vec::new();
    for w in &words {
        let x = amb.normalize(periodic_point(bm, w));
        let Some(b0) = bm.branch_at(x) else { continue };
        if b0 != w[0] && !amb.wraps() {
            continue;
        }
        let mut y = x;
        let mut logd = 0.0;
        let mut ok = true;
        for _ in 0..w.len() {
            match bm.branch_at(y) {
                Some(b) => {
                    logd += bm.derivative(b, y).abs().ln();
                    y = amb.normalize(bm.forward(b, y));
                }
                None => ok = false,
            }
        }
        if !ok || logd <= 1e-9 || amb.dist(y, x) > 1e-9 {
            continue;
        }
        let ds = bm.singular_distance(x);
        if ds < min_singular_distance {
            continue;
        }
        let mut score = ds;
        if !amb.wraps() {
            let (a, b) = bm.branch_domain(b0);
            score = score.min(x - a).min(b - x).min(x).min(1.0 - x);
        }
        if cands.iter().any(|c| amb.dist(c.0, x) < 1e-9) {
            continue;
        }
        cands.push((x, w.len(), score));
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.total_cmp(&b.0)));
    cands.into_iter().map(|c| c.0).collect()
}

/// Chooses `p` and the smallest `N0 <= 60` making the pre-image tree
/// `delta_target`-dense. Tree points closer than `delta_target / 5` to the
/// singular set are not admissible.
pub fn dense_preimage_base(m: &MapModel, delta_target: f64, min_singular_distance: f64) -> Result<DenseBase> {
    let bm = m.require_branches()?;
    for p in base_candidates(bm, min_singular_distance) {
        if let Some(d) = tree_density(bm, p, delta_target, 60) {
            return Ok(d);
        }
    }
    Err(Error::NotFound(format!("no base candidate is {delta_target}-dense within 60 levels")))
}

/// Grows the pre-image tree of `p` level by level until it is
/// `delta`-dense.
pub fn tree_density(bm: &dyn BranchMap, p: f64, delta: f64, max_level: usize) -> Option<DenseBase> {
    let amb = bm.ambient();
    let min_sep = delta / 5.0;
    let eta = delta * 1e-3;
    let admissible = |x: f64| bm.singular_distance(x) >= min_sep;
    let branch_limit = if bm.singular_points().is_empty() {
        bm.branch_count()
    } else {
        bm.branch_count().min((1.0 / min_sep).ceil() as usize + 2)
    };
    // cell -> (point, largest |log (f^m)'| among merged points)
    let mut frontier: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    frontier.insert((p / eta).floor() as i64, (p, 0.0));
    let mut all: BTreeMap<i64, (f64, f64)> = frontier.clone();
    let mut c0_log = 0.0f64;
    for level in 0..=max_level {
        let pts: Vec<f64> = all.values().map(|v| v.0).filter(|&x| admissible(x)).collect();
        let dens = density_of(amb, &pts);
        if dens < delta {
            return Some(DenseBase { p, n0: level, c0: c0_log.exp(), density: dens, tree_points: pts.len() });
        }
        let mut next: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
        for &(y, ld) in frontier.values() {
            for b in 0..branch_limit {
                let x = amb.normalize(bm.inverse(b, y));
                if !admissible(x) {
                    continue;
                }
                let Some(bx) = bm.branch_at(x) else { continue };
                let l = ld + bm.derivative(bx, x).abs().ln();
                c0_log = c0_log.max(l.abs());
                let key = (x / eta).floor() as i64;
                let e = next.entry(key).or_insert((x, l));
                if l.abs() > e.1.abs() {
                    e.1 = l;
                }
            }
        }
        for (k, v) in &next {
            all.entry(*k).or_insert(*v);
        }
        frontier = next;
        if frontier.len() > 2_000_000 {
            return None;
        }
    }
    None
}

/// Largest distance from a point of the ambient space to `pts`.
fn density_of(amb: Ambient, pts: &[f64]) -> f64 {
    if pts.is_empty() {
        return f64::INFINITY;
    }
    let mut v = pts.to_vec();
    v.sort_by(f64::total_cmp);
    let mut worst = 0.0f64;
    for w in v.windows(2) {
        worst = worst.max(0.5 * (w[1] - w[0]));
    }
    if amb.wraps() {
        worst.max(0.5 * (v[0] + 1.0 - v[v.len() - 1]))
    } else {
        worst.max(v[0]).max(1.0 - v[v.len() - 1])
    }
}

/// Base point, scales and derived constants of a tower.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseGeometry {
    pub p: f64,
    pub n0: usize,
    pub delta0: f64,
    pub delta1: f64,
    pub c0: f64,
    /// Largest measured return-to-base distortion over a grid of balls.
    pub d0: f64,
    pub ambient: Ambient,
    /// Constraint warnings recorded at construction.
    pub warnings: Vec<String>,
}

impl BaseGeometry {
    /// Radii of `Delta_0^i` for `i = 0..=3`.
    pub fn radii(&self) -> [f64; 4] {
        let s = self.delta0.sqrt();
        [self.delta0, 2.0 * self.delta0, s, 2.0 * s]
    }

    /// `Delta_0^i` as an arc.
    pub fn ball(&self, i: usize) -> Arc {
        Arc::ball(self.p, self.radii()[i], self.ambient).expect("positive radius")
    }

    /// Builds the geometry; `p` is chosen automatically when absent.
    pub fn build(m: &MapModel, delta0: f64, delta1: f64, p: Option<f64>) -> Result<BaseGeometry> {
        let bm = m.require_branches()?;
        if !(delta0 > 0.0 && delta0 < 0.0625) {
            return Err(Error::config("base.delta0", "delta0 must lie in (0, 1/16)"));
        }
        if !(delta1 > 0.0 && delta1 < 0.5) {
            return Err(Error::config("base.delta1", "delta1 must lie in (0, 1/2)"));
        }
        let mut warnings = Vec::new();
        if delta0.sqrt() > delta1 / 4.0 {
            warnings.push(format!(
                "sqrt(delta0) = {} exceeds delta1/4 = {}; the return-to-base geometry is not guaranteed",
                delta0.sqrt(),
                delta1 / 4.0
            ));
        }
        let dense = match p {
            Some(p) => tree_density(bm, p, delta1 / 3.0, 60)
                .ok_or_else(|| Error::NotFound(format!("pre-images of {p} are not dense within 60 levels")))?,
            None => dense_preimage_base(m, delta1 / 3.0, 10.0 * delta0)?,
        };
        let mut g = BaseGeometry {
            p: dense.p,
            n0: dense.n0,
            delta0,
            delta1,
            c0: dense.c0,
            d0: f64::NAN,
            ambient: bm.ambient(),
            warnings,
        };
        let mut d0 = 1.0f64;
        let mut misses = 0;
        for i in 0..20 {
            let c = (i as f64 + 0.5) / 20.0;
            let Ok(ball) = Arc::ball(c, delta1, g.ambient) else { continue };
            match return_to_base(m, &g, &ball) {
                Ok(r) => d0 = d0.max(r.distortion),
                Err(_) => misses += 1,
            }
        }
        if misses > 0 {
            g.warnings.push(format!("return to base failed for {misses} of 20 test balls within N0 steps"));
        }
        g.d0 = d0;
        Ok(g)
    }
}

/// A return of a ball onto `Delta_0^3`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseReturn {
    pub v: Arc,
    pub m_steps: usize,
    pub symbols: Vec<usize>,
    pub distortion: f64,
}

/// Finds `V` inside `ball` and `m <= N0` with `f^m(V) = Delta_0^3`, by
/// pushing `ball` forward branch by branch.
pub fn return_to_base(m: &MapModel, g: &BaseGeometry, ball: &Arc) -> Result<BaseReturn> {
    let bm = m.require_branches()?;
    let amb = bm.ambient();
    let r3 = g.radii()[3];
    // Each piece keeps its arcs at every level.
    let mut pieces: Vec<Vec<(f64, f64, usize)>> = vec![vec![(ball.lo, ball.hi, usize::MAX)]];
    for level in 0..=g.n0 {
        for piece in &pieces {
            let (lo, hi, _) = *piece.last().unwrap();
            let centers = if amb.wraps() {
                vec![lift_near(g.p, lo), lift_near(g.p, 0.5 * (lo + hi)), lift_near(g.p, hi)]
            } else {
                vec![g.p]
            };
            for pc in centers {
                let (tlo, thi) = if amb.wraps() { (pc - r3, pc + r3) } else { ((pc - r3).max(0.0), (pc + r3).min(1.0)) };
                if lo <= tlo && thi <= hi {
                    return Ok(finish_return(bm, piece, level, tlo, thi));
                }
            }
        }
        if level == g.n0 {
            break;
        }
        let mut next = Vec::new();
        for piece in &pieces {
            let (lo, hi, _) = *piece.last().unwrap();
            for (a, b, sym, shift) in split_by_branches(bm, lo, hi) {
                let fa = bm.forward(sym, a - shift);
                let fb = bm.forward(sym, b - shift);
                let (u, v) = if fa <= fb { (fa, fb) } else { (fb, fa) };
                if v - u < 1e-14 {
                    continue;
                }
                let mut np = piece.clone();
                let last = np.len() - 1;
                np[last] = (a, b, sym);
                np.push((u, v, usize::MAX));
                next.push(np);
            }
        }
        if next.len() > 200_000 {
            break;
        }
        pieces = next;
    }
    Err(Error::NotFound(format!("no return onto the base within N0 = {} steps", g.n0)))
}

fn split_by_branches(bm: &dyn BranchMap, lo: f64, hi: f64) -> Vec<(f64, f64, usize, f64)> {
    let amb = bm.ambient();
    let mut out = Vec::new();
    if amb.wraps() {
        // Arcs shorter than a branch domain map injectively along the
        // continuous lift of the branch containing their left end.
        // Longer arcs are covered by overlapping chunks so that every short
        // sub-arc lies inside one chunk, whichever branch cut it straddles.
        let (a, b) = bm.branch_domain(0);
        let width = 0.98 * (b - a);
        let mut out = Vec::new();
        let mut start = lo;
        loop {
            let end = (start + width).min(hi);
            let s = start.floor();
            let sym = bm.branch_at(start - s).unwrap_or(0);
            out.push((start, end, sym, s));
            if end >= hi {
                return out;
            }
            start += 0.5 * width;
        }
    }
    let shifts: Vec<f64> = if amb.wraps() {
        let s0 = lo.floor();
        (0..=((hi - s0).ceil() as i64)).map(|k| s0 + k as f64).collect()
    } else {
        vec![0.0]
    };
    let (blo, bhi) = if amb.wraps() {
        (0, bm.branch_count() - 1)
    } else {
        let a = bm.branch_at(lo.max(1e-300)).unwrap_or(bm.branch_count() - 1).min(bm.branch_count() - 1);
        let b = bm.branch_at(hi.min(1.0)).unwrap_or(0).min(bm.branch_count() - 1);
        (a.min(b), a.max(b))
    };
    for s in shifts {
        for sym in blo..=bhi {
            let (a, b) = bm.branch_domain(sym);
            let (a, b) = (a + s, b + s);
            let (x, y) = (lo.max(a), hi.min(b));
            if y > x {
                out.push((x, y, sym, s));
            }
        }
    }
    out.sort_by(|p, q| p.0.total_cmp(&q.0));
    out
}

fn finish_return(bm: &dyn BranchMap, piece: &[(f64, f64, usize)], m_steps: usize, tlo: f64, thi: f64) -> BaseReturn {
    let amb = bm.ambient();
    let anchors: Vec<f64> = piece.iter().map(|&(a, b, _)| amb.normalize(0.5 * (a + b))).collect();
    let symbols: Vec<usize> = anchors[..m_steps].iter().map(|&a| bm.branch_at(a).unwrap_or(0)).collect();
    let chain = Chain::new(bm, &anchors, &symbols);
    let a = chain.pull_back_to(tlo, m_steps, 0);
    let b = chain.pull_back_to(thi, m_steps, 0);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut buf = Vec::new();
    let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..50 {
        let t = tlo + (thi - tlo) * (i as f64 + 0.5) / 50.0;
        chain.pull_back_into(t, m_steps, &mut buf);
        let l: f64 = (0..m_steps).map(|j| bm.derivative(symbols[j], buf[j]).abs().ln()).sum();
        mn = mn.min(l);
        mx = mx.max(l);
    }
    BaseReturn {
        v: Arc::new(lo, hi.max(lo + f64::MIN_POSITIVE), amb).expect("nonempty"),
        m_steps,
        symbols,
        distortion: (mx - mn).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: &MapModel, beta: f64) -> ExpansionConfig {
        ExpansionConfig::for_model(m, beta)
    }

    #[test]
    fn doubling_preball_is_exact() {
        let m = MapModel::doubling();
        let c = cfg(&m, 0.0);
        let r = preball(&m, &c, 0.3, 10, 0.05).unwrap();
        assert!(r.passes(), "{r:?}");
        assert!((r.preball.len() - 0.1 / 1024.0).abs() < 1e-15);
        assert!((r.d1_hat - 1.0).abs() < 1e-12);
        assert!((r.contraction[2] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn doubling_shrink_radius() {
        let m = MapModel::doubling();
        let c = cfg(&m, 0.0);
        match preball(&m, &c, 0.3, 3, 0.6) {
            Err(Error::ShrinkRadius { max_radius }) => assert!(max_radius < 0.5 && max_radius > 0.49),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn doubling_base_levels() {
        let m = MapModel::doubling();
        let b = dense_preimage_base(&m, 0.02, 0.0).unwrap();
        assert_eq!((b.p, b.n0), (0.0, 5));
        assert_eq!(b.c0, 32.0);
        assert_eq!(dense_preimage_base(&m, 0.4, 0.0).unwrap().n0, 1);
    }

    #[test]
    fn gauss_base_avoids_singularity() {
        let m = MapModel::gauss(10_000).unwrap();
        let b = dense_preimage_base(&m, 0.05, 0.0).unwrap();
        assert!(b.p > 0.01 && b.density < 0.05);
    }

    #[test]
    fn doubling_return_to_base() {
        let m = MapModel::doubling();
        let g = BaseGeometry::build(&m, 0.01, 0.05, Some(0.0)).unwrap();
        assert_eq!(g.n0, 5);
        let ball = Arc::new(0.3, 0.4, Ambient::Circle).unwrap();
        let r = return_to_base(&m, &g, &ball).unwrap();
        assert!(r.m_steps <= 5);
        assert!(ball.contains(r.v.lo) && ball.contains(r.v.hi));
        assert!((r.distortion - 1.0).abs() < 1e-12);
        let big = Arc::new(-0.3, 0.3, Ambient::Circle).unwrap();
        assert_eq!(return_to_base(&m, &g, &big).unwrap().m_steps, 0);
    }

    #[test]
    fn cover_time_doubling() {
        let m = MapModel::doubling();
        let c = cfg(&m, 0.0);
        let t = uniform_cover_time(&m, &c, 0.01, 1000, 3).unwrap();
        assert_eq!(t.n_eps, 10);
        assert!((t.kappa_cover - 2.0).abs() < 1e-12);
    }
}
