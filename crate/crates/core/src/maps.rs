//! Built-in non-uniformly expanding maps.
//!
//! One-dimensional models expose their full branch structure through
//! [`BranchMap`]; the skew product only supports forward evaluation.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lift_near, Ambient};

/// Accuracy of numerically inverted branches.
pub const TAU_DYN: f64 = 1e-12;

/// A point of the phase space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Point {
    Line(f64),
    Plane([f64; 2]),
}

impl Point {
    pub fn as_line(&self) -> Option<f64> {
        match *self {
            Point::Line(x) => Some(x),
            Point::Plane(_) => None,
        }
    }

    /// Coordinates as a slice.
    pub fn coords(&self) -> Vec<f64> {
        match *self {
            Point::Line(x) => vec![x],
            Point::Plane(p) => p.to_vec(),
        }
    }
}

/// Piecewise monotone map of the circle or the unit interval with full
/// branches (every branch maps its domain onto the whole ambient space).
pub trait BranchMap: Send + Sync {
    fn ambient(&self) -> Ambient;
    /// Number of enumerable branches.
    fn branch_count(&self) -> usize;
    /// Branch whose domain contains `x`; `None` on the singular set or
    /// outside the ambient span. May exceed `branch_count` for truncated maps.
    fn branch_at(&self, x: f64) -> Option<usize>;
    /// Closed domain of branch `b`.
    fn branch_domain(&self, b: usize) -> (f64, f64);
    /// Branch `b` extended continuously to its closed domain. On the circle
    /// the argument may be any lift.
    fn forward(&self, b: usize, x: f64) -> f64;
    /// Inverse of branch `b`; on the circle `y` may be any lift.
    fn inverse(&self, b: usize, y: f64) -> f64;
    /// Signed derivative of branch `b`.
    fn derivative(&self, b: usize, x: f64) -> f64;
    fn increasing(&self, b: usize) -> bool;
    fn singular_points(&self) -> &[f64];

    /// Distance to the singular set, `inf` when it is empty.
    fn singular_distance(&self, x: f64) -> f64 {
        let amb = self.ambient();
        self.singular_points().iter().map(|&s| amb.dist(x, s)).fold(f64::INFINITY, f64::min)
    }

    /// The map itself.
    fn apply(&self, x: f64) -> Result<f64> {
        let b = self.branch_at(x).ok_or(Error::SingularPoint(x))?;
        Ok(self.ambient().normalize(self.forward(b, x)))
    }

    /// `forward(b, z + e) - forward(b, z)`, accurate for small `e`.
    fn forward_offset(&self, b: usize, z: f64, e: f64) -> f64 {
        self.forward(b, z + e) - self.forward(b, z)
    }

    /// `inverse(b, f(z) + e) - z` for `z` in branch `b`, accurate for small `e`.
    fn inverse_offset(&self, b: usize, z: f64, e: f64) -> f64 {
        self.inverse(b, self.forward(b, z) + e) - z
    }

    /// One step of a pull-back: the point near `anchor` (a point of branch
    /// `b`) whose image is `y`, where `y` is near `f(anchor)`.
    fn local_inverse(&self, b: usize, y: f64, image_anchor: f64) -> f64 {
        if self.ambient().wraps() {
            self.inverse(b, lift_near(y, image_anchor))
        } else {
            self.inverse(b, y)
        }
    }
}

/// `x -> 2x mod 1` on the circle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Doubling;

impl BranchMap for Doubling {
    fn ambient(&self) -> Ambient {
        Ambient::Circle
    }
    fn branch_count(&self) -> usize {
        2
    }
    fn branch_at(&self, x: f64) -> Option<usize> {
        let x = x.rem_euclid(1.0);
        Some(if x < 0.5 { 0 } else { 1 })
    }
    fn branch_domain(&self, b: usize) -> (f64, f64) {
        (0.5 * b as f64, 0.5 * (b + 1) as f64)
    }
    fn forward(&self, b: usize, x: f64) -> f64 {
        2.0 * x - b as f64
    }
    fn inverse(&self, b: usize, y: f64) -> f64 {
        0.5 * (y + b as f64)
    }
    fn derivative(&self, _b: usize, _x: f64) -> f64 {
        2.0
    }
    fn forward_offset(&self, _b: usize, _z: f64, e: f64) -> f64 {
        2.0 * e
    }
    fn inverse_offset(&self, _b: usize, _z: f64, e: f64) -> f64 {
        0.5 * e
    }
    fn increasing(&self, _b: usize) -> bool {
        true
    }
    fn singular_points(&self) -> &[f64] {
        &[]
    }
}

/// Liverani-Saussol-Vaienti map with an indifferent fixed point at 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lsv {
    pub alpha: f64,
}

impl Lsv {
    pub fn new(alpha: f64) -> Result<Lsv> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("model.alpha", format!("alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(Lsv { alpha })
    }

    #[inline]
    fn pow_alpha(&self, v: f64) -> f64 {
        if self.alpha == 0.5 {
            v.sqrt()
        } else if self.alpha == 1.0 {
            v
        } else {
            v.powf(self.alpha)
        }
    }

    fn left(&self, x: f64) -> f64 {
        x * (1.0 + self.pow_alpha(2.0 * x))
    }

    fn left_deriv(&self, x: f64) -> f64 {
        1.0 + (1.0 + self.alpha) * self.pow_alpha(2.0 * x)
    }

    /// `(2(z + e))^alpha - (2z)^alpha` without cancellation.
    #[inline]
    fn pow_alpha_diff(&self, z: f64, tz: f64, e: f64) -> f64 {
        if self.alpha == 0.5 {
            2.0 * e / ((2.0 * (z + e)).sqrt() + tz)
        } else if self.alpha == 1.0 {
            2.0 * e
        } else {
            tz * (self.alpha * (e / z).ln_1p()).exp_m1()
        }
    }

    fn left_offset(&self, z: f64, e: f64) -> f64 {
        if z <= 0.0 {
            return self.left(z + e) - self.left(z);
        }
        let tz = self.pow_alpha(2.0 * z);
        let dt = self.pow_alpha_diff(z, tz, e);
        e * (1.0 + tz + dt) + z * dt
    }
}

impl BranchMap for Lsv {
    fn ambient(&self) -> Ambient {
        Ambient::Interval
    }
    fn branch_count(&self) -> usize {
        2
    }
    fn branch_at(&self, x: f64) -> Option<usize> {
        if !(0.0..=1.0).contains(&x) {
            None
        } else if x < 0.5 {
            Some(0)
        } else {
            Some(1)
        }
    }
    fn branch_domain(&self, b: usize) -> (f64, f64) {
        (0.5 * b as f64, 0.5 * (b + 1) as f64)
    }
    fn forward(&self, b: usize, x: f64) -> f64 {
        if b == 0 {
            self.left(x)
        } else {
            2.0 * x - 1.0
        }
    }
    fn inverse(&self, b: usize, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        if b == 1 {
            return 0.5 * (y + 1.0);
        }
        if y == 0.0 {
            return 0.0;
        }
        // Newton on a convex increasing function, started from a one-step
        // fixed-point guess; the bracket guards against round-off.
        let (mut lo, mut hi) = (0.0f64, 0.5f64);
        let mut x = y / (1.0 + self.pow_alpha(2.0 * y));
        for _ in 0..100 {
            let t = self.pow_alpha(2.0 * x);
            let g = x * (1.0 + t) - y;
            if g == 0.0 {
                return x;
            }
            if g > 0.0 {
                hi = hi.min(x);
            } else {
                lo = lo.max(x);
            }
            let mut next = x - g / (1.0 + (1.0 + self.alpha) * t);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 5e-16 * x {
                return next;
            }
            x = next;
        }
        x
    }
    fn derivative(&self, b: usize, x: f64) -> f64 {
        if b == 0 {
            self.left_deriv(x)
        } else {
            2.0
        }
    }
    fn forward_offset(&self, b: usize, z: f64, e: f64) -> f64 {
        if b == 0 {
            self.left_offset(z, e)
        } else {
            2.0 * e
        }
    }
    fn inverse_offset(&self, b: usize, z: f64, e: f64) -> f64 {
        if b == 1 {
            return 0.5 * e;
        }
        if e == 0.0 {
            return 0.0;
        }
        let tz = self.pow_alpha(2.0 * z);
        let d1 = 1.0 + (1.0 + self.alpha) * tz;
        let mut d = e / d1;
        if z > 0.0 {
            let d2 = 2.0 * self.alpha * (1.0 + self.alpha) * tz / (2.0 * z);
            let corr = d - 0.5 * d2 * d * d / d1;
            if corr.abs() < 2.0 * d.abs() && corr * d > 0.0 {
                d = corr;
            }
        }
        for _ in 0..50 {
            let g = self.left_offset(z, d) - e;
            if g == 0.0 {
                return d;
            }
            let next = d - g / self.left_deriv((z + d).max(0.0));
            if (next - d).abs() <= 4e-16 * d.abs() {
                return next;
            }
            d = next;
        }
        d
    }
    fn increasing(&self, _b: usize) -> bool {
        true
    }
    fn singular_points(&self) -> &[f64] {
        &[]
    }
}

/// Gauss map `x -> 1/x mod 1`; branch `b` is `1/x - (b + 1)` on
/// `[1/(b+2), 1/(b+1)]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gauss {
    pub k_max: usize,
    singular: [f64; 1],
}

impl Gauss {
    pub fn new(k_max: usize) -> Result<Gauss> {
        if k_max == 0 {
            return Err(Error::config("model.k_max", "k_max must be positive"));
        }
        Ok(Gauss { k_max, singular: [0.0] })
    }

    /// Lebesgue measure of the branches beyond `k_max`.
    pub fn excluded_mass(&self) -> f64 {
        1.0 / (self.k_max as f64 + 1.0)
    }
}

impl BranchMap for Gauss {
    fn ambient(&self) -> Ambient {
        Ambient::Interval
    }
    fn branch_count(&self) -> usize {
        self.k_max
    }
    fn branch_at(&self, x: f64) -> Option<usize> {
        if !(x > 0.0 && x <= 1.0) {
            return None;
        }
        let k = (1.0 / x).floor();
        if k >= u32::MAX as f64 {
            return None;
        }
        Some(k as usize - 1)
    }
    fn branch_domain(&self, b: usize) -> (f64, f64) {
        let k = (b + 1) as f64;
        (1.0 / (k + 1.0), 1.0 / k)
    }
    fn forward(&self, b: usize, x: f64) -> f64 {
        1.0 / x - (b + 1) as f64
    }
    fn inverse(&self, b: usize, y: f64) -> f64 {
        1.0 / ((b + 1) as f64 + y.clamp(0.0, 1.0))
    }
    fn derivative(&self, _b: usize, x: f64) -> f64 {
        -1.0 / (x * x)
    }
    fn forward_offset(&self, _b: usize, z: f64, e: f64) -> f64 {
        -e / (z * (z + e))
    }
    fn inverse_offset(&self, _b: usize, z: f64, e: f64) -> f64 {
        -e * z * z / (1.0 + e * z)
    }
    fn increasing(&self, _b: usize) -> bool {
        false
    }
    fn singular_points(&self) -> &[f64] {
        &self.singular
    }
}

/// Skew product `(s, x) -> (16 s mod 1, a0 + alpha sin(2 pi s) - x^2)` with
/// critical set `{x = 0}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyViana {
    pub a0: f64,
    pub alpha: f64,
}

impl ToyViana {
    pub fn new(a0: f64, alpha: f64) -> Result<ToyViana> {
        let v = ToyViana { a0, alpha };
        let r = v.fiber_radius();
        if !(alpha >= 0.0 && a0 - alpha >= r * r - r && a0 - alpha > 0.0) {
            return Err(Error::config(
                "model.a0",
                format!("fiber interval is not invariant for a0 = {a0}, alpha = {alpha}"),
            ));
        }
        Ok(v)
    }

    /// Half-width of the invariant fiber interval `[-a_max, a_max]`.
    pub fn fiber_radius(&self) -> f64 {
        self.a0 + self.alpha
    }

    pub fn apply(&self, s: f64, x: f64) -> (f64, f64) {
        ((16.0 * s).rem_euclid(1.0), self.a0 + self.alpha * (2.0 * PI * s).sin() - x * x)
    }

    /// Smallest singular value of the Jacobian.
    pub fn min_singular_value(&self, s: f64, x: f64) -> f64 {
        let a = 16.0;
        let c = 2.0 * PI * self.alpha * (2.0 * PI * s).cos();
        let d = -2.0 * x;
        let det = (a * d).abs();
        let fro = a * a + c * c + d * d;
        let smax = ((fro + (fro * fro - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt();
        if smax == 0.0 {
            0.0
        } else {
            det / smax
        }
    }
}

/// Which built-in model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Doubling(Doubling),
    Lsv(Lsv),
    Gauss(Gauss),
    Viana(ToyViana),
}

/// A catalog map together with its expansion rate `lambda`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapModel {
    pub name: String,
    pub kind: ModelKind,
    pub lambda: f64,
}

impl MapModel {
    pub fn doubling() -> MapModel {
        MapModel { name: "doubling".into(), kind: ModelKind::Doubling(Doubling), lambda: std::f64::consts::LN_2 }
    }

    pub fn lsv(alpha: f64) -> Result<MapModel> {
        Ok(MapModel { name: "lsv".into(), kind: ModelKind::Lsv(Lsv::new(alpha)?), lambda: 0.35 })
    }

    pub fn gauss(k_max: usize) -> Result<MapModel> {
        Ok(MapModel { name: "gauss".into(), kind: ModelKind::Gauss(Gauss::new(k_max)?), lambda: 2.37 })
    }

    pub fn viana(a0: f64, alpha: f64) -> Result<MapModel> {
        Ok(MapModel { name: "viana".into(), kind: ModelKind::Viana(ToyViana::new(a0, alpha)?), lambda: 0.5 })
    }

    /// Catalog lookup by name with optional parameters.
    pub fn by_name(name: &str, alpha: Option<f64>, k_max: Option<usize>, lambda: Option<f64>) -> Result<MapModel> {
        let mut m = match name {
            "doubling" => MapModel::doubling(),
            "lsv" => MapModel::lsv(alpha.unwrap_or(0.5))?,
            "gauss" => MapModel::gauss(k_max.unwrap_or(10_000))?,
            "viana" => MapModel::viana(1.9, alpha.unwrap_or(0.04))?,
            other => return Err(Error::config("model.name", format!("unknown model `{other}`"))),
        };
        if let Some(l) = lambda {
            if !(l > 0.0) {
                return Err(Error::config("model.lambda", "lambda must be positive"));
            }
            m.lambda = l;
        }
        Ok(m)
    }

    pub fn with_lambda(mut self, lambda: f64) -> MapModel {
        self.lambda = lambda;
        self
    }

    pub fn dimension(&self) -> usize {
        match self.kind {
            ModelKind::Viana(_) => 2,
            _ => 1,
        }
    }

    pub fn branch_map(&self) -> Option<&dyn BranchMap> {
        match &self.kind {
            ModelKind::Doubling(m) => Some(m),
            ModelKind::Lsv(m) => Some(m),
            ModelKind::Gauss(m) => Some(m),
            ModelKind::Viana(_) => None,
        }
    }

    pub fn require_branches(&self) -> Result<&dyn BranchMap> {
        self.branch_map().ok_or_else(|| Error::NoBranches(self.name.clone()))
    }

    pub fn evaluate(&self, p: Point) -> Result<Point> {
        match (&self.kind, p) {
            (ModelKind::Viana(v), Point::Plane([s, x])) => {
                if x == 0.0 {
                    return Err(Error::SingularPoint(x));
                }
                let (s1, x1) = v.apply(s, x);
                Ok(Point::Plane([s1, x1]))
            }
            (ModelKind::Viana(_), Point::Line(_)) => Err(Error::Domain("viana needs a planar point".into())),
            (_, Point::Line(x)) => Ok(Point::Line(self.branch_map().unwrap().apply(x)?)),
            (_, Point::Plane(_)) => Err(Error::Domain("one-dimensional model got a planar point".into())),
        }
    }

    /// `||Df(x)^{-1}||^{-1}`, which is `|f'(x)|` in dimension one.
    pub fn deriv_norm_inv(&self, p: Point) -> Result<f64> {
        match (&self.kind, p) {
            (ModelKind::Viana(v), Point::Plane([s, x])) => Ok(v.min_singular_value(s, x)),
            (_, Point::Line(x)) => {
                let m = self.require_branches()?;
                let b = m.branch_at(x).ok_or(Error::SingularPoint(x))?;
                Ok(m.derivative(b, x).abs())
            }
            _ => Err(Error::Domain("point dimension does not match the model".into())),
        }
    }

    pub fn det_jacobian(&self, p: Point) -> Result<f64> {
        match (&self.kind, p) {
            (ModelKind::Viana(_), Point::Plane([_, x])) => Ok(-32.0 * x),
            (_, Point::Line(x)) => {
                let m = self.require_branches()?;
                let b = m.branch_at(x).ok_or(Error::SingularPoint(x))?;
                Ok(m.derivative(b, x))
            }
            _ => Err(Error::Domain("point dimension does not match the model".into())),
        }
    }

    /// Distance to the singular set (`inf` when it is empty).
    pub fn singular_distance(&self, p: Point) -> f64 {
        match (&self.kind, p) {
            (ModelKind::Viana(_), Point::Plane([_, x])) => x.abs(),
            (_, Point::Line(x)) => self.branch_map().map_or(f64::INFINITY, |m| m.singular_distance(x)),
            _ => f64::NAN,
        }
    }

    /// The truncated distance `dist_delta(x, S)`.
    pub fn dist_delta(&self, p: Point, delta: f64) -> f64 {
        truncated(self.singular_distance(p), delta)
    }

    /// All pre-images of `y`, one per enumerable branch, in branch order.
    pub fn branch_preimages(&self, y: f64) -> Result<Vec<f64>> {
        let m = self.require_branches()?;
        let amb = m.ambient();
        let y = amb.normalize(y);
        let (lo, hi) = amb.span();
        if !(y >= lo && y <= hi) {
            return Ok(Vec::new());
        }
        Ok((0..m.branch_count()).map(|b| m.inverse(b, y)).collect())
    }

    /// Lebesgue-uniform start point from two uniform variates.
    pub fn uniform_point(&self, u: f64, v: f64) -> Point {
        match &self.kind {
            ModelKind::Viana(t) => {
                let r = t.fiber_radius();
                Point::Plane([u, -r + 2.0 * r * v])
            }
            _ => Point::Line(u),
        }
    }

    /// Lebesgue measure of the phase space.
    pub fn phase_measure(&self) -> f64 {
        match &self.kind {
            ModelKind::Viana(t) => 2.0 * t.fiber_radius(),
            _ => 1.0,
        }
    }

    /// Forward orbit of `p`.
    pub fn orbit(&self, p: Point) -> Orbit<'_> {
        Orbit::new(self, p)
    }
}

/// `d` if `d <= delta`, else 1.
#[inline]
pub fn truncated(d: f64, delta: f64) -> f64 {
    if d <= delta {
        d
    } else {
        1.0
    }
}

/// Data of one orbit point.
#[derive(Clone, Copy, Debug)]
pub struct OrbitStep {
    pub point: Point,
    /// `log ||Df^{-1}||^{-1}` at the point.
    pub log_expansion: f64,
    pub singular_distance: f64,
    pub branch: Option<usize>,
}

enum OrbitState {
    Real(f64),
    Dyadic(u64),
    Skew { s: u64, x: f64 },
}

/// Bits of a point of `[0, 1)` as a 64-bit binary fraction.
fn to_bits(x: f64) -> u64 {
    let x = x.rem_euclid(1.0);
    if x >= 1.0 {
        return 0;
    }
    (x * 18_446_744_073_709_551_616.0) as u64
}

fn from_bits(b: u64) -> f64 {
    (b >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Forward orbit iterator.
///
/// Expanding circle factors (`2x` and `16s`) are iterated on a 64-bit binary
/// fraction whose vacated low bits are refilled from a generator seeded by
/// the start point, so long orbits do not collapse onto the dyadic rationals
/// representable in `f64`. The refill is deterministic.
pub struct Orbit<'a> {
    model: &'a MapModel,
    state: OrbitState,
    refill: ChaCha8Rng,
    buffer: u64,
    buffered: u32,
    step: usize,
}

impl<'a> Orbit<'a> {
    pub fn new(model: &'a MapModel, p: Point) -> Orbit<'a> {
        let coords = p.coords();
        let mut seed = 0x9e37_79b9_7f4a_7c15u64;
        for c in &coords {
            seed = (seed ^ c.to_bits()).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31);
        }
        let mut refill = ChaCha8Rng::seed_from_u64(seed);
        let state = match (&model.kind, p) {
            (ModelKind::Doubling(_), Point::Line(x)) => OrbitState::Dyadic(fill_low(to_bits(x), x, &mut refill)),
            (ModelKind::Viana(_), Point::Plane([s, x])) => OrbitState::Skew { s: fill_low(to_bits(s), s, &mut refill), x },
            (_, Point::Line(x)) => OrbitState::Real(x),
            (_, Point::Plane([s, _])) => OrbitState::Real(s),
        };
        Orbit { model, state, refill, buffer: 0, buffered: 0, step: 0 }
    }

    fn bits(&mut self, n: u32) -> u64 {
        if self.buffered < n {
            self.buffer = self.refill.next_u64();
            self.buffered = 64;
        }
        let out = self.buffer & ((1u64 << n) - 1);
        self.buffer >>= n;
        self.buffered -= n;
        out
    }

    /// Current point.
    pub fn point(&self) -> Point {
        match self.state {
            OrbitState::Real(x) => Point::Line(x),
            OrbitState::Dyadic(b) => Point::Line(from_bits(b)),
            OrbitState::Skew { s, x } => Point::Plane([from_bits(s), x]),
        }
    }

    /// Number of steps taken so far.
    pub fn time(&self) -> usize {
        self.step
    }

    /// Reports the current point and advances to its image.
    pub fn advance(&mut self) -> Result<OrbitStep> {
        let step = self.step;
        let out = match (&self.model.kind, &mut self.state) {
            (_, OrbitState::Dyadic(b)) => {
                let cur = *b;
                let branch = (cur >> 63) as usize;
                let fill = self.bits(1);
                if let OrbitState::Dyadic(b) = &mut self.state {
                    *b = (cur << 1) | fill;
                }
                OrbitStep {
                    point: Point::Line(from_bits(cur)),
                    log_expansion: std::f64::consts::LN_2,
                    singular_distance: f64::INFINITY,
                    branch: Some(branch),
                }
            }
            (ModelKind::Viana(v), OrbitState::Skew { s, x }) => {
                let (sb, xv) = (*s, *x);
                if xv == 0.0 {
                    return Err(Error::SingularOrbit { step });
                }
                let sf = from_bits(sb);
                let (_, x1) = v.apply(sf, xv);
                let le = v.min_singular_value(sf, xv).ln();
                let fill = self.bits(4);
                self.state = OrbitState::Skew { s: (sb << 4) | fill, x: x1 };
                OrbitStep { point: Point::Plane([sf, xv]), log_expansion: le, singular_distance: xv.abs(), branch: None }
            }
            (_, OrbitState::Real(x)) => {
                let xv = *x;
                let m = self.model.branch_map().expect("real orbit state needs a branch map");
                let b = m.branch_at(xv).ok_or(Error::SingularOrbit { step })?;
                let d = m.derivative(b, xv).abs();
                let next = m.ambient().normalize(m.forward(b, xv));
                self.state = OrbitState::Real(next);
                OrbitStep { point: Point::Line(xv), log_expansion: d.ln(), singular_distance: m.singular_distance(xv), branch: Some(b) }
            }
            _ => unreachable!("orbit state does not match the model"),
        };
        self.step += 1;
        Ok(out)
    }
}

/// Randomizes the bits of `b` that lie below the resolution of `x`.
fn fill_low(b: u64, x: f64, rng: &mut ChaCha8Rng) -> u64 {
    let x = x.rem_euclid(1.0);
    let ulp = if x > 0.0 { f64::from_bits(x.to_bits() + 1) - x } else { f64::MIN_POSITIVE };
    let scaled = ulp * 18_446_744_073_709_551_616.0;
    let mask = if scaled >= 18_446_744_073_709_551_615.0 {
        u64::MAX
    } else if scaled <= 1.0 {
        0
    } else {
        (scaled as u64).next_power_of_two().wrapping_sub(1)
    };
    b | (rng.next_u64() & mask)
}

/// Fixed points of composed inverse branches, i.e. periodic points with the
/// given itinerary word.
pub fn periodic_point(m: &dyn BranchMap, word: &[usize]) -> f64 {
    let amb = m.ambient();
    let (a, b) = m.branch_domain(word[0]);
    let mut x = 0.5 * (a + b);
    for _ in 0..2000 {
        let mut y = x;
        for &w in word.iter().rev() {
            y = amb.normalize(m.inverse(w, y));
        }
        if y == x {
            x = y;
            break;
        }
        x = y;
    }
    x
}

/// Empirical nondegeneracy constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub b_hat: f64,
    pub beta_hat: f64,
    /// Smallest constant for the two-sided power bound on sampled points.
    pub b_power: f64,
    /// Smallest constant for the Lipschitz bounds on sampled pairs.
    pub b_lipschitz: f64,
    pub samples: usize,
    pub pairs: usize,
    /// Points or pairs whose bound could not be evaluated (non-finite data).
    pub violations: usize,
    pub passes: bool,
}

/// Fits `(B, beta)` for the power-law bounds on `|f'|` and the Lipschitz
/// bounds on `log |f'|`. Pairs are taken within a branch domain.
pub fn check_nondegeneracy(m: &MapModel, sample_count: usize) -> Result<NondegeneracyReport> {
    if sample_count < 1000 {
        return Err(Error::InsufficientData("nondegeneracy check needs at least 1000 samples".into()));
    }
    let bm = m.require_branches()?;
    let amb = bm.ambient();
    let (lo, hi) = amb.span();
    let n = sample_count;
    let has_s = !bm.singular_points().is_empty();
    // Geometric spacing near the singular set, uniform otherwise.
    let xs: Vec<f64> = (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            if has_s {
                let s = bm.singular_points()[0];
                let d = (1e-6f64).powf(1.0 - u);
                let x = s + d;
                if x > hi { s - d } else { x }
            } else {
                lo + u * (hi - lo)
            }
        })
        .filter(|&x| x > lo && x < hi)
        .collect();
    let mut violations = 0usize;
    let mut data = Vec::with_capacity(xs.len());
    for &x in &xs {
        match bm.branch_at(x) {
            Some(b) => {
                let d = bm.derivative(b, x).abs();
                let dist = bm.singular_distance(x).min(1.0);
                if d.is_finite() && d > 0.0 {
                    data.push((x, b, d, dist));
                } else {
                    violations += 1;
                }
            }
            None => violations += 1,
        }
    }
    let beta_hat = if has_s {
        let pts: Vec<(f64, f64)> = data.iter().map(|&(_, _, d, dist)| (dist.ln(), d.ln())).collect();
        (-crate::decay::ols(&pts).slope).max(0.0)
    } else {
        0.0
    };
    let mut b_power = 1.0f64;
    for &(_, _, d, dist) in &data {
        let p = dist.powf(beta_hat);
        b_power = b_power.max(d * p).max(p / d);
    }
    let mut b_lip = 0.0f64;
    let mut pairs = 0usize;
    for w in data.windows(2) {
        let (x, bx, dx, distx) = w[0];
        let (y, by, dy, _) = w[1];
        if bx != by || (x - y).abs() >= distx / 2.0 {
            continue;
        }
        pairs += 1;
        let r = (dx.ln() - dy.ln()).abs() / ((x - y).abs() * distx.powf(-beta_hat));
        if r.is_finite() {
            b_lip = b_lip.max(r);
        } else {
            violations += 1;
        }
    }
    let b_hat = b_power.max(b_lip).max(1.0);
    Ok(NondegeneracyReport {
        b_hat,
        beta_hat,
        b_power,
        b_lipschitz: b_lip,
        samples: data.len(),
        pairs,
        violations,
        passes: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_examples() {
        let d = MapModel::doubling();
        assert_eq!(d.evaluate(Point::Line(0.3)).unwrap(), Point::Line(0.6));
        let l = MapModel::lsv(1.0).unwrap();
        assert_eq!(l.evaluate(Point::Line(0.25)).unwrap(), Point::Line(0.375));
        let g = MapModel::gauss(10_000).unwrap();
        let y = g.evaluate(Point::Line(0.4)).unwrap().as_line().unwrap();
        assert!((y - 0.5).abs() < 1e-15);
        assert!(matches!(g.evaluate(Point::Line(0.0)), Err(Error::SingularPoint(_))));
    }

    #[test]
    fn dist_delta_examples() {
        let g = MapModel::gauss(10_000).unwrap();
        assert_eq!(g.dist_delta(Point::Line(0.05), 0.1), 0.05);
        assert_eq!(g.dist_delta(Point::Line(0.5), 0.1), 1.0);
        assert_eq!(MapModel::doubling().dist_delta(Point::Line(0.123), 0.1), 1.0);
    }

    #[test]
    fn preimage_examples() {
        let d = MapModel::doubling().branch_preimages(0.3).unwrap();
        assert!((d[0] - 0.15).abs() < 1e-15 && (d[1] - 0.65).abs() < 1e-15);
        let l = MapModel::lsv(1.0).unwrap().branch_preimages(0.375).unwrap();
        assert!((l[0] - 0.25).abs() < 1e-12 && (l[1] - 0.6875).abs() < 1e-15);
        let g = MapModel::gauss(3).unwrap().branch_preimages(0.5).unwrap();
        let want = [1.0 / 1.5, 1.0 / 2.5, 1.0 / 3.5];
        assert_eq!(g.len(), 3);
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nondegeneracy_examples() {
        let d = check_nondegeneracy(&MapModel::doubling(), 10_000).unwrap();
        assert!(d.passes && d.beta_hat == 0.0 && d.b_hat >= 2.0);
        let g = check_nondegeneracy(&MapModel::gauss(10_000).unwrap(), 10_000).unwrap();
        assert!(g.passes && (g.beta_hat - 2.0).abs() < 1e-6, "{g:?}");
        let l = check_nondegeneracy(&MapModel::lsv(0.5).unwrap(), 10_000).unwrap();
        assert!(l.passes && l.beta_hat == 0.0 && l.b_power <= 4.0, "{l:?}");
    }

    #[test]
    fn doubling_orbit_does_not_collapse() {
        let m = MapModel::doubling();
        let mut o = m.orbit(Point::Line(0.3));
        let mut zeros = 0;
        for _ in 0..500 {
            if o.advance().unwrap().point.as_line().unwrap() == 0.0 {
                zeros += 1;
            }
        }
        assert_eq!(zeros, 0);
    }

    #[test]
    fn orbit_is_deterministic() {
        let m = MapModel::doubling();
        let a: Vec<f64> = {
            let mut o = m.orbit(Point::Line(0.123));
            (0..200).map(|_| o.advance().unwrap().point.as_line().unwrap()).collect()
        };
        let mut o = m.orbit(Point::Line(0.123));
        for v in a {
            assert_eq!(v, o.advance().unwrap().point.as_line().unwrap());
        }
    }

    #[test]
    fn doubling_orbit_tracks_exact_map_early() {
        let m = MapModel::doubling();
        let mut o = m.orbit(Point::Line(0.3));
        o.advance().unwrap();
        let x1 = o.point().as_line().unwrap();
        assert!((x1 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn periodic_points() {
        let d = Doubling;
        assert!((periodic_point(&d, &[0, 1]) - 1.0 / 3.0).abs() < 1e-14);
        let g = Gauss::new(100).unwrap();
        assert!((periodic_point(&g, &[0]) - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn offsets_match_differences_and_derivatives() {
        let maps: Vec<Box<dyn BranchMap>> =
            vec![Box::new(Lsv::new(0.5).unwrap()), Box::new(Lsv::new(0.3).unwrap()), Box::new(Gauss::new(50).unwrap())];
        for m in &maps {
            for b in 0..2 {
                let (lo, hi) = m.branch_domain(b);
                let z = lo + 0.37 * (hi - lo);
                let e = 0.01 * (hi - lo);
                let naive = m.forward(b, z + e) - m.forward(b, z);
                assert!((m.forward_offset(b, z, e) - naive).abs() < 1e-13);
                let tiny = 1e-30;
                let d = m.forward_offset(b, z, tiny) / tiny;
                assert!((d / m.derivative(b, z) - 1.0).abs() < 1e-12);
                let back = m.inverse_offset(b, z, m.forward_offset(b, z, e));
                assert!((back / e - 1.0).abs() < 1e-12);
                let back = m.inverse_offset(b, z, m.forward_offset(b, z, tiny));
                assert!((back / tiny - 1.0).abs() < 1e-12);
            }
        }
    }
}
