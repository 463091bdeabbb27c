//! Arcs and finite unions of arcs on the circle or on a bounded segment.
//!
//! An [`IntervalSet`] stores its points as sorted, pairwise disjoint closed
//! pieces inside the ambient span. On the circle a piece never wraps; an arc
//! through `0` is stored as two pieces and reassembled by [`IntervalSet::arcs`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Endpoint merge tolerance.
pub const TAU_GEOM: f64 = 1e-12;

/// The space an arc lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambient {
    /// `R / Z`, represented by `[0, 1)`.
    Circle,
    /// The closed unit interval.
    Interval,
    /// A bounded segment `[lo, hi]` of the real line, used for local pictures.
    Window { lo: f64, hi: f64 },
}

impl Ambient {
    /// Bounds of the representing segment.
    pub fn span(&self) -> (f64, f64) {
        match *self {
            Ambient::Circle | Ambient::Interval => (0.0, 1.0),
            Ambient::Window { lo, hi } => (lo, hi),
        }
    }

    pub fn wraps(&self) -> bool {
        matches!(self, Ambient::Circle)
    }

    /// Total measure of the ambient space.
    pub fn measure(&self) -> f64 {
        let (a, b) = self.span();
        b - a
    }

    /// Distance between two points of the ambient space.
    pub fn dist(&self, x: f64, y: f64) -> f64 {
        if self.wraps() {
            circle_dist(x, y)
        } else {
            (x - y).abs()
        }
    }

    /// Representative of `x` in the span (reduction mod 1 on the circle).
    pub fn normalize(&self, x: f64) -> f64 {
        if self.wraps() {
            let r = x.rem_euclid(1.0);
            if r >= 1.0 {
                0.0
            } else {
                r
            }
        } else {
            x
        }
    }
}

/// Distance on `R / Z`: `min(|x - y|, 1 - |x - y|)` after reduction.
pub fn circle_dist(x: f64, y: f64) -> f64 {
    let d = (x - y).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Nearest lift of `v` to `anchor` on the circle.
pub fn lift_near(v: f64, anchor: f64) -> f64 {
    v - (v - anchor).round()
}

/// A closed arc. On the circle `hi` may exceed 1 (the arc wraps through 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub lo: f64,
    pub hi: f64,
    pub ambient: Ambient,
}

impl Arc {
    /// Builds an arc from `lo` to `hi` (`lo < hi`), clipping to the span on
    /// non-wrapping ambients. On the circle `lo` is reduced into `[0, 1)` and
    /// lengths of 1 or more give the whole circle.
    pub fn new(lo: f64, hi: f64, ambient: Ambient) -> Result<Arc> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Domain(format!("empty or invalid arc [{lo}, {hi}]")));
        }
        if ambient.wraps() {
            let len = hi - lo;
            if len >= 1.0 {
                return Ok(Arc { lo: 0.0, hi: 1.0, ambient });
            }
            let l = ambient.normalize(lo);
            Ok(Arc { lo: l, hi: l + len, ambient })
        } else {
            let (a, b) = ambient.span();
            let l = lo.max(a);
            let h = hi.min(b);
            if h <= l {
                return Err(Error::Domain(format!("arc [{lo}, {hi}] misses the ambient span")));
            }
            Ok(Arc { lo: l, hi: h, ambient })
        }
    }

    /// The closed ball `B(center, radius)`.
    pub fn ball(center: f64, radius: f64, ambient: Ambient) -> Result<Arc> {
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("ball radius must be positive, got {radius}")));
        }
        Arc::new(center - radius, center + radius, ambient)
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        self.ambient.normalize(0.5 * (self.lo + self.hi))
    }

    pub fn contains(&self, x: f64) -> bool {
        if self.ambient.wraps() {
            let y = lift_near(x, 0.5 * (self.lo + self.hi));
            y >= self.lo && y <= self.hi
        } else {
            x >= self.lo && x <= self.hi
        }
    }

    fn pieces(&self) -> Vec<(f64, f64)> {
        if self.ambient.wraps() && self.hi > 1.0 {
            vec![(0.0, self.hi - 1.0), (self.lo, 1.0)]
        } else {
            vec![(self.lo, self.hi)]
        }
    }
}

/// A finite union of closed arcs in canonical form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    ambient: Ambient,
    pieces: Vec<(f64, f64)>,
}

impl IntervalSet {
    pub fn empty(ambient: Ambient) -> IntervalSet {
        IntervalSet { ambient, pieces: Vec::new() }
    }

    pub fn full(ambient: Ambient) -> IntervalSet {
        let (a, b) = ambient.span();
        IntervalSet { ambient, pieces: vec![(a, b)] }
    }

    pub fn from_arc(arc: Arc) -> IntervalSet {
        IntervalSet { ambient: arc.ambient, pieces: canonical(arc.pieces()) }
    }

    /// Canonical union of arbitrary (possibly overlapping) arcs.
    pub fn from_arcs<I: IntoIterator<Item = Arc>>(ambient: Ambient, arcs: I) -> Result<IntervalSet> {
        let mut raw = Vec::new();
        for a in arcs {
            if a.ambient != ambient {
                return Err(Error::AmbientMismatch);
            }
            raw.extend(a.pieces());
        }
        Ok(IntervalSet { ambient, pieces: canonical(raw) })
    }

    /// Canonical union of raw `(lo, hi)` pairs; pairs outside the span are
    /// wrapped (circle) or clipped.
    pub fn from_pairs<I: IntoIterator<Item = (f64, f64)>>(ambient: Ambient, pairs: I) -> IntervalSet {
        let mut raw = Vec::new();
        for (lo, hi) in pairs {
            if let Ok(a) = Arc::new(lo, hi, ambient) {
                raw.extend(a.pieces());
            }
        }
        IntervalSet { ambient, pieces: canonical(raw) }
    }

    pub fn ambient(&self) -> Ambient {
        self.ambient
    }

    /// Non-wrapping pieces in increasing order.
    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    /// Maximal arcs; on the circle pieces touching `0` and `1` are joined.
    pub fn arcs(&self) -> Vec<Arc> {
        let amb = self.ambient;
        let p = &self.pieces;
        if amb.wraps() && p.len() >= 2 && p[0].0 <= TAU_GEOM && p[p.len() - 1].1 >= 1.0 - TAU_GEOM {
            let last = p[p.len() - 1];
            let mut out = vec![Arc { lo: last.0, hi: 1.0 + p[0].1, ambient: amb }];
            out.extend(p[1..p.len() - 1].iter().map(|&(lo, hi)| Arc { lo, hi, ambient: amb }));
            out.rotate_left(1);
            out
        } else {
            p.iter().map(|&(lo, hi)| Arc { lo, hi, ambient: amb }).collect()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs().len()
    }

    pub fn measure(&self) -> f64 {
        self.pieces.iter().map(|&(a, b)| b - a).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        let x = self.ambient.normalize(x);
        let i = self.pieces.partition_point(|&(_, hi)| hi < x);
        i < self.pieces.len() && self.pieces[i].0 <= x
    }

    fn check(&self, other: &IntervalSet) -> Result<()> {
        if self.ambient != other.ambient {
            Err(Error::AmbientMismatch)
        } else {
            Ok(())
        }
    }

    pub fn union(&self, other: &IntervalSet) -> Result<IntervalSet> {
        self.check(other)?;
        let mut raw = self.pieces.clone();
        raw.extend_from_slice(&other.pieces);
        Ok(IntervalSet { ambient: self.ambient, pieces: canonical(raw) })
    }

    pub fn intersection(&self, other: &IntervalSet) -> Result<IntervalSet> {
        self.check(other)?;
        let (a, b) = (&self.pieces, &other.pieces);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                out.push((lo, hi));
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(IntervalSet { ambient: self.ambient, pieces: canonical(out) })
    }

    pub fn complement(&self) -> IntervalSet {
        let (a, b) = self.ambient.span();
        let mut out = Vec::new();
        let mut cur = a;
        for &(lo, hi) in &self.pieces {
            if lo > cur {
                out.push((cur, lo));
            }
            cur = cur.max(hi);
        }
        if b > cur {
            out.push((cur, b));
        }
        IntervalSet { ambient: self.ambient, pieces: canonical(out) }
    }

    pub fn difference(&self, other: &IntervalSet) -> Result<IntervalSet> {
        self.check(other)?;
        self.intersection(&other.complement())
    }

    /// The closed `r`-neighbourhood.
    pub fn fatten(&self, r: f64) -> IntervalSet {
        if r <= 0.0 || self.is_empty() {
            return self.clone();
        }
        let pairs: Vec<(f64, f64)> = self.arcs().iter().map(|a| (a.lo - r, a.hi + r)).collect();
        IntervalSet::from_pairs(self.ambient, pairs)
    }
}

fn canonical(mut raw: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    raw.retain(|&(a, b)| b > a);
    raw.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
    for (a, b) in raw {
        match out.last_mut() {
            Some(last) if a <= last.1 + TAU_GEOM => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}
