use markov_tower::decay::{ols, tail_fit, Family, StatSeries};
use markov_tower::expansion::{detect_hyperbolic, HyperbolicTracker};
use markov_tower::geometry::{Ambient, IntervalSet};
use markov_tower::maps::MapModel;
use markov_tower::preballs::{orbit_chain, pull_back_offsets, push_forward_offsets};
use markov_tower::tower::{rle, RingSystem};
use proptest::prelude::*;

fn pairs(amb: Ambient) -> impl Strategy<Value = Vec<(f64, f64)>> {
    let (lo, hi) = amb.span();
    prop::collection::vec((lo..hi, 0.0..0.3f64), 0..8).prop_map(move |v| {
        v.into_iter()
            .map(|(a, w)| if amb.wraps() { (a, a + w) } else { (a, (a + w).min(hi)) })
            .collect()
    })
}

fn ambient() -> impl Strategy<Value = Ambient> {
    prop_oneof![Just(Ambient::Circle), Just(Ambient::Interval), Just(Ambient::Window { lo: -2.0, hi: 3.0 })]
}

/// Direct evaluation of both inequality families for every `k <= n`.
fn hyperbolic_oracle(le: &[f64], dist: &[f64], sigma: f64, b: f64, delta: f64) -> Vec<usize> {
    let ls = sigma.ln();
    (1..=le.len())
        .filter(|&n| {
            (1..=n).all(|k| {
                let s: f64 = (n - k..n).map(|j| -le[j]).sum();
                let d = if dist[n - k] >= delta { 1.0 } else { dist[n - k] };
                s <= k as f64 * ls + 1e-12 * k as f64 && d.ln() >= b * k as f64 * ls - 1e-12
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inclusion_exclusion((amb, a, b) in ambient().prop_flat_map(|m| (Just(m), pairs(m), pairs(m)))) {
        let a = IntervalSet::from_pairs(amb, a);
        let b = IntervalSet::from_pairs(amb, b);
        let u = a.union(&b).unwrap();
        let i = a.intersection(&b).unwrap();
        prop_assert!((u.measure() + i.measure() - a.measure() - b.measure()).abs() < 1e-9);
        prop_assert!((a.complement().measure() + a.measure() - amb.measure()).abs() < 1e-9);
        let d = a.difference(&b).unwrap();
        prop_assert!((d.measure() + i.measure() - a.measure()).abs() < 1e-9);
        prop_assert!(a.fatten(0.01).measure() + 1e-12 >= a.measure());
    }

    #[test]
    fn pieces_are_sorted_and_disjoint((amb, a) in ambient().prop_flat_map(|m| (Just(m), pairs(m)))) {
        let s = IntervalSet::from_pairs(amb, a);
        for w in s.pieces().windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        prop_assert!(s.measure() <= amb.measure() + 1e-12);
    }

    #[test]
    fn ring_index_matches_radii(delta0 in 1e-4..0.05f64, e in 0.5..0.95f64, t in 0.0..1.0f64) {
        let r = RingSystem::new(delta0, e);
        let d = delta0 * (1.0 + 1e-9 + t * (1.0 - 1e-9));
        let k = r.ring_index(d).unwrap();
        prop_assert!(k >= 1 && k <= r.k_ring);
        prop_assert!(d <= r.outer(k) * (1.0 + 1e-12));
        prop_assert!(d >= r.inner(k) * (1.0 - 1e-12));
    }

    #[test]
    fn detector_matches_oracle(
        le in prop::collection::vec(-1.0..2.0f64, 1..120),
        dist_raw in prop::collection::vec(1e-6..0.5f64, 120),
        sigma in 0.5..0.99f64,
        b in 0.01..0.45f64,
    ) {
        let dist = &dist_raw[..le.len()];
        let fast = detect_hyperbolic(&le, dist, sigma, b, 0.1);
        prop_assert_eq!(&fast, &hyperbolic_oracle(&le, dist, sigma, b, 0.1));
        let mut t = HyperbolicTracker::new(sigma, b, 0.1);
        let inc: Vec<usize> = le.iter().zip(dist).enumerate().filter_map(|(j, (&l, &d))| t.push(l, d).then_some(j + 1)).collect();
        prop_assert_eq!(fast, inc);
    }

    #[test]
    fn offsets_round_trip(which in 0usize..4, x in 0.001..0.999f64, n in 1usize..40, e in prop::collection::vec(-1e-3..1e-3f64, 4)) {
        let m = match which {
            0 => MapModel::doubling(),
            1 => MapModel::lsv(0.5).unwrap(),
            2 => MapModel::lsv(0.8).unwrap(),
            _ => MapModel::gauss(10_000).unwrap(),
        };
        let bm = m.require_branches().unwrap();
        let Ok((zs, cs)) = orbit_chain(&m, x, n) else { return Ok(()) };
        // Keep the targets inside the unit interval.
        let room = 0.5 * zs[n].min(1.0 - zs[n]);
        let e: Vec<f64> = e.iter().map(|v| v * (room / 1e-3).min(1.0)).collect();
        let o = pull_back_offsets(bm, &zs, &cs, &e);
        let back = push_forward_offsets(bm, &zs, &cs, &o);
        for (a, b) in e.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn inverse_branches_invert(which in 0usize..3, y in 0.0..1.0f64) {
        let m = match which {
            0 => MapModel::doubling(),
            1 => MapModel::lsv(0.3).unwrap(),
            _ => MapModel::gauss(200).unwrap(),
        };
        let bm = m.require_branches().unwrap();
        for b in 0..bm.branch_count() {
            let x = bm.inverse(b, y);
            let (lo, hi) = bm.branch_domain(b);
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            prop_assert!((bm.forward(b, x) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rle_round_trips(word in prop::collection::vec(0u32..3, 0..200)) {
        let r = rle(&word);
        let back: Vec<u32> = r.iter().flat_map(|&(s, c)| std::iter::repeat_n(s, c as usize)).collect();
        prop_assert_eq!(back, word);
        prop_assert!(r.windows(2).all(|w| w[0].0 != w[1].0));
    }

    #[test]
    fn ols_is_exact_on_lines(a in -5.0..5.0f64, b in -3.0..3.0f64) {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, a + b * i as f64)).collect();
        let l = ols(&pts);
        prop_assert!((l.slope - b).abs() < 1e-9 && (l.intercept - a).abs() < 1e-9);
    }

    #[test]
    fn power_laws_are_recovered(gamma in 0.3..3.0f64, c in 0.1..10.0f64) {
        let mut s = StatSeries::new("tail");
        for n in 1..=500 {
            s.push(n, c * (n as f64).powf(-gamma), 0.0);
        }
        let f = tail_fit(&s, Family::Polynomial, 10, 500).unwrap();
        prop_assert!((f.param - gamma).abs() < 1e-9);
        prop_assert!(f.r2 > 1.0 - 1e-12);
    }
}
