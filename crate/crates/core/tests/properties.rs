mod support;

use driftmoe::drift::{median_bandwidth, mmd_squared_biased, ScoreHistory, WindowPair};
use driftmoe::experts::{CyclicRelation, Expert, ExpertKind, ExpertShape};
use driftmoe::manager::profile;
use driftmoe::router::{route, Router, RouterKind};
use driftmoe::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use support::{random, rng};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 1..12)
}

fn window(n: usize, v: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, n * v).prop_map(move |d| Tensor::new(&[n, v], d).unwrap())
}

fn window_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..12, 2usize..12, 1usize..5).prop_flat_map(|(nr, nc, v)| (window(nr, v), window(nc, v)))
}

proptest! {
    #[test]
    fn gates_are_a_sparse_distribution(l in logits(), k in 1usize..14) {
        let g = route(&l, k).unwrap();
        let nonzero = g.weights.iter().filter(|&&w| w != 0.0).count();
        prop_assert_eq!(nonzero, k.min(l.len()));
        prop_assert_eq!(g.active.len(), k.min(l.len()));
        prop_assert!(g.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(g.clamped, k > l.len());
        // every kept logit is at least as large as every dropped one
        let kept_min = g.active.iter().map(|&i| l[i]).fold(f64::INFINITY, f64::min);
        for (i, &x) in l.iter().enumerate() {
            if !g.active.contains(&i) {
                prop_assert!(x <= kept_min);
            }
        }
    }

    #[test]
    fn ties_go_to_the_lower_index(e in 1usize..10, k in 1usize..10, c in -5.0..5.0f64) {
        let g = route(&vec![c; e], k).unwrap();
        prop_assert_eq!(g.active, (0..k.min(e)).collect::<Vec<_>>());
        prop_assert_eq!(route(&vec![c; e], k).unwrap().weights, g.weights);
    }

    #[test]
    fn routing_commutes_with_expert_order(l in prop::collection::vec(-10.0..10.0f64, 2..8), k in 1usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..l.len()).collect();
            p.shuffle(&mut r);
            p
        };
        let permuted: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
        let a = route(&l, k).unwrap();
        let b = route(&permuted, k).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.weights[j] - a.weights[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_is_nonnegative_and_symmetric((a, b) in window_pair()) {
        let sigma = median_bandwidth(&a).unwrap();
        let pair = WindowPair::new(a, b).unwrap();
        let m = mmd_squared_biased(&pair, sigma).unwrap();
        prop_assert!(m >= -1e-12);
        let s = mmd_squared_biased(&pair.swapped(), sigma).unwrap();
        prop_assert_eq!(m.to_bits(), s.to_bits());
    }

    #[test]
    fn mmd_of_identical_windows_is_zero(a in (2usize..12, 1usize..5).prop_flat_map(|(n, v)| window(n, v))) {
        let sigma = median_bandwidth(&a).unwrap();
        let pair = WindowPair::new(a.clone(), a).unwrap();
        prop_assert_eq!(mmd_squared_biased(&pair, sigma).unwrap(), 0.0);
    }

    #[test]
    fn mmd_with_median_bandwidth_ignores_scale((a, b) in window_pair(), c in 0.1..10.0f64) {
        let m = mmd_squared_biased(&WindowPair::new(a.clone(), b.clone()).unwrap(), median_bandwidth(&a).unwrap()).unwrap();
        let (sa, sb) = (a.map(|x| x * c), b.map(|x| x * c));
        let sigma = median_bandwidth(&sa).unwrap();
        let ms = mmd_squared_biased(&WindowPair::new(sa, sb).unwrap(), sigma).unwrap();
        prop_assert!((m - ms).abs() <= 1e-9, "{m} vs {ms}");
    }

    #[test]
    fn threshold_grows_with_lambda(scores in prop::collection::vec(0.0..1.0f64, 10..60), l1 in 0.0..5.0f64, dl in 0.0..5.0f64) {
        let mut h = ScoreHistory::new(50, 10);
        scores.iter().for_each(|&s| h.push(s));
        let t1 = h.threshold(l1).unwrap();
        let t2 = h.threshold(l1 + dl).unwrap();
        prop_assert!(t2 >= t1);
    }

    #[test]
    fn experts_keep_the_sequence_shape(n in 2usize..=16, wide in any::<bool>(), r in 1usize..4, seed in 0u64..1000) {
        let d = if wide { 8 } else { 4 };
        let mut g = rng(seed);
        let shape = ExpertShape { d_model: d, trend_window: 5, conv_kernel: 3 };
        let x = random(&[r * n, d], &mut g);
        for kind in ExpertKind::ALL {
            let mut store = ParamStore::new();
            let e = Expert::new(&mut store, kind, 0, &shape, &mut g).unwrap();
            let mut tape = Tape::inference(&store);
            let xv = tape.constant(x.clone());
            let y = e.forward(&mut tape, xv, n).unwrap();
            prop_assert_eq!(tape.value(y).shape(), &[r * n, d][..]);
            prop_assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fluctuation_expert_is_causal(n in 3usize..12, t in 0usize..12, seed in 0u64..1000) {
        let t = t % n;
        let d = 4;
        let mut g = rng(seed);
        let mut store = ParamStore::new();
        let shape = ExpertShape { d_model: d, trend_window: 3, conv_kernel: 3 };
        let e = Expert::new(&mut store, ExpertKind::Fluctuation, 0, &shape, &mut g).unwrap();
        let x = random(&[2 * n, d], &mut g);
        let mut bumped = x.clone();
        bumped.data_mut()[t * d] += 1.0;
        let run = |x: &Tensor| {
            let mut tape = Tape::inference(&store);
            let xv = tape.constant(x.clone());
            let y = e.forward(&mut tape, xv, n).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&x), run(&bumped));
        for row in 0..2 * n {
            let changed = a.row(row) != b.row(row);
            if row < t || row >= n {
                prop_assert!(!changed, "row {row} moved after bumping row {t}");
            }
        }
    }

    #[test]
    fn moving_average_is_low_pass(n in 4usize..20, w in 2usize..8, c in -5.0..5.0f64) {
        let w = w.min(n);
        let store = ParamStore::new();
        let mut tape = Tape::inference(&store);
        let flat = tape.constant(Tensor::new(&[n, 1], vec![c; n]).unwrap());
        let y = tape.moving_average(flat, w, n).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
        // alternating input: interior outputs shrink to at most 1/w
        let alt: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = tape.constant(Tensor::new(&[n, 1], alt).unwrap());
        let y = tape.moving_average(a, w, n).unwrap();
        let out = tape.value(y).data();
        prop_assert!(out.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let interior = &out[w / 2..n.saturating_sub(w - 1 - w / 2).max(w / 2)];
        prop_assert!(interior.iter().all(|v| v.abs() <= 1.0 / w as f64 + 1e-12));
    }

    #[test]
    fn relation_mixing_is_row_stochastic(v in 1usize..6, n in 1usize..5, cycle in 1usize..8, origin in 0usize..100, seed in 0u64..1000) {
        let mut g = rng(seed);
        let mut store = ParamStore::new();
        let rel = CyclicRelation::new(&mut store, "rel", v, cycle, &mut g).unwrap();
        let h = random(&[v * n, 4], &mut g);
        let mut tape = Tape::inference(&store);
        let hv = tape.constant(h);
        let a = rel.mixing(&mut tape, hv, origin).unwrap();
        let a = tape.value(a);
        prop_assert_eq!(a.shape(), &[v, v][..]);
        for r in 0..v {
            prop_assert!(a.row(r).iter().all(|&x| x >= 0.0));
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn profiler_scores_are_fractions(series in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 8..64), 1..4)) {
        let rep = profile(&series).unwrap();
        for s in [rep.s_trend, rep.s_sea, rep.s_fluc] {
            prop_assert!((0.0..=1.0).contains(&s), "{rep:?}");
        }
    }
}

#[test]
fn gates_follow_head_rows_when_they_are_reordered() {
    let (d, h, e, n) = (4, 6, 5, 4);
    for seed in 0..20 {
        let mut g = rng(seed);
        let mut store = ParamStore::new();
        let mut router = Router::new(&mut store, "r", RouterKind::Gru, d, h, 2, 4, &mut g);
        for id in 0..e as u64 {
            router.head.add_base(&mut store, &format!("r.head{id}"), id, h, &mut g);
        }
        let x = random(&[2 * n, d], &mut g);
        let gates = |router: &Router| {
            let mut tape = Tape::inference(&store);
            let xv = tape.constant(x.clone());
            let out = router.forward(&mut tape, xv, 2, n).unwrap();
            tape.value(out.gates).clone()
        };
        let base = gates(&router);
        let perm = [3, 0, 4, 2, 1];
        let mut shuffled = router.clone();
        shuffled.head.rows = perm.iter().map(|&i| router.head.rows[i].clone()).collect();
        let moved = gates(&shuffled);
        for r in 0..2 * n {
            for (j, &i) in perm.iter().enumerate() {
                assert!((moved.row(r)[j] - base.row(r)[i]).abs() < 1e-12);
            }
        }
    }
}
