use ndarray::{Array1, Array2};
use proptest::prelude::*;

use taam::autodiff::{layer_norm, softmax_rows, Reduction, Tape, LAYER_NORM_EPS};
use taam::classifier::argmax_classes;
use taam::graph::{normalize_adjacency, propagate, SparseGraph};
use taam::harness::{RunOptions, RunState};
use taam::io::checkpoint::{decode, encode};
use taam::nsm::{modulate, node_attention, Modulator, SiteParams};
use taam::prototype::{Prototype, PrototypeBank};
use taam::trainer::{weighted_ce, Adam, AdamConfig};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (1usize..7, 1usize..7).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

/// A random undirected graph on `n` nodes with 3 features per node.
fn graph() -> impl Strategy<Value = SparseGraph> {
    (2usize..12).prop_flat_map(|n| {
        (matrix(n, 3, -3.0, 3.0), prop::collection::vec((0..n, 0..n), 0..3 * n))
            .prop_map(move |(x, edges)| SparseGraph::from_edges(x, vec![0; n], edges).unwrap())
    })
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn site(width: usize, heads: usize, d_e: usize) -> impl Strategy<Value = (SiteParams, Array2<f64>)> {
    (
        matrix(heads * 2 * width, d_e, -1.0, 1.0),
        matrix(heads * 2 * width, 1, -1.0, 1.0),
        matrix(heads, width, -1.0, 1.0),
        matrix(1, heads, -1.0, 1.0),
        matrix(d_e, 1, -1.0, 1.0),
    )
        .prop_map(|(wb, bb, wa, ba, e)| (SiteParams::new(wb, bb, wa, ba).unwrap(), e))
}

/// Straight-line modulation of one node.
fn modulate_node(site: &SiteParams, e: &Array2<f64>, h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let k = site.heads();
    let wb = site.w_base();
    let bb = site.b_base();
    let mut base = vec![vec![0.0; 2 * d]; k];
    for (r, row) in base.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let i = r * 2 * d + c;
            *slot = bb[[i, 0]] + (0..e.nrows()).map(|q| wb[[i, q]] * e[[q, 0]]).sum::<f64>();
        }
    }
    let scores: Vec<f64> = (0..k)
        .map(|r| site.b_attn()[[0, r]] + (0..d).map(|c| site.w_attn()[[r, c]] * h[c]).sum::<f64>())
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|x| x / z).collect();
    let film: Vec<f64> = (0..2 * d)
        .map(|c| (0..k).map(|r| alpha[r] * base[r][c]).sum())
        .collect();
    let mean = h.iter().sum::<f64>() / d as f64;
    let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    (0..d)
        .map(|c| film[c] * (h[c] - mean) / (var + LAYER_NORM_EPS).sqrt() + film[d + c])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(-1e4, 1e4)) {
        let p = softmax_rows(&x).unwrap();
        for row in p.rows() {
            prop_assert!(row.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(x in sized_matrix(-50.0, 50.0)) {
        let (y, _) = layer_norm(&x, LAYER_NORM_EPS);
        for row in y.rows() {
            prop_assert!(row.mean().unwrap().abs() <= 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn propagation_is_linear_and_non_expansive(
        g in graph(),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        hops in 0usize..4,
    ) {
        let s = normalize_adjacency(&g);
        let x = g.features().clone();
        let y = x.mapv(|v| v * v - 1.0);
        let lhs = propagate(&s, &(&x * a + &y * b), hops).unwrap().into_matrix();
        let rhs = propagate(&s, &x, hops).unwrap().into_matrix() * a
            + propagate(&s, &y, hops).unwrap().into_matrix() * b;
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-9);

        let dense = s.to_dense();
        prop_assert!(max_abs_diff(&dense, &dense.t().to_owned()) <= 1e-15);
        let out = propagate(&s, &x, hops).unwrap().into_matrix();
        for c in 0..x.ncols() {
            let before = x.column(c).dot(&x.column(c)).sqrt();
            let after = out.column(c).dot(&out.column(c)).sqrt();
            prop_assert!(after <= before + 1e-9);
        }
    }

    #[test]
    fn induced_subgraph_keeps_exactly_the_inner_edges(
        (g, keep) in graph().prop_flat_map(|g| {
            let n = g.num_nodes();
            (Just(g), prop::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n))
        }),
    ) {
        let sub = g.induced_subgraph(&keep).unwrap();
        let mut expected = 0;
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                if g.has_edge(a, b) {
                    expected += 1;
                }
            }
        }
        prop_assert_eq!(sub.graph.num_edges(), expected);
        prop_assert_eq!(&sub.new_to_old, &keep);
        for (i, &a) in keep.iter().enumerate() {
            for (j, &b) in keep.iter().enumerate() {
                prop_assert_eq!(sub.graph.has_edge(i, j), g.has_edge(a, b));
            }
        }
    }

    #[test]
    fn nearest_task_is_the_brute_force_argmin(
        stored in prop::collection::vec(prop::collection::vec(-3i32..3, 2), 1..8),
        query in prop::collection::vec(-3i32..3, 2),
    ) {
        // Integer coordinates make exact ties common.
        let to_proto = |v: &Vec<i32>| Prototype::new(Array1::from_iter(v.iter().map(|&x| x as f64)), 1).unwrap();
        let mut bank = PrototypeBank::new();
        for (i, v) in stored.iter().enumerate() {
            let m = Modulator::init(&[2], 2, 1, i as u64).unwrap();
            bank.commit(to_proto(v), m).unwrap();
        }
        let sq = |v: &Vec<i32>| v.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<i32>();
        let best = stored.iter().map(sq).min().unwrap();
        let expected = stored.iter().position(|v| sq(v) == best).unwrap() + 1;
        prop_assert_eq!(bank.nearest_task(&to_proto(&query)).unwrap(), expected);
    }

    #[test]
    fn prediction_ignores_monotone_transforms(
        z in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c, -5.0, 5.0)),
        scale in 0.1..10.0f64,
        shift in -10.0..10.0f64,
    ) {
        let classes: Vec<usize> = (0..z.ncols()).map(|j| 10 + 3 * j).collect();
        let base = argmax_classes(&z, &classes);
        prop_assert_eq!(&argmax_classes(&z.mapv(|v| scale * v + shift), &classes), &base);
        prop_assert_eq!(&argmax_classes(&z.mapv(|v| v.powi(3)), &classes), &base);
        let rowwise = &z + &Array2::from_shape_fn((z.nrows(), 1), |(i, _)| i as f64 * shift);
        prop_assert_eq!(&argmax_classes(&rowwise, &classes), &base);
    }

    #[test]
    fn attention_is_convex_and_permutation_equivariant(
        (params, e, h, perm) in (1usize..5, 1usize..4, 2usize..7).prop_flat_map(|(d, k, n)| {
            (
                site(d, k, 3),
                matrix(n, d, -3.0, 3.0),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
                .prop_map(|((p, e), h, perm)| (p, e, h, perm))
        }),
    ) {
        let alpha = node_attention(&params, &h).unwrap();
        for row in alpha.rows() {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
        let out = modulate(&params, &e, &h).unwrap();
        let permuted = modulate(&params, &e, &h.select(ndarray::Axis(0), &perm)).unwrap();
        prop_assert!(max_abs_diff(&permuted, &out.select(ndarray::Axis(0), &perm)) <= 1e-12);
    }

    #[test]
    fn modulation_matches_a_straight_line_oracle(
        (params, e, h) in (1usize..5, 1usize..4, 1usize..6).prop_flat_map(|(d, k, n)| {
            (site(d, k, 3), matrix(n, d, -3.0, 3.0)).prop_map(|((p, e), h)| (p, e, h))
        }),
    ) {
        let out = modulate(&params, &e, &h).unwrap();
        for (i, row) in h.rows().into_iter().enumerate() {
            let want = modulate_node(&params, &e, &row.to_vec());
            for (c, w) in want.iter().enumerate() {
                prop_assert!((out[[i, c]] - w).abs() <= 1e-9, "node {i} col {c}: {} vs {w}", out[[i, c]]);
            }
        }
    }

    #[test]
    fn weighted_ce_matches_a_straight_line_oracle(
        (z, targets) in (1usize..6, 1usize..5).prop_flat_map(|(n, k)| {
            (matrix(n, k, -30.0, 30.0), prop::collection::vec(0..k, n))
        }),
        weights in prop::collection::vec(0.01..3.0f64, 5),
        mean in any::<bool>(),
    ) {
        let k = z.ncols();
        let w = &weights[..k];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            total += w[t] * (lse - row[t]);
        }
        let (reduction, expected) = if mean {
            (Reduction::Mean, total / targets.len() as f64)
        } else {
            (Reduction::Sum, total)
        };
        let got = weighted_ce(&z, &targets, w, reduction).unwrap();
        prop_assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn adam_matches_a_scalar_reference(
        start in prop::collection::vec(-2.0..2.0f64, 3),
        grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 100),
    ) {
        let cfg = AdamConfig::default();
        let mut p = Array2::from_shape_vec((1, 3), start.clone()).unwrap();
        let mut adam = Adam::new(cfg, [&p]);
        for g in &grads {
            let ga = Array2::from_shape_vec((1, 3), g.clone()).unwrap();
            adam.step(&mut [&mut p], &[&ga]).unwrap();
        }
        for (c, &p0) in start.iter().enumerate() {
            let (mut x, mut m, mut v) = (p0, 0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                let g = g[c] + 5e-4 * x;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
                x -= 0.005 * mh / (vh.sqrt() + 1e-8);
            }
            prop_assert!((p[[0, c]] - x).abs() <= 1e-12, "{} vs {x}", p[[0, c]]);
        }
    }

    #[test]
    fn checkpoints_round_trip(
        input_dim in 1usize..6,
        hidden in 1usize..6,
        seed in any::<u64>(),
        rows in prop::collection::vec(0.0..=100.0f64, 1..4),
    ) {
        let opts = RunOptions { hidden_dim: hidden, ..RunOptions::default() };
        let mut state = RunState::fresh(input_dim, 3, &opts, seed).unwrap();
        for t in 1..=rows.len() {
            state.matrix.push_row(rows[..t].to_vec()).unwrap();
        }
        let cfg = serde_json::json!({ "seed": seed.to_string() });
        let back = decode(&encode(&state, &cfg).unwrap()).unwrap();
        prop_assert_eq!(back.state, state);
        prop_assert_eq!(back.config, cfg);
    }
}

#[test]
fn tape_softmax_survives_huge_logits() {
    let mut tape = Tape::new();
    let x = tape.param(ndarray::array![[1e4, -1e4, 0.0]]);
    let p = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(p).row(0).to_vec(), vec![1.0, 0.0, 0.0]);
}
