use proptest::prelude::*;

use caml::analysis::{gft_and_concentration, graph_fourier_basis, knn_graph, Laplacian};
use caml::graphs::{cross_edges, edge_weight};
use caml::meta::{apply_ema, Architecture, LearnerState, ModelConfig, TrainConfig};
use caml::nets::ParamBlocks;
use caml::tape::{Mat, Tape};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Mat::from_row_slice(rows, cols, &v))
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Mat> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #[test]
    fn flatten_round_trips(a in sized_matrix(4, 4), b in sized_matrix(4, 4)) {
        let mut p = ParamBlocks::new();
        p.insert("a", a);
        p.insert("b", b);
        let q = p.unflatten(&p.flatten()).unwrap();
        prop_assert_eq!(p.flatten(), q.flatten());
        prop_assert_eq!(p.layout(), q.layout());
    }

    #[test]
    fn cross_edges_form_a_distribution(
        (p, k) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, m, d)| (matrix(n, d), matrix(m, d))),
        gamma in 0.1f64..20.0,
    ) {
        let tape = Tape::new();
        let c = cross_edges(tape.constant(p), tape.constant(k), gamma).unwrap().value();
        prop_assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((c.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn edge_weights_are_symmetric_and_bounded(
        (a, b, u) in (1usize..8).prop_flat_map(|d| (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
        )),
    ) {
        let w = edge_weight(&a, &b, &u).unwrap();
        prop_assert_eq!(w.to_bits(), edge_weight(&b, &a, &u).unwrap().to_bits());
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn moving_average_stays_between_endpoints(h in matrix(3, 4), target in matrix(3, 4), alpha in 0.0f64..=1.0) {
        let mut x = h.clone();
        apply_ema(&mut x, &target, alpha);
        for i in 0..x.len() {
            let (lo, hi) = (h[i].min(target[i]), h[i].max(target[i]));
            prop_assert!(x[i] >= lo - 1e-12 && x[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn knn_graph_is_symmetric_with_min_degree(x in (6usize..30).prop_flat_map(|n| matrix(n, 3)), k in 1usize..5) {
        let a = knn_graph(&x, k).unwrap();
        prop_assert_eq!(&a, &a.transpose());
        for i in 0..a.nrows() {
            prop_assert_eq!(a[(i, i)], 0.0);
            prop_assert!(a.row(i).sum() >= k as f64);
        }
    }

    #[test]
    fn concentration_is_a_monotone_cdf(
        (x, s) in (6usize..25).prop_flat_map(|n| (matrix(n, 2), prop::collection::vec(-3.0f64..3.0, n))),
        normalized in any::<bool>(),
    ) {
        let kind = if normalized { Laplacian::Normalized } else { Laplacian::Combinatorial };
        let basis = graph_fourier_basis(&knn_graph(&x, 3).unwrap(), kind).unwrap();
        let r = gft_and_concentration(&s, &basis).unwrap();
        prop_assert!(r.concentration.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert_eq!(*r.concentration.last().unwrap(), 1.0);
        prop_assert!((r.coefficient_energy() - r.signal_energy).abs() <= 1e-8 * r.signal_energy.max(1.0));
        prop_assert!(basis.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn checkpoints_round_trip_any_seed(seed in any::<u64>()) {
        let train = TrainConfig { kg_nodes: 2, kg_dim: 4, n_way: 3, ..Default::default() };
        let model = ModelConfig { task_hidden: vec![5], embed_hidden: vec![6], ..Default::default() };
        let arch = Architecture::new(&model, 4, &train).unwrap();
        let state = LearnerState::init(arch.clone(), seed);
        let bytes = caml::checkpoint::to_bytes(&state);
        let back = caml::checkpoint::from_bytes(&bytes, &arch, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(caml::checkpoint::to_bytes(&back), bytes);
        prop_assert_eq!(back.digest(), state.digest());
    }
}
