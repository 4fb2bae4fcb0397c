use homcar::car::{build_homcar, build_icar, build_stern_cressie, CarKind, StructureMatrix};
use homcar::graph::{parse_graph, AdjacencyGraph};
use homcar::metrics::{interval_score, mab, rmse};
use homcar::spectral::{eigendecompose, marginal_variances, moore_penrose, SpectralDecomposition};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Random graph on `n` units: a spanning forest with `components` trees plus
/// extra edges inside trees, with weights in {1, 2, 0.5} when `weighted`.
fn graph_strategy(max_n: usize, max_components: usize) -> impl Strategy<Value = AdjacencyGraph> {
    (2..=max_n, 1..=max_components, any::<u64>(), any::<bool>()).prop_map(|(n, k, seed, weighted)| {
        let k = k.min(n / 2).max(1);
        let mut state = seed | 1;
        let mut next = move |m: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % m as u64) as usize
        };
        let comp = |i: usize| i % k;
        let mut edges = Vec::new();
        for i in k..n {
            // Parent among earlier units of the same component.
            let candidates: Vec<usize> = (0..i).filter(|&j| comp(j) == comp(i)).collect();
            let p = candidates[next(candidates.len())];
            edges.push((p, i));
        }
        for _ in 0..n / 2 {
            let (a, b) = (next(n), next(n));
            if a != b && comp(a) == comp(b) {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let weights = [1.0, 2.0, 0.5];
        let ids = (0..n).map(|i| format!("n{i}")).collect();
        AdjacencyGraph::new(
            ids,
            edges
                .into_iter()
                .map(|(a, b)| (a, b, if weighted { weights[(a + b) % 3] } else { 1.0 })),
        )
        .unwrap()
    })
}

fn connected_strategy(max_n: usize) -> impl Strategy<Value = AdjacencyGraph> {
    graph_strategy(max_n, 1)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

fn ratio(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_text_round_trip(g in graph_strategy(25, 3), with_xy in any::<bool>()) {
        let g = if with_xy {
            let xy = (0..g.len()).map(|i| [i as f64 * 0.5, (i % 3) as f64]).collect();
            g.with_centroids(xy).unwrap()
        } else {
            g
        };
        let back = parse_graph(&g.to_edge_text(), Some(&g.to_node_text())).unwrap();
        prop_assert_eq!(&back, &g);
        let degrees: usize = g.neighbor_counts().iter().sum();
        prop_assert_eq!(degrees, 2 * g.edges().len());
    }

    #[test]
    fn eccentricity_is_lipschitz(g in connected_strategy(25)) {
        let ecc = g.eccentricity().unwrap();
        for e in g.edges() {
            prop_assert!(ecc[e.a].abs_diff(ecc[e.b]) <= 1);
        }
    }

    #[test]
    fn structure_matrix_shape(g in graph_strategy(20, 3)) {
        let components = g.connected_components().component_count;
        let q = build_icar(g.clone()).unwrap();
        let dense = q.to_dense();
        prop_assert!(max_abs(&(&dense - dense.transpose())) == 0.0);
        for i in 0..g.len() {
            for j in 0..g.len() {
                let adjacent = g.neighbors(i).iter().any(|&(k, _)| k == j);
                prop_assert_eq!(i != j && dense[(i, j)] != 0.0, adjacent);
            }
            prop_assert_eq!(dense.row(i).sum(), 0.0);
        }
        prop_assert_eq!(eigendecompose(&q).unwrap().null_count(), components);
        if components == 1 {
            let h = build_homcar(g).unwrap();
            prop_assert_eq!(eigendecompose(&h).unwrap().null_count(), 1);
        }
    }

    #[test]
    fn conditional_weights(g in connected_strategy(20)) {
        let q = build_icar(g.clone()).unwrap();
        let h = build_homcar(g.clone()).unwrap();
        let sigma = h.sigma().unwrap();
        let n = g.neighbor_counts();
        let unweighted = g.edges().iter().all(|e| e.weight == 1.0);
        for i in 0..g.len() {
            let s = q.conditional_spec(i).unwrap();
            prop_assert!((s.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if unweighted {
                let hs = h.conditional_spec(i).unwrap();
                for (j, w) in hs.neighbors.iter().zip(&hs.mean_weights) {
                    let expected = sigma[*j] / (n[i] as f64 * sigma[i]);
                    prop_assert!((w - expected).abs() < 1e-12);
                }
            }
        }
        let lambda = marginal_variances(&q, 1.0).unwrap().variances;
        let non_constant = ratio(&lambda) > 1.0 + 1e-9;
        let null = &h.null_directions().unwrap()[0];
        let spread = null.max() - null.min();
        prop_assert_eq!(spread.abs() > 1e-9, non_constant);
    }

    #[test]
    fn stern_cressie_partial_correlations(g in connected_strategy(15), phi in 0.05f64..0.95) {
        let e: Vec<f64> = (0..g.len()).map(|i| 1.0 + (i % 4) as f64).collect();
        let sc = build_stern_cressie(g, &e, phi).unwrap();
        let is_sc = matches!(sc.kind(), CarKind::SternCressie { .. });
        prop_assert!(is_sc);
        for pc in sc.partial_correlations() {
            prop_assert!((pc.value - phi).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudoinverse_identities(g in connected_strategy(30)) {
        let q = build_icar(g).unwrap();
        let dense = q.to_dense();
        let p = moore_penrose(&q).unwrap();
        prop_assert!(max_abs(&(&dense * &p * &dense - &dense)) < 1e-8);
        prop_assert!(max_abs(&(&p * &dense * &p - &p)) < 1e-8);
        let qp = &dense * &p;
        prop_assert!(max_abs(&(&qp - qp.transpose())) < 1e-8);
        let ones = DVector::from_element(dense.nrows(), 1.0);
        prop_assert!((&p * ones).amax() < 1e-9);
    }

    #[test]
    fn orthogonal_consistency(g in connected_strategy(12), seed in any::<u64>()) {
        let q = build_icar(g).unwrap();
        let n = q.dim();
        let mut state = seed | 1;
        let random = DMatrix::from_fn(n, n, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let v = random.qr().q();
        let dense = q.to_dense();
        let rotated = &v * &dense * v.transpose();
        let rotated = (&rotated + rotated.transpose()) * 0.5;
        let lhs = SpectralDecomposition::of_symmetric(&rotated).unwrap().pseudoinverse();
        let rhs = &v * moore_penrose(&q).unwrap() * v.transpose();
        prop_assert!(max_abs(&(lhs - rhs)) < 1e-8);
    }

    #[test]
    fn diagonal_inconsistency_witness(a in 0.3f64..3.0, b in 0.3f64..3.0, c in 0.3f64..3.0) {
        prop_assume!((a - b).abs() > 0.1 || (b - c).abs() > 0.1);
        let q = build_icar(AdjacencyGraph::lattice(1, 3).unwrap()).unwrap().to_dense();
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![a, b, c]));
        let l_inv = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / a, 1.0 / b, 1.0 / c]));
        let scaled = &l * &q * &l;
        let lhs = SpectralDecomposition::of_symmetric(&scaled).unwrap().pseudoinverse();
        let rhs = &l_inv * SpectralDecomposition::of_symmetric(&q).unwrap().pseudoinverse() * &l_inv;
        prop_assert!(max_abs(&(lhs - rhs)) > 1e-3);
    }

    // Holds for binary adjacency with at least four units; the three-unit
    // path and some small weighted graphs are exceptions (see the P3 test).
    #[test]
    fn homcar_reduces_variance_spread(g in connected_strategy(30)) {
        prop_assume!(g.len() >= 4 && g.edges().iter().all(|e| e.weight == 1.0));
        let q = build_icar(g.clone()).unwrap();
        let h: StructureMatrix = build_homcar(g).unwrap();
        let vi = marginal_variances(&q, 1.0).unwrap().variances;
        let vh = marginal_variances(&h, 1.0).unwrap().variances;
        if ratio(&vi) > 1.0 + 1e-9 {
            prop_assert!(ratio(&vh) < ratio(&vi));
            prop_assert!(vh.iter().any(|x| (x - 1.0).abs() > 1e-9));
        }
    }

    #[test]
    fn accuracy_metrics_non_negative(values in prop::collection::vec(-3.0f64..3.0, 2..40)) {
        let n = values.len() / 2;
        let est = DMatrix::from_column_slice(n, 1, &values[..n]);
        let truth = DMatrix::from_column_slice(n, 1, &values[n..2 * n]);
        prop_assert!(mab(&est, &truth).unwrap() >= 0.0);
        prop_assert!(rmse(&est, &truth).unwrap() >= 0.0);
        prop_assert_eq!(rmse(&est, &est).unwrap(), 0.0);
    }

    #[test]
    fn interval_score_properties(lo in -2.0f64..0.0, hi in 0.0f64..2.0, t in -1.0f64..1.0, grow in 0.0f64..1.0) {
        let s = interval_score(lo, hi, t, 0.05).unwrap();
        prop_assert!(s >= interval_score(t, t, t, 0.05).unwrap());
        if lo <= t && t <= hi {
            let wider = interval_score(lo - grow, hi + grow, t, 0.05).unwrap();
            prop_assert!((wider - s - 2.0 * grow).abs() < 1e-12);
        }
    }
}

/// Independent pseudoinverse: (A + nn')^{-1} - nn' for a unit null vector n.
fn pinv_via_null(a: &DMatrix<f64>, null: &DVector<f64>) -> DMatrix<f64> {
    let n = null.normalize();
    let nn = &n * n.transpose();
    (a + &nn).try_inverse().unwrap() - nn
}

#[test]
fn homcar_on_three_unit_path_widens_spread() {
    let g = parse_graph("a,b\nb,c\n", None).unwrap();
    let h = build_homcar(g).unwrap();
    let sigma = DVector::from_vec(vec![5.0f64.sqrt() / 3.0, 2.0f64.sqrt() / 3.0, 5.0f64.sqrt() / 3.0]);
    let oracle = pinv_via_null(&h.to_dense(), &sigma.map(|s| 1.0 / s));
    let v = marginal_variances(&h, 1.0).unwrap().variances;
    let exact = [53.0 / 45.0, 4.0 / 9.0, 53.0 / 45.0];
    for i in 0..3 {
        assert!((oracle[(i, i)] - exact[i]).abs() < 1e-12);
        assert!((v[i] - exact[i]).abs() < 1e-12);
    }
    assert!((ratio(&v) - 2.65).abs() < 1e-12);
}
