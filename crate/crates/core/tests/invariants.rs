use isogp::dissimilarity::{euclidean_distances, DissimilarityMatrix, PointSet};
use isogp::graph::{build_eps_graph, component_count, connected_components, dijkstra_from, zero_dim_persistence};
use isogp::model::PairBatch;
use isogp::nakagami::{cdf, log_survival, NakagamiParams};
use isogp::special::{reg_lower_gamma, reg_upper_gamma};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, n * d).prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euclidean_is_a_metric(x in (2usize..12, 1usize..5).prop_flat_map(|(n, d)| points(n, d))) {
        let e = euclidean_distances(&PointSet::new(x.clone(), None).unwrap());
        let n = e.len();
        for i in 0..n {
            prop_assert_eq!(e.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(e.get(i, j), e.get(j, i));
                prop_assert!((e.get(i, j) - (x.row(i) - x.row(j)).norm()).abs() <= 1e-12 * (1.0 + e.get(i, j)));
                for k in 0..n {
                    prop_assert!(e.get(i, k) <= e.get(i, j) + e.get(j, k) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn persistence_agrees_with_thresholded_graphs(
        x in (2usize..25).prop_flat_map(|n| points(n, 2)),
        frac in 0.0f64..1.2,
    ) {
        let e = euclidean_distances(&PointSet::new(x, None).unwrap());
        let pers = zero_dim_persistence(&e);
        let max = e.upper_triangle().into_iter().fold(0.0, f64::max);
        let eps = (frac * max).max(1e-9);
        let g = build_eps_graph(&e, eps).unwrap();
        let labels = connected_components(&g);
        prop_assert_eq!(component_count(&labels), pers.components_at(eps));
        // Shortest paths are finite exactly within a component and dominate the direct distance.
        let d0 = dijkstra_from(&g, 0);
        for j in 0..e.len() {
            prop_assert_eq!(d0[j].is_finite(), labels[j] == labels[0]);
            if d0[j].is_finite() {
                prop_assert!(d0[j] >= e.get(0, j) - 1e-9);
            }
        }
    }

    #[test]
    fn gamma_functions_are_complementary(a in 0.5f64..50.0, x in 0.0f64..100.0) {
        let p = reg_lower_gamma(a, x).unwrap();
        let q = reg_upper_gamma(a, x).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
        prop_assert!((p + q - 1.0).abs() < 1e-13);
    }

    #[test]
    fn survival_is_decreasing(m in 0.5f64..20.0, omega in 0.1f64..10.0, s in 0.0f64..5.0, ds in 1e-3f64..1.0) {
        let p = NakagamiParams::new(m, omega).unwrap();
        prop_assert!(log_survival(s + ds, p).unwrap() <= log_survival(s, p).unwrap());
        prop_assert!(cdf(s + ds, p).unwrap() >= cdf(s, p).unwrap());
    }

    #[test]
    fn subsample_scales_restore_branch_totals(n in 6usize..30, k in 1usize..200, counter in 0u64..50, stratified: bool) {
        let x = DMatrix::from_fn(n, 2, |i, d| ((i * 7 + d * 3) % 11) as f64 + 0.1 * i as f64);
        let e = euclidean_distances(&PointSet::new(x, None).unwrap());
        let mut upper = e.upper_triangle();
        upper.sort_by(f64::total_cmp);
        let eps = upper[upper.len() / 3];
        let b = if stratified { PairBatch::stratified(&e, eps, k, 1, counter) } else { PairBatch::subsample(&e, eps, k, 1, counter) };
        let nb_total = upper.iter().filter(|&&v| v < eps).count() as f64;
        let cens_total = upper.len() as f64 - nb_total;
        let nb = b.pairs().iter().filter(|&&(i, j)| e.get(i, j) < eps).count() as f64;
        let cens = b.pairs().len() as f64 - nb;
        let mut seen = b.pairs().to_vec();
        seen.dedup();
        prop_assert_eq!(seen.len(), b.pairs().len());
        prop_assert!(b.pairs().iter().all(|&(i, j)| i < j && j < n));
        if nb > 0.0 {
            prop_assert!((b.neighbor_scale * nb - nb_total).abs() < 1e-9);
        }
        if cens > 0.0 {
            prop_assert!((b.censored_scale * cens - cens_total).abs() < 1e-9);
        }
    }
}

#[test]
fn rejects_asymmetric_and_negative_matrices() {
    let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
    assert!(DissimilarityMatrix::new(asym).is_err());
    let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
    assert!(DissimilarityMatrix::new(neg).is_err());
}
