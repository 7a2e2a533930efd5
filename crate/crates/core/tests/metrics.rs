//! Metric oracles, retrieval invariances and detection scoring.

mod common;

use common::criteria;
use mammolab::corpus::BoundingBox;
use mammolab::heads::{eval_detection, Detection};
use mammolab::retrieval::{Normalization, RetrievalIndex};
use proptest::prelude::*;

#[test]
fn metric_oracles() {
    criteria::metric_oracles().unwrap();
}

#[test]
fn clustered_fixture_retrieval() {
    let acc = criteria::retrieval_fixture().unwrap();
    assert!(acc[0] <= acc[1] && acc[1] <= acc[2] && acc[2] >= 0.8, "{acc:?}");
}

/// Integer-grid embeddings, so affine maps with power-of-two scales are exact
/// and neighbour order (ties included) cannot change.
fn gallery_and_queries() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>)> {
    (3usize..30, 1usize..5, 1usize..15).prop_flat_map(|(n, d, q)| {
        let row = prop::collection::vec((-8i32..8).prop_map(f64::from), d);
        (
            prop::collection::vec(row.clone(), n),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(row, q),
            prop::collection::vec(0usize..3, q),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn topk_accuracy_is_monotone((g, gl, q, ql) in gallery_and_queries()) {
        for mode in [Normalization::MinMax, Normalization::Standardize] {
            let index = RetrievalIndex::fit_with(&g, &gl, mode).unwrap();
            let accs: Vec<f64> = (1..=g.len()).map(|k| index.topk_accuracy(&q, &ql, k).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]), "{:?}", accs);
            // at k = n every label present in the gallery is found
            let found = ql.iter().filter(|l| gl.contains(l)).count() as f64 / ql.len() as f64;
            prop_assert_eq!(*accs.last().unwrap(), found);
        }
    }

    #[test]
    fn neighbours_survive_per_dimension_affine_maps(
        (g, gl, q, _) in gallery_and_queries(),
        scale in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0]),
        shift in -16i32..16,
    ) {
        let map = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().enumerate().map(|(j, v)| v * scale * f64::from(1u32 << j) + f64::from(shift)).collect()).collect()
        };
        let (a, b) = (RetrievalIndex::fit(&g, &gl).unwrap(), RetrievalIndex::fit(&map(&g), &gl).unwrap());
        let mq = map(&q);
        for (x, y) in q.iter().zip(&mq) {
            prop_assert_eq!(a.query(x, g.len()).unwrap(), b.query(y, g.len()).unwrap());
        }
    }

    #[test]
    fn nearest_neighbour_of_a_gallery_item_is_a_duplicate((g, gl, _, _) in gallery_and_queries()) {
        let index = RetrievalIndex::fit(&g, &gl).unwrap();
        for (i, e) in g.iter().enumerate() {
            let first = index.query(e, 1).unwrap()[0];
            // the nearest item is an exact duplicate of the query
            prop_assert_eq!(&g[first], e, "query {} got {}", i, first);
        }
    }
}

#[test]
fn retrieval_errors() {
    let g = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let index = RetrievalIndex::fit(&g, &[0, 1]).unwrap();
    assert!(index.query(&[0.0, 0.0], 0).is_err());
    assert!(index.query(&[0.0, 0.0], 3).is_err());
    assert!(index.query(&[0.0], 1).is_err());
    assert!(RetrievalIndex::fit(&[], &[]).is_err());
}

fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
    Detection {
        bbox: BoundingBox::new(x1, y1, x2, y2, 0),
        score,
    }
}

#[test]
fn detection_iou_is_best_match_per_truth() {
    let truth = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0), BoundingBox::new(20.0, 20.0, 30.0, 30.0, 1)];
    let preds = vec![det(0.0, 0.0, 10.0, 5.0, 0.9), det(20.0, 20.0, 30.0, 30.0, 0.2)];
    let got = eval_detection(&[preds, vec![], vec![]], &[truth, vec![BoundingBox::new(1.0, 1.0, 2.0, 2.0, 0)], vec![]]);
    // image 1: (0.5 + 1.0) / 2, image 2: no predictions -> 0, image 3: no truth -> skipped
    assert_eq!(got, vec![0.75, 0.0]);
}
