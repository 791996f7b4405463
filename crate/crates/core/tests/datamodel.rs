use diffrank_core::datamodel::{build_response_matrix, mask_holdout, Completeness, Response, ResponseMatrix};
use diffrank_core::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;

proptest! {
    #[test]
    fn build_is_order_insensitive(
        cells in prop::collection::btree_map((0u8..6, 0u8..6), 0u8..2, 1..30),
        seed in any::<u64>(),
    ) {
        let responses: Vec<Response> = cells
            .iter()
            .map(|(&(s, q), &y)| Response::new(format!("s{s}"), format!("q{q}"), y))
            .collect();
        let mut shuffled = responses.clone();
        shuffled.shuffle(&mut rng::seeded(seed));
        let a = build_response_matrix(&responses, Completeness::Sparse).unwrap();
        let b = build_response_matrix(&shuffled, Completeness::Sparse).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn independent_masks_overlap_like_fraction_squared() {
    let rows = vec![vec![1u8; 200]; 60];
    let m = ResponseMatrix::from_rows(&rows).unwrap();
    let cells = 12_000.0;
    let f = 0.2;
    for (s1, s2) in [(1u64, 2u64), (3, 4), (42, 43)] {
        let a = mask_holdout(&m, f, s1).unwrap().holdout_mask.unwrap();
        let b = mask_holdout(&m, f, s2).unwrap().holdout_mask.unwrap();
        let overlap = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64 / cells;
        let sigma = (f * f * (1.0 - f * f) / cells).sqrt();
        assert!((overlap - f * f).abs() <= 3.0 * sigma, "overlap {overlap}");
    }
}
