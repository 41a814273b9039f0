//! Property tests over the crate's core invariants: orthonormality of the
//! exponentiated blocks, preservation of similarity structure, distance
//! bounds, and file-format round trips.

use bt2_core::data::{decode_embeddings, encode_embeddings};
use bt2_core::linalg::{
    build_skew, expm_skew, orthonormality_defect, skew_param_len, vec_dot, vec_norm, SkewParams,
};
use bt2_core::retrieval::{distance, EmbeddingRecord};
use proptest::prelude::*;

fn theta_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, skew_param_len(dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exponentiated_skew_is_orthonormal(dim in prop::sample::select(vec![2usize, 4, 8, 16]),
                                         seed in any::<u64>()) {
        let mut theta = Vec::with_capacity(skew_param_len(dim));
        let mut state = seed;
        for _ in 0..skew_param_len(dim) {
            // cheap deterministic spread over [-3, 3]
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            theta.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 6.0 - 3.0);
        }
        let p = expm_skew(&build_skew(&SkewParams::new(dim, theta).unwrap())).unwrap();
        prop_assert!(orthonormality_defect(p.matrix()).unwrap() <= 1e-8);
    }

    #[test]
    fn rotations_preserve_dots_and_norms(theta in theta_strategy(6),
                                         u in prop::collection::vec(-1.0f64..1.0, 6),
                                         v in prop::collection::vec(-1.0f64..1.0, 6)) {
        let p = expm_skew(&build_skew(&SkewParams::new(6, theta).unwrap())).unwrap();
        let pu = p.apply(&u).unwrap();
        let pv = p.apply(&v).unwrap();
        prop_assert!((vec_dot(&u, &v) - vec_dot(&pu, &pv)).abs() <= 1e-9);
        prop_assert!((vec_norm(&pu) - vec_norm(&u)).abs() <= 1e-9);
    }

    #[test]
    fn distance_symmetric_bounded_and_self_minimal(
        a in prop::collection::vec(-2.0f64..2.0, 1..12),
        b in prop::collection::vec(-2.0f64..2.0, 1..12),
    ) {
        let nonzero = |v: &[f64]| v.iter().any(|x| x.abs() > 1e-3);
        prop_assume!(nonzero(&a[..a.len().min(b.len())]) && nonzero(&b[..a.len().min(b.len())]));
        let d_ab = distance(&a, &b).unwrap();
        let d_ba = distance(&b, &a).unwrap();
        prop_assert_eq!(d_ab.to_bits(), d_ba.to_bits());
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&d_ab));
        prop_assert!((distance(&a, &a).unwrap() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn embedding_store_round_trips(
        rows in prop::collection::vec(
            (any::<u64>(), 0u32..64, prop::collection::vec(-1e3f32..1e3, 5)),
            0..20,
        )
    ) {
        // distinct ids, f32-representable payload
        let mut seen = std::collections::BTreeSet::new();
        let records: Vec<EmbeddingRecord> = rows
            .into_iter()
            .filter(|(id, _, _)| seen.insert(*id))
            .map(|(id, label, v)| EmbeddingRecord {
                id,
                label,
                vector: v.into_iter().map(f64::from).collect(),
                model_tag: "prop".into(),
            })
            .collect();
        let bytes = encode_embeddings(&records).unwrap();
        let store = decode_embeddings(&bytes).unwrap();
        prop_assert_eq!(&store.records, &records);
        prop_assert!(store.labels_present);
        prop_assert_eq!(encode_embeddings(&store.records).unwrap(), bytes);
    }
}
