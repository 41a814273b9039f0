//! The self-check property suite: one line per property, nonzero exit on
//! any failure. A test-only fault hook flips the skew mirror sign so the
//! orthonormality check can be seen to catch a real defect.

use bt2_core::analysis::{lemma1_bound, lemma1_search};
use bt2_core::data::{decode_dataset, decode_embeddings, encode_dataset, encode_embeddings};
use bt2_core::grad::{finite_diff_check, Graph};
use bt2_core::linalg::{
    build_skew, expm_skew, orthonormality_defect, skew_param_len, vec_dot, DenseMatrix,
    SkewParams,
};
use bt2_core::model::{decode_checkpoint, encode_checkpoint, upper_bound_embed, UpperBoundConfig};
use bt2_core::retrieval::{
    distance, evaluate, rank_gallery, EmbeddingRecord, EvalOptions, Gallery,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deliberate defects injectable for testing the suite itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Builds "skew" matrices whose mirror entries have the wrong sign.
    SkewSign,
}

type Check = (&'static str, fn(Fault) -> Result<(), String>);

fn materialize_skew(dim: usize, theta: &[f64], fault: Fault) -> DenseMatrix {
    match fault {
        Fault::None => build_skew(&SkewParams::new(dim, theta.to_vec()).unwrap()),
        Fault::SkewSign => {
            // wrong mirror sign: the matrix comes out symmetric, e^A is not
            // orthonormal, and the defect check below must catch it
            let mut a = DenseMatrix::zeros(dim, dim);
            let mut k = 0;
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let v = theta[k];
                    a = set_entry(a, i, j, v);
                    a = set_entry(a, j, i, v);
                    k += 1;
                }
            }
            a
        }
    }
}

fn set_entry(m: DenseMatrix, i: usize, j: usize, v: f64) -> DenseMatrix {
    let mut data = m.data().to_vec();
    data[i * m.cols() + j] = v;
    DenseMatrix::from_vec(m.rows(), m.cols(), data).unwrap()
}

fn expm_any(a: &DenseMatrix) -> Result<DenseMatrix, String> {
    // the faulty matrix is rejected by expm_skew's precondition, so
    // exponentiate through the graph-free Taylor route: reuse expm_skew for
    // valid inputs and a plain series for the injected fault
    match expm_skew(a) {
        Ok(p) => Ok(p.matrix().clone()),
        Err(_) => {
            let n = a.rows();
            let mut sum = DenseMatrix::identity(n);
            let mut term = DenseMatrix::identity(n);
            for k in 1..=30u64 {
                term = term
                    .matmul(a)
                    .map_err(|e| e.to_string())?
                    .scale(1.0 / k as f64);
                sum = sum.add(&term).map_err(|e| e.to_string())?;
            }
            Ok(sum)
        }
    }
}

fn check_orthonormality(fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for &dim in &[2usize, 4, 8, 16, 32] {
        for _ in 0..40 {
            let theta: Vec<f64> = (0..skew_param_len(dim))
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect();
            let a = materialize_skew(dim, &theta, fault);
            let p = expm_any(&a)?;
            let defect = orthonormality_defect(&p).map_err(|e| e.to_string())?;
            if defect > 1e-8 {
                return Err(format!("defect {defect:e} at dim {dim}"));
            }
        }
    }
    Ok(())
}

fn check_dot_preservation(fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for _ in 0..100 {
        let dim = 8;
        let theta: Vec<f64> = (0..skew_param_len(dim))
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let a = materialize_skew(dim, &theta, fault);
        let p = expm_any(&a)?;
        for _ in 0..20 {
            let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mul = |x: &[f64]| -> Vec<f64> {
                (0..dim)
                    .map(|i| (0..dim).map(|j| p.at(i, j) * x[j]).sum())
                    .collect()
            };
            let (pu, pv) = (mul(&u), mul(&v));
            if (vec_dot(&u, &v) - vec_dot(&pu, &pv)).abs() > 1e-9 {
                return Err("pairwise dot product drifted past 1e-9".into());
            }
        }
    }
    Ok(())
}

fn check_inverse_by_transpose(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    for _ in 0..50 {
        let dim = 6;
        let theta: Vec<f64> = (0..skew_param_len(dim))
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let a = build_skew(&SkewParams::new(dim, theta).unwrap());
        let p = expm_skew(&a).map_err(|e| e.to_string())?;
        let p_neg = expm_skew(&a.scale(-1.0)).map_err(|e| e.to_string())?;
        let diff = p_neg
            .matrix()
            .add(&p.matrix().transpose().scale(-1.0))
            .map_err(|e| e.to_string())?;
        if diff.max_abs_entry() > 1e-10 {
            return Err(format!("inverse-by-transpose drift {:e}", diff.max_abs_entry()));
        }
    }
    Ok(())
}

fn check_gradients(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    for trial in 0..3u64 {
        // MLP composite
        let mut g = Graph::new();
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.7..0.7)).collect())
                .unwrap()
        };
        let w1 = g.parameter("w1", rand_mat(&mut rng, 6, 4));
        let b1 = g.parameter("b1", rand_mat(&mut rng, 6, 1));
        let w2 = g.parameter("w2", rand_mat(&mut rng, 3, 6));
        let x = g.input("x", rand_mat(&mut rng, 4, 1));
        let t = g.input("t", rand_mat(&mut rng, 3, 1));
        let h = g.matmul(w1, x).map_err(|e| e.to_string())?;
        let h = g.add(h, b1).map_err(|e| e.to_string())?;
        let h = g.relu(h);
        let o = g.matmul(w2, h).map_err(|e| e.to_string())?;
        let o = g.l2_normalize(o).map_err(|e| e.to_string())?;
        let loss = g.dot(o, t).map_err(|e| e.to_string())?;
        let err = finite_diff_check(&mut g, loss, 1e-5, trial).map_err(|e| e.to_string())?;
        if err > 1e-5 {
            return Err(format!("mlp gradient error {err:e}"));
        }

        // loss through the matrix exponential
        let dim = 5;
        let mut g = Graph::new();
        let theta = g.parameter(
            "theta",
            DenseMatrix::column(
                &(0..skew_param_len(dim))
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            ),
        );
        let p = g.matrix_exp_skew(theta, dim).map_err(|e| e.to_string())?;
        let gm = g.input("g", rand_mat(&mut rng, dim, dim));
        let loss = g.dot(gm, p).map_err(|e| e.to_string())?;
        let err = finite_diff_check(&mut g, loss, 1e-5, trial).map_err(|e| e.to_string())?;
        if err > 1e-6 {
            return Err(format!("matrix-exponential gradient error {err:e}"));
        }
    }
    Ok(())
}

fn brute_force_cmc1_map(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> (f64, f64) {
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for q in queries {
        let mut rows: Vec<(f64, u64, u32)> = gallery
            .iter()
            .filter(|g| g.id != q.id)
            .map(|g| (distance(&q.vector, &g.vector).unwrap(), g.id, g.label))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if rows.first().map(|r| r.2) == Some(q.label) {
            hits += 1;
        }
        let mut rel = 0usize;
        let mut s = 0.0;
        for (i, row) in rows.iter().enumerate() {
            if row.2 == q.label {
                rel += 1;
                s += rel as f64 / (i + 1) as f64;
            }
        }
        if rel > 0 {
            ap_sum += s / rel as f64;
            ap_n += 1;
        }
    }
    (hits as f64 / queries.len() as f64, ap_sum / ap_n as f64)
}

fn check_metric_oracles(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    for trial in 0..10 {
        let n = 30 + trial * 3;
        let records: Vec<EmbeddingRecord> = (0..n)
            .map(|i| EmbeddingRecord {
                id: i as u64,
                label: (i % 5) as u32,
                vector: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                model_tag: "check".into(),
            })
            .collect();
        let gallery = Gallery::new(records.clone()).map_err(|e| e.to_string())?;
        let report = evaluate("check/check", &records, &gallery, &EvalOptions::default())
            .map_err(|e| e.to_string())?;
        let (cmc1, map) = brute_force_cmc1_map(&records, &records);
        if report.cmc1 != cmc1 || report.map != map {
            return Err(format!(
                "metrics diverge from brute force: cmc1 {} vs {cmc1}, map {} vs {map}",
                report.cmc1, report.map
            ));
        }
    }
    Ok(())
}

fn check_ranking_basis_invariance(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let dim = 8;
    let records: Vec<EmbeddingRecord> = (0..30)
        .map(|i| EmbeddingRecord {
            id: i as u64,
            label: (i % 4) as u32,
            vector: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            model_tag: "check".into(),
        })
        .collect();
    let theta: Vec<f64> = (0..skew_param_len(dim))
        .map(|_| rng.gen_range(-1.5..1.5))
        .collect();
    let p = expm_skew(&build_skew(&SkewParams::new(dim, theta).unwrap()))
        .map_err(|e| e.to_string())?;
    let rotated: Vec<EmbeddingRecord> = records
        .iter()
        .map(|r| EmbeddingRecord {
            vector: p.apply(&r.vector).unwrap(),
            ..r.clone()
        })
        .collect();
    let g1 = Gallery::new(records.clone()).map_err(|e| e.to_string())?;
    let g2 = Gallery::new(rotated.clone()).map_err(|e| e.to_string())?;
    for (q, rq) in records.iter().zip(&rotated) {
        if rank_gallery(q, &g1).unwrap() != rank_gallery(rq, &g2).unwrap() {
            return Err("ranking changed under a global basis change".into());
        }
    }
    Ok(())
}

fn check_lemma1_floor(_fault: Fault) -> Result<(), String> {
    let eps = 0.05;
    let search = lemma1_search(eps, 20_000, 7).map_err(|e| e.to_string())?;
    if search.kept == 0 {
        return Err("inconclusive: no candidate satisfied the constraints".into());
    }
    let floor = 1.0 - 2.0 * eps * eps;
    let worst = search.worst_cosine.unwrap();
    if worst < floor - 1e-9 {
        return Err(format!(
            "worst cosine {worst} fell below the mirror floor {floor}"
        ));
    }
    // informational: the paper's printed closed form sits above the floor
    // and is undercut by mirrored candidates
    println!(
        "  (info) printed-bound {b:.6}: {v} sampled violations; mirror floor {floor:.6} holds",
        b = lemma1_bound(eps).unwrap(),
        v = search.violations,
    );
    Ok(())
}

fn check_upper_bound_truncation(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    for _ in 0..50 {
        let unit = |rng: &mut ChaCha8Rng, d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = bt2_core::linalg::vec_norm(&v);
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let old1 = unit(&mut rng, 6);
        let new1 = unit(&mut rng, 9);
        let gallery_vec = unit(&mut rng, 6);
        let ub = upper_bound_embed(&old1, &new1, UpperBoundConfig::new(2.0).unwrap())
            .map_err(|e| e.to_string())?;
        let d_ub = distance(&ub, &gallery_vec).unwrap();
        let d_old = distance(&old1, &gallery_vec).unwrap();
        if d_ub.to_bits() != d_old.to_bits() {
            return Err("truncated distance is not bit-identical".into());
        }
    }
    Ok(())
}

fn check_file_round_trips(_fault: Fault) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let records: Vec<EmbeddingRecord> = (0..50)
        .map(|i| EmbeddingRecord {
            id: i,
            label: (i % 7) as u32,
            vector: (0..5).map(|_| rng.gen::<f32>() as f64).collect(),
            model_tag: "rt".into(),
        })
        .collect();
    let bytes = encode_embeddings(&records).map_err(|e| e.to_string())?;
    let store = decode_embeddings(&bytes).map_err(|e| e.to_string())?;
    if store.records != records {
        return Err("embedding store round trip mismatch".into());
    }

    let ds = bt2_core::data::Dataset {
        samples: (0..40)
            .map(|i| {
                (
                    (0..4).map(|_| rng.gen::<f32>() as f64).collect::<Vec<f64>>(),
                    i % 3,
                )
            })
            .collect(),
        class_count: 3,
    };
    let bytes = encode_dataset(&ds).map_err(|e| e.to_string())?;
    let back = decode_dataset(&bytes).map_err(|e| e.to_string())?;
    if back != ds {
        return Err("dataset round trip mismatch".into());
    }

    let mut chacha = ChaCha8Rng::seed_from_u64(9);
    let model = bt2_core::model::EmbeddingModel::Embedder(bt2_core::model::EmbedderModel::init(
        4, 8, 3, 5, &mut chacha,
    ));
    let ck = model.to_checkpoint();
    let bytes = encode_checkpoint(&ck);
    if decode_checkpoint(&bytes).map_err(|e| e.to_string())? != ck {
        return Err("checkpoint round trip mismatch".into());
    }
    Ok(())
}

const CHECKS: &[Check] = &[
    ("orthonormality of exponentiated skew blocks", check_orthonormality),
    ("pairwise dot-product preservation", check_dot_preservation),
    ("rotation inverse equals transpose", check_inverse_by_transpose),
    ("gradient finite-difference agreement", check_gradients),
    ("retrieval metrics match brute force", check_metric_oracles),
    ("rankings invariant under global basis change", check_ranking_basis_invariance),
    ("trade-off search respects the mirror floor", check_lemma1_floor),
    ("upper-bound truncation exactness", check_upper_bound_truncation),
    ("file format round trips", check_file_round_trips),
];

/// Runs every property; returns true when all pass.
pub fn run(fault: Fault) -> bool {
    let mut all_ok = true;
    for (name, check) in CHECKS {
        match check(fault) {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                all_ok = false;
            }
        }
    }
    all_ok
}
