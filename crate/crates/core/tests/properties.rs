use proptest::prelude::*;

use rcmd::alignment::{
    alignment_f1, chunk_scores, extract_alignment, ChunkAlignment, ChunkMap, ContribVariant,
};
use rcmd::contrastive::{clrcmd_loss, ContrastiveBatch};
use rcmd::embedding::{
    avg_pool, read_binary, read_jsonl, write_binary, write_jsonl, EmbeddingCorpus, TokenMatrix,
};
use rcmd::evaluation::{evaluate_sts, spearman, Correlation, ScoredPair};
use rcmd::matrix::DenseMatrix;
use rcmd::similarity::{batch_similarity, sim_rcmd, SimilarityMethod, Storage};
use rcmd::transport::{cmd_cost, rcmd1, rcmd2, transport_pair, PlanMethod};

fn rows(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-3.0f64..3.0, dim)
            .prop_filter("non-zero row", |r| r.iter().any(|v| v.abs() > 1e-3)),
        1..=max_len,
    )
}

fn pair(max_len: usize) -> impl Strategy<Value = (TokenMatrix, TokenMatrix)> {
    (1usize..=5)
        .prop_flat_map(move |d| (rows(max_len, d), rows(max_len, d)))
        .prop_map(|(a, b)| {
            (
                TokenMatrix::from_rows("a", a).unwrap(),
                TokenMatrix::from_rows("b", b).unwrap(),
            )
        })
}

fn rescale(m: &TokenMatrix, factors: &[f64]) -> TokenMatrix {
    let d = m.dim();
    let data = m
        .as_flat()
        .iter()
        .enumerate()
        .map(|(k, v)| v * factors[(k / d) % factors.len()])
        .collect();
    m.with_data(data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relaxations_bound_exact_distance((a, b) in pair(7)) {
        let emd = transport_pair(&a, &b, PlanMethod::Exact).unwrap().distance.value;
        prop_assert!(rcmd1(&a, &b).unwrap().1.value <= emd + 1e-9);
        prop_assert!(rcmd2(&a, &b).unwrap().1.value <= emd + 1e-9);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&emd));
    }

    #[test]
    fn distances_ignore_token_scale((a, b) in pair(6), factors in prop::collection::vec(0.01f64..100.0, 1..6)) {
        let (a2, b2) = (rescale(&a, &factors), rescale(&b, &factors));
        let (m, m2) = (cmd_cost(&a, &b).unwrap(), cmd_cost(&a2, &b2).unwrap());
        for (x, y) in m.as_slice().iter().zip(m2.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        for method in [PlanMethod::Rcmd1, PlanMethod::Rcmd2, PlanMethod::Exact] {
            let d = transport_pair(&a, &b, method).unwrap().distance.value;
            let d2 = transport_pair(&a2, &b2, method).unwrap().distance.value;
            prop_assert!((d - d2).abs() <= 1e-9, "{method:?}: {d} vs {d2}");
        }
    }

    #[test]
    fn relaxed_plans_keep_their_marginal((a, b) in pair(7)) {
        let (p1, _) = rcmd1(&a, &b).unwrap();
        for s in p1.row_sums() {
            prop_assert_eq!(s, 1.0 / a.len() as f64);
        }
        let (p2, _) = rcmd2(&a, &b).unwrap();
        for s in p2.col_sums() {
            prop_assert_eq!(s, 1.0 / b.len() as f64);
        }
    }

    #[test]
    fn exact_self_distance_is_zero((a, _) in pair(6)) {
        let d = transport_pair(&a, &a, PlanMethod::Exact).unwrap().distance.value;
        prop_assert!(d.abs() <= 1e-9);
    }

    #[test]
    fn rcmd_similarity_is_symmetric_and_bounded((a, b) in pair(7)) {
        let (s, t) = (sim_rcmd(&a, &b).unwrap().value, sim_rcmd(&b, &a).unwrap().value);
        prop_assert!((s - t).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn sparse_storage_is_bounded((a, b) in pair(8)) {
        for storage in [Storage::Dense, Storage::Sparse] {
            let m = batch_similarity(std::slice::from_ref(&a), std::slice::from_ref(&b), None, SimilarityMethod::Rcmd, storage).unwrap();
            match storage {
                Storage::Dense => prop_assert_eq!(m.stored_entries, a.len() * b.len()),
                Storage::Sparse => prop_assert!(m.stored_entries <= a.len() + b.len()),
            }
        }
    }

    #[test]
    fn avg_pool_ignores_row_order(r in rows(6, 3), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = r.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p = avg_pool(&TokenMatrix::from_rows("x", r).unwrap()).vector;
        let q = avg_pool(&TokenMatrix::from_rows("x", shuffled).unwrap()).vector;
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn corpus_round_trips((a, b) in pair(5)) {
        let corpus = EmbeddingCorpus::from_matrices([a, b]).unwrap();
        let mut bin = Vec::new();
        write_binary(&corpus, &mut bin).unwrap();
        let back = read_binary(bin.as_slice()).unwrap();
        for (x, y) in corpus.iter().zip(back.iter()) {
            prop_assert_eq!(x.as_flat(), y.as_flat());
        }
        let mut text = Vec::new();
        write_jsonl(&corpus, &mut text).unwrap();
        let back = read_jsonl(text.as_slice()).unwrap();
        for (x, y) in corpus.iter().zip(back.iter()) {
            for (u, v) in x.as_flat().iter().zip(y.as_flat()) {
                prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn alignment_is_a_partial_matching(r in 1usize..7, c in 1usize..7, vals in prop::collection::vec(0u8..4, 49)) {
        let m = DenseMatrix::from_fn(r, c, |i, j| vals[i * 7 + j] as f64);
        let al = extract_alignment(&m);
        prop_assert!(al.len() <= r.min(c));
        let rows: std::collections::BTreeSet<_> = al.pairs.iter().map(|p| p.i).collect();
        let cols: std::collections::BTreeSet<_> = al.pairs.iter().map(|p| p.j).collect();
        prop_assert_eq!(rows.len(), al.len());
        prop_assert_eq!(cols.len(), al.len());
    }

    #[test]
    fn singleton_chunks_are_identity((a, b) in pair(6)) {
        let t = transport_pair(&a, &b, PlanMethod::Rcmd).unwrap();
        let c = chunk_scores(&t.plan, &t.cost, &ChunkMap::singletons(a.len()), &ChunkMap::singletons(b.len()), ContribVariant::OneMinusM).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                prop_assert_eq!(c.get(i, j), (1.0 - t.cost.get(i, j)) * t.plan.get(i, j));
            }
        }
    }

    #[test]
    fn f1_swaps_precision_and_recall(
        p in prop::collection::btree_set((0usize..4, 0usize..4), 0..6),
        g in prop::collection::btree_set((0usize..4, 0usize..4), 0..6),
    ) {
        let (pa, ga) = (ChunkAlignment::from_pairs(p), ChunkAlignment::from_pairs(g));
        let (x, y) = (alignment_f1(&pa, &ga), alignment_f1(&ga, &pa));
        prop_assert_eq!(x.precision, y.recall);
        prop_assert_eq!(x.recall, y.precision);
        prop_assert_eq!(x.f1, y.f1);
    }

    #[test]
    fn spearman_ignores_monotone_maps(pred in prop::collection::vec(-5.0f64..5.0, 3..20), gold_seed in prop::collection::vec(0u8..5, 20)) {
        let gold: Vec<f64> = gold_seed[..pred.len()].iter().map(|&g| g as f64).collect();
        let mapped: Vec<f64> = pred.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        let (r, s) = (spearman(&pred, &gold).unwrap(), spearman(&mapped, &gold).unwrap());
        match (r, s) {
            (Correlation::Value(u), Correlation::Value(v)) => prop_assert!((u - v).abs() <= 1e-12),
            (Correlation::Undefined, Correlation::Undefined) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn sts_scores_are_symmetric((a, b) in pair(6)) {
        let corpus = EmbeddingCorpus::from_matrices([a, b]).unwrap();
        let fwd = vec![ScoredPair { id: "p".into(), sentence1: "a".into(), sentence2: "b".into(), gold: None }];
        let rev = vec![ScoredPair { id: "p".into(), sentence1: "b".into(), sentence2: "a".into(), gold: None }];
        let x = evaluate_sts(&corpus, &fwd, PlanMethod::Rcmd).unwrap().scores[0].score;
        let y = evaluate_sts(&corpus, &rev, PlanMethod::Rcmd).unwrap().scores[0].score;
        prop_assert!((x - y).abs() <= 1e-12);
    }

    #[test]
    fn loss_ignores_joint_permutation(
        (a, p, n) in (1usize..=4).prop_flat_map(|d| (
            prop::collection::vec(rows(4, d), 3),
            prop::collection::vec(rows(4, d), 3),
            prop::collection::vec(rows(4, d), 3),
        )),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let mk = |rs: &[Vec<Vec<f64>>], order: &[usize]| -> Vec<TokenMatrix> {
            order.iter().map(|&k| TokenMatrix::from_rows(format!("s{k}"), rs[k].clone()).unwrap()).collect()
        };
        let id = [0, 1, 2];
        let base = ContrastiveBatch::new(mk(&a, &id), mk(&p, &id), Some(mk(&n, &id))).unwrap();
        let shuffled = ContrastiveBatch::new(mk(&a, &perm), mk(&p, &perm), Some(mk(&n, &perm))).unwrap();
        let (x, y) = (clrcmd_loss(&base, 0.05).unwrap().total_loss, clrcmd_loss(&shuffled, 0.05).unwrap().total_loss);
        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }
}

#[test]
fn sharper_temperature_widens_loss_gap() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut side = || {
        (0..4)
            .map(|_| rcmd::evaluation::random_sentence(&mut rng, "s", 4, 6).unwrap())
            .collect::<Vec<_>>()
    };
    let batch = ContrastiveBatch::new(side(), side(), Some(side())).unwrap();
    let gap = |tau| {
        let r = clrcmd_loss(&batch, tau).unwrap();
        let hi = r.per_example.iter().copied().fold(f64::MIN, f64::max);
        let lo = r.per_example.iter().copied().fold(f64::MAX, f64::min);
        hi - lo
    };
    let (g1, g2, g3) = (gap(0.1), gap(0.05), gap(0.01));
    assert!(g1 < g2 && g2 < g3, "{g1} {g2} {g3}");
}
