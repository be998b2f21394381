use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::crm::FeatureSpace;
use crate::data::{seeded_rng, synth_generate, SplitDataset, SynthSpec};
use crate::numerics::Tensor2D;
use crate::tiny_lm::LmConfig;

fn gaussian(n: usize, d: usize, scales: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scales[j % scales.len()] + 0.3 * j as f64
                })
                .collect()
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn line_along_first_axis() {
    let mean = [1.0, -2.0, 0.5];
    let pts: Vec<Vec<f64>> = [-3.0, -1.0, 0.5, 2.0, 4.0]
        .iter()
        .map(|t| vec![mean[0] + t, mean[1], mean[2]])
        .collect();
    let pca = fit_pca(&pts, 1).unwrap();
    assert!(dist(&pca.components[0], &[1.0, 0.0, 0.0]) < 1e-9);

    let flipped: Vec<Vec<f64>> = pts.iter().map(|p| vec![-p[0], p[1], p[2]]).collect();
    let pca = fit_pca(&flipped, 1).unwrap();
    assert!(dist(&pca.components[0], &[1.0, 0.0, 0.0]) < 1e-9);
}

#[test]
fn full_rank_projection_keeps_distances() {
    let pts = gaussian(40, 6, &[3.0, 2.0, 1.5, 1.0, 0.6, 0.3], 1);
    let pca = fit_pca(&pts, 6).unwrap();
    let proj: Vec<Vec<f64>> = pts.iter().map(|p| pca.project(p).unwrap()).collect();
    for i in 0..pts.len() {
        for j in 0..i {
            assert!((dist(&proj[i], &proj[j]) - dist(&pts[i], &pts[j])).abs() < 1e-8);
        }
    }
}

#[test]
fn matches_dense_eigensolver() {
    let pts = gaussian(50, 8, &[1.0], 2);
    let pca = fit_pca(&pts, 3).unwrap();

    let n = pts.len() as f64;
    let mean: Vec<f64> = (0..8).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let x = DMatrix::from_fn(pts.len(), 8, |i, j| pts[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &o) in order.iter().take(3).enumerate() {
        assert!((pca.explained_variance[c] - eig.eigenvalues[o]).abs() < 1e-6);
        let v = eig.eigenvectors.column(o);
        let dot: f64 = (0..8).map(|j| v[j] * pca.components[c][j]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "component {c}: |dot| = {}", dot.abs());
    }
}

#[test]
fn rank_deficient_data_pads_with_zero_variance() {
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0, 1.0]).collect();
    let pca = fit_pca(&pts, 3).unwrap();
    assert!(pca.explained_variance[0] > 1.0);
    assert!(pca.explained_variance[1..].iter().all(|&v| v < 1e-9));
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
            assert!((d - f64::from(u8::from(i == j))).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_rejects_bad_inputs() {
    let pts = gaussian(3, 4, &[1.0], 3);
    assert!(matches!(fit_pca(&pts, 3), Err(Error::Domain(_))));
    assert!(matches!(fit_pca(&pts, 5), Err(Error::Domain(_))));
    assert!(matches!(fit_pca(&pts, 0), Err(Error::Domain(_))));
    let mut bad = gaussian(6, 4, &[1.0], 3);
    bad[2][1] = f64::NAN;
    assert!(matches!(fit_pca(&bad, 2), Err(Error::Numeric(_))));
}

fn behaviors(vectors: Vec<Vec<f64>>, timestamps: Vec<i64>) -> Vec<IndexedBehavior> {
    vectors
        .into_iter()
        .zip(timestamps)
        .enumerate()
        .map(|(position, (vector, timestamp))| IndexedBehavior {
            position,
            vector,
            timestamp,
        })
        .collect()
}

/// Full sort by the documented order.
fn sort_oracle(c: &[IndexedBehavior], q: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (cosine(&c[a].vector, q), cosine(&c[b].vector, q));
        sb.partial_cmp(&sa)
            .unwrap()
            .then(c[b].timestamp.cmp(&c[a].timestamp))
            .then(c[b].position.cmp(&c[a].position))
    });
    idx.truncate(k);
    idx
}

#[test]
fn topk_matches_exhaustive_sort() {
    let mut rng = seeded_rng(4);
    // Few distinct vectors and timestamps so every tie rule is exercised.
    let protos = gaussian(40, 8, &[1.0], 5);
    let vecs: Vec<Vec<f64>> = (0..1000).map(|_| protos[rng.random_range(0..40)].clone()).collect();
    let ts: Vec<i64> = (0..1000).map(|i| i / 7).collect();
    let c = behaviors(vecs, ts);
    for seed in 0..5 {
        let q = gaussian(1, 8, &[1.0], 100 + seed).remove(0);
        assert_eq!(rank_topk(&c, &q, 60).unwrap(), sort_oracle(&c, &q, 60));
    }
}

#[test]
fn identical_behavior_ranks_first_and_large_k_returns_all() {
    let mut vecs = gaussian(12, 5, &[1.0], 6);
    let q = vecs[4].clone();
    vecs[4] = q.clone();
    let c = behaviors(vecs, (0..12).collect());
    assert_eq!(rank_topk(&c, &q, 1).unwrap(), vec![4]);
    let all = rank_topk(&c, &q, 50).unwrap();
    assert_eq!(all.len(), 12);
    assert_eq!(all, sort_oracle(&c, &q, 12));
    assert!(matches!(rank_topk(&c, &q, 0), Err(Error::Domain(_))));
}

#[test]
fn zero_vectors_rank_last_and_ties_prefer_recent() {
    let c = behaviors(
        vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]],
        vec![5, 9, 5, 3, 1],
    );
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
    // Three exact matches: timestamps 5, 5, 3, later position first among
    // equal timestamps; the zero vector ties the opposite one at −1.
    assert_eq!(rank_topk(&c, &[1.0, 0.0], 5).unwrap(), vec![2, 0, 3, 1, 4]);
    assert_eq!(rank_topk(&c, &[0.0, 0.0], 5).unwrap(), vec![1, 2, 0, 3, 4]);
}

#[test]
fn recent_k_is_newest_first() {
    assert_eq!(recent_k(5, 3), vec![4, 3, 2]);
    assert_eq!(recent_k(2, 3), vec![1, 0]);
    assert!(recent_k(0, 3).is_empty());
}

#[test]
fn config_validation() {
    assert!(RetrievalConfig::default().validate().is_ok());
    for (kl, ks) in [(10, 10), (5, 10), (10, 0)] {
        let cfg = RetrievalConfig {
            k_long: kl,
            k_short: ks,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

struct Fixture {
    data: SplitDataset,
    lm: TinyLm,
    vocab: Vocab,
    features: FeatureEncoder,
}

fn fixture() -> Fixture {
    let data = synth_generate(&SynthSpec {
        n_users: 30,
        n_items: 40,
        min_interactions: 8,
        max_interactions: 20,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let mut corpus: Vec<String> = data.all().map(|s| render_prompt(&[], &s.target, 1)).collect();
    corpus.extend(data.all().flat_map(|s| s.timeline().iter().map(|b| item_text(&b.item))));
    let vocab = Vocab::build(corpus.iter().map(String::as_str), 500).unwrap();
    let cfg = LmConfig {
        n_layers: 1,
        d_model: 12,
        n_heads: 2,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_seq_len: 256,
    };
    let mut lm = TinyLm::init(cfg, 3).unwrap();
    // Larger weights than the default init so encodings are well spread.
    let mut rng = seeded_rng(9);
    let e = lm.params.value_mut("tok_emb").unwrap();
    *e = Tensor2D::randn(e.rows(), e.cols(), 1.0, &mut rng);
    let features = FeatureEncoder::build(data.all(), FeatureSpace::Exact).unwrap();
    Fixture {
        data,
        lm,
        vocab,
        features,
    }
}

fn index_of(f: &Fixture, d_pca: usize) -> BehaviorIndex {
    let mut enc = SemanticEncoder::new(&f.lm, &f.vocab);
    let pca = fit_index_pca(&f.data.train, &mut enc, d_pca).unwrap();
    BehaviorIndex::build(f.data.all(), &mut enc, pca).unwrap()
}

#[test]
fn index_is_deterministic_and_recomputable() {
    let f = fixture();
    let idx = index_of(&f, 6);
    assert_eq!(idx, index_of(&f, 6));
    assert_eq!(idx.len(), f.data.all().map(|s| s.user_id.clone()).collect::<HashSet<_>>().len());

    let s = &f.data.test[0];
    let entries = idx.user(&s.user_id).unwrap();
    assert_eq!(entries.len(), s.timeline().len());
    for (i, e) in entries.iter().enumerate() {
        let b = &s.timeline()[i];
        let mut tokens = vec![BOS];
        tokens.extend(f.vocab.tokenize(&item_text(&b.item)));
        let direct = idx.pca.project(&f.lm.encode_behavior(&tokens).unwrap()).unwrap();
        assert_eq!(e.vector, direct);
        assert_eq!((e.position, e.timestamp), (i, b.timestamp));
    }
    assert!(entries.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    assert!(idx.retrieve(&s.user_id, 0, &vec![1.0; 6], 3).unwrap().is_empty());
    assert!(matches!(idx.retrieve("nobody", 0, &[1.0; 6], 3), Err(Error::Index(_))));
}

#[test]
fn index_round_trips_and_detects_corruption() {
    let f = fixture();
    let idx = index_of(&f, 5);
    let dir = tempfile::tempdir().unwrap();
    idx.save(dir.path()).unwrap();
    let back = BehaviorIndex::load(dir.path()).unwrap();
    assert_eq!(back, idx);
    for (user, entries) in idx.users() {
        for (a, b) in entries.iter().zip(back.user(user).unwrap()) {
            assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    let path = dir.path().join("vectors.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(BehaviorIndex::load(dir.path()), Err(Error::Format(_))));
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(BehaviorIndex::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn modalities_follow_their_orders() {
    let f = fixture();
    let idx = index_of(&f, 6);
    let cfg = RetrievalConfig {
        k_long: 8,
        k_short: 3,
        d_pca: 6,
        ..Default::default()
    };
    let mut asm = Assembler::new(&cfg, &idx, &f.lm, &f.vocab, &f.features);
    let mut saw_short_history = false;
    for s in f.data.all() {
        let m = asm.assemble(s).unwrap();
        let h = s.history().len();
        assert_eq!(m.long.len(), h.min(8));
        assert_eq!(m.short.len(), h.min(3));
        assert!(m.long.windows(2).all(|w| w[0] < w[1]));
        let long: HashSet<usize> = m.long.iter().copied().collect();
        assert!(m.short.iter().all(|p| long.contains(p)));
        assert_eq!(m.id.history.len(), m.long.len());
        assert_eq!(*m.text.token_ids.last().unwrap(), m.text.token_ids[m.text.answer_pos]);
        if h < 3 {
            saw_short_history = true;
            let all: Vec<usize> = (0..h).collect();
            let mut short = m.short.clone();
            short.sort_unstable();
            assert_eq!((m.long.clone(), short), (all.clone(), all));
        }
        // Short list is in rank order against the target.
        let q = asm.encoder.project(&s.target, &idx.pca).unwrap();
        let ranked = idx.retrieve(&s.user_id, h, &q, 3).unwrap();
        assert_eq!(m.short, ranked);
    }
    assert!(saw_short_history);
}

#[test]
fn disabled_retrievers_fall_back_to_recency() {
    let f = fixture();
    let idx = index_of(&f, 6);
    let cfg = RetrievalConfig {
        k_long: 6,
        k_short: 2,
        d_pca: 6,
        long_retriever: false,
        short_retriever: false,
    };
    let mut asm = Assembler::new(&cfg, &idx, &f.lm, &f.vocab, &f.features);
    for s in &f.data.test {
        let h = s.history().len();
        let m = asm.assemble(s).unwrap();
        let mut expect_long = recent_k(h, 6);
        expect_long.sort_unstable();
        assert_eq!(m.long, expect_long);
        assert_eq!(m.short, recent_k(h, 2));
    }
}

fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_are_orthonormal_and_sorted(pts in vecs(20, 5), p in 1usize..=5) {
        let pca = fit_pca(&pts, p).unwrap();
        for i in 0..p {
            for j in 0..p {
                let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                prop_assert!((d - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
        prop_assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-9));
    }

    #[test]
    fn projection_never_stretches(pts in vecs(12, 4), p in 1usize..=4) {
        let pca = fit_pca(&pts, p).unwrap();
        for a in &pts {
            for b in &pts {
                let pa = pca.project(a).unwrap();
                let pb = pca.project(b).unwrap();
                prop_assert!(dist(&pa, &pb) <= dist(a, b) + 1e-8);
            }
        }
    }

    #[test]
    fn ranking_ignores_positive_scaling(
        vs in vecs(30, 4),
        q in proptest::collection::vec(-5.0f64..5.0, 4),
        scales in proptest::collection::vec(-6i32..6, 31),
        k in 1usize..40,
    ) {
        // Power-of-two factors scale exactly, so even exact ties survive.
        let c = behaviors(vs.clone(), (0..30).map(|i| i / 4).collect());
        let scaled: Vec<Vec<f64>> = vs.iter().zip(&scales).map(|(v, &e)| v.iter().map(|x| x * 2f64.powi(e)).collect()).collect();
        let cs = behaviors(scaled, (0..30).map(|i| i / 4).collect());
        let qs: Vec<f64> = q.iter().map(|x| x * 2f64.powi(scales[30])).collect();
        prop_assert_eq!(rank_topk(&c, &q, k).unwrap(), rank_topk(&cs, &qs, k).unwrap());
    }

    #[test]
    fn full_k_is_a_permutation(vs in vecs(25, 3), q in proptest::collection::vec(-5.0f64..5.0, 3)) {
        let c = behaviors(vs, vec![0; 25]);
        let mut r = rank_topk(&c, &q, 25).unwrap();
        r.sort_unstable();
        prop_assert_eq!(r, (0..25).collect::<Vec<_>>());
    }
}
