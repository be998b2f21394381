use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{synth_generate, SplitDataset, SynthSpec};
use crate::numerics::{gradcheck, matmul, relu, sigmoid_scalar, softmax_rows};

fn tiny_cfg() -> CrmConfig {
    CrmConfig {
        embed_dim: 3,
        att_hidden: 4,
        mlp: vec![6, 5],
        n_users: 5,
        n_items: 9,
        n_genres: 4,
        n_contexts: 2,
    }
}

fn random_sample(cfg: &CrmConfig, max_hist: usize, rng: &mut impl Rng) -> IdSample {
    let n = rng.random_range(0..=max_hist);
    IdSample {
        user: rng.random_range(0..cfg.n_users),
        item: rng.random_range(0..cfg.n_items),
        genre: rng.random_range(0..cfg.n_genres),
        context: rng.random_range(0..cfg.n_contexts),
        history: (0..n)
            .map(|_| IdBehavior {
                item: rng.random_range(0..cfg.n_items),
                genre: rng.random_range(0..cfg.n_genres),
                label: rng.random_range(0..2),
            })
            .collect(),
    }
}

fn row(t: &Tensor2D, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

/// Recomputes one sample step by step with plain tensor ops.
fn oracle(crm: &Crm, s: &IdSample) -> (Vec<f64>, f64) {
    let p = &crm.params;
    let v = |n: &str| p.value(n).unwrap();
    let dense = |x: &Tensor2D, prefix: &str| {
        let y = matmul(x, v(&format!("{prefix}.w"))).unwrap();
        y.add(&v(&format!("{prefix}.b")).clone()).unwrap()
    };
    let cat = |parts: &[Vec<f64>]| parts.concat();
    let target = cat(&[row(v("emb.item"), s.item), row(v("emb.genre"), s.genre)]);
    let mut pooled = vec![0.0; 3 * crm.cfg.embed_dim];
    if !s.history.is_empty() {
        let mut scores = Vec::new();
        for h in &s.history {
            let key = cat(&[row(v("emb.item"), h.item), row(v("emb.genre"), h.genre)]);
            let prod: Vec<f64> = key.iter().zip(&target).map(|(a, b)| a * b).collect();
            let diff: Vec<f64> = key.iter().zip(&target).map(|(a, b)| a - b).collect();
            let x = Tensor2D::row_vector(&cat(&[key.clone(), target.clone(), prod, diff]));
            let a = relu(&dense(&x, "att.0"));
            scores.push(dense(&a, "att.1").get(0, 0));
        }
        let w = softmax_rows(&Tensor2D::row_vector(&scores), 1.0).unwrap();
        for (j, h) in s.history.iter().enumerate() {
            let val = cat(&[row(v("emb.item"), h.item), row(v("emb.genre"), h.genre), row(v("emb.label"), h.label as usize)]);
            for (o, x) in pooled.iter_mut().zip(val) {
                *o += w.get(0, j) * x;
            }
        }
    }
    let mut x = Tensor2D::row_vector(&cat(&[pooled, row(v("emb.user"), s.user), target, row(v("emb.context"), s.context)]));
    for i in 0..crm.cfg.mlp.len() {
        x = relu(&dense(&x, &format!("mlp.{i}")));
    }
    let logit = dense(&x, "out").get(0, 0);
    (x.row(0).to_vec(), sigmoid_scalar(logit))
}

#[test]
fn forward_matches_stepwise_oracle() {
    let crm = Crm::init(tiny_cfg(), 3).unwrap();
    let mut rng = seeded_rng(4);
    let batch: Vec<IdSample> = (0..12).map(|_| random_sample(&crm.cfg, 6, &mut rng)).collect();
    let refs: Vec<&IdSample> = batch.iter().collect();
    let out = crm.forward(&refs).unwrap();
    for (s, o) in batch.iter().zip(&out) {
        let (h, y) = oracle(&crm, s);
        assert!((o.y_hat - y).abs() <= 1e-12);
        assert!(h.iter().zip(&o.h_id).all(|(a, b)| (a - b).abs() <= 1e-12));
        assert!(o.y_hat > 0.0 && o.y_hat < 1.0);
    }
}

#[test]
fn identical_history_gives_uniform_attention() {
    let crm = Crm::init(tiny_cfg(), 1).unwrap();
    let h = IdBehavior { item: 2, genre: 1, label: 1 };
    let s = IdSample { user: 1, item: 3, genre: 2, context: 0, history: vec![h; 4] };
    let mut tape = Tape::new();
    let v = forward_on_tape(&mut tape, &crm.cfg, &crm.params, &[&s], Some(7)).unwrap();
    let a = tape.value(v.attention);
    for j in 0..4 {
        assert!((a.get(0, j) - 0.25).abs() < 1e-15);
    }
    for j in 4..7 {
        assert_eq!(a.get(0, j), 0.0);
    }
}

#[test]
fn empty_history_pools_to_zero() {
    let crm = Crm::init(tiny_cfg(), 2).unwrap();
    let s = IdSample { user: 0, item: 1, genre: 1, context: 1, history: vec![] };
    let out = crm.forward(&[&s]).unwrap();
    let (h, y) = oracle(&crm, &s);
    assert_eq!(out[0].h_id, h);
    assert!((out[0].y_hat - y).abs() < 1e-15);
}

#[test]
fn bad_ids_are_rejected() {
    let crm = Crm::init(tiny_cfg(), 2).unwrap();
    let s = IdSample { user: 5, item: 1, genre: 1, context: 1, history: vec![] };
    assert!(matches!(crm.forward(&[&s]), Err(Error::Index(_))));
}

#[test]
fn duplicate_batch_has_single_sample_gradient() {
    let crm = Crm::init(tiny_cfg(), 5).unwrap();
    let mut rng = seeded_rng(5);
    let s = random_sample(&crm.cfg, 4, &mut rng);
    let grads = |batch: &[&IdSample], labels: &[f64]| {
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, &crm.cfg, &crm.params, batch, None).unwrap();
        let l = tape.bce(v.prob, labels).unwrap();
        tape.backward(l).unwrap()
    };
    let one = grads(&[&s], &[1.0]);
    let two = grads(&[&s, &s, &s], &[1.0, 1.0, 1.0]);
    for (k, g) in &one {
        assert!(g.max_abs_diff(&two[k]) < 1e-15, "{k}");
    }
}

#[test]
fn training_steps() {
    let mut crm = Crm::init(tiny_cfg(), 6).unwrap();
    let pos = IdSample { user: 1, item: 2, genre: 1, context: 0, history: vec![] };
    let neg = IdSample { user: 1, item: 5, genre: 3, context: 0, history: vec![] };
    let before = crm.params.digest();
    let mut frozen = AdamW::new(0.0);
    crm.train_step(&[&pos, &neg], &[1, 0], &mut frozen).unwrap();
    assert_eq!(crm.params.digest(), before);

    let mut opt = AdamW::new(1e-2);
    let l0 = crm.train_step(&[&pos, &neg], &[1, 0], &mut opt).unwrap();
    let mut last = l0;
    for _ in 0..5 {
        last = crm.train_step(&[&pos, &neg], &[1, 0], &mut opt).unwrap();
    }
    assert!(last < l0);
    assert!(matches!(crm.train_step(&[], &[], &mut opt), Err(Error::Domain(_))));
}

#[test]
fn all_parameter_groups_pass_gradcheck() {
    let mut crm = Crm::init(tiny_cfg(), 7).unwrap();
    let mut rng = seeded_rng(8);
    let names: Vec<String> = crm.params.names().map(str::to_string).collect();
    for n in names {
        let (r, c) = crm.params.value(&n).unwrap().shape();
        *crm.params.value_mut(&n).unwrap() = Tensor2D::randn(r, c, 0.6, &mut rng);
    }
    let batch: Vec<IdSample> = (0..5).map(|_| random_sample(&crm.cfg, 5, &mut rng)).collect();
    let labels: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
    let cfg = crm.cfg.clone();
    let report = gradcheck(&crm.params, 200, 1e-6, 3, |s| {
        let refs: Vec<&IdSample> = batch.iter().collect();
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, &cfg, s, &refs, Some(6))?;
        let l = tape.bce(v.prob, &labels)?;
        Ok((tape, l))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{:?}", report.worst());
}

fn id_view(d: &SplitDataset, k: usize) -> (FeatureEncoder, Vec<IdSample>, Vec<u8>, Vec<IdSample>, Vec<u8>) {
    let enc = FeatureEncoder::build(d.all(), FeatureSpace::Exact).unwrap();
    let view = |xs: &[crate::data::Sample]| -> (Vec<IdSample>, Vec<u8>) {
        xs.iter()
            .map(|s| {
                let h = s.history();
                (IdSample::from_sample(s, &h[h.len().saturating_sub(k)..], &enc), s.label)
            })
            .unzip()
    };
    let (tr, trl) = view(&d.train);
    let (te, tel) = view(&d.test);
    (enc, tr, trl, te, tel)
}

#[test]
fn untrained_model_is_near_chance() {
    let d = synth_generate(&SynthSpec { n_users: 300, n_items: 120, ..Default::default() }).unwrap();
    let (enc, _, _, te, tel) = id_view(&d, 10);
    // Expectation over random initializations.
    let seeds = 10;
    let a = (0..seeds)
        .map(|seed| Crm::init(CrmConfig::with_vocab(&enc), seed).unwrap().auc_eval(&te, &tel).unwrap())
        .sum::<f64>()
        / seeds as f64;
    assert!((a - 0.5).abs() < 0.05, "{a}");
}

#[test]
fn noiseless_single_cluster_is_learned() {
    let d = synth_generate(&SynthSpec {
        n_users: 200,
        n_items: 60,
        n_clusters: 1,
        noise_rate: 0.0,
        ..Default::default()
    })
    .unwrap();
    let (enc, tr, trl, te, tel) = id_view(&d, 10);
    let mut crm = Crm::init(CrmConfig { embed_dim: 8, mlp: vec![32, 16], ..CrmConfig::with_vocab(&enc) }, 1).unwrap();
    let mut opt = AdamW::new(5e-3);
    for _ in 0..4 {
        for chunk in (0..tr.len()).collect::<Vec<_>>().chunks(64) {
            let b: Vec<&IdSample> = chunk.iter().map(|&i| &tr[i]).collect();
            let l: Vec<u8> = chunk.iter().map(|&i| trl[i]).collect();
            crm.train_step(&b, &l, &mut opt).unwrap();
        }
    }
    let a = crm.auc_eval(&te, &tel).unwrap();
    assert!(a >= 0.95, "{a}");
}

#[test]
fn feature_encoder_spaces() {
    let d = synth_generate(&SynthSpec { n_users: 20, n_items: 30, min_interactions: 5, max_interactions: 8, ..Default::default() }).unwrap();
    let enc = FeatureEncoder::build(d.all(), FeatureSpace::Exact).unwrap();
    let (nu, ni, ng, nc) = enc.sizes();
    assert_eq!((nu, ng, nc), (21, 5, 1));
    assert!(ni <= 31);
    assert_eq!(enc.user("nobody"), 0);
    assert_eq!(FeatureEncoder::from_text(&enc.to_text()).unwrap(), enc);

    let h = FeatureEncoder::build(std::iter::empty(), FeatureSpace::Hashed(1 << 14)).unwrap();
    let s = &d.train[0];
    assert_eq!(h.user(&s.user_id), h.user(&s.user_id));
    assert!(h.item(&s.target).0 < 1 << 14);
    assert_eq!(FeatureEncoder::from_text(&h.to_text()).unwrap(), h);
    assert!(FeatureEncoder::from_text("weird").is_err());
}

proptest! {
    #[test]
    fn attention_is_a_masked_distribution(seed in 0u64..5000, pad in 0usize..4) {
        let crm = Crm::init(tiny_cfg(), seed).unwrap();
        let mut rng = seeded_rng(seed);
        let batch: Vec<IdSample> = (0..6).map(|_| random_sample(&crm.cfg, 7, &mut rng)).collect();
        let refs: Vec<&IdSample> = batch.iter().collect();
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, &crm.cfg, &crm.params, &refs, Some(7 + pad)).unwrap();
        let a = tape.value(v.attention);
        for (i, s) in batch.iter().enumerate() {
            let n = s.history.len();
            let total: f64 = a.row(i)[..n].iter().sum();
            if n > 0 {
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
            prop_assert!(a.row(i)[n..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn padding_length_does_not_change_h_id(seed in 0u64..5000, pad in 1usize..20) {
        let crm = Crm::init(tiny_cfg(), seed).unwrap();
        let mut rng = seeded_rng(seed + 1);
        let s = random_sample(&crm.cfg, 5, &mut rng);
        let run = |p: Option<usize>| {
            let mut tape = Tape::new();
            let v = forward_on_tape(&mut tape, &crm.cfg, &crm.params, &[&s], p).unwrap();
            tape.value(v.h_id).clone()
        };
        prop_assert_eq!(run(None), run(Some(s.history.len() + pad)));
    }
}
