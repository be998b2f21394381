use proptest::prelude::*;

use super::*;
use crate::numerics::ParamStore;
use crate::tiny_lm::yes_probability;

fn tiny_cfg() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.apply_kv(
        "synth.n_users = 60\nsynth.n_items = 40\nsynth.min_interactions = 6\nsynth.max_interactions = 12\n\
         lm.n_layers = 1\nlm.d_model = 8\nlm.n_heads = 2\nlm.d_ff = 16\nlm.max_seq_len = 128\n\
         plora.n_meta = 2\nplora.rank = 2\nplora.d_h = 4\ncrm.embed_dim = 4\ncrm.att_hidden = 8\ncrm.mlp = 8,6\n\
         retrieval.k_long = 6\nretrieval.k_short = 2\nretrieval.d_pca = 4\n\
         stage1.epochs = 2\nstage1.batch = 64\nstage2.epochs = 2\nstage2.batch = 16\nstage2.fewshot_n = 48\n",
    )
    .unwrap();
    c.validate().unwrap();
    c
}

fn store(seed: u64) -> ParamStore {
    let mut rng = seeded_rng(seed);
    let mut p = ParamStore::new();
    p.insert("b.w", Tensor2D::randn(3, 4, 1.0, &mut rng), true);
    p.insert("a", Tensor2D::randn(1, 5, 1.0, &mut rng), false);
    p.insert("c.empty", Tensor2D::zeros(0, 3), true);
    p
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = store(1);
    let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
    for (name, e) in p.iter() {
        let b = back.value(name).unwrap();
        assert_eq!(b.shape(), e.value.shape());
        assert!(b.data().iter().zip(e.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.digest(), p.digest());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&p, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().digest(), p.digest());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&store(2));
    for cut in [0, 7, 15, 40, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format(_))));
    let mut magic = bytes;
    magic[7] = b'9';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::Format(_))));
}

#[test]
fn mismatched_shapes_name_the_entry() {
    let mut target = store(3);
    let mut other = store(4);
    *other.value_mut("b.w").unwrap() = Tensor2D::zeros(4, 3);
    let loaded = decode_checkpoint(&encode_checkpoint(&other)).unwrap();
    match target.load_values(&loaded) {
        Err(Error::Shape { name, .. }) => assert_eq!(name, "b.w"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let mut extra = store(3);
    extra.insert("zz", Tensor2D::zeros(1, 1), true);
    let loaded = decode_checkpoint(&encode_checkpoint(&extra)).unwrap();
    assert!(matches!(target.load_values(&loaded), Err(Error::Format(_))));
}

#[test]
fn config_text_round_trips() {
    let c = tiny_cfg();
    let back = PipelineConfig::from_kv(&c.to_kv()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_eq!(c.entries().len(), KEYS.len());
    assert_ne!(PipelineConfig::default().hash(), c.hash());
    assert!(matches!(PipelineConfig::from_kv("stage2.lrr = 1"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::from_kv("retrieval.k_short = 80"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::from_kv("retrieval.long_retriever = maybe"), Err(Error::Config(_))));
    let c = PipelineConfig::from_kv("data.source = /x/ratings.dat\ndata.format = csv  # comment\n").unwrap();
    assert_eq!(c.source.as_deref(), Some(std::path::Path::new("/x/ratings.dat")));
    assert_eq!(c.format, "csv");
    let c = PipelineConfig::from_kv("crm.mlp = 32,16\n").unwrap();
    assert_eq!(c.plora.d_c, 16);
}

struct Fix {
    prep: Prepared,
    train: IdSet,
    valid: ModalitySet,
    few: ModalitySet,
}

fn fixture(cfg: &PipelineConfig) -> Fix {
    let prep = Prepared::new(cfg).unwrap();
    let r = &cfg.retrieval;
    Fix {
        train: prep.id_samples(&prep.data.train, r).unwrap(),
        valid: prep.modalities(&prep.data.valid, r).unwrap(),
        few: prep.modalities(&prep.fewshot(cfg.fewshot_n).unwrap(), r).unwrap(),
        prep,
    }
}

#[test]
fn stage1_zero_budget_and_determinism() {
    let mut cfg = tiny_cfg();
    let f = fixture(&cfg);
    let crm_cfg = f.prep.crm_config(&cfg);
    cfg.stage1.epochs = 0;
    let none = stage1_train_crm(crm_cfg.clone(), &f.train, &f.valid.id_set(), &cfg.stage1, cfg.seeds).unwrap();
    assert!(!none.trained && none.epochs.is_empty());
    assert_eq!(none.crm.params.digest(), Crm::init(crm_cfg.clone(), cfg.seeds.model ^ CRM_SEED).unwrap().params.digest());

    cfg.stage1.epochs = 2;
    let a = stage1_train_crm(crm_cfg.clone(), &f.train, &f.valid.id_set(), &cfg.stage1, cfg.seeds).unwrap();
    let b = stage1_train_crm(crm_cfg, &f.train, &f.valid.id_set(), &cfg.stage1, cfg.seeds).unwrap();
    assert!(a.trained);
    assert_eq!(a.crm.params.digest(), b.crm.params.digest());
    assert_ne!(a.crm.params.digest(), none.crm.params.digest());
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn stage2_with_zero_lr_changes_nothing() {
    let mut cfg = tiny_cfg();
    let f = fixture(&cfg);
    let crm = Crm::init(f.prep.crm_config(&cfg), 5).unwrap();
    let p0 = init_plora(&f.prep.lm, &cfg, 6).unwrap();
    cfg.stage2.lr = 0.0;
    cfg.stage2.patience = 10;
    cfg.stage2.epochs = 3;
    let out = stage2_tune_plora(&f.prep.lm, &crm, p0.clone(), &f.few, &f.valid, &cfg.stage2, cfg.seeds).unwrap();
    assert!(out.trained);
    assert_eq!(out.plora.params.digest(), p0.params.digest());
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{losses:?}");
}

#[test]
fn stage2_touches_only_the_adapter() {
    let cfg = tiny_cfg();
    let f = fixture(&cfg);
    let crm = Crm::init(f.prep.crm_config(&cfg), 5).unwrap();
    let lm_before = f.prep.lm.params.digest();
    let crm_before = crm.params.digest();
    let p0 = init_plora(&f.prep.lm, &cfg, 6).unwrap();
    let out = stage2_tune_plora(&f.prep.lm, &crm, p0.clone(), &f.few, &f.valid, &cfg.stage2, cfg.seeds).unwrap();
    assert_eq!(f.prep.lm.params.digest(), lm_before);
    assert_eq!(crm.params.digest(), crm_before);
    assert_ne!(out.plora.params.digest(), p0.params.digest());
    let names: Vec<&str> = out.plora.params.names().collect();
    assert!(names.iter().all(|n| n.starts_with("bank.") || n.starts_with("gate.")));
    // Same seeds, same result.
    let again = stage2_tune_plora(&f.prep.lm, &crm, p0, &f.few, &f.valid, &cfg.stage2, cfg.seeds).unwrap();
    assert_eq!(again.plora.params.digest(), out.plora.params.digest());
}

#[test]
fn untrained_adapter_scores_like_the_base_model() {
    let cfg = tiny_cfg();
    let f = fixture(&cfg);
    let crm = Crm::init(f.prep.crm_config(&cfg), 5).unwrap();
    let p = init_plora(&f.prep.lm, &cfg, 6).unwrap();
    let test = f.prep.modalities(&f.prep.data.test, &cfg.retrieval).unwrap();
    let full = predict(&f.prep.lm, &crm, &p, &test.pairs).unwrap();
    let base = predict_base(&f.prep.lm, &test.pairs).unwrap();
    for (a, b) in full.iter().zip(&base) {
        assert!((a - b).abs() <= 1e-12);
    }
    // One at a time gives the same numbers as the batch path.
    let states = crm_states(&crm, &test.id_set().samples).unwrap();
    for (i, pair) in test.pairs.iter().enumerate().take(20) {
        let one = predict_one(&f.prep.lm, &p, &states[i], &pair.text.token_ids).unwrap();
        assert!((one - full[i]).abs() <= 1e-12);
        assert_eq!(one, predict_one(&f.prep.lm, &p, &states[i], &pair.text.token_ids).unwrap());
    }
}

#[test]
fn answer_loss_matches_the_last_row_path() {
    let cfg = tiny_cfg();
    let f = fixture(&cfg);
    let mut p = init_plora(&f.prep.lm, &cfg, 6).unwrap();
    let mut rng = seeded_rng(8);
    for name in p.trainables() {
        let (r, c) = p.params.value(&name).unwrap().shape();
        *p.params.value_mut(&name).unwrap() = Tensor2D::randn(r, c, 0.3, &mut rng);
    }
    let pair = &f.few.pairs[0];
    let h = vec![0.4; cfg.plora.d_c];
    let mut tape = Tape::new();
    let loss = sample_loss_on_tape(&mut tape, &f.prep.lm, &p, &h, &pair.text).unwrap();
    let last = tape.scalar(loss);

    let r_c = tape.constant(Tensor2D::row_vector(&h));
    let alpha = gate_on_tape(&mut tape, &p.cfg, &p.params, r_c).unwrap();
    let adapter = p.adapter(AdapterMode::Meta(alpha));
    let all = forward_on_tape(&mut tape, &f.prep.lm.cfg, &f.prep.lm.params, &pair.text.token_ids, Some(&adapter), Rows::All)
        .unwrap()
        .logits;
    let mut targets: Vec<usize> = pair.text.token_ids[1..].to_vec();
    targets.push(pair.text.label_token);
    let l = answer_only_loss(&mut tape, all, &targets, pair.text.answer_pos).unwrap();
    assert!((tape.scalar(l) - last).abs() < 1e-12);
    let logits = tape.value(all).clone();
    let sy = logits.get(pair.text.answer_pos, crate::prompting::YES);
    let sn = logits.get(pair.text.answer_pos, crate::prompting::NO);
    assert!((predict_one(&f.prep.lm, &p, &h, &pair.text.token_ids).unwrap() - yes_probability(sy, sn)).abs() < 1e-12);

    // Prompt-position targets never matter.
    for t in 0..pair.text.answer_pos {
        let mut other = targets.clone();
        other[t] = (other[t] + 1) % f.prep.vocab.len();
        let l2 = answer_only_loss(&mut tape, all, &other, pair.text.answer_pos).unwrap();
        assert_eq!(tape.scalar(l2), tape.scalar(l));
    }
}

#[test]
fn run_dir_round_trip_and_refusal() {
    let cfg = tiny_cfg();
    let prep = Prepared::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), false).unwrap();
    let m = run.save_prepared(&prep).unwrap();
    assert_eq!(m.get("stage.prepare"), Some("done"));
    assert!(matches!(RunDir::create(dir.path(), false), Err(Error::State(_))));

    let (back, m2) = RunDir::open(dir.path()).unwrap().load_prepared().unwrap();
    assert_eq!(m2, m);
    assert_eq!(back.cfg, prep.cfg);
    assert_eq!(back.vocab, prep.vocab);
    assert_eq!(back.lm.params.digest(), prep.lm.params.digest());
    assert_eq!(back.index, prep.index);
    assert_eq!(back.features, prep.features);
    assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);

    std::fs::write(dir.path().join(VOCAB), "tampered").unwrap();
    assert!(matches!(run.load_prepared(), Err(Error::Integrity(_))));
    assert!(RunDir::create(dir.path(), true).is_ok());
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(RunDir::open(empty.path()), Err(Error::Dependency(_))));
}

#[test]
fn valid_subset_is_seeded_and_sorted() {
    let prep = Prepared::new(&tiny_cfg()).unwrap();
    let a = prep.valid_subset(10);
    let b = prep.valid_subset(10);
    assert_eq!(a.len(), 10.min(prep.data.valid.len()));
    let key = |v: &[Sample]| v.iter().map(|s| (s.user_id.to_string(), s.target.id.clone())).collect::<Vec<_>>();
    assert_eq!(key(&a), key(&b));
    assert_eq!(prep.valid_subset(0).len(), prep.data.valid.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trips_any_store(
        shapes in proptest::collection::vec((0usize..5, 0usize..5), 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = seeded_rng(seed);
        let mut p = ParamStore::new();
        for (i, (r, c)) in shapes.into_iter().enumerate() {
            p.insert(format!("p{i}"), Tensor2D::randn(r, c, 10.0, &mut rng), i % 2 == 0);
        }
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        prop_assert_eq!(back.digest(), p.digest());
    }
}
