//! Two-stage training and scoring. Stage 1 fits the recommendation model on
//! the full training split; stage 2 tunes only the personalized adapter on a
//! few-shot subset while the language model and the recommendation model stay
//! frozen.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, save_checkpoint};
pub use config::{is_prepare_key, PipelineConfig, Seeds, TrainConfig, KEYS};
pub use run::{file_digest, split_digest, RunDir, RunManifest, CONFIG, CRM_CKPT, FEATURES, INDEX_DIR, LM_CKPT, MANIFEST, METRICS, PLORA_CKPT, VOCAB};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::crm::{Crm, CrmConfig, FeatureEncoder, IdSample};
use crate::data::{
    build_samples, chrono_split, fewshot_indices, k_core_filter, parse_interactions, seeded_rng, synth_generate,
    DataFormat, Sample, SplitDataset,
};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::numerics::{AdamW, Tape, Tensor2D, Var};
use crate::plora::{gate_on_tape, AdapterMode, Plora};
use crate::prompting::{render_prompt, TextSample, Vocab};
use crate::retriever::{fit_index_pca, recent_k, Assembler, BehaviorIndex, ModalityPair, RetrievalConfig, SemanticEncoder};
use crate::tiny_lm::{forward_on_tape, score_yes_no, LmConfig, Rows, TinyLm};

/// Seed offsets so each model draws from its own stream.
const CRM_SEED: u64 = 0x0c12;
const PLORA_SEED: u64 = 0x91a0;

pub fn load_dataset(cfg: &PipelineConfig) -> Result<SplitDataset> {
    let Some(path) = &cfg.source else {
        return synth_generate(&cfg.synth_spec());
    };
    let format = DataFormat::from_id(&cfg.format, cfg.movies.clone())?;
    let interactions = k_core_filter(parse_interactions(path, &format)?, cfg.min_core);
    let samples = build_samples(&interactions, cfg.binarize);
    if samples.len() < 10 {
        return Err(Error::Format(format!(
            "{} leaves {} samples after {}-core filtering",
            path.display(),
            samples.len(),
            cfg.min_core
        )));
    }
    chrono_split(samples, (8, 1, 1))
}

/// Word-frequency vocabulary over the training prompts, rendered with each
/// sample's most recent behaviors.
pub fn build_vocab(train: &[Sample], k_short: usize, max_size: usize) -> Result<Vocab> {
    let prompts: Vec<String> = train
        .iter()
        .map(|s| {
            let h = s.history();
            let recent: Vec<_> = recent_k(h.len(), k_short).into_iter().map(|p| h[p].clone()).collect();
            render_prompt(&recent, &s.target, k_short)
        })
        .collect();
    Vocab::build(prompts.iter().map(String::as_str), max_size)
}

/// Everything the training stages share: data, vocabulary, base LM, feature
/// encoder and behavior index.
pub struct Prepared {
    pub cfg: PipelineConfig,
    pub data: SplitDataset,
    pub vocab: Vocab,
    pub lm: TinyLm,
    pub features: FeatureEncoder,
    pub index: BehaviorIndex,
}

pub fn base_lm(cfg: &PipelineConfig, vocab: &Vocab) -> Result<TinyLm> {
    TinyLm::init(
        LmConfig {
            vocab_size: vocab.len(),
            ..cfg.lm.clone()
        },
        cfg.seeds.model,
    )
}

impl Prepared {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_dataset(cfg)?;
        Self::from_data(cfg, data)
    }

    pub fn from_data(cfg: &PipelineConfig, data: SplitDataset) -> Result<Self> {
        let vocab = build_vocab(&data.train, cfg.retrieval.k_short, cfg.vocab_max)?;
        let lm = base_lm(cfg, &vocab)?;
        let features = FeatureEncoder::build(data.all(), cfg.feature_space)?;
        let mut enc = SemanticEncoder::new(&lm, &vocab);
        let pca = fit_index_pca(&data.train, &mut enc, cfg.retrieval.d_pca)?;
        let index = BehaviorIndex::build(data.all(), &mut enc, pca)?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            vocab,
            lm,
            features,
            index,
        })
    }

    pub fn crm_config(&self, cfg: &PipelineConfig) -> CrmConfig {
        let (n_users, n_items, n_genres, n_contexts) = self.features.sizes();
        CrmConfig {
            embed_dim: cfg.crm_embed_dim,
            att_hidden: cfg.crm_att_hidden,
            mlp: cfg.crm_mlp.clone(),
            n_users,
            n_items,
            n_genres,
            n_contexts,
        }
    }

    pub fn assembler<'a>(&'a self, retrieval: &'a RetrievalConfig) -> Assembler<'a> {
        Assembler::new(retrieval, &self.index, &self.lm, &self.vocab, &self.features)
    }

    pub fn modalities(&self, samples: &[Sample], retrieval: &RetrievalConfig) -> Result<ModalitySet> {
        let mut asm = self.assembler(retrieval);
        Ok(ModalitySet {
            pairs: asm.assemble_all(samples)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn id_samples(&self, samples: &[Sample], retrieval: &RetrievalConfig) -> Result<IdSet> {
        let mut asm = self.assembler(retrieval);
        Ok(IdSet {
            samples: samples.iter().map(|s| asm.assemble_id(s)).collect::<Result<_>>()?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    /// Uniform few-shot draw from the training split, capped at its size.
    pub fn fewshot(&self, n: usize) -> Result<Vec<Sample>> {
        let idx = fewshot_indices(self.data.train.len(), n.min(self.data.train.len()), self.cfg.seeds.sampling)?;
        Ok(idx.into_iter().map(|i| self.data.train[i].clone()).collect())
    }

    /// The first `n` validation samples of a seeded shuffle; all when `n` is 0.
    pub fn valid_subset(&self, n: usize) -> Vec<Sample> {
        let v = &self.data.valid;
        if n == 0 || n >= v.len() {
            return v.clone();
        }
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut seeded_rng(self.cfg.seeds.sampling ^ 0x7a11d));
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i].clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct IdSet {
    pub samples: Vec<IdSample>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ModalitySet {
    pub pairs: Vec<ModalityPair>,
    pub labels: Vec<u8>,
}

impl ModalitySet {
    pub fn id_set(&self) -> IdSet {
        IdSet {
            samples: self.pairs.iter().map(|p| p.id.clone()).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// AUC, or `None` when the labels hold a single class.
fn auc_or_none(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    match auc(labels, scores) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CrmTraining {
    pub crm: Crm,
    /// False when no epoch ran and the initial parameters were returned.
    pub trained: bool,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
}

/// Mini-batch BCE with Adam, early stopping on validation AUC. Returns the
/// parameters of the best epoch.
pub fn stage1_train_crm(
    cfg: CrmConfig,
    train: &IdSet,
    valid: &IdSet,
    tc: &TrainConfig,
    seeds: Seeds,
) -> Result<CrmTraining> {
    let mut crm = Crm::init(cfg, seeds.model ^ CRM_SEED)?;
    let mut out = CrmTraining {
        crm: crm.clone(),
        trained: false,
        best_epoch: None,
        epochs: Vec::new(),
    };
    if tc.epochs == 0 || train.samples.is_empty() {
        return Ok(out);
    }
    let mut opt = AdamW::new(tc.lr);
    let mut rng = seeded_rng(seeds.sampling ^ CRM_SEED);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch) {
            let batch: Vec<&IdSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
            total += crm.train_step(&batch, &labels, &mut opt)? * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let valid_auc = auc_or_none(&valid.labels, &crm.predict(&valid.samples, 512)?)?;
        out.epochs.push(EpochLog { train_loss, valid_auc });
        // Without a usable validation signal the latest epoch wins.
        let score = valid_auc.unwrap_or(epoch as f64);
        if score > best {
            best = score;
            stale = 0;
            out.crm = crm.clone();
            out.best_epoch = Some(epoch);
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    out.trained = true;
    Ok(out)
}

/// Last MLP hidden state of the frozen recommendation model per sample.
pub fn crm_states(crm: &Crm, ids: &[IdSample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(512) {
        let refs: Vec<&IdSample> = chunk.iter().collect();
        out.extend(crm.forward(&refs)?.into_iter().map(|o| o.h_id));
    }
    Ok(out)
}

/// Gate, adapted forward pass and last-position logits for one sample.
/// `h_id` enters as a constant so no gradient reaches the recommendation
/// model.
pub fn adapted_logits(tape: &mut Tape, lm: &TinyLm, plora: &Plora, h_id: &[f64], tokens: &[usize]) -> Result<Var> {
    let r_c = tape.constant(Tensor2D::row_vector(h_id));
    let alpha = gate_on_tape(tape, &plora.cfg, &plora.params, r_c)?;
    let adapter = plora.adapter(AdapterMode::Meta(alpha));
    Ok(forward_on_tape(tape, &lm.cfg, &lm.params, tokens, Some(&adapter), Rows::Last)?.logits)
}

/// Cross-entropy of the answer position only. `targets[t]` is the
/// supervision for position `t`; every other position is ignored.
pub fn answer_only_loss(tape: &mut Tape, logits: Var, targets: &[usize], answer_pos: usize) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if answer_pos >= rows || targets.len() != rows {
        return Err(Error::Index(format!(
            "answer position {answer_pos} with {rows} logit rows and {} targets",
            targets.len()
        )));
    }
    let row = tape.slice_rows(logits, answer_pos, answer_pos + 1)?;
    tape.cross_entropy(row, &[targets[answer_pos]])
}

/// Stage-2 loss of one sample.
pub fn sample_loss_on_tape(tape: &mut Tape, lm: &TinyLm, plora: &Plora, h_id: &[f64], text: &TextSample) -> Result<Var> {
    let logits = adapted_logits(tape, lm, plora, h_id, &text.token_ids)?;
    tape.cross_entropy(logits, &[text.label_token])
}

pub fn predict_one(lm: &TinyLm, plora: &Plora, h_id: &[f64], tokens: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = adapted_logits(&mut tape, lm, plora, h_id, tokens)?;
    score_yes_no(tape.value(logits), 0)
}

/// Yes-probabilities for precomputed recommendation-model states.
pub fn predict_many(lm: &TinyLm, plora: &Plora, states: &[Vec<f64>], pairs: &[ModalityPair]) -> Result<Vec<f64>> {
    if states.len() != pairs.len() {
        return Err(Error::Dimension(format!(
            "{} states for {} samples",
            states.len(),
            pairs.len()
        )));
    }
    states
        .iter()
        .zip(pairs)
        .map(|(h, p)| predict_one(lm, plora, h, &p.text.token_ids))
        .collect()
}

/// Full path from modalities to probabilities.
pub fn predict(lm: &TinyLm, crm: &Crm, plora: &Plora, pairs: &[ModalityPair]) -> Result<Vec<f64>> {
    let ids: Vec<IdSample> = pairs.iter().map(|p| p.id.clone()).collect();
    predict_many(lm, plora, &crm_states(crm, &ids)?, pairs)
}

/// The base LM without any adapter.
pub fn predict_base(lm: &TinyLm, pairs: &[ModalityPair]) -> Result<Vec<f64>> {
    pairs.iter().map(|p| lm.score(&p.text.token_ids, None)).collect()
}

#[derive(Debug, Clone)]
pub struct PloraTraining {
    pub plora: Plora,
    pub trained: bool,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
}

pub fn init_plora(lm: &TinyLm, cfg: &PipelineConfig, d_c: usize) -> Result<Plora> {
    let pc = crate::plora::PloraConfig {
        d_c,
        ..cfg.plora.clone()
    };
    Plora::init(pc, lm.cfg.d_model, lm.cfg.n_layers, cfg.seeds.model ^ PLORA_SEED)
}

/// Few-shot tuning of the adapter. The language model and the recommendation
/// model are borrowed immutably and their digests are checked on exit.
pub fn stage2_tune_plora(
    lm: &TinyLm,
    crm: &Crm,
    mut plora: Plora,
    train: &ModalitySet,
    valid: &ModalitySet,
    tc: &TrainConfig,
    seeds: Seeds,
) -> Result<PloraTraining> {
    let lm_digest = lm.params.digest();
    let crm_digest = crm.params.digest();
    let mut out = PloraTraining {
        plora: plora.clone(),
        trained: false,
        best_epoch: None,
        epochs: Vec::new(),
    };
    if tc.epochs == 0 || train.is_empty() {
        return Ok(out);
    }
    let train_states = crm_states(crm, &train.id_set().samples)?;
    let valid_states = crm_states(crm, &valid.id_set().samples)?;

    let mut opt = AdamW::new(tc.lr);
    let mut rng = seeded_rng(seeds.sampling ^ PLORA_SEED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch) {
            plora.params.zero_grad();
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = sample_loss_on_tape(&mut tape, lm, &plora, &train_states[i], &train.pairs[i].text)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Training(format!("non-finite adapter loss at epoch {epoch}")));
                }
                total += value;
                let scaled = tape.scale(loss, w);
                tape.backward_into(scaled, &mut plora.params)?;
            }
            opt.step(&mut plora.params)?;
        }
        let train_loss = total / order.len() as f64;
        let scores = predict_many(lm, &plora, &valid_states, &valid.pairs)?;
        let valid_auc = auc_or_none(&valid.labels, &scores)?;
        out.epochs.push(EpochLog { train_loss, valid_auc });
        let score = valid_auc.unwrap_or(epoch as f64);
        if score > best {
            best = score;
            stale = 0;
            out.plora = plora.clone();
            out.best_epoch = Some(epoch);
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    if lm.params.digest() != lm_digest || crm.params.digest() != crm_digest {
        return Err(Error::Integrity("a frozen parameter changed during adapter tuning".into()));
    }
    out.trained = true;
    Ok(out)
}

/// Scores on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

/// Test-time scores of the tuned model, the stage-1 model alone and the base
/// LM, keyed by those names.
pub fn score_systems(
    lm: &TinyLm,
    crm: &Crm,
    plora: &Plora,
    test: &ModalitySet,
) -> Result<BTreeMap<&'static str, Scored>> {
    let ids = test.id_set();
    let mut out = BTreeMap::new();
    let scored = |scores| Scored {
        labels: test.labels.clone(),
        scores,
    };
    out.insert("plora", scored(predict(lm, crm, plora, &test.pairs)?));
    out.insert("crm", scored(crm.predict(&ids.samples, 512)?));
    out.insert("base_lm", scored(predict_base(lm, &test.pairs)?));
    Ok(out)
}

#[cfg(test)]
mod tests;
