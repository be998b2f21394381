//! Long-short modality retrieval: behaviors are encoded by the frozen base
//! LM, reduced with PCA, and ranked per target by cosine similarity. The
//! long list feeds the ID model in time order, the short list feeds the
//! prompt in relevance order.

mod pca;
mod store;

pub use pca::{fit_pca, PcaModel};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::crm::{FeatureEncoder, IdSample};
use crate::data::{Behavior, Item, Sample};
use crate::error::{Error, Result};
use crate::prompting::{item_text, render_prompt, TextSample, Vocab, BOS};
use crate::tiny_lm::TinyLm;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalConfig {
    pub k_long: usize,
    pub k_short: usize,
    pub d_pca: usize,
    /// When false the long list is the `k_long` most recent behaviors.
    pub long_retriever: bool,
    /// When false the short list is the `k_short` most recent behaviors.
    pub short_retriever: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_long: 60,
            k_short: 10,
            d_pca: 32,
            long_retriever: true,
            short_retriever: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_short == 0 || self.k_long <= self.k_short {
            return Err(Error::Config(format!(
                "need k_long > k_short >= 1, got k_long={} k_short={}",
                self.k_long, self.k_short
            )));
        }
        if self.d_pca == 0 {
            return Err(Error::Config("d_pca must be positive".into()));
        }
        Ok(())
    }
}

/// Encodes item text with the base LM, caching by text. Behavior text is the
/// same rendering the prompt uses for an item.
pub struct SemanticEncoder<'a> {
    lm: &'a TinyLm,
    vocab: &'a Vocab,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> SemanticEncoder<'a> {
    pub fn new(lm: &'a TinyLm, vocab: &'a Vocab) -> Self {
        Self {
            lm,
            vocab,
            cache: HashMap::new(),
        }
    }

    /// `<bos>` plus the item's text tokens, cut to the LM context.
    pub fn tokens(&self, item: &Item) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(self.vocab.tokenize(&item_text(item)));
        t.truncate(self.lm.cfg.max_seq_len);
        t
    }

    /// Raw `d_model` encoding.
    pub fn encode(&mut self, item: &Item) -> Result<&[f64]> {
        let text = item_text(item);
        if !self.cache.contains_key(&text) {
            let v = self.lm.encode_behavior(&self.tokens(item))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite encoding for `{text}`")));
            }
            self.cache.insert(text.clone(), v);
        }
        Ok(&self.cache[&text])
    }

    pub fn project(&mut self, item: &Item, pca: &PcaModel) -> Result<Vec<f64>> {
        let raw = self.encode(item)?;
        pca.project(raw)
    }
}

/// Fits the PCA on one encoding per distinct behavior text found in the
/// training samples (targets and histories).
pub fn fit_index_pca(train: &[Sample], encoder: &mut SemanticEncoder<'_>, d_pca: usize) -> Result<PcaModel> {
    let mut items: BTreeMap<String, &Item> = BTreeMap::new();
    for s in train {
        items.entry(item_text(&s.target)).or_insert(&s.target);
        for b in s.history() {
            items.entry(item_text(&b.item)).or_insert(&b.item);
        }
    }
    let mut vectors = Vec::with_capacity(items.len());
    for item in items.values() {
        vectors.push(encoder.encode(item)?.to_vec());
    }
    fit_pca(&vectors, d_pca)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedBehavior {
    /// Position on the user's timeline.
    pub position: usize,
    pub vector: Vec<f64>,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorIndex {
    pub pca: PcaModel,
    users: BTreeMap<String, Vec<IndexedBehavior>>,
}

impl BehaviorIndex {
    /// Encodes every behavior on every timeline reachable from `samples`.
    pub fn build<'s>(
        samples: impl IntoIterator<Item = &'s Sample>,
        encoder: &mut SemanticEncoder<'_>,
        pca: PcaModel,
    ) -> Result<Self> {
        let mut users = BTreeMap::new();
        for s in samples {
            if users.contains_key(&*s.user_id) {
                continue;
            }
            let mut entries = Vec::with_capacity(s.timeline().len());
            for (position, b) in s.timeline().iter().enumerate() {
                entries.push(IndexedBehavior {
                    position,
                    vector: encoder.project(&b.item, &pca)?,
                    timestamp: b.timestamp,
                });
            }
            users.insert(s.user_id.to_string(), entries);
        }
        Ok(Self { pca, users })
    }

    pub fn user(&self, user_id: &str) -> Option<&[IndexedBehavior]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[IndexedBehavior])> {
        self.users.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Timeline positions of the top `k` behaviors among the first
    /// `history_len` of `user_id`, in rank order.
    pub fn retrieve(&self, user_id: &str, history_len: usize, query: &[f64], k: usize) -> Result<Vec<usize>> {
        let entries = self
            .users
            .get(user_id)
            .ok_or_else(|| Error::Index(format!("user `{user_id}` is not indexed")))?;
        if history_len > entries.len() {
            return Err(Error::Index(format!(
                "history of {history_len} exceeds the {} indexed behaviors of `{user_id}`",
                entries.len()
            )));
        }
        let cands = &entries[..history_len];
        Ok(rank_topk(cands, query, k)?.into_iter().map(|i| cands[i].position).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        store::save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        store::load(dir)
    }

    pub(crate) fn from_parts(pca: PcaModel, users: BTreeMap<String, Vec<IndexedBehavior>>) -> Self {
        Self { pca, users }
    }
}

/// Cosine similarity; a zero-norm side gives −1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Rank order: similarity descending, then newer timestamp, then later
/// position.
fn rank_cmp(a: (f64, i64, usize), b: (f64, i64, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.cmp(&a.1))
        .then_with(|| b.2.cmp(&a.2))
}

/// Indices into `candidates` of the top `min(k, len)` entries in rank order.
pub fn rank_topk(candidates: &[IndexedBehavior], query: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.vector.len() != query.len()) {
        return Err(Error::Dimension(format!(
            "behavior vector of {} against a query of {}",
            c.vector.len(),
            query.len()
        )));
    }
    let mut keyed: Vec<((f64, i64, usize), usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| ((cosine(&c.vector, query), c.timestamp, c.position), i))
        .collect();
    let k = k.min(keyed.len());
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k, |a, b| rank_cmp(a.0, b.0));
        keyed.truncate(k);
    }
    keyed.sort_by(|a, b| rank_cmp(a.0, b.0));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// The `k` most recent positions among the first `history_len`, newest
/// first.
pub fn recent_k(history_len: usize, k: usize) -> Vec<usize> {
    (history_len.saturating_sub(k)..history_len).rev().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPair {
    pub id: IdSample,
    pub text: TextSample,
    /// Long list, timeline positions in time order.
    pub long: Vec<usize>,
    /// Short list, timeline positions in rank order.
    pub short: Vec<usize>,
}

/// Everything needed to turn a sample into its two modalities.
pub struct Assembler<'a> {
    pub cfg: &'a RetrievalConfig,
    pub index: &'a BehaviorIndex,
    pub encoder: SemanticEncoder<'a>,
    pub features: &'a FeatureEncoder,
    pub vocab: &'a Vocab,
}

impl<'a> Assembler<'a> {
    pub fn new(
        cfg: &'a RetrievalConfig,
        index: &'a BehaviorIndex,
        lm: &'a TinyLm,
        vocab: &'a Vocab,
        features: &'a FeatureEncoder,
    ) -> Self {
        Self {
            cfg,
            index,
            encoder: SemanticEncoder::new(lm, vocab),
            features,
            vocab,
        }
    }

    /// `(long, short)` timeline positions: long in time order, short in rank
    /// order.
    fn lists(&mut self, sample: &Sample, with_short: bool) -> Result<(Vec<usize>, Vec<usize>)> {
        let h = sample.history().len();
        if h == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let needs_query = self.cfg.long_retriever || (with_short && self.cfg.short_retriever);
        let query = if needs_query {
            self.encoder.project(&sample.target, &self.index.pca)?
        } else {
            Vec::new()
        };
        let pick = |enabled: bool, k: usize| -> Result<Vec<usize>> {
            if enabled {
                self.index.retrieve(&sample.user_id, h, &query, k)
            } else {
                Ok(recent_k(h, k))
            }
        };
        let mut long = pick(self.cfg.long_retriever, self.cfg.k_long)?;
        long.sort_unstable();
        let short = if with_short {
            pick(self.cfg.short_retriever, self.cfg.k_short)?
        } else {
            Vec::new()
        };
        Ok((long, short))
    }

    pub fn assemble(&mut self, sample: &Sample) -> Result<ModalityPair> {
        let (long, short) = self.lists(sample, true)?;
        let timeline = sample.timeline();
        let long_b: Vec<Behavior> = long.iter().map(|&p| timeline[p].clone()).collect();
        let short_b: Vec<Behavior> = short.iter().map(|&p| timeline[p].clone()).collect();
        let id = IdSample::from_sample(sample, &long_b, self.features);
        let prompt = render_prompt(&short_b, &sample.target, self.cfg.k_short);
        let text = TextSample::encode(&prompt, self.vocab, sample.label);
        let max_seq = self.encoder.lm.cfg.max_seq_len;
        if text.token_ids.len() > max_seq {
            return Err(Error::Length(format!(
                "prompt of {} tokens exceeds the context of {max_seq}",
                text.token_ids.len()
            )));
        }
        Ok(ModalityPair { id, text, long, short })
    }

    /// ID modality alone; skips prompt rendering.
    pub fn assemble_id(&mut self, sample: &Sample) -> Result<IdSample> {
        let (long, _) = self.lists(sample, false)?;
        let timeline = sample.timeline();
        let long_b: Vec<Behavior> = long.iter().map(|&p| timeline[p].clone()).collect();
        Ok(IdSample::from_sample(sample, &long_b, self.features))
    }

    pub fn assemble_all(&mut self, samples: &[Sample]) -> Result<Vec<ModalityPair>> {
        samples.iter().map(|s| self.assemble(s)).collect()
    }
}

#[cfg(test)]
mod tests;
