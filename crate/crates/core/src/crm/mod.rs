//! ID-based sequential recommendation model: embeddings, target attention
//! over a retrieved history, and an MLP whose last hidden layer is exposed
//! as the personalization signal.

mod features;

pub use features::{FeatureEncoder, FeatureSpace};

use crate::data::{seeded_rng, Behavior, Sample};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::numerics::{AdamW, Mask, ParamStore, Tape, Tensor2D, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrmConfig {
    pub embed_dim: usize,
    pub att_hidden: usize,
    /// Hidden widths of the top MLP; the last one is `d_c`.
    pub mlp: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub n_contexts: usize,
}

impl CrmConfig {
    pub fn with_vocab(encoder: &FeatureEncoder) -> Self {
        let (n_users, n_items, n_genres, n_contexts) = encoder.sizes();
        Self {
            embed_dim: 16,
            att_hidden: 32,
            mlp: vec![128, 64],
            n_users,
            n_items,
            n_genres,
            n_contexts,
        }
    }

    pub fn d_c(&self) -> usize {
        *self.mlp.last().unwrap_or(&(7 * self.embed_dim))
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.att_hidden == 0 || self.mlp.is_empty() || self.mlp.contains(&0) {
            return Err(Error::Config("recommendation model widths must be positive".into()));
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_genres == 0 || self.n_contexts == 0 {
            return Err(Error::Config("feature vocabularies must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdBehavior {
    pub item: usize,
    pub genre: usize,
    pub label: u8,
}

/// ID view of one sample. `history` holds only real behaviors, in time
/// order; padding is added per batch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdSample {
    pub user: usize,
    pub item: usize,
    pub genre: usize,
    pub context: usize,
    pub history: Vec<IdBehavior>,
}

impl IdSample {
    /// ID view of `sample` with the given behaviors as its history.
    pub fn from_sample(sample: &Sample, history: &[Behavior], encoder: &FeatureEncoder) -> Self {
        let (item, genre) = encoder.item(&sample.target);
        Self {
            user: encoder.user(&sample.user_id),
            item,
            genre,
            context: encoder.context(sample),
            history: history
                .iter()
                .map(|b| {
                    let (item, genre) = encoder.item(&b.item);
                    IdBehavior {
                        item,
                        genre,
                        label: b.label,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrmVars {
    /// batch × d_c
    pub h_id: Var,
    /// batch × 1, pre-sigmoid
    pub logit: Var,
    /// batch × 1
    pub prob: Var,
    /// batch × padded length
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrmOutput {
    pub h_id: Vec<f64>,
    pub y_hat: f64,
}

#[derive(Debug, Clone)]
pub struct Crm {
    pub cfg: CrmConfig,
    pub params: ParamStore,
}

impl Crm {
    /// Embeddings `N(0, 0.05²)`, dense weights `N(0, 2/fan_in)`, zero biases.
    /// Everything is trainable.
    pub fn init(cfg: CrmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let e = cfg.embed_dim;
        let mut p = ParamStore::new();
        for (name, rows) in [
            ("emb.user", cfg.n_users),
            ("emb.item", cfg.n_items),
            ("emb.genre", cfg.n_genres),
            ("emb.label", 2),
            ("emb.context", cfg.n_contexts),
        ] {
            p.insert(name, Tensor2D::randn(rows, e, 0.05, &mut rng), true);
        }
        let mut dense = |p: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            p.insert(format!("{prefix}.w"), Tensor2D::randn(fan_in, fan_out, std, &mut rng), true);
            p.insert(format!("{prefix}.b"), Tensor2D::zeros(1, fan_out), true);
        };
        dense(&mut p, "att.0", 8 * e, cfg.att_hidden);
        dense(&mut p, "att.1", cfg.att_hidden, 1);
        let mut width = 7 * e;
        for (i, &h) in cfg.mlp.iter().enumerate() {
            dense(&mut p, &format!("mlp.{i}"), width, h);
            width = h;
        }
        dense(&mut p, "out", width, 1);
        Ok(Self { cfg, params: p })
    }

    pub fn forward(&self, batch: &[&IdSample]) -> Result<Vec<CrmOutput>> {
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, &self.cfg, &self.params, batch, None)?;
        let h = tape.value(v.h_id);
        let y = tape.value(v.prob);
        Ok((0..batch.len())
            .map(|i| CrmOutput {
                h_id: h.row(i).to_vec(),
                y_hat: y.get(i, 0),
            })
            .collect())
    }

    /// Mean BCE over the batch, one AdamW step; returns the loss before the
    /// step.
    pub fn train_step(&mut self, batch: &[&IdSample], labels: &[u8], opt: &mut AdamW) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, &self.cfg, &self.params, batch, None)?;
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let loss = tape.bce(v.prob, &y)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite recommendation-model loss {value} on a batch of {}",
                batch.len()
            )));
        }
        self.params.zero_grad();
        tape.backward_into(loss, &mut self.params)?;
        opt.step(&mut self.params)?;
        Ok(value)
    }

    /// Click probabilities in chunks of `batch_size`.
    pub fn predict(&self, samples: &[IdSample], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&IdSample> = chunk.iter().collect();
            out.extend(self.forward(&refs)?.into_iter().map(|o| o.y_hat));
        }
        Ok(out)
    }

    pub fn auc_eval(&self, samples: &[IdSample], labels: &[u8]) -> Result<f64> {
        auc(labels, &self.predict(samples, 256)?)
    }
}

/// Batched forward. Histories are right-padded to the longest in the batch,
/// or to `pad_to` when that is larger.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &CrmConfig,
    params: &ParamStore,
    batch: &[&IdSample],
    pad_to: Option<usize>,
) -> Result<CrmVars> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let check = |id: usize, size: usize, field: &str| {
        if id >= size {
            Err(Error::Index(format!("{field} id {id} outside vocabulary of {size}")))
        } else {
            Ok(())
        }
    };
    let longest = batch.iter().map(|s| s.history.len()).max().unwrap_or(0);
    let len = longest.max(pad_to.unwrap_or(0)).max(1);
    let (mut users, mut items, mut genres, mut contexts) = (vec![], vec![], vec![], vec![]);
    let (mut h_items, mut h_genres, mut h_labels) = (vec![0; b * len], vec![0; b * len], vec![0; b * len]);
    let mut keep = vec![false; b * len];
    for (i, s) in batch.iter().enumerate() {
        check(s.user, cfg.n_users, "user")?;
        check(s.item, cfg.n_items, "item")?;
        check(s.genre, cfg.n_genres, "genre")?;
        check(s.context, cfg.n_contexts, "context")?;
        users.push(s.user);
        items.push(s.item);
        genres.push(s.genre);
        contexts.push(s.context);
        for (j, h) in s.history.iter().enumerate() {
            check(h.item, cfg.n_items, "history item")?;
            check(h.genre, cfg.n_genres, "history genre")?;
            if h.label > 1 {
                return Err(Error::Index(format!("history label {} is not 0/1", h.label)));
            }
            let k = i * len + j;
            h_items[k] = h.item;
            h_genres[k] = h.genre;
            h_labels[k] = usize::from(h.label);
            keep[k] = true;
        }
    }

    let p = |tape: &mut Tape, name: &str| tape.param(params, name);
    let e_user = p(tape, "emb.user")?;
    let e_item = p(tape, "emb.item")?;
    let e_genre = p(tape, "emb.genre")?;
    let e_label = p(tape, "emb.label")?;
    let e_ctx = p(tape, "emb.context")?;

    let user = tape.gather_rows(e_user, &users)?;
    let t_item = tape.gather_rows(e_item, &items)?;
    let t_genre = tape.gather_rows(e_genre, &genres)?;
    let target = tape.concat_cols(&[t_item, t_genre])?;
    let ctx = tape.gather_rows(e_ctx, &contexts)?;

    let hi = tape.gather_rows(e_item, &h_items)?;
    let hg = tape.gather_rows(e_genre, &h_genres)?;
    let hl = tape.gather_rows(e_label, &h_labels)?;
    let key = tape.concat_cols(&[hi, hg])?;
    let value = tape.concat_cols(&[hi, hg, hl])?;

    let tv = tape.repeat_rows(target, len)?;
    let prod = tape.mul(key, tv)?;
    let diff = tape.sub(key, tv)?;
    let att_in = tape.concat_cols(&[key, tv, prod, diff])?;
    let a = dense(tape, params, "att.0", att_in)?;
    let a = tape.relu(a);
    let scores = dense(tape, params, "att.1", a)?;
    let scores = tape.reshape(scores, b, len)?;
    let attention = tape.masked_softmax_rows(scores, Mask::Keep(&keep))?;
    let w = tape.reshape(attention, b * len, 1)?;
    let weighted = tape.mul_col(value, w)?;
    let pooled = tape.segment_sum(weighted, len)?;

    let mut x = tape.concat_cols(&[pooled, user, target, ctx])?;
    for i in 0..cfg.mlp.len() {
        let y = dense(tape, params, &format!("mlp.{i}"), x)?;
        x = tape.relu(y);
    }
    let logit = dense(tape, params, "out", x)?;
    let prob = tape.sigmoid(logit);
    Ok(CrmVars {
        h_id: x,
        logit,
        prob,
        attention,
    })
}

fn dense(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[cfg(test)]
mod tests;
