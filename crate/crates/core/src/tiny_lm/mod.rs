//! A small pre-norm causal transformer with adapter hooks on the query and
//! value projections.

use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamStore, Tape, Tensor2D, Var, LN_EPS};
use crate::plora::{Adapter, LoraSite, Projection};
use crate::prompting::{NO, YES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            vocab_size: 1000,
            max_seq_len: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= NO {
            return Err(Error::Config("vocabulary smaller than the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Which rows a forward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rows {
    All,
    /// Only the final position. The last layer then computes its query,
    /// residual and feed-forward for that row alone.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmForwardResult {
    /// positions × vocab
    pub logits: Tensor2D,
    /// positions × d_model, output of the last block
    pub hidden_last: Tensor2D,
}

#[derive(Debug, Clone, Copy)]
pub struct LmVars {
    pub logits: Var,
    pub hidden: Var,
}

fn lname(layer: usize, rest: &str) -> String {
    format!("l{layer}.{rest}")
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub params: ParamStore,
}

impl TinyLm {
    /// Weights `N(0, 0.02²)`, zero biases, unit layer-norm gains. All entries
    /// are created frozen.
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut p = ParamStore::new();
        let mut w = |p: &mut ParamStore, name: String, r: usize, c: usize| {
            p.insert(name, Tensor2D::randn(r, c, 0.02, &mut rng), false);
        };
        w(&mut p, "tok_emb".into(), v, d);
        w(&mut p, "pos_emb".into(), cfg.max_seq_len, d);
        for l in 0..cfg.n_layers {
            for m in ["wq", "wk", "wv", "wo"] {
                w(&mut p, lname(l, &format!("attn.{m}")), d, d);
            }
            w(&mut p, lname(l, "ff.w1"), d, f);
            w(&mut p, lname(l, "ff.w2"), f, d);
        }
        w(&mut p, "head.w".into(), d, v);
        for l in 0..cfg.n_layers {
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo", "ln1.b", "ln2.b", "ff.b2"] {
                p.insert(lname(l, b), Tensor2D::zeros(1, d), false);
            }
            p.insert(lname(l, "ff.b1"), Tensor2D::zeros(1, f), false);
            p.insert(lname(l, "ln1.g"), Tensor2D::full(1, d, 1.0), false);
            p.insert(lname(l, "ln2.g"), Tensor2D::full(1, d, 1.0), false);
        }
        p.insert("lnf.g", Tensor2D::full(1, d, 1.0), false);
        p.insert("lnf.b", Tensor2D::zeros(1, d), false);
        p.insert("head.b", Tensor2D::zeros(1, v), false);
        Ok(Self { cfg, params: p })
    }

    /// Full forward over every position.
    pub fn forward(&self, tokens: &[usize], adapter: Option<&Adapter<'_>>) -> Result<LmForwardResult> {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, &self.cfg, &self.params, tokens, adapter, Rows::All)?;
        Ok(LmForwardResult {
            logits: tape.value(out.logits).clone(),
            hidden_last: tape.value(out.hidden).clone(),
        })
    }

    /// Last-position hidden state of the last block, without adapters.
    pub fn encode_behavior(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Domain("cannot encode an empty behavior".into()));
        }
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, &self.cfg, &self.params, tokens, None, Rows::Last)?;
        Ok(tape.value(out.hidden).row(0).to_vec())
    }

    /// Yes-probability at the last position.
    pub fn score(&self, tokens: &[usize], adapter: Option<&Adapter<'_>>) -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, &self.cfg, &self.params, tokens, adapter, Rows::Last)?;
        score_yes_no(tape.value(out.logits), 0)
    }
}

/// Builds the forward pass on `tape`. With [`Rows::Last`] the outputs have a
/// single row.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &LmConfig,
    params: &ParamStore,
    tokens: &[usize],
    adapter: Option<&Adapter<'_>>,
    rows: Rows,
) -> Result<LmVars> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Domain("empty token sequence".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Length(format!(
            "{n} tokens exceed max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let p = |tape: &mut Tape, name: &str| tape.param(params, name);
    let tok = p(tape, "tok_emb")?;
    let pos = p(tape, "pos_emb")?;
    let te = tape.gather_rows(tok, tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let pe = tape.gather_rows(pos, &positions)?;
    let mut x = tape.add(te, pe)?;

    let dh = cfg.d_model / cfg.n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let last_only = rows == Rows::Last && l + 1 == cfg.n_layers;
        let g1 = p(tape, &lname(l, "ln1.g"))?;
        let b1 = p(tape, &lname(l, "ln1.b"))?;
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let q_in = if last_only { tape.slice_rows(h, n - 1, n)? } else { h };

        let proj = |tape: &mut Tape, input: Var, w: &str, b: &str, site: Option<Projection>| -> Result<Var> {
            let wv = tape.param(params, &lname(l, w))?;
            let bv = tape.param(params, &lname(l, b))?;
            let y = tape.matmul(input, wv)?;
            let y = tape.add_row(y, bv)?;
            match (site, adapter) {
                (Some(projection), Some(ad)) => {
                    let d = ad.delta(tape, LoraSite { layer: l, projection }, input)?;
                    tape.add(y, d)
                }
                _ => Ok(y),
            }
        };
        let q = proj(tape, q_in, "attn.wq", "attn.bq", Some(Projection::Query))?;
        let k = proj(tape, h, "attn.wk", "attn.bk", None)?;
        let v = proj(tape, h, "attn.wv", "attn.bv", Some(Projection::Value))?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, hd * dh, (hd + 1) * dh)?,
                    tape.slice_cols(k, hd * dh, (hd + 1) * dh)?,
                    tape.slice_cols(v, hd * dh, (hd + 1) * dh)?,
                )
            };
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            // A lone final-row query may see every key.
            let att = if last_only {
                tape.softmax_rows(s, 1.0)?
            } else {
                tape.masked_softmax_rows(s, Mask::Causal)?
            };
            heads.push(tape.matmul(att, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let a = proj(tape, o, "attn.wo", "attn.bo", None)?;
        let resid = if last_only { tape.slice_rows(x, n - 1, n)? } else { x };
        x = tape.add(resid, a)?;

        let g2 = p(tape, &lname(l, "ln2.g"))?;
        let b2 = p(tape, &lname(l, "ln2.b"))?;
        let h2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let f = proj(tape, h2, "ff.w1", "ff.b1", None)?;
        let f = tape.relu(f);
        let f = proj(tape, f, "ff.w2", "ff.b2", None)?;
        x = tape.add(x, f)?;
    }

    let gf = p(tape, "lnf.g")?;
    let bf = p(tape, "lnf.b")?;
    let hf = tape.layer_norm(x, gf, bf, LN_EPS)?;
    let hw = p(tape, "head.w")?;
    let hb = p(tape, "head.b")?;
    let logits = tape.matmul(hf, hw)?;
    let logits = tape.add_row(logits, hb)?;
    Ok(LmVars { logits, hidden: x })
}

/// Two-way softmax over the Yes and No logits of one row.
pub fn score_yes_no(logits: &Tensor2D, row: usize) -> Result<f64> {
    if row >= logits.rows() || logits.cols() <= NO {
        return Err(Error::Index(format!(
            "answer row {row} outside {}x{} logits",
            logits.rows(),
            logits.cols()
        )));
    }
    let r = logits.row(row);
    Ok(yes_probability(r[YES], r[NO]))
}

/// `exp(s_y) / (exp(s_y) + exp(s_n))`, clamped away from 0 and 1.
pub fn yes_probability(s_yes: f64, s_no: f64) -> f64 {
    crate::numerics::clamp_prob(crate::numerics::sigmoid_scalar(s_yes - s_no))
}
