//! Personalized low-rank adaptation: a bank of meta-LoRA pairs per
//! attachment site, a gating adapter that turns a recommendation-model
//! hidden state into mixture weights, and per-sample composition of the
//! weighted delta.
//!
//! Each site stores its bank as two concatenated matrices, `A` of shape
//! `d_in × (N_m·r)` and `B` of shape `d_out × (N_m·r)`; pair `k` is the column
//! block `k·r .. (k+1)·r` of both.

use std::fmt;

use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::numerics::{matmul, ParamStore, Tape, Tensor2D, Var, LN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

/// One adapted projection: the query or value matrix of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LoraSite {
    pub layer: usize,
    pub projection: Projection,
}

impl fmt::Display for LoraSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}", self.layer, self.projection.tag())
    }
}

/// Query and value site of every layer, layer-major.
pub fn lora_sites(n_layers: usize) -> Vec<LoraSite> {
    (0..n_layers)
        .flat_map(|layer| {
            [Projection::Query, Projection::Value]
                .map(|projection| LoraSite { layer, projection })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PloraConfig {
    /// Number of meta-LoRA pairs per site.
    pub n_meta: usize,
    pub rank: usize,
    /// LoRA alpha; the delta is scaled by `lora_alpha / rank`.
    pub lora_alpha: f64,
    /// Std of the Gaussian `A` init.
    pub sigma: f64,
    /// Width of the recommendation-model hidden state fed to the gate.
    pub d_c: usize,
    /// Gate hidden width.
    pub d_h: usize,
    pub temperature: f64,
}

impl Default for PloraConfig {
    fn default() -> Self {
        Self {
            n_meta: 16,
            rank: 8,
            lora_alpha: 16.0,
            sigma: 0.02,
            d_c: 64,
            d_h: 32,
            temperature: 1.0,
        }
    }
}

impl PloraConfig {
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_meta == 0 || self.rank == 0 || self.d_c == 0 || self.d_h == 0 {
            return Err(Error::Config(
                "n_meta, rank, d_c and d_h must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.sigma >= 0.0) || !self.lora_alpha.is_finite() {
            return Err(Error::Config("sigma must be >= 0 and lora_alpha finite".into()));
        }
        Ok(())
    }
}

pub fn a_name(site: LoraSite) -> String {
    format!("bank.{site}.a")
}

pub fn b_name(site: LoraSite) -> String {
    format!("bank.{site}.b")
}

pub const GATE_W1: &str = "gate.w1";
pub const GATE_B1: &str = "gate.b1";
pub const GATE_LN_G: &str = "gate.ln_g";
pub const GATE_LN_B: &str = "gate.ln_b";
pub const GATE_W2: &str = "gate.w2";
pub const GATE_B2: &str = "gate.b2";

/// Bank and gate parameters together with their configuration.
#[derive(Debug, Clone)]
pub struct Plora {
    pub cfg: PloraConfig,
    pub d_model: usize,
    pub sites: Vec<LoraSite>,
    pub params: ParamStore,
}

impl Plora {
    /// `A ~ N(0, σ²)`, `B = 0`; gate weights `N(0, 0.02²)`, zero biases,
    /// unit layer-norm gain. Everything is trainable.
    pub fn init(cfg: PloraConfig, d_model: usize, n_layers: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let sites = lora_sites(n_layers);
        let width = cfg.n_meta * cfg.rank;
        let mut params = ParamStore::new();
        for &site in &sites {
            params.insert(a_name(site), Tensor2D::randn(d_model, width, cfg.sigma, &mut rng), true);
            params.insert(b_name(site), Tensor2D::zeros(d_model, width), true);
        }
        params.insert(GATE_W1, Tensor2D::randn(cfg.d_c, cfg.d_h, 0.02, &mut rng), true);
        params.insert(GATE_B1, Tensor2D::zeros(1, cfg.d_h), true);
        params.insert(GATE_LN_G, Tensor2D::full(1, cfg.d_h, 1.0), true);
        params.insert(GATE_LN_B, Tensor2D::zeros(1, cfg.d_h), true);
        params.insert(GATE_W2, Tensor2D::randn(cfg.d_h, cfg.n_meta, 0.02, &mut rng), true);
        params.insert(GATE_B2, Tensor2D::zeros(1, cfg.n_meta), true);
        Ok(Self {
            cfg,
            d_model,
            sites,
            params,
        })
    }

    /// Names of every trainable entry: all bank pairs and all gate weights.
    pub fn trainables(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Pair `k` of a site as `(A_k, B_k)`, each `d × r`.
    pub fn pair(&self, site: LoraSite, k: usize) -> Result<(Tensor2D, Tensor2D)> {
        if k >= self.cfg.n_meta {
            return Err(Error::Index(format!(
                "meta index {k} outside bank of {}",
                self.cfg.n_meta
            )));
        }
        let r = self.cfg.rank;
        let block = |t: &Tensor2D| -> Result<Tensor2D> {
            let mut out = Vec::with_capacity(t.rows() * r);
            for i in 0..t.rows() {
                out.extend_from_slice(&t.row(i)[k * r..(k + 1) * r]);
            }
            Tensor2D::new(t.rows(), r, out)
        };
        Ok((
            block(self.params.value(&a_name(site))?)?,
            block(self.params.value(&b_name(site))?)?,
        ))
    }

    /// Mixture weights for one recommendation-model hidden state.
    pub fn gate(&self, r_c: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2D::row_vector(r_c));
        let a = gate_on_tape(&mut tape, &self.cfg, &self.params, x)?;
        Ok(tape.value(a).data().to_vec())
    }

    pub fn adapter<'a>(&'a self, mode: AdapterMode) -> Adapter<'a> {
        Adapter {
            cfg: &self.cfg,
            params: &self.params,
            mode,
        }
    }
}

/// How an [`Adapter`] forms each site's delta.
#[derive(Debug, Clone, Copy)]
pub enum AdapterMode {
    /// `scale · (X A) Bᵀ` with the whole bank as one pair; only meaningful
    /// with `n_meta = 1`.
    Plain,
    /// Gated composition with one `1 × N_m` weight row shared by every
    /// position of the sample.
    Meta(Var),
}

/// Borrowed view used by the language model at each attachment site.
#[derive(Debug, Clone, Copy)]
pub struct Adapter<'a> {
    pub cfg: &'a PloraConfig,
    pub params: &'a ParamStore,
    pub mode: AdapterMode,
}

impl Adapter<'_> {
    pub fn delta(&self, tape: &mut Tape, site: LoraSite, x: Var) -> Result<Var> {
        let a = tape.param(self.params, &a_name(site))?;
        let b = tape.param(self.params, &b_name(site))?;
        match self.mode {
            AdapterMode::Plain => plain_lora_on_tape(tape, x, a, b, self.cfg.scale()),
            AdapterMode::Meta(alpha) => {
                compose_on_tape(tape, x, alpha, a, b, self.cfg.n_meta, self.cfg.rank, self.cfg.scale())
            }
        }
    }
}

/// `α = softmax(β / tp)` with `β = ReLU(LN(R_c W1 + b1)) W2 + b2`; the layer
/// norm runs over the gate hidden width. `r_c` is `1 × d_c`.
pub fn gate_on_tape(tape: &mut Tape, cfg: &PloraConfig, params: &ParamStore, r_c: Var) -> Result<Var> {
    let cols = tape.value(r_c).cols();
    if cols != cfg.d_c {
        return Err(Error::Dimension(format!(
            "gate input has {cols} features, expected {}",
            cfg.d_c
        )));
    }
    let w1 = tape.param(params, GATE_W1)?;
    let b1 = tape.param(params, GATE_B1)?;
    let g = tape.param(params, GATE_LN_G)?;
    let bb = tape.param(params, GATE_LN_B)?;
    let w2 = tape.param(params, GATE_W2)?;
    let b2 = tape.param(params, GATE_B2)?;
    let h = tape.matmul(r_c, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.layer_norm(h, g, bb, LN_EPS)?;
    let h = tape.relu(h);
    let beta = tape.matmul(h, w2)?;
    let beta = tape.add_row(beta, b2)?;
    tape.softmax_rows(beta, cfg.temperature)
}

/// `N_m × (N_m·r)` matrix with ones on block `k` of row `k`; right-multiplying
/// a weight row by it repeats each weight `r` times.
fn expansion(n_meta: usize, rank: usize) -> Tensor2D {
    let mut e = Tensor2D::zeros(n_meta, n_meta * rank);
    for k in 0..n_meta {
        for j in 0..rank {
            e.set(k, k * rank + j, 1.0);
        }
    }
    e
}

/// Low-rank composition on the tape. `alpha` is either `n × N_m` or a single
/// `1 × N_m` row broadcast over the rows of `x`.
#[allow(clippy::too_many_arguments)]
pub fn compose_on_tape(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    a: Var,
    b: Var,
    n_meta: usize,
    rank: usize,
    scale: f64,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let (ar, ac) = tape.value(alpha).shape();
    if ac != n_meta || (ar != n && ar != 1) {
        return Err(Error::Dimension(format!(
            "mixture weights {ar}x{ac} for {n} rows and {n_meta} pairs"
        )));
    }
    let e = tape.constant(expansion(n_meta, rank));
    let mut w = tape.matmul(alpha, e)?;
    if ar == 1 && n != 1 {
        w = tape.repeat_rows(w, n)?;
    }
    let xa = tape.matmul(x, a)?;
    let h = tape.mul(xa, w)?;
    let y = tape.matmul_nt(h, b)?;
    Ok(tape.scale(y, scale))
}

pub fn plain_lora_on_tape(tape: &mut Tape, x: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let xa = tape.matmul(x, a)?;
    let y = tape.matmul_nt(xa, b)?;
    Ok(tape.scale(y, scale))
}

/// Per row `i`: `scale · Σ_k α[i,k] · (x_i A_k) B_kᵀ`, computed without
/// forming any `d_in × d_out` matrix. `a` and `b` hold the concatenated
/// bank of one site.
pub fn compose_apply(
    x: &Tensor2D,
    alpha: &Tensor2D,
    a: &Tensor2D,
    b: &Tensor2D,
    rank: usize,
    scale: f64,
) -> Result<Tensor2D> {
    let n_meta = alpha.cols();
    if alpha.rows() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} mixture rows for {} input rows",
            alpha.rows(),
            x.rows()
        )));
    }
    if rank == 0 || a.cols() != n_meta * rank || b.cols() != n_meta * rank {
        return Err(Error::Dimension(format!(
            "bank widths {}/{} do not match {n_meta} pairs of rank {rank}",
            a.cols(),
            b.cols()
        )));
    }
    let mut h = matmul(x, a)?;
    for i in 0..h.rows() {
        let weights = alpha.row(i).to_vec();
        for (j, v) in h.row_mut(i).iter_mut().enumerate() {
            *v *= weights[j / rank] * scale;
        }
    }
    crate::numerics::matmul_nt(&h, b)
}

/// `scale · (X A) Bᵀ`.
pub fn plain_lora_apply(x: &Tensor2D, a: &Tensor2D, b: &Tensor2D, scale: f64) -> Result<Tensor2D> {
    let xa = matmul(x, a)?;
    Ok(crate::numerics::matmul_nt(&xa, b)?.scale(scale))
}
