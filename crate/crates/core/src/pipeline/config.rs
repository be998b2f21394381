//! Flat `key = value` configuration covering every stage. Unknown keys are
//! rejected; `#` starts a comment.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::crm::FeatureSpace;
use crate::data::{BinarizeRule, SynthSpec};
use crate::error::{Error, Result};
use crate::plora::PloraConfig;
use crate::retriever::RetrievalConfig;
use crate::tiny_lm::LmConfig;

/// The three independent randomness sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    /// Synthetic generation.
    pub data: u64,
    /// Every parameter initialization.
    pub model: u64,
    /// Few-shot draws, shuffling and evaluation subsamples.
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seeds: Seeds,
    /// Interaction file; `None` generates the synthetic corpus.
    pub source: Option<PathBuf>,
    /// `movielens` or `csv`.
    pub format: String,
    pub movies: Option<PathBuf>,
    pub binarize: BinarizeRule,
    pub min_core: usize,
    pub synth: SynthSpec,
    pub lm: LmConfig,
    /// Cap on non-reserved vocabulary entries.
    pub vocab_max: usize,
    pub plora: PloraConfig,
    pub crm_embed_dim: usize,
    pub crm_att_hidden: usize,
    pub crm_mlp: Vec<usize>,
    pub feature_space: FeatureSpace,
    pub retrieval: RetrievalConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub fewshot_n: usize,
    /// Validation samples scored per stage-2 epoch; 0 means all.
    pub valid_subsample: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            seeds: Seeds {
                data: synth.seed,
                model: 1,
                sampling: 2,
            },
            source: None,
            format: "movielens".into(),
            movies: None,
            binarize: BinarizeRule::Ml1m,
            min_core: 5,
            synth,
            lm: LmConfig::default(),
            vocab_max: 1000,
            plora: PloraConfig::default(),
            crm_embed_dim: 16,
            crm_att_hidden: 32,
            crm_mlp: vec![128, 64],
            feature_space: FeatureSpace::Exact,
            retrieval: RetrievalConfig::default(),
            stage1: TrainConfig {
                lr: 1e-3,
                batch: 256,
                epochs: 20,
                patience: 3,
            },
            stage2: TrainConfig {
                lr: 5e-4,
                batch: 64,
                epochs: 10,
                patience: 2,
            },
            fewshot_n: 2048,
            valid_subsample: 0,
        }
    }
}

/// Every key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed.data", "synthetic corpus seed"),
    ("seed.model", "parameter initialization seed"),
    ("seed.sampling", "few-shot, shuffling and subsample seed"),
    ("data.source", "`synthetic` or a path to an interaction file"),
    ("data.format", "file format: movielens | csv"),
    ("data.movies", "optional MovieLens movies file (empty for none)"),
    ("data.binarize", "label rule: ml1m | ml25m | goodreads | gt:<t> | ge:<t>"),
    ("data.min_core", "k of the k-core filter"),
    ("synth.n_users", "synthetic users"),
    ("synth.n_items", "synthetic items"),
    ("synth.n_clusters", "latent user clusters"),
    ("synth.n_topics", "latent item topics"),
    ("synth.n_genres", "visible genres"),
    ("synth.min_interactions", "fewest interactions per user"),
    ("synth.max_interactions", "most interactions per user"),
    ("synth.noise_rate", "symmetric label noise"),
    ("lm.n_layers", "transformer blocks"),
    ("lm.d_model", "model width"),
    ("lm.n_heads", "attention heads"),
    ("lm.d_ff", "feed-forward width"),
    ("lm.max_seq_len", "context length"),
    ("lm.vocab_max", "vocabulary cap excluding reserved tokens"),
    ("plora.n_meta", "meta-LoRA pairs per site (N_m)"),
    ("plora.rank", "rank of each pair"),
    ("plora.lora_alpha", "LoRA alpha; the delta is scaled by alpha / rank"),
    ("plora.sigma", "std of the A init"),
    ("plora.d_h", "gate hidden width"),
    ("plora.temperature", "gate softmax temperature"),
    ("crm.embed_dim", "ID embedding width"),
    ("crm.att_hidden", "attention MLP width"),
    ("crm.mlp", "comma-separated MLP widths; the last is d_c"),
    ("crm.feature_space", "exact | hashed:<buckets>"),
    ("retrieval.k_long", "behaviors retrieved for the ID model"),
    ("retrieval.k_short", "behaviors retrieved for the prompt"),
    ("retrieval.d_pca", "PCA dimension of behavior encodings"),
    ("retrieval.long_retriever", "false uses the most recent k_long"),
    ("retrieval.short_retriever", "false uses the most recent k_short"),
    ("stage1.lr", "recommendation-model learning rate"),
    ("stage1.batch", "recommendation-model batch size"),
    ("stage1.epochs", "recommendation-model epoch budget"),
    ("stage1.patience", "epochs without validation gain before stopping"),
    ("stage2.lr", "adapter learning rate"),
    ("stage2.batch", "adapter batch size"),
    ("stage2.epochs", "adapter epoch budget"),
    ("stage2.patience", "epochs without validation gain before stopping"),
    ("stage2.fewshot_n", "few-shot training samples"),
    ("stage2.valid_subsample", "validation samples per epoch, 0 for all"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: `{v}` (expected true/false)"))),
    }
}

fn fmt_list<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Keys that shape the data, vocabulary, base model or index.
pub fn is_prepare_key(key: &str) -> bool {
    ["seed.data", "seed.model", "crm.feature_space", "retrieval.d_pca"].contains(&key)
        || ["data.", "synth.", "lm."].iter().any(|p| key.starts_with(p))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed.data" => self.seeds.data = parse(key, v)?,
            "seed.model" => self.seeds.model = parse(key, v)?,
            "seed.sampling" => self.seeds.sampling = parse(key, v)?,
            "data.source" => self.source = (v != "synthetic").then(|| PathBuf::from(v)),
            "data.format" => {
                if !matches!(v, "movielens" | "csv") {
                    return Err(Error::Config(format!("unknown data format `{v}`")));
                }
                self.format = v.to_string();
            }
            "data.movies" => self.movies = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.binarize" => self.binarize = BinarizeRule::parse(v)?,
            "data.min_core" => self.min_core = parse(key, v)?,
            "synth.n_users" => self.synth.n_users = parse(key, v)?,
            "synth.n_items" => self.synth.n_items = parse(key, v)?,
            "synth.n_clusters" => self.synth.n_clusters = parse(key, v)?,
            "synth.n_topics" => self.synth.n_topics = parse(key, v)?,
            "synth.n_genres" => self.synth.n_genres = parse(key, v)?,
            "synth.min_interactions" => self.synth.min_interactions = parse(key, v)?,
            "synth.max_interactions" => self.synth.max_interactions = parse(key, v)?,
            "synth.noise_rate" => self.synth.noise_rate = parse(key, v)?,
            "lm.n_layers" => self.lm.n_layers = parse(key, v)?,
            "lm.d_model" => self.lm.d_model = parse(key, v)?,
            "lm.n_heads" => self.lm.n_heads = parse(key, v)?,
            "lm.d_ff" => self.lm.d_ff = parse(key, v)?,
            "lm.max_seq_len" => self.lm.max_seq_len = parse(key, v)?,
            "lm.vocab_max" => self.vocab_max = parse(key, v)?,
            "plora.n_meta" => self.plora.n_meta = parse(key, v)?,
            "plora.rank" => self.plora.rank = parse(key, v)?,
            "plora.lora_alpha" => self.plora.lora_alpha = parse(key, v)?,
            "plora.sigma" => self.plora.sigma = parse(key, v)?,
            "plora.d_h" => self.plora.d_h = parse(key, v)?,
            "plora.temperature" => self.plora.temperature = parse(key, v)?,
            "crm.embed_dim" => self.crm_embed_dim = parse(key, v)?,
            "crm.att_hidden" => self.crm_att_hidden = parse(key, v)?,
            "crm.mlp" => {
                self.crm_mlp = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?;
                // The gate reads the last MLP layer.
                self.plora.d_c = self.crm_mlp.last().copied().unwrap_or(0);
            }
            "crm.feature_space" => {
                self.feature_space = if v == "exact" {
                    FeatureSpace::Exact
                } else if let Some(b) = v.strip_prefix("hashed:") {
                    FeatureSpace::Hashed(parse(key, b)?)
                } else {
                    return Err(Error::Config(format!("bad value for {key}: `{v}`")));
                }
            }
            "retrieval.k_long" => self.retrieval.k_long = parse(key, v)?,
            "retrieval.k_short" => self.retrieval.k_short = parse(key, v)?,
            "retrieval.d_pca" => self.retrieval.d_pca = parse(key, v)?,
            "retrieval.long_retriever" => self.retrieval.long_retriever = parse_bool(key, v)?,
            "retrieval.short_retriever" => self.retrieval.short_retriever = parse_bool(key, v)?,
            "stage1.lr" => self.stage1.lr = parse(key, v)?,
            "stage1.batch" => self.stage1.batch = parse(key, v)?,
            "stage1.epochs" => self.stage1.epochs = parse(key, v)?,
            "stage1.patience" => self.stage1.patience = parse(key, v)?,
            "stage2.lr" => self.stage2.lr = parse(key, v)?,
            "stage2.batch" => self.stage2.batch = parse(key, v)?,
            "stage2.epochs" => self.stage2.epochs = parse(key, v)?,
            "stage2.patience" => self.stage2.patience = parse(key, v)?,
            "stage2.fewshot_n" => self.fewshot_n = parse(key, v)?,
            "stage2.valid_subsample" => self.valid_subsample = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let feature_space = match self.feature_space {
            FeatureSpace::Exact => "exact".to_string(),
            FeatureSpace::Hashed(b) => format!("hashed:{b}"),
        };
        let values = vec![
            self.seeds.data.to_string(),
            self.seeds.model.to_string(),
            self.seeds.sampling.to_string(),
            self.source
                .as_ref()
                .map_or_else(|| "synthetic".to_string(), |p| p.display().to_string()),
            self.format.clone(),
            self.movies.as_ref().map(|m| m.display().to_string()).unwrap_or_default(),
            self.binarize.name(),
            self.min_core.to_string(),
            self.synth.n_users.to_string(),
            self.synth.n_items.to_string(),
            self.synth.n_clusters.to_string(),
            self.synth.n_topics.to_string(),
            self.synth.n_genres.to_string(),
            self.synth.min_interactions.to_string(),
            self.synth.max_interactions.to_string(),
            self.synth.noise_rate.to_string(),
            self.lm.n_layers.to_string(),
            self.lm.d_model.to_string(),
            self.lm.n_heads.to_string(),
            self.lm.d_ff.to_string(),
            self.lm.max_seq_len.to_string(),
            self.vocab_max.to_string(),
            self.plora.n_meta.to_string(),
            self.plora.rank.to_string(),
            self.plora.lora_alpha.to_string(),
            self.plora.sigma.to_string(),
            self.plora.d_h.to_string(),
            self.plora.temperature.to_string(),
            self.crm_embed_dim.to_string(),
            self.crm_att_hidden.to_string(),
            fmt_list(&self.crm_mlp),
            feature_space,
            self.retrieval.k_long.to_string(),
            self.retrieval.k_short.to_string(),
            self.retrieval.d_pca.to_string(),
            self.retrieval.long_retriever.to_string(),
            self.retrieval.short_retriever.to_string(),
            self.stage1.lr.to_string(),
            self.stage1.batch.to_string(),
            self.stage1.epochs.to_string(),
            self.stage1.patience.to_string(),
            self.stage2.lr.to_string(),
            self.stage2.batch.to_string(),
            self.stage2.epochs.to_string(),
            self.stage2.patience.to_string(),
            self.fewshot_n.to_string(),
            self.valid_subsample.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn to_kv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fails when a key that `prepare` baked into the run directory differs
    /// from `prepared`.
    pub fn check_prepared(&self, prepared: &PipelineConfig) -> Result<()> {
        for ((k, a), (_, b)) in self.entries().into_iter().zip(prepared.entries()) {
            if is_prepare_key(k) && a != b {
                return Err(Error::Config(format!(
                    "{k} was {b} at prepare time; prepare a new run directory to use {a}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }

    /// Synthetic spec with the data seed applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seeds.data,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.is_none() {
            self.synth_spec().validate()?;
        }
        self.plora.validate()?;
        self.retrieval.validate()?;
        if self.retrieval.d_pca > self.lm.d_model {
            return Err(Error::Config(format!(
                "retrieval.d_pca {} exceeds lm.d_model {}",
                self.retrieval.d_pca, self.lm.d_model
            )));
        }
        let mut lm = self.lm.clone();
        lm.vocab_size = lm.vocab_size.max(1);
        lm.validate()?;
        if self.crm_embed_dim == 0 || self.crm_att_hidden == 0 || self.crm_mlp.is_empty() || self.crm_mlp.contains(&0) {
            return Err(Error::Config("recommendation-model widths must be positive".into()));
        }
        if *self.crm_mlp.last().unwrap_or(&0) != self.plora.d_c {
            return Err(Error::Config(format!(
                "last crm.mlp width {} must equal the gate input width {}",
                self.crm_mlp.last().unwrap_or(&0),
                self.plora.d_c
            )));
        }
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(t.lr >= 0.0) || !t.lr.is_finite() || t.batch == 0 {
                return Err(Error::Config(format!("{name}: lr must be finite and >= 0, batch >= 1")));
            }
        }
        if self.fewshot_n == 0 {
            return Err(Error::Config("stage2.fewshot_n must be positive".into()));
        }
        Ok(())
    }
}
