//! Clustered-user synthetic corpora.
//!
//! Every item belongs to one latent topic; topics group into coarse genres
//! that are visible as an item attribute. Each user belongs to one latent
//! cluster whose affinity vector over topics sets the like probability:
//! `q = clip(affinity · onehot(topic), 0, 1)`, then the label is drawn from
//! `Bernoulli(noise + (1 − 2·noise)·q)`, i.e. symmetric label noise. Titles
//! are random pseudo-words and carry no topic information.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{build_samples, chrono_split, seeded_rng, BinarizeRule, Interaction, SplitDataset, TITLE_ATTR};
use crate::error::{Error, Result};

pub const GENRES: [&str; 8] = [
    "Action",
    "Comedy",
    "Drama",
    "Horror",
    "Romance",
    "Thriller",
    "Documentary",
    "Animation",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "tor", "vel", "sun", "dar", "bel", "qui", "zan", "mor", "fen", "gil",
    "hus", "jor",
];

const BASE_TIMESTAMP: i64 = 978_300_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Number of latent item topics the affinities range over.
    pub n_topics: usize,
    /// Number of visible genres; topics map onto genres in contiguous blocks.
    pub n_genres: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Per-cluster affinity over topics. Drawn from `seed` when absent: each
    /// cluster likes a uniformly chosen half of the topics.
    pub affinities: Option<Vec<Vec<f64>>>,
    /// Span of the global timeline in seconds.
    pub horizon: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_clusters: 4,
            n_topics: 16,
            n_genres: 4,
            min_interactions: 15,
            max_interactions: 35,
            noise_rate: 0.1,
            seed: 7,
            affinities: None,
            horizon: 30_000_000,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_clusters < 1 {
            return bad("n_clusters must be >= 1");
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 0.5)");
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_topics == 0 {
            return bad("n_users, n_items and n_topics must be positive");
        }
        if self.n_genres == 0 || self.n_genres > GENRES.len() || self.n_genres > self.n_topics {
            return bad("n_genres must lie in 1..=min(8, n_topics)");
        }
        if self.min_interactions == 0
            || self.min_interactions > self.max_interactions
            || self.max_interactions > self.n_items
        {
            return bad("need 1 <= min_interactions <= max_interactions <= n_items");
        }
        if self.horizon < self.max_interactions as i64 {
            return bad("horizon too short for distinct timestamps");
        }
        if let Some(a) = &self.affinities {
            if a.len() != self.n_clusters || a.iter().any(|v| v.len() != self.n_topics) {
                return bad("affinities must be n_clusters vectors of n_topics values");
            }
        }
        Ok(())
    }

    /// Rating rule matching the 0/1 ratings the generator emits.
    pub fn rule(&self) -> BinarizeRule {
        BinarizeRule::Custom {
            threshold: 0.5,
            strict: false,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("synthetic spec: bad value for {k}: `{v}`")))
            };
            match k {
                "n_users" => spec.n_users = num(v)?,
                "n_items" => spec.n_items = num(v)?,
                "n_clusters" => spec.n_clusters = num(v)?,
                "n_topics" => spec.n_topics = num(v)?,
                "n_genres" => spec.n_genres = num(v)?,
                "min_interactions" => spec.min_interactions = num(v)?,
                "max_interactions" => spec.max_interactions = num(v)?,
                "horizon" => spec.horizon = num(v)? as i64,
                "seed" => spec.seed = num(v)? as u64,
                "noise_rate" => {
                    spec.noise_rate = v
                        .parse()
                        .map_err(|_| Error::Config(format!("synthetic spec: bad noise_rate `{v}`")))?
                }
                "affinities" => {
                    let rows: std::result::Result<Vec<Vec<f64>>, _> = v
                        .split(';')
                        .map(|row| row.split(',').map(|x| x.trim().parse::<f64>()).collect())
                        .collect();
                    spec.affinities = Some(rows.map_err(|_| {
                        Error::Config("synthetic spec: affinities must be `a,b,..;c,d,..`".into())
                    })?);
                }
                other => return Err(Error::Config(format!("synthetic spec: unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "n_users = {}\nn_items = {}\nn_clusters = {}\nn_topics = {}\nn_genres = {}\n\
             min_interactions = {}\nmax_interactions = {}\nnoise_rate = {}\nseed = {}\nhorizon = {}\n",
            self.n_users,
            self.n_items,
            self.n_clusters,
            self.n_topics,
            self.n_genres,
            self.min_interactions,
            self.max_interactions,
            self.noise_rate,
            self.seed,
            self.horizon
        );
        if let Some(a) = &self.affinities {
            let rows: Vec<String> = a
                .iter()
                .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                .collect();
            s.push_str(&format!("affinities = {}\n", rows.join(";")));
        }
        s
    }
}

/// Ground truth kept alongside a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub user_cluster: BTreeMap<String, usize>,
    pub item_topic: BTreeMap<String, usize>,
    pub affinities: Vec<Vec<f64>>,
}

impl SynthTruth {
    /// Noise-free like probability for a (user, item) pair.
    pub fn clean_probability(&self, user: &str, item: &str) -> f64 {
        let c = self.user_cluster[user];
        let t = self.item_topic[item];
        self.affinities[c][t].clamp(0.0, 1.0)
    }
}

/// Raw interactions with 0/1 ratings, plus the latent truth.
pub fn synth_interactions(spec: &SynthSpec) -> Result<(Vec<Interaction>, SynthTruth)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);

    let affinities = match &spec.affinities {
        Some(a) => a.clone(),
        None => (0..spec.n_clusters)
            .map(|_| {
                let mut v: Vec<f64> = (0..spec.n_topics)
                    .map(|t| if t < spec.n_topics / 2 { 1.0 } else { 0.0 })
                    .collect();
                v.shuffle(&mut rng);
                v
            })
            .collect(),
    };

    let mut topics: Vec<usize> = (0..spec.n_items).map(|i| i % spec.n_topics).collect();
    topics.shuffle(&mut rng);
    let words: Vec<String> = SYLLABLES
        .iter()
        .flat_map(|a| SYLLABLES.iter().map(move |b| capitalize(&format!("{a}{b}"))))
        .collect();
    let n_titles = words.len() * words.len();
    if spec.n_items > n_titles {
        return Err(Error::Config(format!(
            "synthetic spec: at most {n_titles} items supported"
        )));
    }
    let title_ids = rand::seq::index::sample(&mut rng, n_titles, spec.n_items).into_vec();

    let items: Vec<(String, BTreeMap<String, String>)> = (0..spec.n_items)
        .map(|i| {
            let t = title_ids[i];
            let title = format!("{} {}", words[t / words.len()], words[t % words.len()]);
            let genre = GENRES[topics[i] * spec.n_genres / spec.n_topics];
            let mut attrs = BTreeMap::new();
            attrs.insert(TITLE_ATTR.to_string(), title);
            attrs.insert("genre".to_string(), genre.to_string());
            (format!("i{i}"), attrs)
        })
        .collect();

    let mut truth = SynthTruth {
        user_cluster: BTreeMap::new(),
        item_topic: items
            .iter()
            .zip(&topics)
            .map(|((id, _), &t)| (id.clone(), t))
            .collect(),
        affinities,
    };

    let mut out = Vec::new();
    for u in 0..spec.n_users {
        let user_id = format!("u{u}");
        let cluster = rng.random_range(0..spec.n_clusters);
        truth.user_cluster.insert(user_id.clone(), cluster);
        let n = rng.random_range(spec.min_interactions..=spec.max_interactions);
        let chosen = rand::seq::index::sample(&mut rng, spec.n_items, n).into_vec();
        let mut times = rand::seq::index::sample(&mut rng, spec.horizon as usize, n).into_vec();
        times.sort_unstable();
        for (&item, &t) in chosen.iter().zip(&times) {
            let q = truth.affinities[cluster][topics[item]].clamp(0.0, 1.0);
            let p = spec.noise_rate + (1.0 - 2.0 * spec.noise_rate) * q;
            let label = rng.random_bool(p);
            out.push(Interaction {
                user_id: user_id.clone(),
                item_id: items[item].0.clone(),
                rating: if label { 1.0 } else { 0.0 },
                timestamp: BASE_TIMESTAMP + t as i64,
                item_attrs: items[item].1.clone(),
            });
        }
    }
    Ok((out, truth))
}

/// Generates, labels, builds samples and splits 8:1:1.
pub fn synth_generate(spec: &SynthSpec) -> Result<SplitDataset> {
    let (interactions, _) = synth_interactions(spec)?;
    chrono_split(build_samples(&interactions, spec.rule()), (8, 1, 1))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}
