//! Interaction logs → labeled, chronologically split samples.

mod parse;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

pub use parse::{parse_interactions, parse_interactions_str, DataFormat};
pub use synth::{synth_generate, synth_interactions, SynthSpec, SynthTruth, GENRES};

/// Attribute name holding an item's human-readable title.
pub const TITLE_ATTR: &str = "title";

/// The generator behind every seeded draw in the crate: PCG-XSL-RR 128/64
/// (`rand_pcg::Pcg64`), seeded through `SeedableRng::seed_from_u64`.
pub type SeededRng = Pcg64;

pub fn seeded_rng(seed: u64) -> SeededRng {
    Pcg64::seed_from_u64(seed)
}

/// One raw log record.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
    pub item_attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Item {
    pub id: String,
    pub attrs: BTreeMap<String, String>,
}

impl Item {
    pub fn title(&self) -> &str {
        self.attrs.get(TITLE_ATTR).map_or("Unknown item", String::as_str)
    }

    /// Non-title attribute values in attribute-name order.
    pub fn descriptive_attrs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attrs
            .iter()
            .filter(|(k, _)| k.as_str() != TITLE_ATTR)
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// One past behavior on a user's timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub item: Arc<Item>,
    pub label: u8,
    pub timestamp: i64,
}

/// One CTR instance. The user's timeline is shared between all of that
/// user's samples; [`Sample::history`] exposes only the strictly earlier
/// prefix.
#[derive(Debug, Clone)]
pub struct Sample {
    pub user_id: Arc<str>,
    pub user_attrs: Arc<BTreeMap<String, String>>,
    pub target: Arc<Item>,
    pub context: BTreeMap<String, String>,
    pub label: u8,
    pub timestamp: i64,
    timeline: Arc<Vec<Behavior>>,
    history_len: usize,
}

impl Sample {
    /// Every behavior of this user strictly earlier than the sample, oldest
    /// first.
    pub fn history(&self) -> &[Behavior] {
        &self.timeline[..self.history_len]
    }

    pub fn timeline(&self) -> &Arc<Vec<Behavior>> {
        &self.timeline
    }

    /// Key used for every chronological ordering of samples.
    pub fn order_key(&self) -> (i64, &str, &str) {
        (self.timestamp, &self.user_id, &self.target.id)
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// First timestamp of the validation and test partitions.
    pub boundary_timestamps: (i64, i64),
}

impl SplitDataset {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Rating → {0,1} rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinarizeRule {
    /// rating ≥ 4
    Ml1m,
    /// rating > 3.0
    Ml25m,
    /// rating ≥ 4
    Goodreads,
    /// rating > threshold when `strict`, else rating ≥ threshold
    Custom { threshold: f64, strict: bool },
}

impl BinarizeRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ml1m" => Ok(Self::Ml1m),
            "ml25m" => Ok(Self::Ml25m),
            "goodreads" => Ok(Self::Goodreads),
            other => {
                let parse_threshold = |t: &str| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad binarize threshold `{t}`")))
                };
                if let Some(t) = other.strip_prefix("gt:") {
                    Ok(Self::Custom {
                        threshold: parse_threshold(t)?,
                        strict: true,
                    })
                } else if let Some(t) = other.strip_prefix("ge:") {
                    Ok(Self::Custom {
                        threshold: parse_threshold(t)?,
                        strict: false,
                    })
                } else {
                    Err(Error::Config(format!("unknown binarize rule `{other}`")))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Ml1m => "ml1m".into(),
            Self::Ml25m => "ml25m".into(),
            Self::Goodreads => "goodreads".into(),
            Self::Custom { threshold, strict } => {
                format!("{}:{threshold}", if *strict { "gt" } else { "ge" })
            }
        }
    }
}

pub fn binarize(rating: f64, rule: BinarizeRule) -> u8 {
    let positive = match rule {
        BinarizeRule::Ml1m | BinarizeRule::Goodreads => rating >= 4.0,
        BinarizeRule::Ml25m => rating > 3.0,
        BinarizeRule::Custom { threshold, strict } => {
            if strict {
                rating > threshold
            } else {
                rating >= threshold
            }
        }
    };
    u8::from(positive)
}

/// Repeatedly drops users and items with fewer than `min_count` records until
/// nothing changes. Input order is preserved.
pub fn k_core_filter(interactions: Vec<Interaction>, min_count: usize) -> Vec<Interaction> {
    let mut current = interactions;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for it in &current {
            *users.entry(&it.user_id).or_default() += 1;
            *items.entry(&it.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|it| users[it.user_id.as_str()] >= min_count && items[it.item_id.as_str()] >= min_count)
            .collect();
        if keep.iter().all(|&k| k) {
            return current;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(it, k)| k.then_some(it))
            .collect();
    }
}

pub fn five_core_filter(interactions: Vec<Interaction>) -> Vec<Interaction> {
    k_core_filter(interactions, 5)
}

/// One sample per interaction; the history of each is every interaction of
/// the same user with a strictly smaller timestamp. Within a user, records
/// are ordered by `(timestamp, item_id)`. Output is grouped by user in
/// lexicographic user order, chronological within a user.
pub fn build_samples(interactions: &[Interaction], rule: BinarizeRule) -> Vec<Sample> {
    let mut items: HashMap<&str, Arc<Item>> = HashMap::new();
    let mut per_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for it in interactions {
        items.entry(&it.item_id).or_insert_with(|| {
            Arc::new(Item {
                id: it.item_id.clone(),
                attrs: it.item_attrs.clone(),
            })
        });
        per_user.entry(&it.user_id).or_default().push(it);
    }

    let mut out = Vec::with_capacity(interactions.len());
    for (user, mut records) in per_user {
        records.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
        let timeline: Arc<Vec<Behavior>> = Arc::new(
            records
                .iter()
                .map(|r| Behavior {
                    item: Arc::clone(&items[r.item_id.as_str()]),
                    label: binarize(r.rating, rule),
                    timestamp: r.timestamp,
                })
                .collect(),
        );
        let user_id: Arc<str> = Arc::from(user);
        let user_attrs = Arc::new(BTreeMap::new());
        let mut earlier = 0;
        for (pos, b) in timeline.iter().enumerate() {
            if pos > 0 && timeline[pos - 1].timestamp < b.timestamp {
                earlier = pos;
            }
            out.push(Sample {
                user_id: Arc::clone(&user_id),
                user_attrs: Arc::clone(&user_attrs),
                target: Arc::clone(&b.item),
                context: BTreeMap::new(),
                label: b.label,
                timestamp: b.timestamp,
                timeline: Arc::clone(&timeline),
                history_len: earlier,
            });
        }
    }
    out
}

/// Sorts by `(timestamp, user_id, item_id)` and cuts by count: the first
/// `floor(n·a/(a+b+c))` samples train, the next `floor(n·b/(a+b+c))`
/// validate, the remainder test.
pub fn chrono_split(mut samples: Vec<Sample>, ratios: (u32, u32, u32)) -> Result<SplitDataset> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot split an empty sample list".into()));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    samples.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    let n = samples.len();
    let n_train = n * ratios.0 as usize / total as usize;
    let n_valid = n * ratios.1 as usize / total as usize;
    let test = samples.split_off(n_train + n_valid);
    let valid = samples.split_off(n_train);
    let boundary = |s: &[Sample]| s.first().map_or(i64::MAX, |x| x.timestamp);
    Ok(SplitDataset {
        boundary_timestamps: (boundary(&valid), boundary(&test)),
        train: samples,
        valid,
        test,
    })
}

/// Uniform draw of `n` samples without replacement; output keeps the input
/// order.
pub fn fewshot_sample(train: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(fewshot_indices(train.len(), n, seed)?
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}

pub fn fewshot_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Domain(format!(
            "few-shot size {n} exceeds training set of {len}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests;
