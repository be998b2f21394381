use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::data::{Item, Sample};
use crate::error::{Error, Result};

/// How categorical values map to embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    /// One row per value seen at build time; row 0 is shared by unseen
    /// values and empty fields.
    Exact,
    /// SHA-256 of `field:value`, reduced modulo the bucket count.
    Hashed(usize),
}

const FIELDS: [&str; 4] = ["user", "item", "genre", "context"];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    space: FeatureSpace,
    tables: [HashMap<String, usize>; 4],
    sizes: [usize; 4],
}

fn genre_of(item: &Item) -> &str {
    item.attrs.get("genre").map_or("", String::as_str)
}

fn context_key(s: &Sample) -> String {
    s.context
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

impl FeatureEncoder {
    /// Exact spaces are built from every user, item, genre and context in
    /// `samples`, targets and histories alike, in sorted order.
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a Sample>, space: FeatureSpace) -> Result<Self> {
        match space {
            FeatureSpace::Hashed(buckets) => {
                if buckets == 0 {
                    return Err(Error::Config("hash bucket count must be positive".into()));
                }
                Ok(Self {
                    space,
                    tables: Default::default(),
                    sizes: [buckets; 4],
                })
            }
            FeatureSpace::Exact => {
                let mut seen: [BTreeSet<String>; 4] = Default::default();
                for s in samples {
                    seen[0].insert(s.user_id.to_string());
                    for it in std::iter::once(&*s.target).chain(s.timeline().iter().map(|b| &*b.item)) {
                        seen[1].insert(it.id.clone());
                        seen[2].insert(genre_of(it).to_string());
                    }
                    seen[3].insert(context_key(s));
                }
                let mut tables: [HashMap<String, usize>; 4] = Default::default();
                let mut sizes = [1usize; 4];
                for f in 0..4 {
                    for v in &seen[f] {
                        if v.is_empty() {
                            continue;
                        }
                        tables[f].insert(v.clone(), sizes[f]);
                        sizes[f] += 1;
                    }
                }
                Ok(Self { space, tables, sizes })
            }
        }
    }

    pub fn space(&self) -> FeatureSpace {
        self.space
    }

    /// `(users, items, genres, contexts)` vocabulary sizes.
    pub fn sizes(&self) -> (usize, usize, usize, usize) {
        (self.sizes[0], self.sizes[1], self.sizes[2], self.sizes[3])
    }

    fn lookup(&self, field: usize, value: &str) -> usize {
        match self.space {
            FeatureSpace::Exact => self.tables[field].get(value).copied().unwrap_or(0),
            FeatureSpace::Hashed(buckets) => {
                let mut h = Sha256::new();
                h.update(FIELDS[field].as_bytes());
                h.update(b":");
                h.update(value.as_bytes());
                let d = h.finalize();
                let mut b = [0u8; 8];
                b.copy_from_slice(&d[..8]);
                (u64::from_le_bytes(b) % buckets as u64) as usize
            }
        }
    }

    pub fn user(&self, user_id: &str) -> usize {
        self.lookup(0, user_id)
    }

    /// `(item id, genre id)`.
    pub fn item(&self, item: &Item) -> (usize, usize) {
        (self.lookup(1, &item.id), self.lookup(2, genre_of(item)))
    }

    pub fn context(&self, sample: &Sample) -> usize {
        self.lookup(3, &context_key(sample))
    }

    /// Line format: `exact` or `hashed <buckets>`, then for exact spaces one
    /// `field<TAB>value` line per entry in id order.
    pub fn to_text(&self) -> String {
        match self.space {
            FeatureSpace::Hashed(b) => format!("hashed {b}\n"),
            FeatureSpace::Exact => {
                let mut out = String::from("exact\n");
                for f in 0..4 {
                    let mut entries: Vec<(&String, &usize)> = self.tables[f].iter().collect();
                    entries.sort_by_key(|(_, &id)| id);
                    for (v, _) in entries {
                        out.push_str(FIELDS[f]);
                        out.push('\t');
                        out.push_str(v);
                        out.push('\n');
                    }
                }
                out
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        if let Some(b) = head.strip_prefix("hashed ") {
            let buckets = b
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad bucket count `{b}`")))?;
            return Self::build(std::iter::empty(), FeatureSpace::Hashed(buckets));
        }
        if head != "exact" {
            return Err(Error::Format(format!("unknown feature space header `{head}`")));
        }
        let mut tables: [HashMap<String, usize>; 4] = Default::default();
        let mut sizes = [1usize; 4];
        for (i, line) in lines.enumerate() {
            let (field, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("feature line {} lacks a tab", i + 2)))?;
            let f = FIELDS
                .iter()
                .position(|&x| x == field)
                .ok_or_else(|| Error::Format(format!("unknown feature field `{field}`")))?;
            tables[f].insert(value.to_string(), sizes[f]);
            sizes[f] += 1;
        }
        Ok(Self {
            space: FeatureSpace::Exact,
            tables,
            sizes,
        })
    }
}
