//! Run directory: `manifest.txt`, `config.txt`, checkpoints, `index/`,
//! vocabulary, feature table and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{base_lm, load_dataset, load_into, save_checkpoint, PipelineConfig, Prepared};
use crate::crm::FeatureEncoder;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::prompting::Vocab;
use crate::retriever::BehaviorIndex;

const FORMAT: &str = "plora-run 1";

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
pub const LM_CKPT: &str = "lm.ckpt";
pub const CRM_CKPT: &str = "crm.ckpt";
pub const PLORA_CKPT: &str = "plora.ckpt";
pub const INDEX_DIR: &str = "index";
pub const VOCAB: &str = "vocab.txt";
pub const FEATURES: &str = "features.txt";
pub const METRICS: &str = "metrics.json";
const INDEX_MANIFEST: &str = "index/manifest.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io_err(path))?)))
}

/// Digest of every split's sample order and labels.
pub fn split_digest(data: &SplitDataset) -> String {
    let mut h = Sha256::new();
    for (name, part) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        h.update(name.as_bytes());
        for s in part {
            let (t, u, i) = s.order_key();
            h.update(t.to_le_bytes());
            h.update(u.as_bytes());
            h.update([0]);
            h.update(i.as_bytes());
            h.update([0, s.label]);
        }
    }
    hex::encode(h.finalize())
}

/// `key = value` lines. Every artifact file has a `file.<name>` digest entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format = {FORMAT}\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(&*format!("format = {FORMAT}")) {
            return Err(Error::Format("not a run manifest".into()));
        }
        let mut m = Self::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
            m.set(k, v);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// A fresh run directory. An existing one is reused only with `force`.
    pub fn create(path: &Path, force: bool) -> Result<Self> {
        if path.join(MANIFEST).exists() && !force {
            return Err(Error::State(format!(
                "{} already holds a run; pass --force to overwrite it",
                path.display()
            )));
        }
        fs::create_dir_all(path).map_err(io_err(path))?;
        let idx = path.join(INDEX_DIR);
        if idx.exists() {
            fs::remove_dir_all(&idx).map_err(io_err(&idx))?;
        }
        for name in [CRM_CKPT, PLORA_CKPT, METRICS] {
            let f = path.join(name);
            if f.exists() {
                fs::remove_file(&f).map_err(io_err(&f))?;
            }
        }
        Ok(Self { path: path.into() })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(MANIFEST).exists() {
            return Err(Error::Dependency(format!(
                "{} is not a prepared run directory (run `prepare` first)",
                path.display()
            )));
        }
        Ok(Self { path: path.into() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.file(MANIFEST);
        RunManifest::from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        self.write(MANIFEST, m.to_text().as_bytes())
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    }

    pub fn read_string(&self, name: &str) -> Result<String> {
        let p = self.file(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_kv(&self.read_string(CONFIG)?)
    }

    /// Records the digest of `name` in the manifest.
    pub fn record(&self, m: &mut RunManifest, name: &str) -> Result<()> {
        m.set(format!("file.{name}"), file_digest(&self.file(name))?);
        Ok(())
    }

    /// Fails with an integrity error when `name` differs from its recorded
    /// digest, with a dependency error when it is missing.
    pub fn verify(&self, m: &RunManifest, name: &str) -> Result<()> {
        let p = self.file(name);
        if !p.exists() {
            return Err(Error::Dependency(format!("{} is missing", p.display())));
        }
        match m.get(&format!("file.{name}")) {
            Some(d) if d == file_digest(&p)? => Ok(()),
            Some(_) => Err(Error::Integrity(format!("{} does not match the manifest", p.display()))),
            None => Err(Error::Dependency(format!("{name} is not recorded in the manifest"))),
        }
    }

    /// Writes everything `prepare` produces and a fresh manifest.
    pub fn save_prepared(&self, prep: &Prepared) -> Result<RunManifest> {
        let cfg = &prep.cfg;
        let mut m = RunManifest::default();
        m.set("seed.data", cfg.seeds.data.to_string());
        m.set("seed.model", cfg.seeds.model.to_string());
        m.set("seed.sampling", cfg.seeds.sampling.to_string());
        m.set("config.sha256", cfg.hash());
        if let Some(src) = &cfg.source {
            m.set("input.data.sha256", file_digest(src)?);
            if let Some(mv) = &cfg.movies {
                m.set("input.movies.sha256", file_digest(mv)?);
            }
        }
        m.set("data.splits", format!(
            "{} {} {}",
            prep.data.train.len(),
            prep.data.valid.len(),
            prep.data.test.len()
        ));
        m.set("data.sha256", split_digest(&prep.data));
        self.write(CONFIG, cfg.to_kv().as_bytes())?;
        self.write(VOCAB, prep.vocab.to_text().as_bytes())?;
        self.write(FEATURES, prep.features.to_text().as_bytes())?;
        save_checkpoint(&prep.lm.params, &self.file(LM_CKPT))?;
        prep.index.save(&self.file(INDEX_DIR))?;
        for name in [CONFIG, VOCAB, FEATURES, LM_CKPT, INDEX_MANIFEST] {
            self.record(&mut m, name)?;
        }
        m.set("stage.prepare", "done");
        self.write_manifest(&m)?;
        Ok(m)
    }

    /// Reloads a prepared run, regenerating or re-reading the data and
    /// checking it against the manifest.
    pub fn load_prepared(&self) -> Result<(Prepared, RunManifest)> {
        let m = self.manifest()?;
        for name in [CONFIG, VOCAB, FEATURES, LM_CKPT, INDEX_MANIFEST] {
            self.verify(&m, name)?;
        }
        let cfg = self.config()?;
        if let (Some(src), Some(d)) = (&cfg.source, m.get("input.data.sha256")) {
            if file_digest(src)? != d {
                return Err(Error::Integrity(format!("{} changed since prepare", src.display())));
            }
        }
        let data = load_dataset(&cfg)?;
        if Some(split_digest(&data).as_str()) != m.get("data.sha256") {
            return Err(Error::Integrity("regenerated splits differ from the prepared ones".into()));
        }
        let vocab = Vocab::from_text(&self.read_string(VOCAB)?)?;
        let features = FeatureEncoder::from_text(&self.read_string(FEATURES)?)?;
        let mut lm = base_lm(&cfg, &vocab)?;
        load_into(&mut lm.params, &self.file(LM_CKPT))?;
        let index = BehaviorIndex::load(&self.file(INDEX_DIR))?;
        Ok((
            Prepared {
                cfg,
                data,
                vocab,
                lm,
                features,
                index,
            },
            m,
        ))
    }
}
