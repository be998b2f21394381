//! On-disk index: `manifest.txt` lists the PCA shape and one line per user;
//! `pca.bin` and `vectors.bin` hold shape-prefixed little-endian records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BehaviorIndex, IndexedBehavior, PcaModel};
use crate::error::{Error, Result};

const HEADER: &str = "behavior-index 1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put_matrix(out: &mut Vec<u8>, rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) {
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("{} is truncated at byte {}", self.what, self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (r, c) = (self.u64()? as usize, self.u64()? as usize);
        if (r, c) != (rows, cols) {
            return Err(Error::Shape {
                name: self.what.to_string(),
                expected: (rows, cols),
                found: (r, c),
            });
        }
        (0..r * c).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!("{} has trailing bytes", self.what)));
        }
        Ok(())
    }
}

pub(super) fn save(index: &BehaviorIndex, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pca = &index.pca;
    let (d, p) = (pca.d_model(), pca.d_pca());

    let mut pca_bin = Vec::new();
    put_matrix(&mut pca_bin, 1, d, pca.mean.iter().copied());
    put_matrix(&mut pca_bin, p, d, pca.components.iter().flatten().copied());
    put_matrix(&mut pca_bin, 1, p, pca.explained_variance.iter().copied());

    let mut vec_bin = Vec::new();
    let mut manifest = format!("{HEADER}\nd_model {d}\nd_pca {p}\nusers {}\n", index.len());
    for (user, entries) in index.users() {
        if user.contains(['\t', '\n', '\r']) {
            return Err(Error::Format(format!("user id {user:?} cannot be stored")));
        }
        manifest.push_str(&format!("{user}\t{}\t{}\n", entries.len(), vec_bin.len()));
        put_matrix(&mut vec_bin, entries.len(), p, entries.iter().flat_map(|e| e.vector.iter().copied()));
        for e in entries {
            vec_bin.extend_from_slice(&(e.position as u64).to_le_bytes());
            vec_bin.extend_from_slice(&e.timestamp.to_le_bytes());
        }
    }
    manifest.push_str(&format!("pca.sha256 {}\n", hex::encode(Sha256::digest(&pca_bin))));
    manifest.push_str(&format!("vectors.sha256 {}\n", hex::encode(Sha256::digest(&vec_bin))));

    for (name, bytes) in [("pca.bin", pca_bin.as_slice()), ("vectors.bin", vec_bin.as_slice())] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Format(format!("index manifest ends before `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected `{key}` in index manifest, found `{line}`")))
}

fn number(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad number `{s}` in index manifest")))
}

pub(super) fn load(dir: &Path) -> Result<BehaviorIndex> {
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format(format!("{} is not a behavior index", path.display())));
    }
    let d = number(field(&mut lines, "d_model")?)?;
    let p = number(field(&mut lines, "d_pca")?)?;
    let n_users = number(field(&mut lines, "users")?)?;
    let mut table = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("index manifest lists fewer users than declared".into()))?;
        let parts: Vec<&str> = line.split('\t').collect();
        let [user, rows, offset] = parts[..] else {
            return Err(Error::Format(format!("bad user line `{line}`")));
        };
        table.push((user.to_string(), number(rows)?, number(offset)?));
    }
    let pca_digest = field(&mut lines, "pca.sha256")?.to_string();
    let vec_digest = field(&mut lines, "vectors.sha256")?.to_string();

    let read = |name: &str, digest: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if hex::encode(Sha256::digest(&bytes)) != digest {
            return Err(Error::Format(format!("{} fails its digest check", path.display())));
        }
        Ok(bytes)
    };
    let pca_bin = read("pca.bin", &pca_digest)?;
    let vec_bin = read("vectors.bin", &vec_digest)?;

    let mut r = Reader {
        bytes: &pca_bin,
        at: 0,
        what: "pca.bin",
    };
    let mean = r.matrix(1, d)?;
    let comps = r.matrix(p, d)?;
    let explained_variance = r.matrix(1, p)?;
    r.finish()?;
    let pca = PcaModel {
        mean,
        components: comps.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
        explained_variance,
    };

    let mut r = Reader {
        bytes: &vec_bin,
        at: 0,
        what: "vectors.bin",
    };
    let mut users = BTreeMap::new();
    for (user, rows, offset) in table {
        if offset != r.at {
            return Err(Error::Format(format!("offset of `{user}` does not match the records")));
        }
        let flat = r.matrix(rows, p)?;
        let mut entries = Vec::with_capacity(rows);
        for i in 0..rows {
            let position = r.u64()? as usize;
            let timestamp = r.i64()?;
            entries.push(IndexedBehavior {
                position,
                vector: flat[i * p..(i + 1) * p].to_vec(),
                timestamp,
            });
        }
        users.insert(user, entries);
    }
    r.finish()?;
    Ok(BehaviorIndex::from_parts(pca, users))
}
