//! Named-array checkpoints.
//!
//! Layout: 8-byte magic `PLCKPT01`, a little-endian `u64` header length, a
//! UTF-8 header, then the payload. The header is
//!
//! ```text
//! entries <n>
//! <name> <rows> <cols> <byte offset>     (n lines, names sorted)
//! payload_sha256 <hex>
//! ```
//!
//! and the payload is every array's values as little-endian `f64`, in header
//! order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2D};

const MAGIC: &[u8; 8] = b"PLCKPT01";

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.num_values() * 8);
    let mut header = format!("entries {}\n", params.len());
    for (name, p) in params.iter() {
        let (r, c) = p.value.shape();
        header.push_str(&format!("{name} {r} {c} {}\n", payload.len()));
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str(&format!("payload_sha256 {}\n", hex::encode(Sha256::digest(&payload))));
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Every entry comes back frozen; use [`ParamStore::load_values`] to move
/// the values into a typed model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic or version"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("header is truncated"));
    }
    let header = std::str::from_utf8(&body[..hlen]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &body[hlen..];

    let mut lines = header.lines();
    let n: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("entries "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing entry count"))?;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| bad("entry table is short"))?;
        let f: Vec<&str> = line.split(' ').collect();
        let parsed = match f[..] {
            [name, r, c, off] => r
                .parse::<usize>()
                .ok()
                .zip(c.parse::<usize>().ok())
                .zip(off.parse::<usize>().ok())
                .map(|((r, c), off)| (name.to_string(), r, c, off)),
            _ => None,
        };
        table.push(parsed.ok_or_else(|| bad(&format!("bad entry line `{line}`")))?);
    }
    let digest = lines
        .next()
        .and_then(|l| l.strip_prefix("payload_sha256 "))
        .ok_or_else(|| bad("missing payload digest"))?;
    if hex::encode(Sha256::digest(payload)) != digest {
        return Err(bad("payload digest mismatch (corrupt or truncated file)"));
    }

    let mut store = ParamStore::new();
    let mut at = 0usize;
    let mut prev: Option<&str> = None;
    for (name, r, c, off) in &table {
        if prev.is_some_and(|p| p >= name.as_str()) {
            return Err(bad("entry names are not strictly sorted"));
        }
        prev = Some(name);
        let len = r.checked_mul(*c).and_then(|x| x.checked_mul(8)).ok_or_else(|| bad("entry too large"))?;
        if *off != at || at + len > payload.len() {
            return Err(bad(&format!("entry `{name}` lies outside the payload")));
        }
        let data = payload[at..at + len]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.insert(name.clone(), Tensor2D::new(*r, *c, data)?, false);
        at += len;
    }
    if at != payload.len() {
        return Err(bad("payload has trailing bytes"));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads `path` into `target`, which must have exactly the same names and
/// shapes.
pub fn load_into(target: &mut ParamStore, path: &Path) -> Result<()> {
    target.load_values(&load_checkpoint(path)?)
}
