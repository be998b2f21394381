use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{Interaction, TITLE_ATTR};
use crate::error::{Error, Result};

/// Supported on-disk interaction formats.
#[derive(Debug, Clone, PartialEq)]
pub enum DataFormat {
    /// `UserID::MovieID::Rating::Timestamp`, with an optional
    /// `MovieID::Title::Genre1|Genre2` file supplying item attributes.
    MovieLens { movies: Option<PathBuf> },
    /// Header `user_id,item_id,rating,timestamp,<attr columns...>`.
    Csv,
}

impl DataFormat {
    pub fn from_id(id: &str, movies: Option<PathBuf>) -> Result<Self> {
        match id {
            "movielens" | "ml" => Ok(Self::MovieLens { movies }),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown data format `{other}`"))),
        }
    }
}

pub fn parse_interactions(path: &Path, format: &DataFormat) -> Result<Vec<Interaction>> {
    let text = read_lossy(path)?;
    let movies = match format {
        DataFormat::MovieLens {
            movies: Some(mpath),
        } => Some(parse_movies(&read_lossy(mpath)?)?),
        _ => None,
    };
    parse_with(&text, format, movies.as_ref())
}

/// Parses in-memory text. MovieLens items get no attributes here.
pub fn parse_interactions_str(text: &str, format: &DataFormat) -> Result<Vec<Interaction>> {
    parse_with(text, format, None)
}

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn parse_with(
    text: &str,
    format: &DataFormat,
    movies: Option<&HashMap<String, BTreeMap<String, String>>>,
) -> Result<Vec<Interaction>> {
    match format {
        DataFormat::MovieLens { .. } => parse_movielens(text, movies),
        DataFormat::Csv => parse_csv(text),
    }
}

fn parse_movielens(
    text: &str,
    movies: Option<&HashMap<String, BTreeMap<String, String>>>,
) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 `::`-separated fields, found {}", fields.len()),
            });
        }
        let rating = parse_field::<f64>(fields[2], "rating", line_no)?;
        let timestamp = parse_timestamp(fields[3], line_no)?;
        let item_attrs = movies
            .and_then(|m| m.get(fields[1]))
            .cloned()
            .unwrap_or_default();
        out.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            rating,
            timestamp,
            item_attrs,
        });
    }
    Ok(out)
}

fn parse_movies(text: &str) -> Result<HashMap<String, BTreeMap<String, String>>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, "::").collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected `MovieID::Title::Genres`".into(),
            });
        }
        let mut attrs = BTreeMap::new();
        attrs.insert(TITLE_ATTR.to_string(), fields[1].to_string());
        attrs.insert("genre".to_string(), fields[2].replace('|', ", "));
        out.insert(fields[0].to_string(), attrs);
    }
    Ok(out)
}

fn parse_csv(text: &str) -> Result<Vec<Interaction>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    const REQUIRED: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];
    if headers.len() < 4 || headers.iter().take(4).ne(REQUIRED.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with {}", REQUIRED.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line_no = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let item_attrs = headers
            .iter()
            .zip(rec.iter())
            .skip(4)
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        out.push(Interaction {
            user_id: rec[0].to_string(),
            item_id: rec[1].to_string(),
            rating: parse_field(&rec[2], "rating", line_no)?,
            timestamp: parse_timestamp(&rec[3], line_no)?,
            item_attrs,
        });
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} `{s}`"),
    })
}

fn parse_timestamp(s: &str, line: usize) -> Result<i64> {
    let ts: i64 = parse_field(s, "timestamp", line)?;
    if ts < 0 {
        return Err(Error::Parse {
            line,
            msg: format!("negative timestamp {ts}"),
        });
    }
    Ok(ts)
}
