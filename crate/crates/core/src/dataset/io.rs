use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, RatingMatrix, TokenSet};
use crate::error::{Error, Result};
use crate::graph::SocialGraph;

pub const RATINGS_HEADER: [&str; 3] = ["user_id", "item_id", "rating"];
pub const FRIENDSHIPS_HEADER: [&str; 2] = ["user_id_a", "user_id_b"];
pub const DEMOGRAPHICS_HEADER: [&str; 3] = ["user_id", "attribute", "value"];
pub const CLAIMS_HEADER: [&str; 2] = ["user_id", "claim"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub ratings: PathBuf,
    pub friendships: PathBuf,
    #[serde(default)]
    pub demographics: Option<PathBuf>,
    #[serde(default)]
    pub claims: Option<PathBuf>,
}

impl DatasetPaths {
    /// The four conventional file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            ratings: dir.join("ratings.csv"),
            friendships: dir.join("friendships.csv"),
            demographics: Some(dir.join("demographics.csv")),
            claims: Some(dir.join("claims.csv")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Strict: friendships may only reference users known from the other
    /// files, and every user needs at least one friend.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { strict: true }
    }
}

struct Interner {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn new() -> Self {
        Interner {
            ids: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, id: &str) -> usize {
        if let Some(&k) = self.index.get(id) {
            return k;
        }
        let k = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), k);
        k
    }

    fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let got = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    Ok(reader)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Iterates `(line, record)` pairs, mapping reader errors to parse errors.
fn records(
    path: &Path,
    reader: csv::Reader<File>,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + '_ {
    reader.into_records().map(move |r| {
        let rec = r.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        Ok((line, rec))
    })
}

fn field<'r>(path: &Path, line: u64, rec: &'r csv::StringRecord, k: usize) -> Result<&'r str> {
    match rec.get(k) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("missing field {}", k + 1),
        }),
    }
}

fn read_tokens(
    path: &Path,
    header: &[&str],
    users: &mut Interner,
    mut token: impl FnMut(&[&str]) -> String,
) -> Result<Vec<(usize, String)>> {
    let reader = open(path, header)?;
    let mut out = Vec::new();
    for row in records(path, reader) {
        let (line, rec) = row?;
        let mut parts = Vec::with_capacity(header.len());
        for k in 0..header.len() {
            parts.push(field(path, line, &rec, k)?);
        }
        let u = users.intern(parts[0]);
        out.push((u, token(&parts[1..])));
    }
    Ok(out)
}

/// Reads the CSV files of a dataset. Users are indexed in order of first
/// appearance in ratings, then demographics, then claims (then friendships in
/// permissive mode); items in order of first appearance.
pub fn load_dataset(paths: &DatasetPaths, options: LoadOptions) -> Result<Dataset> {
    let mut users = Interner::new();
    let mut items = Interner::new();
    let mut entries = Vec::new();
    let mut seen = HashMap::new();

    let path = paths.ratings.as_path();
    let reader = open(path, &RATINGS_HEADER)?;
    for row in records(path, reader) {
        let (line, rec) = row?;
        let u = users.intern(field(path, line, &rec, 0)?);
        let i = items.intern(field(path, line, &rec, 1)?);
        let raw = field(path, line, &rec, 2)?;
        let r: f64 = raw.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("rating `{raw}` is not a number"),
        })?;
        if !(1.0..=10.0).contains(&r) {
            return Err(Error::RatingRange {
                path: path.to_path_buf(),
                line,
                value: r,
            });
        }
        if seen.insert((u, i), line).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "duplicate rating for this user and item".into(),
            });
        }
        entries.push((u, i, r));
    }

    let demo = match &paths.demographics {
        Some(p) => read_tokens(p, &DEMOGRAPHICS_HEADER, &mut users, |f| {
            format!("{}={}", f[0], f[1])
        })?,
        None => Vec::new(),
    };
    let claims = match &paths.claims {
        Some(p) => read_tokens(p, &CLAIMS_HEADER, &mut users, |f| f[0].to_string())?,
        None => Vec::new(),
    };

    let path = paths.friendships.as_path();
    let reader = open(path, &FRIENDSHIPS_HEADER)?;
    let mut edges = Vec::new();
    for row in records(path, reader) {
        let (line, rec) = row?;
        let a = field(path, line, &rec, 0)?;
        let b = field(path, line, &rec, 1)?;
        if a == b {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("self-loop on user {a}"),
            });
        }
        let resolve = |users: &mut Interner, id: &str| -> Result<usize> {
            if options.strict {
                users.get(id).ok_or_else(|| {
                    Error::Reference(format!(
                        "{}: line {line}: user {id} not present in ratings or profiles",
                        path.display()
                    ))
                })
            } else {
                Ok(users.intern(id))
            }
        };
        let ia = resolve(&mut users, a)?;
        let ib = resolve(&mut users, b)?;
        edges.push((ia, ib));
    }

    let n = users.ids.len();
    let graph = SocialGraph::from_edges(n, edges)?;
    if options.strict {
        if let Some(v) = (0..n).find(|&v| graph.degree(v) == 0) {
            return Err(Error::Reference(format!(
                "user {} has no friends (strict mode requires at least one)",
                users.ids[v]
            )));
        }
    }

    let mut demographics = vec![TokenSet::new(); n];
    for (u, t) in demo {
        demographics[u].insert(t);
    }
    let mut claim_sets = vec![TokenSet::new(); n];
    for (u, t) in claims {
        claim_sets[u].insert(t);
    }
    let ratings = RatingMatrix::new(n, items.ids.len(), entries)?;
    Dataset::new(
        users.ids,
        items.ids,
        ratings,
        graph,
        demographics,
        claim_sets,
    )
}

/// Row counts written by [`write_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WrittenRows {
    pub ratings: usize,
    pub friendships: usize,
    pub demographics: usize,
    pub claims: usize,
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

impl Dataset {
    /// Writes `ratings.csv`, `friendships.csv`, `demographics.csv` and
    /// `claims.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<WrittenRows> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let users = self.users();
        let items = self.items();

        let path = dir.join("ratings.csv");
        let mut w = writer(&path)?;
        w.write_record(RATINGS_HEADER)?;
        for (u, i, r) in self.ratings().iter() {
            w.write_record([users[u].as_str(), items[i].as_str(), &r.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("friendships.csv");
        let mut w = writer(&path)?;
        w.write_record(FRIENDSHIPS_HEADER)?;
        for (a, b) in self.graph().edges() {
            w.write_record([users[a].as_str(), users[b].as_str()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("demographics.csv");
        let mut w = writer(&path)?;
        w.write_record(DEMOGRAPHICS_HEADER)?;
        let mut demographics = 0;
        for (u, set) in self.demographics().iter().enumerate() {
            for token in set {
                let (attr, value) = token.split_once('=').unwrap_or((token.as_str(), ""));
                w.write_record([users[u].as_str(), attr, value])?;
                demographics += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("claims.csv");
        let mut w = writer(&path)?;
        w.write_record(CLAIMS_HEADER)?;
        let mut claims = 0;
        for (u, set) in self.claims().iter().enumerate() {
            for token in set {
                w.write_record([users[u].as_str(), token.as_str()])?;
                claims += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        Ok(WrittenRows {
            ratings: self.ratings().len(),
            friendships: self.graph().edge_count(),
            demographics,
            claims,
        })
    }
}
