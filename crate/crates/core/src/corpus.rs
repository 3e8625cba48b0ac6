//! Data model and line-delimited persistence for descriptions, image
//! manifests, groups and generated comparison items.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate image id `{id}` on lines {first_line} and {line}")]
    DuplicateImage {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("description references image `{0}` missing from the manifest")]
    UnknownImage(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Where an image came from. Only used for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    InTheWild,
    ArtificialDistortion,
    AiGenerated,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    #[serde(rename = "image_id")]
    pub id: String,
    #[serde(default)]
    pub source: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: ImageSource::Unknown,
            uri: None,
        }
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = Some(uri.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    #[serde(flatten)]
    pub image: ImageRef,
    pub text: String,
}

/// An ordered tuple of images compared together. Member order is
/// meaningful: position `k` is "the (k+1)-th image" in every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGroup")]
pub struct ImageGroup {
    group_id: String,
    members: Vec<ImageRef>,
}

#[derive(Deserialize)]
struct RawGroup {
    #[serde(default)]
    group_id: Option<String>,
    members: Vec<ImageRef>,
}

impl TryFrom<RawGroup> for ImageGroup {
    type Error = CorpusError;

    fn try_from(raw: RawGroup) -> Result<Self, Self::Error> {
        let group = if raw.members.len() == 1 {
            ImageGroup::single(raw.members.into_iter().next().unwrap())
        } else {
            ImageGroup::new(raw.members)?
        };
        match raw.group_id {
            Some(id) if id != group.group_id => Err(CorpusError::InvalidGroup(format!(
                "group_id {id} does not match member digest {}",
                group.group_id
            ))),
            _ => Ok(group),
        }
    }
}

impl ImageGroup {
    pub const MIN_SIZE: usize = 2;
    pub const MAX_SIZE: usize = 4;

    /// A comparison group of 2 to 4 distinct images.
    pub fn new(members: Vec<ImageRef>) -> Result<Self, CorpusError> {
        if !(Self::MIN_SIZE..=Self::MAX_SIZE).contains(&members.len()) {
            return Err(CorpusError::InvalidGroup(format!(
                "group size {} outside 2..=4",
                members.len()
            )));
        }
        for (i, m) in members.iter().enumerate() {
            if m.id.is_empty() {
                return Err(CorpusError::InvalidGroup("empty image id".into()));
            }
            if members[..i].iter().any(|o| o.id == m.id) {
                return Err(CorpusError::InvalidGroup(format!(
                    "duplicate image id `{}` in group",
                    m.id
                )));
            }
        }
        Ok(Self::from_members_unchecked(members))
    }

    /// A degenerate one-image group, used for single-image benchmark
    /// records and single-image instruction data.
    pub fn single(image: ImageRef) -> Self {
        Self::from_members_unchecked(vec![image])
    }

    fn from_members_unchecked(members: Vec<ImageRef>) -> Self {
        let group_id = group_digest(members.iter().map(|m| m.id.as_str()));
        Self { group_id, members }
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn members(&self) -> &[ImageRef] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.id.as_str())
    }

    /// Member ids sorted, identifying the unordered set.
    pub fn unordered_key(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.ids().collect();
        ids.sort_unstable();
        ids
    }
}

/// Stable digest of an ordered id list.
pub fn group_digest<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut hasher = Sha256::new();
    for (i, id) in ids.into_iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(id.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Hex SHA-256 of arbitrary text, used for cache keys.
pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Hex SHA-256 of a file's bytes, streamed.
pub fn file_digest(path: &Path) -> Result<String, CorpusError> {
    let mut f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher).map_err(|e| CorpusError::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    MergedGeneral,
    TeachGeneral,
    TeachQaDirect,
    TeachMcq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Merge2compare,
    Teach2compare,
    /// Items imported from an existing single-image instruction set.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonItem {
    pub group: ImageGroup,
    pub kind: ItemKind,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    pub provenance: Provenance,
}

impl ComparisonItem {
    pub fn validate(&self) -> Result<(), CorpusError> {
        match (self.kind, &self.options, self.answer_index) {
            (ItemKind::TeachMcq, Some(opts), Some(idx)) => {
                if !(2..=4).contains(&opts.len()) {
                    return Err(CorpusError::InvalidItem(format!(
                        "mcq item has {} options, expected 2..=4",
                        opts.len()
                    )));
                }
                if idx >= opts.len() {
                    return Err(CorpusError::InvalidItem(format!(
                        "answer_index {idx} out of range for {} options",
                        opts.len()
                    )));
                }
                Ok(())
            }
            (ItemKind::TeachMcq, _, _) => Err(CorpusError::InvalidItem(
                "mcq item requires options and answer_index".into(),
            )),
            (_, None, None) => Ok(()),
            (kind, _, _) => Err(CorpusError::InvalidItem(format!(
                "{kind:?} item must not carry options or answer_index"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub descriptions: Vec<DescriptionRecord>,
    pub manifest: Vec<ImageRef>,
}

impl Corpus {
    pub fn new(
        descriptions: Vec<DescriptionRecord>,
        manifest: Vec<ImageRef>,
    ) -> Result<Self, CorpusError> {
        let known: std::collections::HashSet<&str> =
            manifest.iter().map(|m| m.id.as_str()).collect();
        if let Some(d) = descriptions
            .iter()
            .find(|d| !known.contains(d.image.id.as_str()))
        {
            return Err(CorpusError::UnknownImage(d.image.id.clone()));
        }
        Ok(Self {
            descriptions,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.iter().map(|m| m.id.clone()).collect()
    }

    /// Description text keyed by image id.
    pub fn text_by_id(&self) -> HashMap<String, String> {
        self.descriptions
            .iter()
            .map(|d| (d.image.id.clone(), d.text.clone()))
            .collect()
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

/// Reads a line-delimited file of `T`, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one JSON object per line and returns the number written.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CorpusError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))?;
    Ok(records.len())
}

/// Loads a descriptions file. The manifest is the set of described images.
pub fn load_descriptions(path: &Path) -> Result<Corpus, CorpusError> {
    let mut descriptions = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let rec: DescriptionRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.image.id.is_empty() {
            return Err(malformed("empty image_id".into()));
        }
        if rec.text.trim().is_empty() {
            return Err(malformed("empty description text".into()));
        }
        if let Some(&first_line) = seen.get(&rec.image.id) {
            return Err(CorpusError::DuplicateImage {
                id: rec.image.id,
                first_line,
                line: line_no,
            });
        }
        seen.insert(rec.image.id.clone(), line_no);
        descriptions.push(rec);
    }
    let manifest = descriptions.iter().map(|d| d.image.clone()).collect();
    Ok(Corpus {
        descriptions,
        manifest,
    })
}

/// Loads an image manifest: any line-delimited file whose records carry
/// `image_id` (descriptions files qualify).
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRef>, CorpusError> {
    let refs: Vec<ImageRef> = read_jsonl(path)?;
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, r) in refs.iter().enumerate() {
        if let Some(&first) = seen.get(r.id.as_str()) {
            return Err(CorpusError::DuplicateImage {
                id: r.id.clone(),
                first_line: first + 1,
                line: i + 1,
            });
        }
        seen.insert(&r.id, i);
    }
    Ok(refs)
}

pub fn save_items(items: &[ComparisonItem], path: &Path) -> Result<usize, CorpusError> {
    for item in items {
        item.validate()?;
    }
    write_jsonl(path, items)
}

pub fn load_items(path: &Path) -> Result<Vec<ComparisonItem>, CorpusError> {
    let items: Vec<ComparisonItem> = read_jsonl(path)?;
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

pub fn save_groups(groups: &[ImageGroup], path: &Path) -> Result<usize, CorpusError> {
    write_jsonl(path, groups)
}

pub fn load_groups(path: &Path) -> Result<Vec<ImageGroup>, CorpusError> {
    read_jsonl(path)
}

impl fmt::Display for ImageGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.ids().collect::<Vec<_>>().join(", "))
    }
}
