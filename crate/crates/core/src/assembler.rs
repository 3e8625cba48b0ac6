//! Image-text interleaved prompt layouts, context-budget arithmetic and
//! final training-file assembly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ComparisonItem, CorpusError, ItemKind};
use crate::distill::ordinal_word;

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("{0} images outside the supported 1..=4")]
    ImageCount(usize),
    #[error("subset name `{0}` used twice")]
    DuplicateSubset(String),
    #[error("unknown interleave format `{0}`")]
    UnknownFormat(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How image slots are laid out in front of the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterleaveFormat {
    /// `<img_0><img_1>…<query>`
    Pile,
    /// `<img_st><img_0><img_end> <img_st><img_1><img_end> … <query>`
    SpecialTokens,
    /// `The input image: <img_0> The input image: <img_1> … <query>`
    GenericLabel,
    /// `The first image: <img_0> The second image: <img_1> … <query>`
    #[default]
    OrdinalLabel,
}

impl InterleaveFormat {
    pub const ALL: [InterleaveFormat; 4] = [
        Self::Pile,
        Self::SpecialTokens,
        Self::GenericLabel,
        Self::OrdinalLabel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pile => "pile",
            Self::SpecialTokens => "special_tokens",
            Self::GenericLabel => "generic_label",
            Self::OrdinalLabel => "ordinal_label",
        }
    }
}

impl fmt::Display for InterleaveFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterleaveFormat {
    type Err = AssembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| AssembleError::UnknownFormat(s.to_string()))
    }
}

pub fn render_interleaved(n_images: usize, query: &str, fmt: InterleaveFormat) -> Result<String, AssembleError> {
    if !(1..=4).contains(&n_images) {
        return Err(AssembleError::ImageCount(n_images));
    }
    let slot = |k: usize| format!("<img_{k}>");
    let out = match fmt {
        InterleaveFormat::Pile => {
            let mut s: String = (0..n_images).map(slot).collect();
            s.push_str(query);
            s
        }
        InterleaveFormat::SpecialTokens => {
            let mut parts: Vec<String> = (0..n_images)
                .map(|k| format!("<img_st>{}<img_end>", slot(k)))
                .collect();
            parts.push(query.to_string());
            parts.join(" ")
        }
        InterleaveFormat::GenericLabel => {
            let mut parts: Vec<String> = (0..n_images)
                .map(|k| format!("The input image: {}", slot(k)))
                .collect();
            parts.push(query.to_string());
            parts.join(" ")
        }
        InterleaveFormat::OrdinalLabel => {
            let mut parts = Vec::with_capacity(n_images + 1);
            for k in 0..n_images {
                let word = ordinal_word(k).expect("n_images <= 4");
                parts.push(format!("The {word} image: {}", slot(k)));
            }
            parts.push(query.to_string());
            parts.join(" ")
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub tokens_per_image: usize,
    pub context_window: usize,
    pub text_tokens: usize,
    pub n_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum BudgetFit {
    Fits,
    Overflow { by: usize },
}

pub fn fits_context(budget: &TokenBudget) -> BudgetFit {
    let needed = budget.n_images * budget.tokens_per_image + budget.text_tokens;
    if needed <= budget.context_window {
        BudgetFit::Fits
    } else {
        BudgetFit::Overflow {
            by: needed - budget.context_window,
        }
    }
}

/// Counts text tokens for budget checks. The default splits on
/// whitespace; real tokenizers are model-specific.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub total: usize,
    pub singles: usize,
    pub pairs: usize,
    pub triples: usize,
    pub quads: usize,
}

impl SubsetStats {
    pub fn from_items(items: &[ComparisonItem]) -> Self {
        let mut s = Self::default();
        for item in items {
            s.add(item.group.len());
        }
        s
    }

    fn add(&mut self, size: usize) {
        self.total += 1;
        match size {
            1 => self.singles += 1,
            2 => self.pairs += 1,
            3 => self.triples += 1,
            4 => self.quads += 1,
            _ => unreachable!("group sizes are 1..=4"),
        }
    }

    pub fn merge(&mut self, other: &SubsetStats) {
        self.total += other.total;
        self.singles += other.singles;
        self.pairs += other.pairs;
        self.triples += other.triples;
        self.quads += other.quads;
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.singles + self.pairs + self.triples + self.quads
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub subsets: BTreeMap<String, SubsetStats>,
    pub all: SubsetStats,
}

/// One training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub subset: String,
    pub group_id: String,
    pub images: Vec<String>,
    pub user: String,
    pub assistant: String,
}

impl TrainingRecord {
    /// `User: … Assistant: …` rendering of the turn pair.
    pub fn conversation(&self) -> String {
        format!("User: {} Assistant: {}", self.user, self.assistant)
    }
}

const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Question with lettered options, one per line.
pub fn format_mcq_query(question: &str, options: &[String]) -> String {
    let mut s = question.to_string();
    for (letter, opt) in OPTION_LETTERS.iter().zip(options) {
        s.push_str(&format!("\n{letter}. {opt}"));
    }
    s
}

pub fn render_item(subset: &str, item: &ComparisonItem, fmt: InterleaveFormat) -> Result<TrainingRecord, AssembleError> {
    item.validate()?;
    let (query, response) = match (item.kind, &item.options, item.answer_index) {
        (ItemKind::TeachMcq, Some(opts), Some(idx)) => (
            format_mcq_query(&item.query, opts),
            format!("{}. {}", OPTION_LETTERS[idx], opts[idx]),
        ),
        _ => (item.query.clone(), item.response.clone()),
    };
    Ok(TrainingRecord {
        subset: subset.to_string(),
        group_id: item.group.group_id().to_string(),
        images: item.group.ids().map(String::from).collect(),
        user: render_interleaved(item.group.len(), &query, fmt)?,
        assistant: response,
    })
}

/// Renders every item of every subset to `out` (one record per line) and
/// returns per-subset and overall statistics.
pub fn assemble(
    subsets: &[(String, Vec<ComparisonItem>)],
    fmt: InterleaveFormat,
    out: &Path,
) -> Result<DatasetStats, AssembleError> {
    let mut names = HashSet::new();
    for (name, _) in subsets {
        if !names.insert(name.as_str()) {
            return Err(AssembleError::DuplicateSubset(name.clone()));
        }
    }
    let mut w = BufWriter::new(File::create(out)?);
    let mut stats = DatasetStats::default();
    for (name, items) in subsets {
        let mut s = SubsetStats::default();
        for item in items {
            let record = render_item(name, item, fmt)?;
            serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            s.add(item.group.len());
        }
        stats.all.merge(&s);
        stats.subsets.insert(name.clone(), s);
    }
    w.flush()?;
    Ok(stats)
}
