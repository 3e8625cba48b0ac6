//! Multiple-choice benchmark execution and scoring, and judge-based
//! scoring of free-form comparison answers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{format_mcq_query, render_interleaved, InterleaveFormat};
use crate::chat::{ask, ChatClient, ChatRequest, RetryPolicy, Turn};
use crate::corpus::{read_jsonl, CorpusError, ImageGroup, ImageRef};
use crate::parallel::bounded_map;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("benchmark shape check failed: {}", .0.join("; "))]
    Shape(Vec<String>),
    #[error("{responses} responses for {records} records")]
    CountMismatch { records: usize, responses: usize },
    #[error("response {index} is for `{got}`, expected `{expected}`")]
    IdMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("no answer key for record `{0}`")]
    MissingAnswer(String),
    #[error("answer key references unknown record `{0}`")]
    UnknownKey(String),
    #[error("no records in split {0}")]
    EmptySplit(Split),
    #[error("no judge scores to aggregate")]
    NoScores,
    #[error("unknown value `{0}`")]
    Parse(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    YesOrNo,
    Which,
    What,
    How,
    Others,
}

impl QuestionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::YesOrNo => "yes_or_no",
            Self::Which => "which",
            Self::What => "what",
            Self::How => "how",
            Self::Others => "others",
        }
    }

    /// Three-column view: what/how are reported under others.
    pub fn folded(self) -> Self {
        match self {
            Self::What | Self::How => Self::Others,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(EvalError::Parse(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMcq", into = "RawMcq")]
pub struct McqRecord {
    pub id: String,
    pub group: ImageGroup,
    pub question: String,
    pub options: Vec<String>,
    /// Absent for hidden-key splits until a keys file is merged in.
    pub answer_index: Option<usize>,
    pub qtype: QuestionType,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawMcq {
    id: String,
    images: Vec<ImageRef>,
    question: String,
    options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_index: Option<usize>,
    qtype: QuestionType,
    split: Split,
}

impl TryFrom<RawMcq> for McqRecord {
    type Error = EvalError;

    fn try_from(raw: RawMcq) -> Result<Self, Self::Error> {
        let group = match raw.images.len() {
            1 => ImageGroup::single(raw.images[0].clone()),
            _ => ImageGroup::new(raw.images).map_err(|e| EvalError::InvalidRecord {
                id: raw.id.clone(),
                reason: e.to_string(),
            })?,
        };
        let rec = McqRecord {
            id: raw.id,
            group,
            question: raw.question,
            options: raw.options,
            answer_index: raw.answer_index,
            qtype: raw.qtype,
            split: raw.split,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl From<McqRecord> for RawMcq {
    fn from(r: McqRecord) -> Self {
        RawMcq {
            id: r.id,
            images: r.group.members().to_vec(),
            question: r.question,
            options: r.options,
            answer_index: r.answer_index,
            qtype: r.qtype,
            split: r.split,
        }
    }
}

impl McqRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |reason: String| EvalError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(2..=4).contains(&self.options.len()) {
            return Err(invalid(format!("{} options, expected 2..=4", self.options.len())));
        }
        if let Some(i) = self.answer_index {
            if i >= self.options.len() {
                return Err(invalid(format!("answer_index {i} out of range")));
            }
        }
        if self.qtype == QuestionType::YesOrNo && self.options.len() != 2 {
            return Err(invalid("yes-or-no question must have exactly 2 options".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub id: String,
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchDefinition {
    pub name: String,
    pub records: Vec<McqRecord>,
}

pub const MICBENCH_DEV: usize = 1004;
pub const MICBENCH_TEST: usize = 996;

impl BenchDefinition {
    /// Validates every record; a bench named `micbench` must also have the
    /// published split shape.
    pub fn new(name: impl Into<String>, records: Vec<McqRecord>) -> Result<Self, EvalError> {
        for r in &records {
            r.validate()?;
        }
        let bench = Self {
            name: name.into(),
            records,
        };
        if bench.is_micbench() {
            check_micbench_shape(&bench)?;
        }
        Ok(bench)
    }

    pub fn load(name: &str, path: &Path, keys: Option<&Path>) -> Result<Self, EvalError> {
        let mut records: Vec<McqRecord> = read_jsonl(path)?;
        if let Some(keys) = keys {
            let keys: Vec<AnswerKey> = read_jsonl(keys)?;
            let by_id: HashMap<String, usize> =
                records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
            for k in &keys {
                let i = by_id.get(&k.id).ok_or_else(|| EvalError::UnknownKey(k.id.clone()))?;
                records[*i].answer_index = Some(k.answer_index);
            }
        }
        Self::new(name, records)
    }

    pub fn is_micbench(&self) -> bool {
        self.name.eq_ignore_ascii_case("micbench")
    }

    pub fn split(&self, split: Split) -> Vec<&McqRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_default() += 1;
        }
        m
    }
}

/// Published split sizes, test-split column counts, and the overall
/// question-type mix (60/22/18 which/yes-no/others, ±2 points).
pub fn check_micbench_shape(bench: &BenchDefinition) -> Result<(), EvalError> {
    let mut problems = Vec::new();
    let sizes = bench.split_sizes();
    let dev = sizes.get(&Split::Dev).copied().unwrap_or(0);
    let test = sizes.get(&Split::Test).copied().unwrap_or(0);
    if dev != MICBENCH_DEV {
        problems.push(format!("dev has {dev} records, expected {MICBENCH_DEV}"));
    }
    if test != MICBENCH_TEST {
        problems.push(format!("test has {test} records, expected {MICBENCH_TEST}"));
    }

    let test_records = bench.split(Split::Test);
    let count = |q: QuestionType| test_records.iter().filter(|r| r.qtype.folded() == q).count();
    for (q, want) in [
        (QuestionType::YesOrNo, 220),
        (QuestionType::Which, 594),
        (QuestionType::Others, 182),
    ] {
        let got = count(q);
        if got != want {
            problems.push(format!("test {} count {got}, expected {want}", q.as_str()));
        }
    }
    for (size, want) in [(3usize, 503usize), (4, 493)] {
        let got = test_records.iter().filter(|r| r.group.len() == size).count();
        if got != want {
            problems.push(format!("test {size}-image count {got}, expected {want}"));
        }
    }

    let total = bench.records.len();
    if total > 0 {
        for (q, share) in [
            (QuestionType::Which, 0.60),
            (QuestionType::YesOrNo, 0.22),
            (QuestionType::Others, 0.18),
        ] {
            let got = bench.records.iter().filter(|r| r.qtype.folded() == q).count() as f64 / total as f64;
            if (got - share).abs() > 0.02 {
                problems.push(format!("overall {} share {got:.3}, expected {share}±0.02", q.as_str()));
            }
        }
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Shape(problems))
    }
}

const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-D])\)").unwrap());
static ANSWER_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i:answer)(?:\s+is)?\s*[:：]?\s*\(?([A-D])\b").unwrap());
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)(?:^|[.!?]\s+)\s*([A-D])(?:[.):,]|\s*$)").unwrap());

/// Maps a free-form answer to an option index.
///
/// Precedence: the earliest standalone option letter (`(B)`, `Answer: B`,
/// or `B.` / `B)` at the start of a sentence), then a unique
/// case-insensitive option-text match, otherwise `None`.
pub fn extract_choice(response: &str, options: &[String]) -> Option<usize> {
    let n = options.len();
    let letter_hit = [&*PAREN_LETTER, &*ANSWER_LETTER, &*LEADING_LETTER]
        .iter()
        .flat_map(|re| re.captures_iter(response))
        .filter_map(|c| {
            let m = c.get(1)?;
            let idx = LETTERS.iter().position(|l| m.as_str().starts_with(*l))?;
            (idx < n).then_some((m.start(), idx))
        })
        .min_by_key(|(pos, _)| *pos);
    if let Some((_, idx)) = letter_hit {
        return Some(idx);
    }

    let lower = response.to_lowercase();
    let mut hits = options
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.trim().is_empty() && lower.contains(&o.trim().to_lowercase()));
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Some(i),
        _ => None,
    }
}

pub const MCQ_INSTRUCTION: &str = "Answer with the option's letter from the given choices directly.";

pub fn render_mcq_turn(record: &McqRecord, fmt: InterleaveFormat) -> Result<Turn, EvalError> {
    let query = format!("{}\n{MCQ_INSTRUCTION}", format_mcq_query(&record.question, &record.options));
    let text = render_interleaved(record.group.len(), &query, fmt).map_err(|e| EvalError::InvalidRecord {
        id: record.id.clone(),
        reason: e.to_string(),
    })?;
    Ok(Turn::with_images(text, record.group.members().to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqResponse {
    pub id: String,
    /// `None` when the client could not answer (capability or transport).
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Asks `client` every question of `split`. Wrap the client in
/// [`crate::chat::CachedClient`] to make re-runs free.
pub fn run_mcq(
    client: &dyn ChatClient,
    bench: &BenchDefinition,
    fmt: InterleaveFormat,
    split: Split,
    in_flight: usize,
) -> Result<Vec<McqResponse>, EvalError> {
    let records = bench.split(split);
    let turns = records
        .iter()
        .map(|r| render_mcq_turn(r, fmt))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(bounded_map(&turns, in_flight, |i, turn| {
        let id = records[i].id.clone();
        match ask(client, &ChatRequest::user(turn.clone())) {
            Ok(text) => McqResponse {
                id,
                response: Some(text),
                error: None,
            },
            Err(e) => McqResponse {
                id,
                response: None,
                error: Some(e.to_string()),
            },
        }
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Breakdown {
    fn add(&mut self, correct: bool) {
        self.count += 1;
        self.correct += correct as usize;
        self.accuracy = self.correct as f64 / self.count as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub count: usize,
    pub correct: usize,
    pub by_qtype: BTreeMap<String, Breakdown>,
    pub by_group_size: BTreeMap<usize, Breakdown>,
    pub n_unresolved: usize,
}

impl AccuracyReport {
    /// Count-weighted mean of a breakdown.
    pub fn weighted_mean<'a>(parts: impl IntoIterator<Item = &'a Breakdown>) -> f64 {
        let (num, den) = parts
            .into_iter()
            .fold((0.0, 0.0), |(n, d), b| (n + b.accuracy * b.count as f64, d + b.count as f64));
        num / den
    }
}

/// Unresolved answers count as wrong. MICBench reports fold what/how into
/// `others`.
pub fn score_mcq(responses: &[McqResponse], bench: &BenchDefinition, split: Split) -> Result<AccuracyReport, EvalError> {
    let records = bench.split(split);
    if records.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    if records.len() != responses.len() {
        return Err(EvalError::CountMismatch {
            records: records.len(),
            responses: responses.len(),
        });
    }
    let mut by_qtype: BTreeMap<String, Breakdown> = BTreeMap::new();
    let mut by_group_size: BTreeMap<usize, Breakdown> = BTreeMap::new();
    let mut correct = 0;
    let mut unresolved = 0;
    for (i, (rec, resp)) in records.iter().zip(responses).enumerate() {
        if rec.id != resp.id {
            return Err(EvalError::IdMismatch {
                index: i,
                expected: rec.id.clone(),
                got: resp.id.clone(),
            });
        }
        let key = rec.answer_index.ok_or_else(|| EvalError::MissingAnswer(rec.id.clone()))?;
        let choice = resp.response.as_deref().and_then(|r| extract_choice(r, &rec.options));
        if choice.is_none() {
            unresolved += 1;
        }
        let ok = choice == Some(key);
        correct += ok as usize;
        let qtype = if bench.is_micbench() { rec.qtype.folded() } else { rec.qtype };
        by_qtype.entry(qtype.as_str().to_string()).or_default().add(ok);
        by_group_size.entry(rec.group.len()).or_default().add(ok);
    }
    Ok(AccuracyReport {
        overall: correct as f64 / records.len() as f64,
        count: records.len(),
        correct,
        by_qtype,
        by_group_size,
        n_unresolved: unresolved,
    })
}

/// Expected accuracy of uniform guessing: mean of 1/|options|.
pub fn random_baseline(bench: &BenchDefinition, split: Split) -> Result<f64, EvalError> {
    let records = bench.split(split);
    if records.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    Ok(records.iter().map(|r| 1.0 / r.options.len() as f64).sum::<f64>() / records.len() as f64)
}

pub const JUDGE_RUBRIC: &str = "You are an expert in image quality assessment. Compare a candidate answer with the golden expert answer to a visual quality comparison question, and rate it on three dimensions.\n\
Completeness: 0 = misses the key points of the golden answer, 1 = covers some of them, 2 = covers all of them.\n\
Precision: 0 = contradicts the golden answer, 1 = partly consistent, 2 = fully consistent with no incorrect statements.\n\
Relevance: 0 = unrelated to the question, 1 = partly relevant, 2 = fully relevant.\n\
Reply with exactly three integers separated by spaces, in the order completeness precision relevance, and nothing else.";

pub fn render_judge_prompt(question: &str, golden: &str, candidate: &str) -> String {
    format!("{JUDGE_RUBRIC}\n\nQuestion: {question}\nGolden answer: {golden}\nCandidate answer: {candidate}")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub completeness: u8,
    pub precision: u8,
    pub relevance: u8,
}

impl JudgeScores {
    pub fn new(completeness: u8, precision: u8, relevance: u8) -> Option<Self> {
        [completeness, precision, relevance]
            .iter()
            .all(|s| *s <= 2)
            .then_some(Self {
                completeness,
                precision,
                relevance,
            })
    }
}

static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// First three integers in the judge reply, each in 0..=2.
pub fn parse_judge_scores(text: &str) -> Option<JudgeScores> {
    let nums: Vec<u8> = INTEGER
        .find_iter(text)
        .take(3)
        .map(|m| m.as_str().parse::<u8>().unwrap_or(u8::MAX))
        .collect();
    match nums[..] {
        [c, p, r] => JudgeScores::new(c, p, r),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeCase {
    pub id: String,
    pub question: String,
    pub golden: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub id: String,
    pub scores: JudgeScores,
    /// Judge never produced a valid reply; scores are zeros.
    pub flagged: bool,
}

pub fn judge_one(judge: &dyn ChatClient, case: &JudgeCase, policy: RetryPolicy) -> JudgeOutcome {
    let request = ChatRequest::user(Turn::text(render_judge_prompt(&case.question, &case.golden, &case.candidate)));
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 && !policy.base_delay.is_zero() {
            std::thread::sleep(policy.base_delay * 2u32.saturating_pow(attempt as u32 - 1));
        }
        match ask(judge, &request) {
            Ok(text) => {
                if let Some(scores) = parse_judge_scores(&text) {
                    return JudgeOutcome {
                        id: case.id.clone(),
                        scores,
                        flagged: false,
                    };
                }
                tracing::debug!(id = case.id, reply = text, "unparseable judge reply");
            }
            Err(e) => tracing::debug!(id = case.id, error = %e, "judge call failed"),
        }
    }
    JudgeOutcome {
        id: case.id.clone(),
        scores: JudgeScores::default(),
        flagged: true,
    }
}

pub fn judge_responses(
    judge: &dyn ChatClient,
    cases: &[JudgeCase],
    policy: RetryPolicy,
    in_flight: usize,
) -> Vec<JudgeOutcome> {
    bounded_map(cases, in_flight, |_, c| judge_one(judge, c, policy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionAggregate {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub score: f64,
}

impl DimensionAggregate {
    /// Expected score `0·P0 + 1·P1 + 2·P2` from score frequencies.
    pub fn from_frequencies(p0: f64, p1: f64, p2: f64) -> Self {
        Self {
            p0,
            p1,
            p2,
            score: p1 + 2.0 * p2,
        }
    }

    fn from_scores(scores: impl Iterator<Item = u8>) -> Self {
        let mut counts = [0usize; 3];
        let mut n = 0usize;
        for s in scores {
            counts[s as usize] += 1;
            n += 1;
        }
        let f = |c: usize| c as f64 / n as f64;
        Self::from_frequencies(f(counts[0]), f(counts[1]), f(counts[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeAggregate {
    pub completeness: DimensionAggregate,
    pub precision: DimensionAggregate,
    pub relevance: DimensionAggregate,
    pub sum: f64,
}

impl JudgeAggregate {
    pub fn from_dimensions(
        completeness: DimensionAggregate,
        precision: DimensionAggregate,
        relevance: DimensionAggregate,
    ) -> Self {
        Self {
            completeness,
            precision,
            relevance,
            sum: completeness.score + precision.score + relevance.score,
        }
    }
}

pub fn aggregate_judge(scores: &[JudgeScores]) -> Result<JudgeAggregate, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    Ok(JudgeAggregate::from_dimensions(
        DimensionAggregate::from_scores(scores.iter().map(|s| s.completeness)),
        DimensionAggregate::from_scores(scores.iter().map(|s| s.precision)),
        DimensionAggregate::from_scores(scores.iter().map(|s| s.relevance)),
    ))
}
