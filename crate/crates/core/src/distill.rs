//! LLM merging of single-image descriptions and the teacher pipelines
//! (general comparisons, question answering, MCQ conversion).
//!
//! Prompt wording here is pinned by golden tests; change it only together
//! with `tests/golden/`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ask, ChatClient, ChatRequest, ClientError, Turn};
use crate::corpus::{text_digest, ComparisonItem, ImageGroup, ItemKind, Provenance};
use crate::parallel::bounded_map;

pub const PAIR_QUESTION: &str = "Which image has better quality, and why?";
pub const GROUP_QUESTION: &str = "Please rank the quality of the images and justify your rankings.";

/// First three come from common IQA practice; the rest widen coverage.
pub const DEFAULT_ASPECTS: [&str; 6] = [
    "clarity",
    "lighting",
    "color",
    "noise",
    "sharpness",
    "composition",
];

const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("group size {0} outside 2..=4")]
    BadGroupSize(usize),
    #[error("no ordinal word for position {0}")]
    NoOrdinal(usize),
    #[error("no description for image `{0}`")]
    MissingDescription(String),
    #[error("aspect list is empty")]
    NoAspects,
    #[error("teacher response contained no well-formed records ({dropped} malformed)")]
    NoRecords { dropped: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrdinalName {
    pub index: usize,
    pub word: &'static str,
}

impl OrdinalName {
    pub fn new(index: usize) -> Result<Self, DistillError> {
        ORDINALS
            .get(index)
            .map(|&word| Self { index, word })
            .ok_or(DistillError::NoOrdinal(index))
    }
}

pub fn ordinal_word(index: usize) -> Result<&'static str, DistillError> {
    OrdinalName::new(index).map(|o| o.word)
}

pub fn comparison_question(group_size: usize) -> Result<&'static str, DistillError> {
    match group_size {
        2 => Ok(PAIR_QUESTION),
        3 | 4 => Ok(GROUP_QUESTION),
        n => Err(DistillError::BadGroupSize(n)),
    }
}

/// "The first image: c0 The second image: c1 … question"
pub(crate) fn ordinal_prefixed<S: AsRef<str>>(contents: &[S], tail: &str) -> Result<String, DistillError> {
    let mut parts = Vec::with_capacity(contents.len() + 1);
    for (i, c) in contents.iter().enumerate() {
        parts.push(format!("The {} image: {}", ordinal_word(i)?, c.as_ref()));
    }
    parts.push(tail.to_string());
    Ok(parts.join(" "))
}

fn member_descriptions<'a>(
    group: &ImageGroup,
    descs: &'a HashMap<String, String>,
) -> Result<Vec<&'a str>, DistillError> {
    group
        .ids()
        .map(|id| {
            descs
                .get(id)
                .map(String::as_str)
                .ok_or_else(|| DistillError::MissingDescription(id.to_string()))
        })
        .collect()
}

pub fn render_merge_prompt(
    group: &ImageGroup,
    descs: &HashMap<String, String>,
) -> Result<String, DistillError> {
    let question = comparison_question(group.len())?;
    ordinal_prefixed(&member_descriptions(group, descs)?, question)
}

/// Same template as the merge prompt with `<img_k>` slots where the
/// descriptions were.
pub fn render_teach_general_prompt(group: &ImageGroup) -> Result<Turn, DistillError> {
    let question = comparison_question(group.len())?;
    let slots: Vec<String> = (0..group.len()).map(|k| format!("<img_{k}>")).collect();
    Ok(Turn::with_images(
        ordinal_prefixed(&slots, question)?,
        group.members().to_vec(),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillStats {
    pub requested: usize,
    pub parsed_ok: usize,
    pub dropped_failed: usize,
}

impl DistillStats {
    fn record<T, E>(&mut self, r: &Result<T, E>) {
        self.requested += 1;
        if r.is_ok() {
            self.parsed_ok += 1;
        } else {
            self.dropped_failed += 1;
        }
    }
}

/// Merges member descriptions into one comparison with a text-only LLM.
/// The response is stored verbatim.
pub fn merge_compare(
    client: &dyn ChatClient,
    group: &ImageGroup,
    descs: &HashMap<String, String>,
) -> Result<ComparisonItem, DistillError> {
    let prompt = render_merge_prompt(group, descs)?;
    let response = ask(client, &ChatRequest::user(Turn::text(prompt)))?;
    Ok(ComparisonItem {
        group: group.clone(),
        kind: ItemKind::MergedGeneral,
        query: comparison_question(group.len())?.to_string(),
        response,
        options: None,
        answer_index: None,
        provenance: Provenance::Merge2compare,
    })
}

fn run_batch<F>(groups: &[ImageGroup], in_flight: usize, f: F) -> (Vec<ComparisonItem>, DistillStats)
where
    F: Fn(&ImageGroup) -> Result<ComparisonItem, DistillError> + Sync,
{
    let results = bounded_map(groups, in_flight, |_, g| f(g));
    let mut stats = DistillStats::default();
    let mut items = Vec::with_capacity(results.len());
    for (g, r) in groups.iter().zip(results) {
        stats.record(&r);
        match r {
            Ok(item) => items.push(item),
            Err(e) => tracing::warn!(group = g.group_id(), error = %e, "dropped generation"),
        }
    }
    (items, stats)
}

pub fn merge_batch(
    client: &dyn ChatClient,
    groups: &[ImageGroup],
    descs: &HashMap<String, String>,
    in_flight: usize,
) -> (Vec<ComparisonItem>, DistillStats) {
    run_batch(groups, in_flight, |g| merge_compare(client, g, descs))
}

pub fn teach_general(client: &dyn ChatClient, group: &ImageGroup) -> Result<ComparisonItem, DistillError> {
    let turn = render_teach_general_prompt(group)?;
    let response = ask(client, &ChatRequest::user(turn))?;
    Ok(ComparisonItem {
        group: group.clone(),
        kind: ItemKind::TeachGeneral,
        query: comparison_question(group.len())?.to_string(),
        response,
        options: None,
        answer_index: None,
        provenance: Provenance::Teach2compare,
    })
}

pub fn teach_general_batch(
    client: &dyn ChatClient,
    groups: &[ImageGroup],
    in_flight: usize,
) -> (Vec<ComparisonItem>, DistillStats) {
    run_batch(groups, in_flight, |g| teach_general(client, g))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub group: ImageGroup,
    pub question: String,
    pub correct: String,
    pub distractors: Vec<String>,
    pub aspect: String,
}

fn same_answer(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

impl QAItem {
    pub fn is_valid(&self) -> bool {
        let non_empty = |s: &str| !s.trim().is_empty();
        non_empty(&self.question)
            && non_empty(&self.correct)
            && non_empty(&self.aspect)
            && (1..=3).contains(&self.distractors.len())
            && self.distractors.iter().all(|d| non_empty(d))
            && !self.distractors.iter().any(|d| same_answer(d, &self.correct))
            && self
                .distractors
                .iter()
                .enumerate()
                .all(|(i, d)| !self.distractors[..i].iter().any(|o| same_answer(o, d)))
    }
}

pub fn render_qa_prompt(group: &ImageGroup, aspects: &[&str]) -> Result<Turn, DistillError> {
    if aspects.is_empty() {
        return Err(DistillError::NoAspects);
    }
    comparison_question(group.len())?;
    let slots: Vec<String> = (0..group.len()).map(|k| format!("<img_{k}>")).collect();
    let instruction = format!(
        "Ask several questions that compare the quality of these images, covering reference aspects such as {}. \
For each question give the correct answer and one to three false answers, formatted exactly as:\n\
Q: <question>\n\
CORRECT: <correct answer>\n\
WRONG: <false answer>; <false answer>; <false answer>\n\
Separate questions with a blank line.",
        aspects.join(", ")
    );
    Ok(Turn::with_images(
        ordinal_prefixed(&slots, &instruction)?,
        group.members().to_vec(),
    ))
}

#[derive(Default)]
struct PartialRecord {
    question: Option<String>,
    correct: Option<String>,
    wrong: Option<Vec<String>>,
    aspect: Option<String>,
}

impl PartialRecord {
    fn is_started(&self) -> bool {
        self.question.is_some() || self.correct.is_some() || self.wrong.is_some()
    }
}

fn strip_tag<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let head = line.get(..tag.len())?;
    head.eq_ignore_ascii_case(tag).then(|| line[tag.len()..].trim())
}

fn infer_aspect(question: &str, aspects: &[&str]) -> String {
    let q = question.to_lowercase();
    aspects
        .iter()
        .find(|a| q.contains(&a.to_lowercase()))
        .map(|a| a.to_string())
        .unwrap_or_else(|| "general".to_string())
}

/// Parses `Q:` / `CORRECT:` / `WRONG:` records. Returns the well-formed
/// items and the number of records that were dropped.
pub fn parse_qa_response(group: &ImageGroup, text: &str, aspects: &[&str]) -> (Vec<QAItem>, usize) {
    let mut items = Vec::new();
    let mut dropped = 0;
    let mut current = PartialRecord::default();

    let flush = |rec: PartialRecord, items: &mut Vec<QAItem>, dropped: &mut usize| {
        if !rec.is_started() {
            return;
        }
        let item = match (rec.question, rec.correct, rec.wrong) {
            (Some(question), Some(correct), Some(distractors)) => {
                let aspect = rec.aspect.unwrap_or_else(|| infer_aspect(&question, aspects));
                Some(QAItem {
                    group: group.clone(),
                    question,
                    correct,
                    distractors,
                    aspect,
                })
            }
            _ => None,
        };
        match item {
            Some(item) if item.is_valid() => items.push(item),
            _ => *dropped += 1,
        }
    };

    for raw in text.lines() {
        let line = raw.trim();
        if let Some(q) = strip_tag(line, "Q:") {
            flush(std::mem::take(&mut current), &mut items, &mut dropped);
            current.question = Some(q.to_string());
        } else if let Some(c) = strip_tag(line, "CORRECT:") {
            current.correct = Some(c.to_string());
        } else if let Some(w) = strip_tag(line, "WRONG:") {
            current.wrong = Some(
                w.split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            );
        } else if let Some(a) = strip_tag(line, "ASPECT:") {
            current.aspect = Some(a.to_lowercase());
        }
    }
    flush(current, &mut items, &mut dropped);
    (items, dropped)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QaBatch {
    pub items: Vec<QAItem>,
    /// Counted per group: a group succeeds when it yields at least one item.
    pub stats: DistillStats,
    pub dropped_records: usize,
}

fn generate_qa_inner(
    client: &dyn ChatClient,
    group: &ImageGroup,
    aspects: &[&str],
) -> Result<(Vec<QAItem>, usize), DistillError> {
    let turn = render_qa_prompt(group, aspects)?;
    let response = ask(client, &ChatRequest::user(turn))?;
    let (items, dropped) = parse_qa_response(group, &response, aspects);
    if items.is_empty() {
        return Err(DistillError::NoRecords { dropped });
    }
    Ok((items, dropped))
}

/// Asks the teacher for Q&A records on one group.
pub fn generate_qa(client: &dyn ChatClient, group: &ImageGroup, aspects: &[&str]) -> QaBatch {
    generate_qa_batch(client, std::slice::from_ref(group), aspects, 1)
}

pub fn generate_qa_batch(
    client: &dyn ChatClient,
    groups: &[ImageGroup],
    aspects: &[&str],
    in_flight: usize,
) -> QaBatch {
    let results = bounded_map(groups, in_flight, |_, g| generate_qa_inner(client, g, aspects));
    let mut batch = QaBatch::default();
    for (g, r) in groups.iter().zip(results) {
        batch.stats.record(&r);
        match r {
            Ok((items, dropped)) => {
                batch.items.extend(items);
                batch.dropped_records += dropped;
            }
            Err(e) => {
                if let DistillError::NoRecords { dropped } = e {
                    batch.dropped_records += dropped;
                }
                tracing::warn!(group = g.group_id(), error = %e, "dropped Q&A generation");
            }
        }
    }
    batch
}

/// Converts a Q&A item into an MCQ (seeded option shuffle) and its
/// direct-answer twin.
pub fn qa_to_mcq(item: &QAItem, seed: u64) -> (ComparisonItem, ComparisonItem) {
    let salt = text_digest(&format!("{}\u{1f}{}", item.group.group_id(), item.question));
    let salt = u64::from_str_radix(&salt[..16], 16).expect("hex digest");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let mut options: Vec<String> = std::iter::once(item.correct.clone())
        .chain(item.distractors.iter().cloned())
        .collect();
    options.shuffle(&mut rng);
    let answer_index = options
        .iter()
        .position(|o| *o == item.correct)
        .expect("correct answer is among options");
    let mcq = ComparisonItem {
        group: item.group.clone(),
        kind: ItemKind::TeachMcq,
        query: item.question.clone(),
        response: item.correct.clone(),
        options: Some(options),
        answer_index: Some(answer_index),
        provenance: Provenance::Teach2compare,
    };
    let direct = ComparisonItem {
        group: item.group.clone(),
        kind: ItemKind::TeachQaDirect,
        query: item.question.clone(),
        response: item.correct.clone(),
        options: None,
        answer_index: None,
        provenance: Provenance::Teach2compare,
    };
    (mcq, direct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{constant_client, FnClient, RetryPolicy, RetryingClient};
    use crate::corpus::ImageRef;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn group(n: usize) -> ImageGroup {
        ImageGroup::new((0..n).map(|i| ImageRef::new(format!("i{i}"))).collect()).unwrap()
    }

    fn descs(texts: &[&str]) -> HashMap<String, String> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("i{i}"), t.to_string()))
            .collect()
    }

    #[test]
    fn ordinals_total_on_four() {
        let words: Vec<_> = (0..4).map(|i| ordinal_word(i).unwrap()).collect();
        assert_eq!(words, ["first", "second", "third", "fourth"]);
        assert!(ordinal_word(4).is_err());
    }

    #[test]
    fn pair_and_triple_merge_prompts() {
        assert_eq!(
            render_merge_prompt(&group(2), &descs(&["A", "B"])).unwrap(),
            "The first image: A The second image: B Which image has better quality, and why?"
        );
        assert_eq!(
            render_merge_prompt(&group(3), &descs(&["A", "B", "C"])).unwrap(),
            "The first image: A The second image: B The third image: C Please rank the quality of the images and justify your rankings."
        );
    }

    #[test]
    fn single_image_group_rejected() {
        let g = ImageGroup::single(ImageRef::new("i0"));
        assert!(matches!(
            render_merge_prompt(&g, &descs(&["A"])),
            Err(DistillError::BadGroupSize(1))
        ));
        assert!(render_teach_general_prompt(&g).is_err());
    }

    #[test]
    fn teach_prompts_use_slots() {
        let t = render_teach_general_prompt(&group(2)).unwrap();
        assert_eq!(
            t.text,
            "The first image: <img_0> The second image: <img_1> Which image has better quality, and why?"
        );
        assert_eq!(t.images.len(), 2);
        let q = render_teach_general_prompt(&group(4)).unwrap();
        assert!(q.text.starts_with("The first image: <img_0> The second image: <img_1> The third image: <img_2> The fourth image: <img_3> "));
        assert!(q.text.ends_with(GROUP_QUESTION));

        let text_only = constant_client("llm", 0, "x");
        assert!(matches!(
            teach_general(&text_only, &group(2)),
            Err(DistillError::Client(ClientError::TooManyImages { .. }))
        ));
    }

    #[test]
    fn merge_passes_response_through() {
        let c = constant_client("echo", 0, "X");
        let item = merge_compare(&c, &group(2), &descs(&["A", "B"])).unwrap();
        assert_eq!(item.response, "X");
        assert_eq!(item.query, PAIR_QUESTION);
        assert_eq!(item.provenance, Provenance::Merge2compare);
        assert_eq!(item.kind, ItemKind::MergedGeneral);
    }

    #[test]
    fn transport_failure_after_retries_is_dropped() {
        let down = FnClient::new("down", 0, |_| Err(ClientError::Transport("refused".into())));
        let c = RetryingClient::new(&down, RetryPolicy::immediate(3));
        let (items, stats) = merge_batch(&c, &[group(2)], &descs(&["A", "B"]), 1);
        assert!(items.is_empty());
        assert_eq!(stats, DistillStats { requested: 1, parsed_ok: 0, dropped_failed: 1 });
        assert_eq!(down.calls(), 3);
    }

    #[test]
    fn batch_counts_failures() {
        // every 100/7-th call fails: calls whose prompt mentions a failing index
        let failing: Vec<usize> = vec![3, 17, 29, 41, 58, 77, 96];
        let groups: Vec<ImageGroup> = (0..100)
            .map(|g| {
                ImageGroup::new(vec![
                    ImageRef::new(format!("g{g}a")),
                    ImageRef::new(format!("g{g}b")),
                ])
                .unwrap()
            })
            .collect();
        let d: HashMap<String, String> = (0..100)
            .flat_map(|g| {
                [
                    (format!("g{g}a"), format!("desc {g} left")),
                    (format!("g{g}b"), format!("desc {g} right")),
                ]
            })
            .collect();
        let fail_set = failing.clone();
        let c = FnClient::new("flaky", 0, move |req| {
            let text = &req.turns[0].text;
            if fail_set.iter().any(|f| text.contains(&format!("desc {f} left"))) {
                Err(ClientError::Transport("boom".into()))
            } else {
                Ok("merged".into())
            }
        });
        let (items, stats) = merge_batch(&c, &groups, &d, 8);
        assert_eq!(stats, DistillStats { requested: 100, parsed_ok: 93, dropped_failed: 7 });
        assert_eq!(items.len(), 93);
    }

    #[test]
    fn blank_merge_output_counts_as_failed() {
        let c = constant_client("blank", 0, "   ");
        let (_, stats) = merge_batch(&c, &[group(2)], &descs(&["A", "B"]), 1);
        assert_eq!(stats.dropped_failed, 1);
    }

    const ONE_RECORD: &str = "Q: Which image is clearer?\nCORRECT: The first image\nWRONG: The second image";

    #[test]
    fn one_well_formed_record() {
        let c = constant_client("teacher", 4, ONE_RECORD);
        let batch = generate_qa(&c, &group(2), &DEFAULT_ASPECTS);
        assert_eq!(batch.items.len(), 1);
        assert_eq!(batch.stats, DistillStats { requested: 1, parsed_ok: 1, dropped_failed: 0 });
        assert_eq!(batch.items[0].aspect, "general");
    }

    #[test]
    fn parses_multiple_records_and_drops_bad_ones() {
        let text = "Here you go.\n\nQ: Which image has better lighting?\nCORRECT: The second image\nWRONG: The first image; The third image\n\n\
Q: Is the first image noisier than the second?\nCORRECT: Yes\nWRONG: No; yes\n\n\
Q: Which image has the most vivid color?\nCORRECT: The third image\n\n\
q: Which is sharpest?\ncorrect: The first image\nwrong: The second image; The third image; Neither\nASPECT: Sharpness";
        let (items, dropped) = parse_qa_response(&group(3), text, &DEFAULT_ASPECTS);
        assert_eq!(dropped, 2);
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].aspect, "lighting");
        assert_eq!(items[0].distractors, vec!["The first image", "The third image"]);
        assert_eq!(items[1].aspect, "sharpness");
    }

    #[test]
    fn correct_duplicated_in_wrong_is_dropped() {
        let text = "Q: Which is brighter?\nCORRECT: The first image\nWRONG: The second image; the first image";
        let c = constant_client("teacher", 4, text);
        let batch = generate_qa(&c, &group(2), &DEFAULT_ASPECTS);
        assert!(batch.items.is_empty());
        assert_eq!(batch.dropped_records, 1);
        assert_eq!(batch.stats, DistillStats { requested: 1, parsed_ok: 0, dropped_failed: 1 });
    }

    #[test]
    fn empty_aspects_rejected() {
        assert!(matches!(render_qa_prompt(&group(2), &[]), Err(DistillError::NoAspects)));
    }

    #[test]
    fn qa_batch_stats_balance() {
        let n = AtomicUsize::new(0);
        let c = FnClient::new("t", 4, |_| {
            Ok(match n.fetch_add(1, Ordering::SeqCst) % 3 {
                0 => ONE_RECORD.to_string(),
                1 => "no records here".to_string(),
                _ => format!("{ONE_RECORD}\n\n{ONE_RECORD}"),
            })
        });
        let groups: Vec<ImageGroup> = (0..9).map(|_| group(2)).collect();
        let b = generate_qa_batch(&c, &groups, &DEFAULT_ASPECTS, 1);
        assert_eq!(b.stats.requested, b.stats.parsed_ok + b.stats.dropped_failed);
        assert_eq!(b.stats, DistillStats { requested: 9, parsed_ok: 6, dropped_failed: 3 });
        assert_eq!(b.items.len(), 9);
    }

    fn qa(distractors: &[&str]) -> QAItem {
        QAItem {
            group: group(2),
            question: "Which image is sharper?".into(),
            correct: "The first image".into(),
            distractors: distractors.iter().map(|s| s.to_string()).collect(),
            aspect: "sharpness".into(),
        }
    }

    #[test]
    fn mcq_conversion_shapes() {
        let (mcq, direct) = qa_to_mcq(&qa(&["The second image", "Both", "Neither"]), 7);
        let opts = mcq.options.as_ref().unwrap();
        assert_eq!(opts.len(), 4);
        assert_eq!(opts.iter().filter(|o| *o == "The first image").count(), 1);
        assert_eq!(opts[mcq.answer_index.unwrap()], "The first image");
        mcq.validate().unwrap();
        assert_eq!(direct.kind, ItemKind::TeachQaDirect);
        assert_eq!(direct.response, "The first image");
        direct.validate().unwrap();

        let (two, _) = qa_to_mcq(&qa(&["The second image"]), 1);
        assert_eq!(two.options.as_ref().unwrap().len(), 2);
        assert!(two.answer_index.unwrap() < 2);
    }

    #[test]
    fn mcq_conversion_is_deterministic() {
        let item = qa(&["The second image", "Both", "Neither"]);
        assert_eq!(qa_to_mcq(&item, 99), qa_to_mcq(&item, 99));
    }

    proptest! {
        #[test]
        fn mcq_options_are_a_permutation(seed in any::<u64>(), k in 1usize..=3) {
            let all = ["The second image", "Both equally", "Neither"];
            let item = qa(&all[..k]);
            let (mcq, _) = qa_to_mcq(&item, seed);
            let mut got = mcq.options.clone().unwrap();
            let mut want: Vec<String> = std::iter::once(item.correct.clone()).chain(item.distractors.clone()).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            prop_assert_eq!(&mcq.options.as_ref().unwrap()[mcq.answer_index.unwrap()], &item.correct);
        }
    }
}
