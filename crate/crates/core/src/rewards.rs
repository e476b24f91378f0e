//! Task reward functions: exact-match and option-letter QA, numeric QA with a
//! `1e-2` tolerance, ROUGE-L F1 for free-form generation, best-pair temporal
//! IoU, grounding QA as the sum of the QA and IoU scores, and the format
//! penalty.

use crate::error::{Error, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;
use unicode_normalization::UnicodeNormalization;

pub const NUMERIC_TOLERANCE: f64 = 1e-2;
/// Weight of the format penalty added to malformed outputs.
pub const DEFAULT_FORMAT_WEIGHT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Choice,
    Exact,
    Numeric,
    Generation,
    TemporalGrounding,
    GroundingQa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Choice,
        TaskKind::Exact,
        TaskKind::Numeric,
        TaskKind::Generation,
        TaskKind::TemporalGrounding,
        TaskKind::GroundingQa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Choice => "choice",
            TaskKind::Exact => "exact",
            TaskKind::Numeric => "numeric",
            TaskKind::Generation => "generation",
            TaskKind::TemporalGrounding => "temporal_grounding",
            TaskKind::GroundingQa => "grounding_qa",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task kind `{s}`")))
    }
}

/// A closed time interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start > end {
            return Err(Error::domain(format!("invalid segment [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Reference answer: text, an option label, or a number in decimal form.
    pub gold_answer: String,
    #[serde(default)]
    pub gold_segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer_text: String,
    #[serde(default)]
    pub predicted_segments: Vec<Segment>,
    pub format_ok: bool,
}

/// NFC, lowercase, whitespace tokenisation. Punctuation is kept.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let folded: String = text.nfc().collect::<String>().to_lowercase();
    folded.split_whitespace().map(str::to_owned).collect()
}

static OPTION_LETTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)^\s*
          (?:(?:the\s+)?(?:correct\s+)?(?:answer|option|choice)\s*(?:is)?\s*[:\-]?\s*)?
          (?:
            [\(\[]\s*([a-z])\s*[\)\]]\s*[\.:]?(?:\s.*)?
          | ([a-z])\s*(?:[\.:\)](?:\s.*)?)?
          )$",
    )
    .expect("static regex")
});

/// Option letter of a multiple-choice response, uppercased.
pub fn parse_option_letter(text: &str) -> Option<char> {
    OPTION_LETTER
        .captures(text.trim())
        .and_then(|c| c.get(1).or_else(|| c.get(2)))
        .and_then(|m| m.as_str().chars().next())
        .map(|c| c.to_ascii_uppercase())
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("static regex")
});

/// First decimal number appearing in `text`.
pub fn parse_number(text: &str) -> Option<f64> {
    NUMBER
        .find(&text.replace(',', ""))
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|x| x.is_finite())
}

/// Binary exact-match reward for `choice` and `exact` kinds.
pub fn qa_reward(pred: &Prediction, spec: &TaskSpec) -> Result<f64> {
    match spec.kind {
        TaskKind::Choice => {
            let gold = parse_option_letter(&spec.gold_answer).ok_or_else(|| {
                Error::contract(format!("gold option `{}` is not a letter", spec.gold_answer))
            })?;
            Ok(f64::from(u8::from(parse_option_letter(&pred.answer_text) == Some(gold))))
        }
        TaskKind::Exact | TaskKind::GroundingQa => Ok(f64::from(u8::from(
            normalize_tokens(&pred.answer_text) == normalize_tokens(&spec.gold_answer),
        ))),
        other => Err(Error::contract(format!("qa_reward does not score `{other}` tasks"))),
    }
}

/// 1 when `|pred - gold| <= 1e-2`, inclusive.
pub fn numeric_reward(pred: f64, gold: f64) -> f64 {
    if !(pred.is_finite() && gold.is_finite()) {
        return 0.0;
    }
    // the slack absorbs representation error in decimal inputs like 0.005
    f64::from(u8::from((pred - gold).abs() <= NUMERIC_TOLERANCE + 1e-12))
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between token sequences.
pub fn rouge_l<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::domain("ROUGE-L needs a non-empty reference"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(pred, gold) as f64;
    let p = lcs / pred.len() as f64;
    let r = lcs / gold.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub fn interval_iou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Highest IoU over all (prediction, reference) pairs; 0 when either side is empty.
pub fn tiou_reward(pred: &[Segment], gold: &[Segment]) -> f64 {
    pred.iter()
        .flat_map(|&p| gold.iter().map(move |&g| interval_iou(p, g)))
        .fold(0.0, f64::max)
}

pub fn gqa_reward(pred: &Prediction, spec: &TaskSpec) -> Result<f64> {
    if spec.kind != TaskKind::GroundingQa {
        return Err(Error::contract(format!(
            "gqa_reward scores grounding_qa tasks, got `{}`",
            spec.kind
        )));
    }
    Ok(qa_reward(pred, spec)? + tiou_reward(&pred.predicted_segments, &spec.gold_segments))
}

/// Task reward of `pred` for whichever kind `spec` declares.
pub fn task_reward(pred: &Prediction, spec: &TaskSpec) -> Result<f64> {
    match spec.kind {
        TaskKind::Choice | TaskKind::Exact => qa_reward(pred, spec),
        TaskKind::Numeric => {
            let gold = parse_number(&spec.gold_answer).ok_or_else(|| {
                Error::contract(format!("numeric gold `{}` is not a number", spec.gold_answer))
            })?;
            Ok(parse_number(&pred.answer_text).map_or(0.0, |p| numeric_reward(p, gold)))
        }
        TaskKind::Generation => rouge_l(
            &normalize_tokens(&pred.answer_text),
            &normalize_tokens(&spec.gold_answer),
        ),
        TaskKind::TemporalGrounding => {
            Ok(tiou_reward(&pred.predicted_segments, &spec.gold_segments))
        }
        TaskKind::GroundingQa => gqa_reward(pred, spec),
    }
}

/// `task_reward - format_weight` for malformed outputs, unchanged otherwise.
pub fn combined_scalar_reward(task_reward: f64, format_ok: bool, format_weight: f64) -> f64 {
    task_reward + format_weight * (f64::from(u8::from(format_ok)) - 1.0)
}

static BOXED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\\boxed\{[^{}]+\}").expect("static regex"));

/// Structural output check: one `<think>` block, then one `<answer>` block
/// whose body holds a `\boxed{...}` answer.
pub fn check_format(output: &str) -> bool {
    let count = |tag: &str| output.matches(tag).count();
    if ["<think>", "</think>", "<answer>", "</answer>"]
        .iter()
        .any(|t| count(t) != 1)
    {
        return false;
    }
    let pos = |tag: &str| output.find(tag).unwrap_or(usize::MAX);
    let (t0, t1, a0, a1) = (pos("<think>"), pos("</think>"), pos("<answer>"), pos("</answer>"));
    if !(t0 < t1 && t1 < a0 && a0 < a1) {
        return false;
    }
    BOXED.is_match(&output[a0 + "<answer>".len()..a1])
}

pub mod fixtures {
    //! Tab-separated regression fixtures, one case per line:
    //!
    //! `kind  prediction  gold  format_ok  task_reward  correct  scalar_reward`
    //!
    //! Segments are written `start-end` joined by `;`. Grounding-QA fields are
    //! `answer|segments`. `#` starts a comment line.

    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    pub struct FixtureCase {
        pub line: usize,
        pub spec: TaskSpec,
        pub prediction: Prediction,
        pub expected_task_reward: f64,
        pub expected_correct: bool,
        pub expected_scalar: f64,
    }

    pub fn parse_segments(text: &str) -> Result<Vec<Segment>> {
        text.split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (a, b) = s
                    .split_once('-')
                    .ok_or_else(|| Error::Parse(format!("segment `{s}` is not start-end")))?;
                let num = |x: &str| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("segment `{s}`: {e}")))
                };
                Segment::new(num(a)?, num(b)?)
            })
            .collect()
    }

    fn split_fields(kind: TaskKind, field: &str) -> Result<(String, Vec<Segment>)> {
        match kind {
            TaskKind::TemporalGrounding => Ok((String::new(), parse_segments(field)?)),
            TaskKind::GroundingQa => {
                let (text, segs) = field.split_once('|').unwrap_or((field, ""));
                Ok((text.to_string(), parse_segments(segs)?))
            }
            _ => Ok((field.to_string(), Vec::new())),
        }
    }

    pub fn parse_fixture(text: &str) -> Result<Vec<FixtureCase>> {
        let mut cases = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 7 {
                return Err(Error::Parse(format!(
                    "fixture line {line}: expected 7 tab-separated fields, got {}",
                    cols.len()
                )));
            }
            let kind: TaskKind = cols[0].trim().parse()?;
            let (answer_text, predicted_segments) = split_fields(kind, cols[1])?;
            let (gold_answer, gold_segments) = split_fields(kind, cols[2])?;
            let flag = |s: &str| match s.trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(Error::Parse(format!("fixture line {line}: bad flag `{other}`"))),
            };
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("fixture line {line}: {e}")))
            };
            let format_ok = flag(cols[3])?;
            cases.push(FixtureCase {
                line,
                spec: TaskSpec {
                    kind,
                    gold_answer,
                    gold_segments,
                },
                prediction: Prediction {
                    answer_text,
                    predicted_segments,
                    format_ok,
                },
                expected_task_reward: num(cols[4])?,
                expected_correct: flag(cols[5])?,
                expected_scalar: num(cols[6])?,
            });
        }
        Ok(cases)
    }
}
