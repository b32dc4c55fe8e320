//! Stage prompt templates and parsers for model outputs.
//!
//! A prompt is the task part of a template, a blank line, then the common
//! instruction part. Templates use `{name}` placeholders and are filled in a
//! single pass, so substituted text is never re-expanded. Built-in templates
//! live in `templates/`; a directory with the same layout can override any
//! of them, file by file. Template files are used byte for byte, so trailing
//! newlines matter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datasets::{Instance, Task};
use crate::text::normalize_word;

/// Joins the task part and the common instruction part.
pub const PART_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Ans,
    Exp,
    FbNl,
    FbIw,
    RefNl,
    RefIw,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ans,
        Stage::Exp,
        Stage::FbNl,
        Stage::FbIw,
        Stage::RefNl,
        Stage::RefIw,
    ];

    /// File stem of the template asset.
    pub fn key(self) -> &'static str {
        match self {
            Stage::Ans => "ans",
            Stage::Exp => "exp",
            Stage::FbNl => "fb_nl",
            Stage::FbIw => "fb_iw",
            Stage::RefNl => "ref_nl",
            Stage::RefIw => "ref_iw",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key().to_uppercase())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing template variable `{0}`")]
    MissingVar(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty {what} in model output {raw:?}")]
    Empty { what: &'static str, raw: String },
    #[error("no ranked words in model output {raw:?}")]
    NoRankedWords { raw: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("valid regex"))
}

/// A template and the placeholders it references, in order of first use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
    placeholders: Vec<String>,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let mut placeholders: Vec<String> = Vec::new();
        for c in placeholder_re().captures_iter(&text) {
            let name = c[1].to_string();
            if !placeholders.contains(&name) {
                placeholders.push(name);
            }
        }
        Template { text, placeholders }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    /// Fill every placeholder from `vars`; extra variables are ignored.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<Rendered, PromptError> {
        if let Some(missing) = self.placeholders.iter().find(|p| !vars.contains_key(*p)) {
            return Err(PromptError::MissingVar(missing.clone()));
        }
        let mut text = String::with_capacity(self.text.len() + 256);
        let mut fields = Vec::new();
        let mut last = 0;
        for c in placeholder_re().captures_iter(&self.text) {
            let whole = c.get(0).expect("match");
            text.push_str(&self.text[last..whole.start()]);
            let value = &vars[&c[1]];
            let start = text.len();
            text.push_str(value);
            fields.push((c[1].to_string(), start..text.len()));
            last = whole.end();
        }
        text.push_str(&self.text[last..]);
        Ok(Rendered { text, fields })
    }
}

/// A rendered prompt and the byte span of every substituted value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub fields: Vec<(String, Range<usize>)>,
}

impl Rendered {
    /// Spans where the named variables were substituted, in prompt order.
    pub fn spans_of<'a>(&'a self, names: &'a [&str]) -> impl Iterator<Item = Range<usize>> + 'a {
        self.fields
            .iter()
            .filter(move |(n, _)| names.contains(&n.as_str()))
            .map(|(_, r)| r.clone())
    }
}

fn builtin_task_part(task: Task, stage: Stage) -> &'static str {
    macro_rules! pick {
        ($dir:literal) => {
            match stage {
                Stage::Ans => include_str!(concat!("../templates/", $dir, "/ans.txt")),
                Stage::Exp => include_str!(concat!("../templates/", $dir, "/exp.txt")),
                Stage::FbNl => include_str!(concat!("../templates/", $dir, "/fb_nl.txt")),
                Stage::FbIw => include_str!(concat!("../templates/", $dir, "/fb_iw.txt")),
                Stage::RefNl => include_str!(concat!("../templates/", $dir, "/ref_nl.txt")),
                Stage::RefIw => include_str!(concat!("../templates/", $dir, "/ref_iw.txt")),
            }
        };
    }
    match task {
        Task::Comve => pick!("comve"),
        Task::Ecqa => pick!("ecqa"),
        Task::Esnli => pick!("esnli"),
    }
}

fn builtin_common_part(stage: Stage) -> &'static str {
    match stage {
        Stage::Ans => include_str!("../templates/common/ans.txt"),
        Stage::Exp => include_str!("../templates/common/exp.txt"),
        Stage::FbNl => include_str!("../templates/common/fb_nl.txt"),
        Stage::FbIw => include_str!("../templates/common/fb_iw.txt"),
        Stage::RefNl => include_str!("../templates/common/ref_nl.txt"),
        Stage::RefIw => include_str!("../templates/common/ref_iw.txt"),
    }
}

/// Template for generating interventions; needs `count` and `sentence`.
pub fn intervention_template() -> Template {
    Template::new(include_str!("../templates/intervention.txt"))
}

/// The six stage templates for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub task: Task,
    templates: BTreeMap<Stage, Template>,
}

impl PromptBundle {
    pub fn builtin(task: Task) -> Self {
        let templates = Stage::ALL
            .into_iter()
            .map(|s| {
                let text = [builtin_task_part(task, s), builtin_common_part(s)].join(PART_SEPARATOR);
                (s, Template::new(text))
            })
            .collect();
        PromptBundle { task, templates }
    }

    /// Built-in templates with parts replaced by files under `dir`.
    ///
    /// `dir/<task>/<stage>.txt` replaces a task part and `dir/common/<stage>.txt`
    /// a common part; missing files keep the built-in text.
    pub fn with_overrides(task: Task, dir: &Path) -> Result<Self, PromptError> {
        if !dir.is_dir() {
            return Err(PromptError::Invalid(format!(
                "template directory {} does not exist",
                dir.display()
            )));
        }
        let read = |path: PathBuf, fallback: &'static str| -> Result<String, PromptError> {
            if path.exists() {
                fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
            } else {
                Ok(fallback.to_string())
            }
        };
        let mut templates = BTreeMap::new();
        for s in Stage::ALL {
            let file = format!("{}.txt", s.key());
            let task_part = read(dir.join(task.key()).join(&file), builtin_task_part(task, s))?;
            let common = read(dir.join("common").join(&file), builtin_common_part(s))?;
            templates.insert(s, Template::new([task_part, common].join(PART_SEPARATOR)));
        }
        Ok(PromptBundle { task, templates })
    }

    pub fn template(&self, stage: Stage) -> &Template {
        &self.templates[&stage]
    }

    pub fn render(&self, stage: Stage, vars: &BTreeMap<String, String>) -> Result<Rendered, PromptError> {
        self.template(stage).render(vars)
    }
}

/// Template variables taken from an instance: its slots, and for free-text
/// options `option1`, `option2`, ...
pub fn instance_vars(instance: &Instance) -> BTreeMap<String, String> {
    let mut vars: BTreeMap<String, String> = instance.slots.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if instance.task.fixed_options().is_none() {
        for (i, (_, text)) in instance.options.iter().enumerate() {
            vars.insert(format!("option{}", i + 1), text.clone());
        }
    }
    vars
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub letter: Option<char>,
    pub raw: String,
    pub status: ParseStatus,
    /// Byte span of the chosen `(X)` in `raw`.
    pub span: Option<Range<usize>>,
}

impl ParsedAnswer {
    pub fn letter_str(&self) -> Option<String> {
        self.letter.map(String::from)
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Answer: (\(([A-Z])\))").expect("valid regex"))
}

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").expect("valid regex"))
}

/// Parse an answer letter out of `output`.
///
/// Clean when `Answer: (X)` with a valid `X` occurs exactly once; recovered
/// when `(X)` markers name exactly one distinct valid letter; failed otherwise.
pub fn parse_answer(output: &str, valid_letters: &[char]) -> ParsedAnswer {
    let valid = |s: &str| s.chars().next().filter(|c| valid_letters.contains(c));
    let labeled: Vec<(char, Range<usize>)> = answer_re()
        .captures_iter(output)
        .filter_map(|c| valid(&c[2]).map(|l| (l, c.get(1).expect("group").range())))
        .collect();
    if labeled.len() == 1 {
        let (letter, span) = labeled[0].clone();
        return ParsedAnswer {
            letter: Some(letter),
            raw: output.to_string(),
            status: ParseStatus::Clean,
            span: Some(span),
        };
    }
    let marks: Vec<(char, Range<usize>)> = letter_re()
        .captures_iter(output)
        .filter_map(|c| valid(&c[1]).map(|l| (l, c.get(0).expect("match").range())))
        .collect();
    let distinct: BTreeSet<char> = marks.iter().map(|(l, _)| *l).collect();
    if distinct.len() == 1 {
        let letter = *distinct.iter().next().expect("one letter");
        let span = labeled
            .first()
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| marks[0].1.clone());
        return ParsedAnswer {
            letter: Some(letter),
            raw: output.to_string(),
            status: ParseStatus::Recovered,
            span: Some(span),
        };
    }
    ParsedAnswer {
        letter: None,
        raw: output.to_string(),
        status: ParseStatus::Failed,
        span: None,
    }
}

/// Text extracted after a label, with a flag for the unlabeled fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedText {
    pub text: String,
    pub fallback: bool,
}

fn after_label(output: &str, labels: &[&str], what: &'static str) -> Result<ParsedText, ParseError> {
    let lower = output.to_ascii_lowercase();
    let found = labels
        .iter()
        .find_map(|l| lower.find(&l.to_ascii_lowercase()).map(|i| i + l.len()));
    let (body, fallback) = match found {
        Some(i) => (&output[i..], false),
        None => (output, true),
    };
    let mut text = body.trim();
    if text.starts_with('[') && text.ends_with(']') && text.len() >= 2 {
        text = text[1..text.len() - 1].trim();
    }
    if text.is_empty() {
        return Err(ParseError::Empty {
            what,
            raw: output.to_string(),
        });
    }
    Ok(ParsedText {
        text: text.to_string(),
        fallback,
    })
}

/// Text after `Explanation:` (or `Refined Explanation:` first, when refined).
pub fn parse_explanation(output: &str, refined: bool) -> Result<ParsedText, ParseError> {
    if refined {
        after_label(output, &["Refined Explanation:", "Explanation:"], "explanation")
    } else {
        after_label(output, &["Explanation:"], "explanation")
    }
}

pub fn parse_feedback(output: &str) -> Result<ParsedText, ParseError> {
    after_label(output, &["Feedback:"], "feedback")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedWord {
    pub word: String,
    pub normalized: String,
    pub score: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedWords {
    pub entries: Vec<RankedWord>,
    /// Scores pulled into 1..=100.
    pub clamped: usize,
    /// Non-empty lines that did not match the format.
    pub rejected_lines: usize,
    pub duplicates: usize,
}

fn ranked_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\.\s*(\S+?),\s*(-?\d+)\s*$").expect("valid regex"))
}

/// Parse `<rank>. <word>, <score>` lines in order.
pub fn parse_ranked_words(output: &str) -> Result<RankedWords, ParseError> {
    let mut out = RankedWords {
        entries: Vec::new(),
        clamped: 0,
        rejected_lines: 0,
        duplicates: 0,
    };
    for line in output.lines() {
        let line = line.replace('`', "");
        if line.trim().is_empty() {
            continue;
        }
        let Some(c) = ranked_re().captures(&line) else {
            out.rejected_lines += 1;
            continue;
        };
        let word = c[1].to_string();
        let raw_score: i64 = c[2].parse().unwrap_or(i64::MAX);
        let score = raw_score.clamp(1, 100) as u32;
        if score as i64 != raw_score {
            out.clamped += 1;
        }
        let normalized = normalize_word(&word);
        if out.entries.iter().any(|e| e.normalized == normalized) {
            out.duplicates += 1;
            continue;
        }
        out.entries.push(RankedWord {
            word,
            normalized,
            score,
        });
    }
    if out.entries.is_empty() {
        return Err(ParseError::NoRankedWords {
            raw: output.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn esnli_answer_prompt_lists_fixed_options() {
        let b = PromptBundle::builtin(Task::Esnli);
        let r = b
            .render(
                Stage::Ans,
                &vars(&[("premise", "A man rides."), ("hypothesis", "A guy sits.")]),
            )
            .unwrap();
        assert!(r.text.contains("(A) Contradiction\n(B) Neutral\n(C) Entailment"));
        assert!(r.text.ends_with("Answer: (X)"));
    }

    #[test]
    fn missing_variable_is_named() {
        let b = PromptBundle::builtin(Task::Esnli);
        match b.render(Stage::Ans, &vars(&[("premise", "p")])) {
            Err(PromptError::MissingVar(v)) => assert_eq!(v, "hypothesis"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn placeholder_sets_per_stage() {
        let b = PromptBundle::builtin(Task::Ecqa);
        assert_eq!(
            b.template(Stage::RefIw).placeholders(),
            [
                "question",
                "option1",
                "option2",
                "option3",
                "option4",
                "option5",
                "label",
                "explanation",
                "feedback"
            ]
        );
        assert!(!b.template(Stage::Ans).placeholders().contains(&"label".to_string()));
    }

    #[test]
    fn substituted_values_are_not_reexpanded() {
        let t = Template::new("a {x} b {y}");
        let r = t.render(&vars(&[("x", "{y}"), ("y", "z")])).unwrap();
        assert_eq!(r.text, "a {y} b z");
        assert_eq!(r.fields[0].1, 2..5);
    }

    #[test]
    fn overrides_replace_single_parts() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("comve")).unwrap();
        fs::write(dir.path().join("comve/ans.txt"), "S0={sentence0} S1={sentence1}").unwrap();
        let b = PromptBundle::with_overrides(Task::Comve, dir.path()).unwrap();
        let r = b
            .render(Stage::Ans, &vars(&[("sentence0", "x"), ("sentence1", "y")]))
            .unwrap();
        assert!(r.text.starts_with("S0=x S1=y\n\nPlease select"));
        assert_eq!(
            b.template(Stage::Exp),
            PromptBundle::builtin(Task::Comve).template(Stage::Exp)
        );
    }

    #[test]
    fn answer_parsing_tiers() {
        let abcde = ['A', 'B', 'C', 'D', 'E'];
        let p = parse_answer("Answer: (D)", &abcde);
        assert_eq!((p.letter, p.status), (Some('D'), ParseStatus::Clean));
        assert_eq!(p.span, Some(8..11));
        let p = parse_answer("I think (B) is right", &abcde);
        assert_eq!((p.letter, p.status), (Some('B'), ParseStatus::Recovered));
        let p = parse_answer("both seem fine", &abcde);
        assert_eq!((p.letter, p.status), (None, ParseStatus::Failed));
        let p = parse_answer("(A) or (B)", &abcde);
        assert_eq!(p.status, ParseStatus::Failed);
        // letter outside the option set
        let p = parse_answer("Answer: (F)", &abcde);
        assert_eq!(p.status, ParseStatus::Failed);
    }

    #[test]
    fn repeated_answer_picks_first_labeled_span() {
        let p = parse_answer("Answer: (B). Final Answer: (B)", &['A', 'B']);
        assert_eq!(p.status, ParseStatus::Recovered);
        assert_eq!(p.span, Some(8..11));
    }

    #[test]
    fn explanation_labels() {
        let p = parse_explanation("Explanation: Leaves do not fall.", false).unwrap();
        assert_eq!(p.text, "Leaves do not fall.");
        assert!(!p.fallback);
        let p = parse_explanation("Refined Explanation: Bill's cozy room.", true).unwrap();
        assert_eq!(p.text, "Bill's cozy room.");
        let p = parse_explanation("explanation: [Short one.]", false).unwrap();
        assert_eq!(p.text, "Short one.");
        let p = parse_explanation("  no label here ", false).unwrap();
        assert_eq!((p.text.as_str(), p.fallback), ("no label here", true));
        assert!(parse_explanation("Explanation:   ", false).is_err());
    }

    #[test]
    fn feedback_labels() {
        let p = parse_feedback("Feedback: The explanation accurately reflects it.").unwrap();
        assert_eq!(p.text, "The explanation accurately reflects it.");
        assert!(parse_feedback("It misses the point.").unwrap().fallback);
        assert!(parse_feedback("").is_err());
    }

    #[test]
    fn ranked_words() {
        let r = parse_ranked_words("1. cozy, 95\n2. room, 80").unwrap();
        let got: Vec<(&str, u32)> = r.entries.iter().map(|e| (e.word.as_str(), e.score)).collect();
        assert_eq!(got, [("cozy", 95), ("room", 80)]);

        let r = parse_ranked_words("1. leafs, 90\n2. useless, 50\n3. very cozy, 70\n4. Leafs, 20").unwrap();
        assert_eq!(r.entries.len(), 2);
        assert_eq!((r.rejected_lines, r.duplicates), (1, 1));

        let r = parse_ranked_words("`1. motel, 150`\n2. a, 0").unwrap();
        assert_eq!(r.entries[0].score, 100);
        assert_eq!(r.entries[1].score, 1);
        assert_eq!(r.clamped, 2);

        assert!(parse_ranked_words("nothing to see").is_err());
    }

    proptest! {
        #[test]
        fn echoed_answer_round_trips(i in 0usize..5) {
            let letters = ['A', 'B', 'C', 'D', 'E'];
            let out = format!("Answer: ({})", letters[i]);
            let p = parse_answer(&out, &letters);
            prop_assert_eq!(p.letter, Some(letters[i]));
            prop_assert_eq!(p.status, ParseStatus::Clean);
        }

        #[test]
        fn rendered_values_appear_in_output(a in "[a-z ]{1,20}", b in "[a-z ]{1,20}") {
            let bundle = PromptBundle::builtin(Task::Comve);
            let r = bundle.render(Stage::Ans, &vars(&[("sentence0", &a), ("sentence1", &b)])).unwrap();
            let s0 = format!("Sentence 0: {}\n", a);
            let s1 = format!("Sentence 1: {}\n", b);
            prop_assert!(r.text.contains(&s0));
            prop_assert!(r.text.contains(&s1));
        }

        #[test]
        fn ranked_words_are_unique(lines in proptest::collection::vec(("[a-c]{1,2}", 0i64..200), 1..12)) {
            let raw: String = lines
                .iter()
                .enumerate()
                .map(|(i, (w, s))| format!("{}. {w}, {s}\n", i + 1))
                .collect();
            let r = parse_ranked_words(&raw).unwrap();
            prop_assert!(r.entries.len() <= lines.len());
            let set: BTreeSet<_> = r.entries.iter().map(|e| e.normalized.clone()).collect();
            prop_assert_eq!(set.len(), r.entries.len());
            prop_assert!(r.entries.iter().all(|e| (1..=100).contains(&e.score)));
        }
    }
}
