//! The self-critique and refinement loop.
//!
//! The model answers, explains its answer, then for each of `K` rounds
//! receives feedback on its latest explanation and refines it. Natural
//! language feedback is generated afresh every round from the previous
//! explanation. Important-word feedback depends only on the input and the
//! answer, so it is computed once before the loop and reused.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    locate_answer_span, select_top_n, word_scores, AttributionError, ImportantWords, WordScoreList,
};
use crate::backend::{prompt_hash, BackendError, Capabilities, Capability, DecodingSpec, GenerationResult};
use crate::cache::Generator;
use crate::datasets::Instance;
use crate::prompts::{
    instance_vars, parse_answer, parse_explanation, parse_feedback, parse_ranked_words, ParseError, ParseStatus,
    ParsedAnswer, PromptBundle, PromptError, Rendered, Stage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackKind {
    Nlf,
    IwfPmt,
    IwfAttn,
    IwfIg,
}

impl FeedbackKind {
    pub const ALL: [FeedbackKind; 4] = [
        FeedbackKind::Nlf,
        FeedbackKind::IwfPmt,
        FeedbackKind::IwfAttn,
        FeedbackKind::IwfIg,
    ];

    pub fn is_iwf(self) -> bool {
        self != FeedbackKind::Nlf
    }

    /// Method name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            FeedbackKind::Nlf => "SR-NLE (NLF)",
            FeedbackKind::IwfPmt => "SR-NLE (IWF-Pmt)",
            FeedbackKind::IwfAttn => "SR-NLE (IWF-Attn)",
            FeedbackKind::IwfIg => "SR-NLE (IWF-IG)",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::Nlf => "NLF",
            FeedbackKind::IwfPmt => "IWF_PMT",
            FeedbackKind::IwfAttn => "IWF_ATTN",
            FeedbackKind::IwfIg => "IWF_IG",
        }
    }
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        FeedbackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| format!("unknown feedback strategy `{s}`"))
    }
}

fn default_n_words() -> usize {
    5
}

fn default_ig_steps() -> usize {
    500
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackStrategy {
    pub kind: FeedbackKind,
    #[serde(default = "default_n_words")]
    pub n_words: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Merge repeated words before ranking.
    #[serde(default = "default_true")]
    pub unique: bool,
}

impl FeedbackStrategy {
    pub fn new(kind: FeedbackKind) -> Self {
        FeedbackStrategy {
            kind,
            n_words: default_n_words(),
            ig_steps: default_ig_steps(),
            unique: true,
        }
    }

    pub fn required_capabilities(&self) -> Capabilities {
        let mut caps = Capabilities::from([Capability::Generate]);
        match self.kind {
            FeedbackKind::IwfAttn => {
                caps.insert(Capability::Attention);
            }
            FeedbackKind::IwfIg => {
                caps.insert(Capability::Gradients);
            }
            _ => {}
        }
        caps
    }

    pub fn validate(&self, offered: &Capabilities) -> Result<(), String> {
        if self.kind.is_iwf() && self.n_words == 0 {
            return Err("n_words must be positive".into());
        }
        if self.kind == FeedbackKind::IwfIg && self.ig_steps == 0 {
            return Err("ig_steps must be positive".into());
        }
        if let Some(missing) = self.required_capabilities().difference(offered).next() {
            return Err(format!("strategy {} needs the `{missing}` capability", self.kind));
        }
        Ok(())
    }
}

/// Token budgets per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationLimits {
    #[serde(default = "GenerationLimits::default_answer")]
    pub answer: usize,
    #[serde(default = "GenerationLimits::default_text")]
    pub explanation: usize,
    #[serde(default = "GenerationLimits::default_feedback")]
    pub feedback: usize,
}

impl GenerationLimits {
    fn default_answer() -> usize {
        32
    }
    fn default_text() -> usize {
        256
    }
    fn default_feedback() -> usize {
        512
    }
}

impl Default for GenerationLimits {
    fn default() -> Self {
        GenerationLimits {
            answer: Self::default_answer(),
            explanation: Self::default_text(),
            feedback: Self::default_feedback(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("instance has no parsable answer")]
    Unanswerable,
}

impl RefineError {
    /// Short machine-readable category for failure logs.
    pub fn kind(&self) -> &'static str {
        match self {
            RefineError::Backend(BackendError::Capability { .. }) => "capability",
            RefineError::Backend(BackendError::ContextOverflow { .. }) => "context_overflow",
            RefineError::Backend(BackendError::Transport(_)) => "transport",
            RefineError::Backend(_) => "backend",
            RefineError::Prompt(_) => "prompt",
            RefineError::Parse(ParseError::NoRankedWords { .. }) => "ranked_words_parse",
            RefineError::Parse(_) => "parse",
            RefineError::Attribution(_) => "attribution",
            RefineError::Unanswerable => "unanswerable",
        }
    }
}

/// A parsed answer with the prompt and generation it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub parsed: ParsedAnswer,
    pub generation: GenerationResult,
    pub prompt: Rendered,
}

impl AnswerOutcome {
    pub fn letter(&self) -> Result<char, RefineError> {
        match self.parsed.status {
            ParseStatus::Failed => Err(RefineError::Unanswerable),
            _ => self.parsed.letter.ok_or(RefineError::Unanswerable),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Feedback {
    Text { text: String, fallback: bool },
    Words(ImportantWords),
}

impl Feedback {
    /// Text substituted into the refinement prompt.
    pub fn prompt_text(&self) -> &str {
        match self {
            Feedback::Text { text, .. } => text,
            Feedback::Words(w) => &w.formatted,
        }
    }

    pub fn words(&self) -> Option<&ImportantWords> {
        match self {
            Feedback::Words(w) => Some(w),
            Feedback::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub round: usize,
    pub feedback_prompt_hash: Option<String>,
    pub refine_prompt_hash: String,
    /// Refinement label was missing and the whole output was used.
    pub refine_fallback: bool,
    /// Refinement could not be parsed; the previous explanation was kept.
    pub no_op: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub instance_id: String,
    pub strategy: FeedbackKind,
    pub prediction: ParsedAnswer,
    pub answer_prompt_hash: String,
    pub explanation_prompt_hash: String,
    pub initial_fallback: bool,
    /// `e^0 ..= e^K`.
    pub explanations: Vec<String>,
    /// One per round.
    pub feedbacks: Vec<Feedback>,
    pub rounds: Vec<RoundMeta>,
    /// Full ranking behind important-word feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_scores: Option<WordScoreList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_delta: Option<f64>,
    /// Set when parsing the ranked list clamped or dropped lines.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, usize>,
}

/// Word feedback and the full ranking it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct WordFeedback {
    pub words: ImportantWords,
    pub scores: WordScoreList,
    /// Hash of the feedback prompt, for prompt-based ranking.
    pub prompt_hash: Option<String>,
    /// Integrated-gradients completeness error.
    pub convergence_delta: Option<f64>,
}

/// Renders prompts for one instance and runs stages through a generator.
pub struct Pipeline<'g, 'b> {
    pub generator: &'g mut Generator<'b>,
    pub bundle: &'g PromptBundle,
    pub limits: &'g GenerationLimits,
}

impl<'g, 'b> Pipeline<'g, 'b> {
    fn vars(instance: &Instance, extra: &[(&str, &str)]) -> BTreeMap<String, String> {
        let mut vars = instance_vars(instance);
        for (k, v) in extra {
            vars.insert((*k).to_string(), (*v).to_string());
        }
        vars
    }

    fn run(&mut self, prompt: &str, max_new_tokens: usize) -> Result<String, RefineError> {
        Ok(self
            .generator
            .generate(prompt, &DecodingSpec::greedy(max_new_tokens))?
            .text)
    }

    pub fn answer(&mut self, instance: &Instance) -> Result<AnswerOutcome, RefineError> {
        let prompt = self.bundle.render(Stage::Ans, &Self::vars(instance, &[]))?;
        let generation = self
            .generator
            .generate(&prompt.text, &DecodingSpec::greedy(self.limits.answer))?;
        let parsed = parse_answer(&generation.text, &instance.option_letters());
        Ok(AnswerOutcome {
            parsed,
            generation,
            prompt,
        })
    }

    pub fn explanation_prompt(&self, instance: &Instance, letter: char) -> Result<String, RefineError> {
        let label = letter.to_string();
        Ok(self
            .bundle
            .render(Stage::Exp, &Self::vars(instance, &[("label", &label)]))?
            .text)
    }

    /// Returns the explanation, its fallback flag and the prompt hash.
    pub fn initial_explanation(
        &mut self,
        instance: &Instance,
        letter: char,
    ) -> Result<(String, bool, String), RefineError> {
        let prompt = self.explanation_prompt(instance, letter)?;
        let out = self.run(&prompt, self.limits.explanation)?;
        let parsed = parse_explanation(&out, false)?;
        if parsed.fallback {
            log::debug!("{}: explanation label missing, using whole output", instance.id);
        }
        Ok((parsed.text, parsed.fallback, prompt_hash(&prompt)))
    }

    pub fn nl_feedback(
        &mut self,
        instance: &Instance,
        letter: char,
        explanation: &str,
    ) -> Result<(Feedback, String), RefineError> {
        let label = letter.to_string();
        let prompt = self
            .bundle
            .render(
                Stage::FbNl,
                &Self::vars(instance, &[("label", &label), ("explanation", explanation)]),
            )?
            .text;
        let out = self.run(&prompt, self.limits.feedback)?;
        let parsed = parse_feedback(&out)?;
        Ok((
            Feedback::Text {
                text: parsed.text,
                fallback: parsed.fallback,
            },
            prompt_hash(&prompt),
        ))
    }

    pub fn important_words(
        &mut self,
        instance: &Instance,
        answer: &AnswerOutcome,
        strategy: &FeedbackStrategy,
        notes: &mut BTreeMap<String, usize>,
    ) -> Result<WordFeedback, RefineError> {
        let letter = answer.letter()?;
        let slot_names = instance.task.slot_names();
        let regions: Vec<_> = answer.prompt.spans_of(slot_names).collect();
        let (scores, prompt_hash, convergence_delta) = match strategy.kind {
            FeedbackKind::Nlf => unreachable!("natural language feedback has no word ranking"),
            FeedbackKind::IwfPmt => {
                let label = letter.to_string();
                let prompt = self
                    .bundle
                    .render(Stage::FbIw, &Self::vars(instance, &[("label", &label)]))?
                    .text;
                let out = self.run(&prompt, self.limits.feedback)?;
                let ranked = parse_ranked_words(&out)?;
                for (k, v) in [
                    ("clamped_scores", ranked.clamped),
                    ("rejected_lines", ranked.rejected_lines),
                    ("duplicate_words", ranked.duplicates),
                ] {
                    if v > 0 {
                        notes.insert(k.into(), v);
                    }
                }
                (WordScoreList::from_ranked(&ranked), Some(prompt_hash(&prompt)), None)
            }
            FeedbackKind::IwfAttn | FeedbackKind::IwfIg => {
                let span = locate_answer_span(&answer.generation, &answer.parsed)?;
                let prompt = &answer.prompt.text;
                let backend = self.generator.backend();
                let matrix = if strategy.kind == FeedbackKind::IwfAttn {
                    backend.attention_attribution(prompt, &answer.generation, span)?
                } else {
                    backend.gradient_attribution(prompt, &answer.generation, span, strategy.ig_steps)?
                };
                (
                    word_scores(&matrix, &answer.generation, &regions, strategy.unique)?,
                    None,
                    matrix.convergence_delta,
                )
            }
        };
        let words = select_top_n(&scores, strategy.n_words)?;
        Ok(WordFeedback {
            words,
            scores,
            prompt_hash,
            convergence_delta,
        })
    }

    /// Refined explanation, or the previous one when the output is unusable.
    pub fn refine(
        &mut self,
        instance: &Instance,
        letter: char,
        previous: &str,
        feedback: &Feedback,
    ) -> Result<(String, bool, bool, String), RefineError> {
        let stage = match feedback {
            Feedback::Text { .. } => Stage::RefNl,
            Feedback::Words(_) => Stage::RefIw,
        };
        let label = letter.to_string();
        let prompt = self
            .bundle
            .render(
                stage,
                &Self::vars(
                    instance,
                    &[
                        ("label", &label),
                        ("explanation", previous),
                        ("feedback", feedback.prompt_text()),
                    ],
                ),
            )?
            .text;
        let out = self.run(&prompt, self.limits.explanation)?;
        let hash = prompt_hash(&prompt);
        Ok(match parse_explanation(&out, true) {
            Ok(p) => (p.text, p.fallback, false, hash),
            Err(_) => (previous.to_string(), false, true, hash),
        })
    }

    /// Explanation, feedback and refinement for `rounds` rounds.
    pub fn run_trace(
        &mut self,
        instance: &Instance,
        answer: &AnswerOutcome,
        strategy: &FeedbackStrategy,
        rounds: usize,
    ) -> Result<RefinementTrace, RefineError> {
        let letter = answer.letter()?;
        let (e0, initial_fallback, exp_hash) = self.initial_explanation(instance, letter)?;
        let mut trace = RefinementTrace {
            instance_id: instance.id.clone(),
            strategy: strategy.kind,
            prediction: answer.parsed.clone(),
            answer_prompt_hash: prompt_hash(&answer.prompt.text),
            explanation_prompt_hash: exp_hash,
            initial_fallback,
            explanations: vec![e0],
            feedbacks: Vec::with_capacity(rounds),
            rounds: Vec::with_capacity(rounds),
            word_scores: None,
            convergence_delta: None,
            notes: BTreeMap::new(),
        };
        if rounds == 0 {
            return Ok(trace);
        }
        let fixed = if strategy.kind.is_iwf() {
            let wf = self.important_words(instance, answer, strategy, &mut trace.notes)?;
            trace.word_scores = Some(wf.scores);
            trace.convergence_delta = wf.convergence_delta;
            Some((Feedback::Words(wf.words), wf.prompt_hash))
        } else {
            None
        };
        for r in 1..=rounds {
            let previous = trace.explanations.last().expect("e0 present").clone();
            let (feedback, feedback_hash) = match &fixed {
                Some((f, h)) => (f.clone(), h.clone()),
                None => {
                    let (f, h) = self.nl_feedback(instance, letter, &previous)?;
                    (f, Some(h))
                }
            };
            let (refined, refine_fallback, no_op, refine_hash) = self.refine(instance, letter, &previous, &feedback)?;
            trace.explanations.push(refined);
            trace.feedbacks.push(feedback);
            trace.rounds.push(RoundMeta {
                round: r,
                feedback_prompt_hash: feedback_hash,
                refine_prompt_hash: refine_hash,
                refine_fallback,
                no_op,
            });
        }
        Ok(trace)
    }
}
