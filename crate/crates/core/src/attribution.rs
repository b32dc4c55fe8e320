//! Word importance from token attribution matrices.
//!
//! Scores flow token to word in three steps: sum each prompt token's scores
//! over the answer tokens, give each token to the input word it overlaps
//! most, then (by default) merge occurrences of the same normalized word.
//! Only words inside the task regions (the substituted slot texts) are scored.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backend::{AttributionMatrix, GenerationResult, Region};
use crate::prompts::{ParsedAnswer, RankedWords};
use crate::text::{normalize_word, words_with_spans};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttributionError {
    #[error("answer span not found in output tokens")]
    AnswerNotFound,
    #[error("task region is empty")]
    EmptyRegion,
    #[error("task region {start}..{end} lies outside the prompt")]
    RegionOutsidePrompt { start: usize, end: usize },
    #[error("score vector has {got} entries for {expected} prompt tokens")]
    Shape { got: usize, expected: usize },
    #[error("no word scores to select from")]
    NoScores,
    #[error("total attribution is zero")]
    ZeroTotal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreSource {
    PromptBased,
    Attention,
    Ig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    /// Verbatim text of the first occurrence.
    pub word: String,
    pub normalized: String,
    pub score: f64,
    /// Byte spans of the occurrences in the prompt.
    pub occurrence_spans: Vec<Range<usize>>,
}

/// Words sorted by descending score, ties by first occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScoreList {
    pub entries: Vec<WordScore>,
    pub source: ScoreSource,
}

impl WordScoreList {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.score).sum()
    }

    /// Prompt-based ranking parsed from model output, in its stated order.
    pub fn from_ranked(ranked: &RankedWords) -> Self {
        let mut entries: Vec<WordScore> = ranked
            .entries
            .iter()
            .map(|e| WordScore {
                word: e.word.clone(),
                normalized: e.normalized.clone(),
                score: e.score as f64,
                occurrence_spans: Vec::new(),
            })
            .collect();
        // the model's own order breaks ties
        entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        WordScoreList {
            entries,
            source: ScoreSource::PromptBased,
        }
    }
}

/// The top-N words and the feedback sentence built from them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportantWords {
    pub words: Vec<String>,
    pub formatted: String,
}

pub fn format_important_words(words: &[String]) -> String {
    format!(
        "The {} most important words that contributed to your prediction are: {}.",
        words.len(),
        words.join(", ")
    )
}

/// Smallest output-token range covering the parsed `(X)`.
pub fn locate_answer_span(
    generation: &GenerationResult,
    parsed: &ParsedAnswer,
) -> Result<Range<usize>, AttributionError> {
    let span = parsed.span.clone().ok_or(AttributionError::AnswerNotFound)?;
    if parsed.raw != generation.text || span.end > generation.text.len() {
        return Err(AttributionError::AnswerNotFound);
    }
    let tokens = &generation.output_tokens;
    let first = tokens.iter().position(|t| t.end > span.start);
    let last = tokens.iter().rposition(|t| t.start < span.end);
    match (first, last) {
        (Some(f), Some(l)) if f <= l => Ok(f..l + 1),
        _ => Err(AttributionError::AnswerNotFound),
    }
}

/// Per-row scores summed over the answer tokens.
pub fn aggregate_target(matrix: &AttributionMatrix) -> Vec<f64> {
    matrix.values.iter().map(|row| row.iter().sum()).collect()
}

/// Row scores restricted to prompt tokens.
pub fn prompt_scores(matrix: &AttributionMatrix) -> Vec<f64> {
    aggregate_target(matrix)
        .into_iter()
        .zip(&matrix.rows)
        .filter(|(_, r)| r.region == Region::Prompt)
        .map(|(a, _)| a)
        .collect()
}

fn overlap(a: &Range<usize>, b: &Range<usize>) -> usize {
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

/// Word scores over the task regions of the prompt.
///
/// `token_scores[i]` belongs to `generation.prompt_tokens[i]`. A token goes
/// to the region word it overlaps by the most bytes (the earlier word on a
/// tie); tokens overlapping no word are dropped. With `unique`, occurrences
/// sharing a normalized form are merged.
pub fn aggregate_words(
    token_scores: &[f64],
    generation: &GenerationResult,
    regions: &[Range<usize>],
    unique: bool,
    source: ScoreSource,
) -> Result<WordScoreList, AttributionError> {
    let prompt_len = generation.prompt_tokens.last().map_or(0, |t| t.end);
    if token_scores.len() != generation.prompt_tokens.len() {
        return Err(AttributionError::Shape {
            got: token_scores.len(),
            expected: generation.prompt_tokens.len(),
        });
    }
    let prompt = reconstruct_prompt(generation);
    let mut words: Vec<(String, Range<usize>)> = Vec::new();
    for r in regions {
        if r.end > prompt_len || r.start > r.end {
            return Err(AttributionError::RegionOutsidePrompt {
                start: r.start,
                end: r.end,
            });
        }
        for w in words_with_spans(&prompt[r.clone()]) {
            words.push((w.text.to_string(), r.start + w.span.start..r.start + w.span.end));
        }
    }
    if words.is_empty() {
        return Err(AttributionError::EmptyRegion);
    }
    words.sort_by_key(|(_, s)| s.start);

    let mut word_scores = vec![0.0; words.len()];
    for (tok, score) in generation.prompt_tokens.iter().zip(token_scores) {
        let span = tok.span();
        let mut best: Option<(usize, usize)> = None;
        // words are sorted, so only a window can overlap
        let from = words.partition_point(|(_, s)| s.end <= span.start);
        for (k, (_, ws)) in words.iter().enumerate().skip(from) {
            if ws.start >= span.end {
                break;
            }
            let o = overlap(&span, ws);
            if o > 0 && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        if let Some((k, _)) = best {
            word_scores[k] += score;
        }
    }

    let mut entries: Vec<WordScore> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for ((text, span), score) in words.into_iter().zip(word_scores) {
        let normalized = normalize_word(&text);
        match index.get(&normalized).filter(|_| unique) {
            Some(&i) => {
                entries[i].score += score;
                entries[i].occurrence_spans.push(span);
            }
            None => {
                index.insert(normalized.clone(), entries.len());
                entries.push(WordScore {
                    word: text,
                    normalized,
                    score,
                    occurrence_spans: vec![span],
                });
            }
        }
    }
    // stable sort keeps first-occurrence order among ties
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(WordScoreList { entries, source })
}

fn reconstruct_prompt(generation: &GenerationResult) -> String {
    generation.prompt_tokens.iter().map(|t| t.text.as_str()).collect()
}

/// Full word-scoring pipeline for one attribution matrix.
pub fn word_scores(
    matrix: &AttributionMatrix,
    generation: &GenerationResult,
    regions: &[Range<usize>],
    unique: bool,
) -> Result<WordScoreList, AttributionError> {
    let source = match matrix.method {
        crate::backend::AttributionMethod::Attention => ScoreSource::Attention,
        crate::backend::AttributionMethod::IntegratedGradients => ScoreSource::Ig,
    };
    aggregate_words(&prompt_scores(matrix), generation, regions, unique, source)
}

/// First `min(n, len)` words by normalized form, and the feedback sentence.
pub fn select_top_n(scores: &WordScoreList, n: usize) -> Result<ImportantWords, AttributionError> {
    if scores.entries.is_empty() || n == 0 {
        return Err(AttributionError::NoScores);
    }
    let words: Vec<String> = scores.entries.iter().take(n).map(|e| e.normalized.clone()).collect();
    let formatted = format_important_words(&words);
    Ok(ImportantWords { words, formatted })
}

/// Share of the total score held by the top `n` words.
pub fn cumulative_attribution_ratio(scores: &WordScoreList, n: usize) -> Result<f64, AttributionError> {
    let total = scores.total();
    if total <= 0.0 {
        return Err(AttributionError::ZeroTotal);
    }
    if n >= scores.entries.len() {
        return Ok(1.0);
    }
    let top: f64 = scores.entries.iter().take(n).map(|e| e.score).sum();
    Ok((top / total).clamp(0.0, 1.0))
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use crate::backend::tokenize::{from_pieces, tokenize};
    use crate::backend::{context_rows, AttributionMethod, TokenSpan};
    use crate::prompts::{parse_answer, ParseStatus};

    fn gen_from(prompt_pieces: &[&str], output: &str) -> GenerationResult {
        let prompt: String = prompt_pieces.concat();
        let pieces: Vec<String> = prompt_pieces.iter().map(|s| s.to_string()).collect();
        GenerationResult {
            text: output.into(),
            prompt_tokens: from_pieces(&prompt, &pieces).unwrap(),
            output_tokens: tokenize(output),
        }
    }

    fn list(scores: &[f64]) -> WordScoreList {
        WordScoreList {
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, s)| WordScore {
                    word: format!("w{i}"),
                    normalized: format!("w{i}"),
                    score: *s,
                    occurrence_spans: vec![],
                })
                .collect(),
            source: ScoreSource::Ig,
        }
    }

    #[test]
    fn span_covers_parenthesized_letter() {
        let g = gen_from(&["x"], "Answer: (B)");
        let p = parse_answer(&g.text, &['A', 'B']);
        assert_eq!(p.status, ParseStatus::Clean);
        assert_eq!(locate_answer_span(&g, &p).unwrap(), 2..5);
    }

    #[test]
    fn single_token_answer() {
        let text = "Answer: (B)";
        let pieces: Vec<String> = ["Answer", ":", " ", "(B)"].iter().map(|s| s.to_string()).collect();
        let g = GenerationResult {
            text: text.into(),
            prompt_tokens: tokenize("x"),
            output_tokens: from_pieces(text, &pieces).unwrap(),
        };
        let p = parse_answer(text, &['A', 'B']);
        assert_eq!(locate_answer_span(&g, &p).unwrap(), 3..4);
    }

    #[test]
    fn target_sums() {
        let g = gen_from(&["a", " b"], "Answer: (B)");
        let m = AttributionMatrix {
            values: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            rows: context_rows(&g, &(0..0)),
            target_span: 0..2,
            method: AttributionMethod::Attention,
            convergence_delta: None,
        };
        let a = aggregate_target(&m);
        assert!((a[0] - 0.3).abs() < 1e-15 && (a[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn split_word_scores_add() {
        // "co" + "zy" form one word
        let g = gen_from(&["Is ", "it", " co", "zy", "?"], "Answer: (A)");
        let region = vec![3..11];
        let s = aggregate_words(&[9.0, 0.1, 0.2, 0.3, 0.05], &g, &region, true, ScoreSource::Ig).unwrap();
        assert_eq!(s.entries[0].normalized, "cozy");
        assert!((s.entries[0].score - 0.55).abs() < 1e-12);
        assert_eq!(s.entries[1].normalized, "it");
    }

    #[test]
    fn repeated_words_merge_when_unique() {
        let prompt = "the cat saw the dog by the door";
        let g = GenerationResult {
            text: "Answer: (A)".into(),
            prompt_tokens: tokenize(prompt),
            output_tokens: tokenize("Answer: (A)"),
        };
        let scores = vec![1.0; g.prompt_tokens.len()];
        let region = vec![0..prompt.len()];
        let u = aggregate_words(&scores, &g, &region, true, ScoreSource::Attention).unwrap();
        assert_eq!(u.entries[0].normalized, "the");
        assert_eq!(u.entries[0].score, 3.0);
        assert_eq!(u.entries[0].occurrence_spans.len(), 3);
        let per = aggregate_words(&scores, &g, &region, false, ScoreSource::Attention).unwrap();
        assert_eq!(per.entries.len(), 8);
        assert_eq!(per.total(), u.total());
    }

    #[test]
    fn tokens_outside_region_are_ignored() {
        let prompt = "Question: where?\nOptions";
        let g = GenerationResult {
            text: "Answer: (A)".into(),
            prompt_tokens: tokenize(prompt),
            output_tokens: tokenize("Answer: (A)"),
        };
        let scores: Vec<f64> = (0..g.prompt_tokens.len()).map(|i| i as f64 + 1.0).collect();
        let s = aggregate_words(&scores, &g, &[10..16], true, ScoreSource::Ig).unwrap();
        // " where" and "?" fall inside the region
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries[0].word, "where?");
        assert_eq!(s.entries[0].score, 3.0 + 4.0);
        assert!(aggregate_words(&scores, &g, &[0..0], true, ScoreSource::Ig).is_err());
    }

    #[test]
    fn top_n_formatting() {
        let mut l = list(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5]);
        for (e, w) in l.entries.iter_mut().zip(["one", "a", "cozy", "be", "there", "x"]) {
            e.normalized = w.into();
        }
        let iw = select_top_n(&l, 5).unwrap();
        assert_eq!(
            iw.formatted,
            "The 5 most important words that contributed to your prediction are: one, a, cozy, be, there."
        );
        let all = select_top_n(&l, 50).unwrap();
        assert!(all.formatted.starts_with("The 6 most important"));
        assert!(select_top_n(&list(&[]), 5).is_err());
    }

    #[test]
    fn ratio_hand_value() {
        let l = list(&[4.0, 3.0, 2.0, 1.0]);
        assert!((cumulative_attribution_ratio(&l, 2).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(cumulative_attribution_ratio(&l, 4).unwrap(), 1.0);
        assert!(cumulative_attribution_ratio(&list(&[0.0]), 1).is_err());
    }

    #[test]
    fn ranked_words_keep_model_order_on_ties() {
        let r = crate::prompts::parse_ranked_words("1. b, 50\n2. a, 50\n3. c, 90").unwrap();
        let l = WordScoreList::from_ranked(&r);
        let w: Vec<&str> = l.entries.iter().map(|e| e.normalized.as_str()).collect();
        assert_eq!(w, ["c", "b", "a"]);
    }

    #[test]
    fn shape_mismatch() {
        let g = GenerationResult {
            text: "x".into(),
            prompt_tokens: vec![TokenSpan {
                text: "a".into(),
                start: 0,
                end: 1,
            }],
            output_tokens: vec![],
        };
        assert!(matches!(
            aggregate_words(&[], &g, &[0..1], true, ScoreSource::Ig),
            Err(AttributionError::Shape { .. })
        ));
    }
}
