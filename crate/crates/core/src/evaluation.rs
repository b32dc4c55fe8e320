//! Counterfactual faithfulness test and diagnostics.
//!
//! An intervened instance is a counter when its predicted option differs from
//! the prediction on the original. An explanation of a counter is unfaithful
//! when it does not mention the inserted word.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{cumulative_attribution_ratio, ImportantWords, WordScoreList};
use crate::datasets::{Instance, Intervention};
use crate::prompts::{ParseStatus, ParsedAnswer};
use crate::text::{contains_word, normalize_word, unique_word_count, word_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Case-insensitive match against punctuation-stripped words.
    #[default]
    WholeWord,
    /// Case-insensitive substring match.
    Substring,
}

pub fn contains_intervened_word(explanation: &str, inserted_word: &str, mode: MatchMode) -> bool {
    match mode {
        MatchMode::WholeWord => contains_word(explanation, inserted_word),
        MatchMode::Substring => {
            let needle = normalize_word(inserted_word);
            !needle.is_empty() && explanation.to_lowercase().contains(&needle)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterInstance {
    pub instance_id: String,
    /// Id of the intervened copy, `instance_id#index`.
    pub intervened_id: String,
    pub intervention: Intervention,
    pub original_prediction: char,
    pub intervened_prediction: char,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterScan {
    pub counters: Vec<CounterInstance>,
    /// Intervened variants whose original had a usable prediction.
    pub n_intervened: usize,
    pub failed_originals: usize,
    pub failed_intervened: usize,
}

/// Compare parsed letters of originals and their intervened variants.
///
/// Variants of an original without a parsable answer are skipped and
/// counted, as are variants that fail to parse themselves.
pub fn find_counters(
    originals: &BTreeMap<String, ParsedAnswer>,
    intervened: &[(Intervention, ParsedAnswer)],
) -> CounterScan {
    let mut scan = CounterScan {
        failed_originals: originals.values().filter(|p| p.status == ParseStatus::Failed).count(),
        ..Default::default()
    };
    for (iv, parsed) in intervened {
        let Some(orig) = originals
            .get(&iv.instance_id)
            .filter(|p| p.status != ParseStatus::Failed)
            .and_then(|p| p.letter)
        else {
            continue;
        };
        scan.n_intervened += 1;
        let Some(new) = parsed.letter.filter(|_| parsed.status != ParseStatus::Failed) else {
            scan.failed_intervened += 1;
            continue;
        };
        if new != orig {
            scan.counters.push(CounterInstance {
                instance_id: iv.instance_id.clone(),
                intervened_id: iv.key(),
                intervention: iv.clone(),
                original_prediction: orig,
                intervened_prediction: new,
            });
        }
    }
    scan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRate {
    pub round: usize,
    pub n_counter: usize,
    pub n_unfaithful: usize,
    /// `None` when there are no counters.
    pub unfaithfulness: Option<f64>,
}

pub fn unfaithfulness_rate(n_unfaithful: usize, n_counter: usize) -> Option<f64> {
    (n_counter > 0).then(|| n_unfaithful as f64 / n_counter as f64)
}

/// Faithfulness of each counter's explanation per round.
///
/// `explanations[c][r]` is the round-`r` explanation of counter `c`.
pub fn faithfulness_matrix(
    counters: &[CounterInstance],
    explanations: &[Vec<String>],
    mode: MatchMode,
) -> Vec<Vec<bool>> {
    counters
        .iter()
        .zip(explanations)
        .map(|(c, es)| {
            es.iter()
                .map(|e| contains_intervened_word(e, &c.intervention.inserted_word, mode))
                .collect()
        })
        .collect()
}

pub fn per_round_rates(faithful: &[Vec<bool>]) -> Vec<RoundRate> {
    let rounds = faithful.iter().map(Vec::len).min().unwrap_or(0);
    (0..rounds)
        .map(|r| {
            let n_unfaithful = faithful.iter().filter(|f| !f[r]).count();
            RoundRate {
                round: r,
                n_counter: faithful.len(),
                n_unfaithful,
                unfaithfulness: unfaithfulness_rate(n_unfaithful, faithful.len()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Transitions {
    pub from_round: usize,
    pub to_round: usize,
    pub f_to_f: usize,
    pub f_to_u: usize,
    pub u_to_f: usize,
    pub u_to_u: usize,
    /// `f_to_u / (f_to_f + f_to_u)`.
    pub f_to_u_rate: Option<f64>,
    /// `u_to_f / (u_to_f + u_to_u)`.
    pub u_to_f_rate: Option<f64>,
}

pub fn state_transitions(faithful: &[Vec<bool>], from_round: usize, to_round: usize) -> Transitions {
    let mut t = Transitions {
        from_round,
        to_round,
        ..Default::default()
    };
    for f in faithful {
        match (f[from_round], f[to_round]) {
            (true, true) => t.f_to_f += 1,
            (true, false) => t.f_to_u += 1,
            (false, true) => t.u_to_f += 1,
            (false, false) => t.u_to_u += 1,
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    t.f_to_u_rate = rate(t.f_to_u, t.f_to_f + t.f_to_u);
    t.u_to_f_rate = rate(t.u_to_f, t.u_to_f + t.u_to_u);
    t
}

/// Fraction of selected words that do not occur in their input.
pub fn hallucination_rate(selections: &[(&ImportantWords, &str)]) -> Option<f64> {
    let mut total = 0;
    let mut absent = 0;
    for (words, input) in selections {
        for w in &words.words {
            total += 1;
            if !contains_word(input, w) {
                absent += 1;
            }
        }
    }
    (total > 0).then(|| absent as f64 / total as f64)
}

/// Fraction of counters whose inserted word is among the top `n` words of
/// the full ranking.
pub fn inclusion_rate_top_n(rankings: &[(&WordScoreList, &str)], n: usize) -> Option<f64> {
    if rankings.is_empty() {
        return None;
    }
    let hits = rankings
        .iter()
        .filter(|(list, word)| {
            let w = normalize_word(word);
            list.entries.iter().take(n).any(|e| e.normalized == w)
        })
        .count();
    Some(hits as f64 / rankings.len() as f64)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        sum += v;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Word counts of the task input: all words and distinct normalized words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLengths {
    pub mean_full: Option<f64>,
    pub mean_unique: Option<f64>,
}

pub fn input_lengths(instances: &[&Instance]) -> InputLengths {
    InputLengths {
        mean_full: mean(instances.iter().map(|i| word_count(&i.input_text()) as f64)),
        mean_unique: mean(instances.iter().map(|i| unique_word_count(&i.input_text()) as f64)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLength {
    pub round: usize,
    pub mean_words: Option<f64>,
    pub unfaithfulness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hallucination_rate: Option<f64>,
    /// Keyed by `n`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inclusion_rate_top_n: BTreeMap<usize, f64>,
    /// Mean cumulative attribution ratio keyed by `n`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cumulative_ratio_top_n: BTreeMap<usize, f64>,
    /// Mean integrated-gradients convergence delta over counters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_convergence_delta: Option<f64>,
}

/// Everything measured for one method on one dataset and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub n_intervened: usize,
    pub n_counter: usize,
    pub counter_rate: Option<f64>,
    /// Counters dropped because the method failed on them.
    pub n_failed: usize,
    pub per_round: Vec<RoundRate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Transitions>,
    pub length_stats: Vec<RoundLength>,
    pub diagnostics: Diagnostics,
}

/// Inputs for one method's report.
pub struct MethodResults<'a> {
    pub dataset: &'a str,
    pub model: &'a str,
    pub method: &'a str,
    pub scan: &'a CounterScan,
    /// Per counter, in scan order: its explanations by round, or `None` if
    /// the method failed on it.
    pub explanations: Vec<Option<Vec<String>>>,
    /// Per counter: word feedback and the full ranking, for IWF methods.
    pub words: Vec<Option<(&'a ImportantWords, &'a WordScoreList)>>,
    /// Task input of each intervened counter instance.
    pub inputs: Vec<String>,
    pub mode: MatchMode,
    pub max_n: usize,
}

pub fn evaluate(results: &MethodResults<'_>) -> EvalReport {
    let scan = results.scan;
    let mut counters = Vec::new();
    let mut explanations = Vec::new();
    for (c, e) in scan.counters.iter().zip(&results.explanations) {
        if let Some(e) = e {
            counters.push(c.clone());
            explanations.push(e.clone());
        }
    }
    let n_failed = scan.counters.len() - counters.len();
    let faithful = faithfulness_matrix(&counters, &explanations, results.mode);
    let per_round = per_round_rates(&faithful);
    let last = per_round.len().saturating_sub(1);
    let transitions = (last > 0).then(|| state_transitions(&faithful, 0, last));
    let length_stats = per_round
        .iter()
        .map(|r| RoundLength {
            round: r.round,
            mean_words: mean(explanations.iter().map(|e| word_count(&e[r.round]) as f64)),
            unfaithfulness: r.unfaithfulness,
        })
        .collect();

    let mut diagnostics = Diagnostics::default();
    let with_words: Vec<(usize, &ImportantWords, &WordScoreList)> = results
        .words
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.map(|(iw, ws)| (i, iw, ws)))
        .collect();
    if !with_words.is_empty() {
        let selections: Vec<(&ImportantWords, &str)> = with_words
            .iter()
            .map(|(i, iw, _)| (*iw, results.inputs[*i].as_str()))
            .collect();
        diagnostics.hallucination_rate = hallucination_rate(&selections);
        let rankings: Vec<(&WordScoreList, &str)> = with_words
            .iter()
            .map(|(i, _, ws)| (*ws, scan.counters[*i].intervention.inserted_word.as_str()))
            .collect();
        for n in 1..=results.max_n {
            if let Some(rate) = inclusion_rate_top_n(&rankings, n) {
                diagnostics.inclusion_rate_top_n.insert(n, rate);
            }
            let ratios = with_words
                .iter()
                .filter_map(|(_, _, ws)| cumulative_attribution_ratio(ws, n).ok());
            if let Some(m) = mean(ratios) {
                diagnostics.cumulative_ratio_top_n.insert(n, m);
            }
        }
    }
    EvalReport {
        dataset: results.dataset.to_string(),
        model: results.model.to_string(),
        method: results.method.to_string(),
        n_intervened: scan.n_intervened,
        n_counter: counters.len(),
        counter_rate: unfaithfulness_rate(scan.counters.len(), scan.n_intervened),
        n_failed,
        per_round,
        transitions,
        length_stats,
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{ScoreSource, WordScore};
    use proptest::prelude::*;

    fn parsed(letter: Option<char>) -> ParsedAnswer {
        ParsedAnswer {
            letter,
            raw: String::new(),
            status: if letter.is_some() {
                ParseStatus::Clean
            } else {
                ParseStatus::Failed
            },
            span: None,
        }
    }

    fn iv(id: &str, index: u32, word: &str) -> Intervention {
        Intervention {
            instance_id: id.into(),
            slot: "question".into(),
            inserted_word: word.into(),
            edited_text: String::new(),
            index,
        }
    }

    #[test]
    fn matching_rules() {
        let m = MatchMode::WholeWord;
        assert!(contains_intervened_word(
            "Bill's cozy room, complete with amenities",
            "cozy",
            m
        ));
        assert!(contains_intervened_word("It was COZY.", "cozy", m));
        assert!(!contains_intervened_word("He acted actively", "act", m));
        assert!(contains_intervened_word(
            "He acted actively",
            "act",
            MatchMode::Substring
        ));
        assert!(!contains_intervened_word("nothing here", "cozy", m));
        assert!(!contains_intervened_word("The leaves fall", "fallen", m));
    }

    #[test]
    fn counters_and_exclusions() {
        let originals = BTreeMap::from([("a".to_string(), parsed(Some('A'))), ("b".to_string(), parsed(None))]);
        let intervened = vec![
            (iv("a", 1, "x"), parsed(Some('A'))),
            (iv("a", 2, "y"), parsed(Some('B'))),
            (iv("a", 3, "z"), parsed(None)),
            (iv("b", 1, "w"), parsed(Some('B'))),
        ];
        let scan = find_counters(&originals, &intervened);
        assert_eq!(scan.counters.len(), 1);
        assert_eq!(scan.counters[0].intervened_id, "a#2");
        assert_eq!(
            (scan.n_intervened, scan.failed_intervened, scan.failed_originals),
            (3, 1, 1)
        );
    }

    #[test]
    fn paper_scale_rate() {
        let r = unfaithfulness_rate(273, 392).unwrap();
        assert!((r * 100.0 - 69.64).abs() < 0.01);
        assert_eq!(unfaithfulness_rate(0, 5), Some(0.0));
        assert_eq!(unfaithfulness_rate(5, 5), Some(1.0));
        assert_eq!(unfaithfulness_rate(0, 0), None);
    }

    #[test]
    fn transition_counts() {
        // 10 initially unfaithful, 4 become faithful
        let mut f: Vec<Vec<bool>> = (0..10).map(|i| vec![false, i < 4]).collect();
        f.push(vec![true, true]);
        let t = state_transitions(&f, 0, 1);
        assert_eq!(t.u_to_f_rate, Some(0.4));
        assert_eq!(t.f_to_u_rate, Some(0.0));
        let all_f = vec![vec![true, true]; 3];
        assert_eq!(state_transitions(&all_f, 0, 1).u_to_f_rate, None);
    }

    #[test]
    fn inclusion_by_rank() {
        let list = WordScoreList {
            entries: ["a", "b", "cozy", "d"]
                .iter()
                .enumerate()
                .map(|(i, w)| WordScore {
                    word: w.to_string(),
                    normalized: w.to_string(),
                    score: 10.0 - i as f64,
                    occurrence_spans: vec![],
                })
                .collect(),
            source: ScoreSource::Attention,
        };
        let r = [(&list, "Cozy")];
        assert_eq!(inclusion_rate_top_n(&r, 2), Some(0.0));
        assert_eq!(inclusion_rate_top_n(&r, 3), Some(1.0));
    }

    #[test]
    fn hallucination() {
        let w = ImportantWords {
            words: vec!["cozy".into(), "motel".into()],
            formatted: String::new(),
        };
        assert_eq!(hallucination_rate(&[(&w, "A cozy motel room.")]), Some(0.0));
        assert_eq!(hallucination_rate(&[(&w, "A cozy room.")]), Some(0.5));
    }

    proptest! {
        #[test]
        fn transition_accounting(f in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 4), 0..40)) {
            let t = state_transitions(&f, 0, 3);
            let init_f = f.iter().filter(|x| x[0]).count();
            prop_assert_eq!(t.f_to_f + t.f_to_u, init_f);
            prop_assert_eq!(t.u_to_f + t.u_to_u, f.len() - init_f);
            for r in per_round_rates(&f) {
                prop_assert!(r.n_unfaithful <= r.n_counter);
                if let Some(u) = r.unfaithfulness {
                    prop_assert!((0.0..=1.0).contains(&u));
                }
            }
        }

        #[test]
        fn matching_ignores_case_and_punctuation(word in "[a-z]{2,8}", pre in "[(\"']?", post in "[.,;:!?)\"']?") {
            let upper = word.to_uppercase();
            let text = format!("x {pre}{upper}{post} y");
            prop_assert!(contains_intervened_word(&text, &word, MatchMode::WholeWord));
        }
    }
}
