//! Word-level text helpers shared by attribution, evaluation and dataset checks.
//!
//! A "word" is a maximal run of non-whitespace characters. Its normalized form
//! is lowercased with leading/trailing punctuation removed; the verbatim form is
//! what appears in the text.

use std::ops::Range;

/// A whitespace-delimited word and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan<'a> {
    pub text: &'a str,
    pub span: Range<usize>,
}

/// Split `text` on whitespace, returning byte spans relative to `text`.
pub fn words_with_spans(text: &str) -> Vec<WordSpan<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(WordSpan {
                    text: &text[s..i],
                    span: s..i,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(WordSpan {
            text: &text[s..],
            span: s..text.len(),
        });
    }
    out
}

/// Lowercase and strip leading/trailing non-alphanumeric characters.
///
/// A word made only of punctuation normalizes to its lowercased verbatim form
/// so that it never collapses to the empty string.
pub fn normalize_word(word: &str) -> String {
    let stripped = word.trim_matches(|c: char| !c.is_alphanumeric());
    if stripped.is_empty() {
        word.to_lowercase()
    } else {
        stripped.to_lowercase()
    }
}

/// Number of whitespace-delimited words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Number of distinct normalized words.
pub fn unique_word_count(text: &str) -> usize {
    let mut seen: Vec<String> = text.split_whitespace().map(normalize_word).collect();
    seen.sort();
    seen.dedup();
    seen.len()
}

/// Case-insensitive whole-word membership after punctuation stripping.
pub fn contains_word(text: &str, word: &str) -> bool {
    let needle = normalize_word(word);
    text.split_whitespace().any(|w| normalize_word(w) == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_words() {
        let text = "  The fallen\tleafs are useless. ";
        let words = words_with_spans(text);
        let got: Vec<&str> = words.iter().map(|w| w.text).collect();
        assert_eq!(got, ["The", "fallen", "leafs", "are", "useless."]);
        for w in &words {
            assert_eq!(&text[w.span.clone()], w.text);
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_word("be?"), "be");
        assert_eq!(normalize_word("There"), "there");
        assert_eq!(normalize_word("Bill's"), "bill's");
        assert_eq!(normalize_word("(cozy),"), "cozy");
        assert_eq!(normalize_word("--"), "--");
    }

    #[test]
    fn unique_counts() {
        assert_eq!(word_count("a bed, a fridge"), 4);
        assert_eq!(unique_word_count("a bed, a fridge"), 3);
    }

    #[test]
    fn whole_word_membership() {
        assert!(contains_word("Bill's cozy room, complete", "cozy"));
        assert!(contains_word("Fallen leaves", "fallen"));
        assert!(!contains_word("He actively helps", "act"));
    }
}
