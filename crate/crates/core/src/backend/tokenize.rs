//! Deterministic tokenizer used by the mock and toy backends.
//!
//! A token is an optional run of leading whitespace followed by either a run
//! of alphanumeric characters or a single other character, so
//! `"Answer: (B)"` becomes `Answer`, `:`, ` (`, `B`, `)`. Trailing whitespace
//! becomes its own token. Spans always tile the input exactly.

use super::TokenSpan;

pub fn tokenize(text: &str) -> Vec<TokenSpan> {
    let mut tokens = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        while i < chars.len() && chars[i].1.is_whitespace() {
            i += 1;
        }
        if i < chars.len() {
            if chars[i].1.is_alphanumeric() {
                while i < chars.len() && chars[i].1.is_alphanumeric() {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let end = chars.get(i).map_or(text.len(), |c| c.0);
        tokens.push(TokenSpan {
            text: text[start..end].to_string(),
            start,
            end,
        });
    }
    tokens
}

/// Tokens from explicit pieces that must concatenate to `text`.
pub fn from_pieces(text: &str, pieces: &[String]) -> Result<Vec<TokenSpan>, String> {
    let mut out = Vec::with_capacity(pieces.len());
    let mut cursor = 0;
    for p in pieces {
        let end = cursor + p.len();
        if text.get(cursor..end) != Some(p.as_str()) {
            return Err(format!("piece {p:?} does not match text at byte {cursor}"));
        }
        out.push(TokenSpan {
            text: p.clone(),
            start: cursor,
            end,
        });
        cursor = end;
    }
    if cursor != text.len() {
        return Err("pieces do not cover the text".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::check_token_spans;
    use proptest::prelude::*;

    #[test]
    fn answer_line() {
        let got: Vec<String> = tokenize("Answer: (B)").into_iter().map(|t| t.text).collect();
        assert_eq!(got, ["Answer", ":", " (", "B", ")"]);
    }

    #[test]
    fn trailing_whitespace_and_unicode() {
        let text = "naïve café — ok \n";
        let toks = tokenize(text);
        check_token_spans(text, &toks).unwrap();
        assert_eq!(toks.last().unwrap().text, " \n");
    }

    #[test]
    fn pieces_must_tile() {
        let text = "Answer: (B)";
        let pieces: Vec<String> = ["Answer", ":", " ", "(B)"].iter().map(|s| s.to_string()).collect();
        let toks = from_pieces(text, &pieces).unwrap();
        assert_eq!(toks[3].text, "(B)");
        assert!(from_pieces(text, &pieces[..2]).is_err());
    }

    proptest! {
        #[test]
        fn spans_reconstruct_text(text in "\\PC{0,80}") {
            let toks = tokenize(&text);
            prop_assert!(check_token_spans(&text, &toks).is_ok());
            let joined: String = toks.iter().map(|t| t.text.as_str()).collect();
            prop_assert_eq!(joined, text);
        }
    }
}
