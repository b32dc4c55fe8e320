//! Hashed bag-of-words sentence encoder for offline runs.
//!
//! Each normalized word is hashed to a bucket and a sign; the vector is the
//! signed bucket count, L2-normalized. Texts sharing more words end up closer
//! in cosine terms, which is all the centroid vote needs to be exercised.

use sha2::{Digest, Sha256};

use crate::text::{normalize_word, words_with_spans};

pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f64> {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    for w in words_with_spans(text) {
        let word = normalize_word(w.text);
        if word.is_empty() {
            continue;
        }
        let digest = Sha256::digest(word.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(bytes);
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identical_text_has_unit_similarity() {
        let a = hashed_embedding("The motel had one cozy room.", 64);
        let b = hashed_embedding("the MOTEL had one cozy room", 64);
        assert!((cos(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_zero() {
        assert!(hashed_embedding("  ", 16).iter().all(|x| *x == 0.0));
    }
}
