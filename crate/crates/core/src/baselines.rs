//! Baselines: the initial explanation alone, and self-consistency over
//! sampled explanations with semantic centroid voting.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, DecodingSpec};
use crate::datasets::Instance;
use crate::prompts::parse_explanation;
use crate::refine::{Pipeline, RefineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Explanation label was missing; `text` is the raw output.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub chosen_index: usize,
    /// Cosine to the centroid; `None` for excluded zero-norm vectors.
    pub similarities: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("no candidates")]
    Empty,
    #[error("embeddings differ in length")]
    Ragged,
    #[error("every embedding has zero norm")]
    AllZero,
}

/// Component-wise mean of `vectors`.
///
/// Each component is summed in sorted order so the result does not depend
/// on the order of the inputs.
pub fn centroid(vectors: &[&[f64]]) -> Vec<f64> {
    let dim = vectors.first().map_or(0, |v| v.len());
    let n = vectors.len() as f64;
    (0..dim)
        .map(|d| {
            let mut col: Vec<f64> = vectors.iter().map(|v| v[d]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pick the vector most cosine-similar to the centroid of all non-zero
/// vectors; the lowest index wins ties.
pub fn centroid_vote(embeddings: &[Vec<f64>]) -> Result<Vote, VoteError> {
    let first = embeddings.first().ok_or(VoteError::Empty)?;
    if embeddings.iter().any(|e| e.len() != first.len()) {
        return Err(VoteError::Ragged);
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    let excluded: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| !(**n > 0.0 && n.is_finite()))
        .map(|(i, _)| i)
        .collect();
    let kept: Vec<&[f64]> = embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, e)| e.as_slice())
        .collect();
    if kept.is_empty() {
        return Err(VoteError::AllZero);
    }
    let c = centroid(&kept);
    let c_norm = norm(&c);
    let similarities: Vec<Option<f64>> = embeddings
        .iter()
        .zip(&norms)
        .enumerate()
        .map(|(i, (e, n))| {
            if excluded.contains(&i) {
                None
            } else if c_norm == 0.0 {
                Some(0.0)
            } else {
                Some(e.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / (n * c_norm))
            }
        })
        .collect();
    let mut chosen: Option<(usize, f64)> = None;
    for (i, s) in similarities.iter().enumerate() {
        if let Some(s) = s {
            if chosen.is_none_or(|(_, best)| *s > best) {
                chosen = Some((i, *s));
            }
        }
    }
    Ok(Vote {
        chosen_index: chosen.expect("at least one kept").0,
        similarities,
        excluded,
    })
}

/// SC-NLE parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScParams {
    #[serde(default = "ScParams::default_n")]
    pub n: usize,
    #[serde(default = "ScParams::default_temperature")]
    pub temperature: f64,
}

impl ScParams {
    fn default_n() -> usize {
        20
    }
    fn default_temperature() -> f64 {
        1.0
    }
}

impl Default for ScParams {
    fn default() -> Self {
        ScParams {
            n: Self::default_n(),
            temperature: Self::default_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub instance_id: String,
    pub candidates: Vec<Candidate>,
    pub embeddings: Vec<Vec<f64>>,
    pub vote: Vote,
    /// Samples lost to backend errors.
    pub failed_samples: usize,
}

impl CandidateSet {
    pub fn chosen(&self) -> &str {
        &self.candidates[self.vote.chosen_index].text
    }
}

/// Sample `n` explanations for a fixed answer.
///
/// With a base seed, sample `i` uses `seed + i`, which makes the set
/// reproducible and cacheable. The set is rejected when fewer than half the
/// samples succeed.
pub fn sample_explanations(
    pipeline: &mut Pipeline<'_, '_>,
    instance: &Instance,
    letter: char,
    params: &ScParams,
    seed: Option<u64>,
) -> Result<(Vec<Candidate>, usize), RefineError> {
    if params.n == 0 {
        return Err(BackendError::InvalidRequest("SC needs at least one sample".into()).into());
    }
    let prompt = pipeline.explanation_prompt(instance, letter)?;
    let mut out = Vec::with_capacity(params.n);
    let mut failed = 0;
    let mut last_err = None;
    for i in 0..params.n {
        let spec = DecodingSpec::sample(
            params.temperature,
            pipeline.limits.explanation,
            seed.map(|s| s.wrapping_add(i as u64)),
        )?;
        match pipeline.generator.generate(&prompt, &spec) {
            Ok(g) => match parse_explanation(&g.text, false) {
                Ok(p) => out.push(Candidate {
                    text: p.text,
                    fallback: p.fallback,
                }),
                Err(_) if !g.text.trim().is_empty() => out.push(Candidate {
                    text: g.text.trim().to_string(),
                    fallback: true,
                }),
                Err(_) => failed += 1,
            },
            Err(e) if matches!(e, BackendError::Capability { .. } | BackendError::InvalidRequest(_)) => {
                return Err(e.into())
            }
            Err(e) => {
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    if out.len() * 2 < params.n {
        return Err(last_err
            .unwrap_or_else(|| BackendError::Protocol(format!("only {} of {} samples usable", out.len(), params.n)))
            .into());
    }
    Ok((out, failed))
}

/// SC-NLE: sample, embed, vote.
pub fn sc_nle(
    pipeline: &mut Pipeline<'_, '_>,
    instance: &Instance,
    letter: char,
    params: &ScParams,
    seed: Option<u64>,
) -> Result<CandidateSet, RefineError> {
    let (candidates, failed_samples) = sample_explanations(pipeline, instance, letter, params, seed)?;
    let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let embeddings: Vec<Vec<f64>> = pipeline
        .generator
        .backend()
        .embed(&texts)?
        .into_iter()
        .map(|e| e.components)
        .collect();
    let vote = centroid_vote(&embeddings).map_err(|e| BackendError::Protocol(e.to_string()))?;
    Ok(CandidateSet {
        instance_id: instance.id.clone(),
        candidates,
        embeddings,
        vote,
        failed_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_pick_first() {
        let v = centroid_vote(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(v.chosen_index, 0);
    }

    #[test]
    fn hand_computed_case() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = centroid_vote(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]]).unwrap();
        assert_eq!(v.chosen_index, 2);
        let c = centroid(&[&[1.0, 0.0], &[0.0, 1.0], &[s, s]]);
        assert!((c[0] - 0.569).abs() < 1e-3 && (c[1] - 0.569).abs() < 1e-3);
        assert!((v.similarities[2].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_candidate() {
        assert_eq!(centroid_vote(&[vec![0.3, -0.1]]).unwrap().chosen_index, 0);
    }

    #[test]
    fn zero_vectors_are_excluded() {
        let v = centroid_vote(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(v.chosen_index, 1);
        assert_eq!(v.excluded, vec![0]);
        assert_eq!(v.similarities[0], None);
        assert_eq!(centroid_vote(&[vec![0.0]]), Err(VoteError::AllZero));
        assert_eq!(centroid_vote(&[]), Err(VoteError::Empty));
        assert_eq!(centroid_vote(&[vec![1.0], vec![1.0, 2.0]]), Err(VoteError::Ragged));
    }

    #[test]
    fn opposite_vectors_tie_at_zero_centroid() {
        let v = centroid_vote(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(v.chosen_index, 0);
    }
}
