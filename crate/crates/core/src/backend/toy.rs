//! A tiny analytic language-model head used for attention and gradient
//! attribution when no real model is attached.
//!
//! Token embeddings are seeded from a hash of the token text. For a target
//! token `y` and context embeddings `e_1..e_n`, each head `h` attends with
//! query `q_h = Q_h emb(y)` and scores values `s_hi = u_h . e_i` with
//! `u_h = U_h emb(y)`:
//!
//! ```text
//! alpha_hi = softmax_i(q_h . e_i / sqrt(d))
//! F(E)     = mean_h sum_i alpha_hi * s_hi
//! dF/de_k  = mean_h alpha_hk * (u_h + (s_hk - F_h) * q_h / sqrt(d))
//! ```
//!
//! The `linear` variant drops the softmax: `F(E) = sum_i u . e_i`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ig::{integrated_gradients, DifferentiableScorer, IgError};
use super::{check_answer_span, context_rows, AttributionMatrix, AttributionMethod, BackendError, GenerationResult};

pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    #[default]
    Attention,
    Linear,
}

fn default_dim() -> usize {
    8
}

fn default_heads() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kind: ToyKind,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dim: default_dim(),
            heads: default_heads(),
            seed: 0,
            kind: ToyKind::Attention,
        }
    }
}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct ToyLm {
    config: ToyConfig,
    query: Vec<Matrix>,
    value: Vec<Matrix>,
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyLm {
    pub fn new(config: ToyConfig) -> Self {
        let dim = config.dim.max(1);
        let heads = config.heads.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        let matrix = |rng: &mut ChaCha8Rng| -> Matrix {
            (0..dim)
                .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
                .collect()
        };
        let query = (0..heads).map(|_| matrix(&mut rng)).collect();
        let value = (0..heads).map(|_| matrix(&mut rng)).collect();
        ToyLm {
            config: ToyConfig { dim, heads, ..config },
            query,
            value,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn embedding(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(format!("{}:{token}", self.config.seed).as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        (0..self.config.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    pub fn eos_embedding(&self) -> Vec<f64> {
        self.embedding(EOS)
    }

    /// Value direction `u` for `target` (first head in the linear variant).
    pub fn value_direction(&self, target: &str, head: usize) -> Vec<f64> {
        matvec(&self.value[head], &self.embedding(target))
    }

    fn head_terms(&self, context: &[Vec<f64>], target: &str, head: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = self.embedding(target);
        let q = matvec(&self.query[head], &t);
        let u = matvec(&self.value[head], &t);
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let logits: Vec<f64> = context.iter().map(|e| dot(&q, e) * scale).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|x| x / z).collect();
        let values: Vec<f64> = context.iter().map(|e| dot(&u, e)).collect();
        (alpha, values, q, u)
    }

    /// Head-averaged attention of `target` over `context`.
    pub fn attention_weights(&self, context: &[Vec<f64>], target: &str) -> Vec<f64> {
        if context.is_empty() {
            return Vec::new();
        }
        match self.config.kind {
            ToyKind::Linear => vec![1.0 / context.len() as f64; context.len()],
            ToyKind::Attention => {
                let mut acc = vec![0.0; context.len()];
                for h in 0..self.config.heads {
                    let (alpha, ..) = self.head_terms(context, target, h);
                    for (a, x) in acc.iter_mut().zip(alpha) {
                        *a += x;
                    }
                }
                acc.iter().map(|a| a / self.config.heads as f64).collect()
            }
        }
    }

    /// Context embeddings and target token for each answer token.
    fn contexts<'g>(
        &self,
        generation: &'g GenerationResult,
        answer_span: &Range<usize>,
    ) -> Vec<(Vec<Vec<f64>>, &'g str)> {
        let prompt: Vec<Vec<f64>> = generation
            .prompt_tokens
            .iter()
            .map(|t| self.embedding(&t.text))
            .collect();
        answer_span
            .clone()
            .map(|t| {
                let mut ctx = prompt.clone();
                ctx.extend(
                    generation.output_tokens[..t]
                        .iter()
                        .map(|tok| self.embedding(&tok.text)),
                );
                (ctx, generation.output_tokens[t].text.as_str())
            })
            .collect()
    }

    pub fn attention_matrix(
        &self,
        generation: &GenerationResult,
        answer_span: Range<usize>,
    ) -> Result<AttributionMatrix, BackendError> {
        check_answer_span(generation, &answer_span)?;
        let rows = context_rows(generation, &answer_span);
        let mut values = vec![vec![0.0; answer_span.len()]; rows.len()];
        for (j, (ctx, target)) in self.contexts(generation, &answer_span).into_iter().enumerate() {
            for (i, w) in self.attention_weights(&ctx, target).into_iter().enumerate() {
                values[i][j] = w.abs();
            }
        }
        Ok(AttributionMatrix {
            values,
            rows,
            target_span: answer_span,
            method: AttributionMethod::Attention,
            convergence_delta: None,
        })
    }

    /// Integrated gradients with the EOS embedding replicated as baseline.
    ///
    /// The reported convergence delta is the mean absolute delta over answer
    /// tokens.
    pub fn ig_matrix(
        &self,
        generation: &GenerationResult,
        answer_span: Range<usize>,
        steps: usize,
    ) -> Result<AttributionMatrix, BackendError> {
        check_answer_span(generation, &answer_span)?;
        let rows = context_rows(generation, &answer_span);
        let mut values = vec![vec![0.0; answer_span.len()]; rows.len()];
        let eos = self.eos_embedding();
        let mut delta_sum = 0.0;
        for (j, (ctx, target)) in self.contexts(generation, &answer_span).into_iter().enumerate() {
            let baseline = vec![eos.clone(); ctx.len()];
            let out = integrated_gradients(self, &ctx, &baseline, target, steps).map_err(|e| match e {
                IgError::NonFinite => BackendError::NonFinite {
                    target: answer_span.start + j,
                    token: target.to_string(),
                },
                other => BackendError::InvalidRequest(other.to_string()),
            })?;
            for (i, a) in out.attributions.into_iter().enumerate() {
                values[i][j] = a.abs();
            }
            delta_sum += out.delta.abs();
        }
        Ok(AttributionMatrix {
            values,
            rows,
            target_span: answer_span.clone(),
            method: AttributionMethod::IntegratedGradients,
            convergence_delta: Some(delta_sum / answer_span.len() as f64),
        })
    }
}

impl DifferentiableScorer for ToyLm {
    type Target = str;

    fn score_with_grad(&self, context: &[Vec<f64>], target: &str) -> (f64, Vec<Vec<f64>>) {
        let dim = self.config.dim;
        match self.config.kind {
            ToyKind::Linear => {
                let u = self.value_direction(target, 0);
                let value = context.iter().map(|e| dot(&u, e)).sum();
                (value, vec![u; context.len()])
            }
            ToyKind::Attention => {
                let heads = self.config.heads as f64;
                let scale = 1.0 / (dim as f64).sqrt();
                let mut total = 0.0;
                let mut grad = vec![vec![0.0; dim]; context.len()];
                for h in 0..self.config.heads {
                    let (alpha, values, q, u) = self.head_terms(context, target, h);
                    let f_h: f64 = alpha.iter().zip(&values).map(|(a, s)| a * s).sum();
                    total += f_h / heads;
                    for (k, g) in grad.iter_mut().enumerate() {
                        let coef = (values[k] - f_h) * scale;
                        for d in 0..dim {
                            g[d] += alpha[k] * (u[d] + coef * q[d]) / heads;
                        }
                    }
                }
                (total, grad)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tokenize::tokenize;

    fn gen(prompt: &str, out: &str) -> GenerationResult {
        GenerationResult {
            text: out.into(),
            prompt_tokens: tokenize(prompt),
            output_tokens: tokenize(out),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lm = ToyLm::new(ToyConfig::default());
        let ctx: Vec<Vec<f64>> = ["Where", " might", " he", " be"]
            .iter()
            .map(|t| lm.embedding(t))
            .collect();
        let (_, grad) = lm.score_with_grad(&ctx, "motel");
        let h = 1e-6;
        for k in 0..ctx.len() {
            for d in 0..lm.config().dim {
                let mut plus = ctx.clone();
                plus[k][d] += h;
                let mut minus = ctx.clone();
                minus[k][d] -= h;
                let fd = (lm.score(&plus, "motel") - lm.score(&minus, "motel")) / (2.0 * h);
                assert!((fd - grad[k][d]).abs() < 1e-6, "k={k} d={d}: {fd} vs {}", grad[k][d]);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_per_target() {
        let lm = ToyLm::new(ToyConfig {
            seed: 3,
            ..ToyConfig::default()
        });
        let g = gen("Pick the best option now", "Answer: (B)");
        let m = lm.attention_matrix(&g, 2..5).unwrap();
        m.validate().unwrap();
        for j in 0..3 {
            let col: f64 = m.values.iter().map(|r| r[j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        // last target cannot attend to itself
        assert_eq!(m.n_rows(), g.prompt_tokens.len() + 4);
    }

    #[test]
    fn ig_delta_shrinks_with_steps() {
        let lm = ToyLm::new(ToyConfig {
            seed: 11,
            ..ToyConfig::default()
        });
        let g = gen("There was only one cozy room", "Answer: (A)");
        let deltas: Vec<f64> = [4, 16, 64]
            .iter()
            .map(|s| lm.ig_matrix(&g, 2..5, *s).unwrap().convergence_delta.unwrap())
            .collect();
        assert!(deltas[1] < deltas[0] && deltas[2] < deltas[1], "{deltas:?}");
    }

    #[test]
    fn embeddings_are_deterministic() {
        let a = ToyLm::new(ToyConfig::default());
        let b = ToyLm::new(ToyConfig::default());
        assert_eq!(a.embedding(" cozy"), b.embedding(" cozy"));
        assert_ne!(a.embedding(" cozy"), a.embedding("cozy"));
    }
}
