//! Scripted backend for tests and offline runs.
//!
//! Outputs come from a JSON fixture. A prompt is looked up by the hex SHA-256
//! of its exact text, then against `rules` in order (every `contains` substring
//! must occur), then `default_output`. Attention and gradient matrices are read
//! from the fixture when scripted for the prompt's hash, and otherwise computed
//! by the analytic toy model if one is configured.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::embed::hashed_embedding;
use super::tokenize::{from_pieces, tokenize};
use super::toy::{ToyConfig, ToyLm};
use super::{
    check_answer_span, context_rows, prompt_hash, AttributionMatrix, AttributionMethod, Backend, BackendError,
    BackendProvider, Capabilities, Capability, DecodingMode, DecodingSpec, EmbeddingVector, GenerationResult,
};

/// One scripted output, or a list to draw from when sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scripted {
    One(String),
    Many(Vec<String>),
}

impl Scripted {
    fn choices(&self) -> &[String] {
        match self {
            Scripted::One(s) => std::slice::from_ref(s),
            Scripted::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub contains: Vec<String>,
    pub output: Scripted,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMatrix {
    /// `values[row][target]`.
    #[serde(default)]
    pub values: Option<Vec<Vec<f64>>>,
    /// `heads[head][row][target]`, averaged over heads.
    #[serde(default)]
    pub heads: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub convergence_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixture {
    #[serde(default)]
    pub model_tag: Option<String>,
    /// Prompt hash to output.
    #[serde(default)]
    pub generations: IndexMap<String, Scripted>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub default_output: Option<String>,
    /// Output text to explicit token pieces; other outputs use the built-in tokenizer.
    #[serde(default)]
    pub output_tokens: IndexMap<String, Vec<String>>,
    /// Prompt hash to attention matrix.
    #[serde(default)]
    pub attention: IndexMap<String, ScriptedMatrix>,
    /// Prompt hash to gradient attribution matrix.
    #[serde(default)]
    pub gradients: IndexMap<String, ScriptedMatrix>,
    /// Text to embedding vector.
    #[serde(default)]
    pub embeddings: IndexMap<String, Vec<f64>>,
    /// Dimension of the hashed bag-of-words fallback encoder.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub toy: Option<ToyConfig>,
    /// Prompts containing any of these substrings fail with a transport error.
    #[serde(default)]
    pub transport_failures: Vec<String>,
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    pub fn capabilities(&self) -> Capabilities {
        let mut caps = Capabilities::new();
        caps.insert(Capability::Generate);
        if !self.attention.is_empty() || self.toy.is_some() {
            caps.insert(Capability::Attention);
        }
        if !self.gradients.is_empty() || self.toy.is_some() {
            caps.insert(Capability::Gradients);
        }
        if !self.embeddings.is_empty() || self.embedding_dim.is_some() {
            caps.insert(Capability::Embed);
        }
        caps
    }

    fn lookup(&self, prompt: &str) -> Option<&Scripted> {
        self.generations.get(&prompt_hash(prompt)).or_else(|| {
            self.rules
                .iter()
                .find(|r| r.contains.iter().all(|c| prompt.contains(c.as_str())))
                .map(|r| &r.output)
        })
    }
}

/// Calls made through every handle of one provider.
#[derive(Debug, Default)]
pub struct MockStats {
    pub generate: AtomicUsize,
    pub attention: AtomicUsize,
    pub gradients: AtomicUsize,
    pub embed: AtomicUsize,
}

impl MockStats {
    pub fn snapshot(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("generate", self.generate.load(Ordering::SeqCst)),
            ("attention", self.attention.load(Ordering::SeqCst)),
            ("gradients", self.gradients.load(Ordering::SeqCst)),
            ("embed", self.embed.load(Ordering::SeqCst)),
        ])
    }
}

struct Shared {
    model_tag: String,
    fixture: MockFixture,
    toy: Option<ToyLm>,
    context_window: usize,
    stats: MockStats,
    unseeded_draws: AtomicUsize,
}

#[derive(Clone)]
pub struct MockProvider {
    shared: Arc<Shared>,
}

impl MockProvider {
    pub fn new(model_tag: &str, fixture: MockFixture, context_window: usize) -> Self {
        let toy = fixture.toy.clone().map(ToyLm::new);
        MockProvider {
            shared: Arc::new(Shared {
                model_tag: model_tag.to_string(),
                fixture,
                toy,
                context_window,
                stats: MockStats::default(),
                unseeded_draws: AtomicUsize::new(0),
            }),
        }
    }

    pub fn stats(&self) -> &MockStats {
        &self.shared.stats
    }

    pub fn backend(&self) -> MockBackend {
        MockBackend {
            shared: Arc::clone(&self.shared),
        }
    }
}

impl BackendProvider for MockProvider {
    fn model_tag(&self) -> &str {
        &self.shared.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        self.shared.fixture.capabilities()
    }

    fn open(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(Box::new(self.backend()))
    }
}

pub struct MockBackend {
    shared: Arc<Shared>,
}

impl MockBackend {
    fn require(&self, cap: Capability) -> Result<(), BackendError> {
        if self.shared.fixture.capabilities().contains(&cap) {
            Ok(())
        } else {
            Err(BackendError::Capability {
                capability: cap,
                model_tag: self.shared.model_tag.clone(),
            })
        }
    }

    fn scripted_matrix(
        &self,
        script: &ScriptedMatrix,
        generation: &GenerationResult,
        answer_span: Range<usize>,
        method: AttributionMethod,
    ) -> Result<AttributionMatrix, BackendError> {
        let values = match (&script.values, &script.heads) {
            (Some(v), None) => v.clone(),
            (None, Some(heads)) if !heads.is_empty() => {
                let mut acc = heads[0].clone();
                for h in &heads[1..] {
                    if h.len() != acc.len() || h.iter().zip(&acc).any(|(a, b)| a.len() != b.len()) {
                        return Err(BackendError::Protocol("attention heads differ in shape".into()));
                    }
                    for (ra, rh) in acc.iter_mut().zip(h) {
                        for (a, x) in ra.iter_mut().zip(rh) {
                            *a += x;
                        }
                    }
                }
                let n = heads.len() as f64;
                acc.iter().map(|r| r.iter().map(|x| x / n).collect()).collect()
            }
            _ => {
                return Err(BackendError::Protocol(
                    "scripted matrix needs exactly one of `values` or `heads`".into(),
                ))
            }
        };
        let matrix = AttributionMatrix {
            values: values.iter().map(|r| r.iter().map(|x| x.abs()).collect()).collect(),
            rows: context_rows(generation, &answer_span),
            target_span: answer_span,
            method,
            convergence_delta: script.convergence_delta,
        };
        matrix.validate().map_err(BackendError::Protocol)?;
        Ok(matrix)
    }
}

impl Backend for MockBackend {
    fn model_tag(&self) -> &str {
        &self.shared.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        self.shared.fixture.capabilities()
    }

    fn generate(&mut self, prompt: &str, spec: &DecodingSpec) -> Result<GenerationResult, BackendError> {
        spec.validate()?;
        self.shared.stats.generate.fetch_add(1, Ordering::SeqCst);
        let fixture = &self.shared.fixture;
        if fixture.transport_failures.iter().any(|f| prompt.contains(f.as_str())) {
            return Err(BackendError::Transport("scripted transport failure".into()));
        }
        let prompt_tokens = tokenize(prompt);
        if prompt_tokens.len() + spec.max_new_tokens > self.shared.context_window {
            return Err(BackendError::ContextOverflow {
                prompt_tokens: prompt_tokens.len(),
                max_new_tokens: spec.max_new_tokens,
                context_window: self.shared.context_window,
            });
        }
        let text = match fixture.lookup(prompt) {
            Some(script) => {
                let choices = script.choices();
                if choices.is_empty() {
                    return Err(BackendError::Protocol("empty scripted output list".into()));
                }
                let index = match (spec.mode, spec.seed) {
                    (DecodingMode::Greedy, _) => 0,
                    (DecodingMode::Sample, Some(seed)) => (seed % choices.len() as u64) as usize,
                    (DecodingMode::Sample, None) => {
                        self.shared.unseeded_draws.fetch_add(1, Ordering::SeqCst) % choices.len()
                    }
                };
                choices[index].clone()
            }
            None => fixture.default_output.clone().ok_or_else(|| BackendError::Unscripted {
                prompt_hash: prompt_hash(prompt),
            })?,
        };
        let mut output_tokens = match fixture.output_tokens.get(&text) {
            Some(pieces) => from_pieces(&text, pieces).map_err(BackendError::Protocol)?,
            None => tokenize(&text),
        };
        let text = if output_tokens.len() > spec.max_new_tokens {
            output_tokens.truncate(spec.max_new_tokens);
            let end = output_tokens.last().map_or(0, |t| t.end);
            text[..end].to_string()
        } else {
            text
        };
        Ok(GenerationResult {
            text,
            prompt_tokens,
            output_tokens,
        })
    }

    fn attention_attribution(
        &mut self,
        prompt: &str,
        generation: &GenerationResult,
        answer_span: Range<usize>,
    ) -> Result<AttributionMatrix, BackendError> {
        self.require(Capability::Attention)?;
        check_answer_span(generation, &answer_span)?;
        self.shared.stats.attention.fetch_add(1, Ordering::SeqCst);
        if let Some(script) = self.shared.fixture.attention.get(&prompt_hash(prompt)) {
            return self.scripted_matrix(script, generation, answer_span, AttributionMethod::Attention);
        }
        match &self.shared.toy {
            Some(toy) => toy.attention_matrix(generation, answer_span),
            None => Err(BackendError::Unscripted {
                prompt_hash: prompt_hash(prompt),
            }),
        }
    }

    fn gradient_attribution(
        &mut self,
        prompt: &str,
        generation: &GenerationResult,
        answer_span: Range<usize>,
        steps: usize,
    ) -> Result<AttributionMatrix, BackendError> {
        self.require(Capability::Gradients)?;
        check_answer_span(generation, &answer_span)?;
        if steps == 0 {
            return Err(BackendError::InvalidRequest("steps must be positive".into()));
        }
        self.shared.stats.gradients.fetch_add(1, Ordering::SeqCst);
        if let Some(script) = self.shared.fixture.gradients.get(&prompt_hash(prompt)) {
            return self.scripted_matrix(script, generation, answer_span, AttributionMethod::IntegratedGradients);
        }
        match &self.shared.toy {
            Some(toy) => toy.ig_matrix(generation, answer_span, steps),
            None => Err(BackendError::Unscripted {
                prompt_hash: prompt_hash(prompt),
            }),
        }
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.require(Capability::Embed)?;
        self.shared.stats.embed.fetch_add(1, Ordering::SeqCst);
        let fixture = &self.shared.fixture;
        texts
            .iter()
            .map(|t| {
                let components = match (fixture.embeddings.get(t), fixture.embedding_dim) {
                    (Some(v), _) => v.clone(),
                    (None, Some(dim)) => hashed_embedding(t, dim),
                    (None, None) => {
                        return Err(BackendError::Unscripted {
                            prompt_hash: prompt_hash(t),
                        })
                    }
                };
                Ok(EmbeddingVector {
                    components,
                    model_tag: self.shared.model_tag.clone(),
                })
            })
            .collect()
    }
}
