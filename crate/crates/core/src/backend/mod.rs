//! Capability interfaces over the generative model and the sentence encoder.
//!
//! A [`Backend`] is a single-consumer handle. The pipeline obtains handles from
//! a [`BackendProvider`], one per worker, so several handles can run in
//! parallel across instances.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod embed;
pub mod ig;
pub mod mock;
pub mod protocol;
pub mod tokenize;
pub mod toy;

pub use mock::{MockBackend, MockFixture, MockProvider};
pub use protocol::{RemoteProvider, StdioProvider};
pub use toy::{ToyConfig, ToyLm};

/// Something a backend can do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Generate,
    Attention,
    Gradients,
    Embed,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Capability::Generate => "generate",
            Capability::Attention => "attention",
            Capability::Gradients => "gradients",
            Capability::Embed => "embed",
        };
        f.write_str(s)
    }
}

pub type Capabilities = BTreeSet<Capability>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{model_tag}` lacks the `{capability}` capability")]
    Capability { capability: Capability, model_tag: String },
    #[error("context overflow: {prompt_tokens} prompt tokens + {max_new_tokens} new tokens exceed the window of {context_window}")]
    ContextOverflow {
        prompt_tokens: usize,
        max_new_tokens: usize,
        context_window: usize,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("non-finite gradient for target token {target} ({token:?})")]
    NonFinite { target: usize, token: String },
    #[error("no scripted output for prompt {prompt_hash}")]
    Unscripted { prompt_hash: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Transport failures may succeed on retry; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DecodingMode {
    Greedy,
    Sample,
}

/// How to decode one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingSpec {
    pub mode: DecodingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DecodingSpec {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodingSpec {
            mode: DecodingMode::Greedy,
            temperature: None,
            max_new_tokens,
            seed: None,
        }
    }

    pub fn sample(temperature: f64, max_new_tokens: usize, seed: Option<u64>) -> Result<Self, BackendError> {
        let spec = DecodingSpec {
            mode: DecodingMode::Sample,
            temperature: Some(temperature),
            max_new_tokens,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if self.mode == DecodingMode::Sample {
            match self.temperature {
                Some(t) if t > 0.0 && t.is_finite() => {}
                _ => {
                    return Err(BackendError::InvalidRequest(
                        "sampling requires a positive temperature".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Equivalent spec with fields the mode ignores cleared.
    pub fn canonical(&self) -> DecodingSpec {
        match self.mode {
            DecodingMode::Greedy => DecodingSpec::greedy(self.max_new_tokens),
            DecodingMode::Sample => self.clone(),
        }
    }
}

/// A token and its byte span in the text it was taken from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Check that `tokens` are ordered, non-overlapping and reconstruct `text`.
pub fn check_token_spans(text: &str, tokens: &[TokenSpan]) -> Result<(), String> {
    let mut cursor = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.start != cursor || t.end < t.start || t.end > text.len() {
            return Err(format!(
                "token {i} span {}..{} breaks coverage at {cursor}",
                t.start, t.end
            ));
        }
        if text.get(t.start..t.end) != Some(t.text.as_str()) {
            return Err(format!("token {i} text {:?} does not match its span", t.text));
        }
        cursor = t.end;
    }
    if cursor != text.len() {
        return Err(format!("tokens cover {cursor} of {} bytes", text.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub prompt_tokens: Vec<TokenSpan>,
    pub output_tokens: Vec<TokenSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttributionMethod {
    Attention,
    IntegratedGradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Prompt,
    Output,
}

/// A matrix row: one context token, located in the prompt or in the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowToken {
    pub region: Region,
    pub start: usize,
    pub end: usize,
}

/// Absolute attribution scores, rows = context tokens, columns = answer tokens.
///
/// Rows are every prompt token followed by the output tokens that precede the
/// last answer token. Entry `(i, j)` is zero when row `i` lies after answer
/// token `j` in the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub values: Vec<Vec<f64>>,
    pub rows: Vec<RowToken>,
    pub target_span: Range<usize>,
    pub method: AttributionMethod,
    pub convergence_delta: Option<f64>,
}

impl AttributionMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.target_span.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.values.len() != self.rows.len() {
            return Err(format!(
                "{} value rows but {} row tokens",
                self.values.len(),
                self.rows.len()
            ));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != self.n_cols() {
                return Err(format!("row {i} has {} columns, expected {}", row.len(), self.n_cols()));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(format!("row {i} holds invalid score {v}"));
            }
        }
        Ok(())
    }
}

/// Row layout for a matrix over `generation` targeting `answer_span`.
pub fn context_rows(generation: &GenerationResult, answer_span: &Range<usize>) -> Vec<RowToken> {
    let mut rows: Vec<RowToken> = generation
        .prompt_tokens
        .iter()
        .map(|t| RowToken {
            region: Region::Prompt,
            start: t.start,
            end: t.end,
        })
        .collect();
    let last = answer_span.end.saturating_sub(1);
    rows.extend(generation.output_tokens[..last].iter().map(|t| RowToken {
        region: Region::Output,
        start: t.start,
        end: t.end,
    }));
    rows
}

pub fn check_answer_span(generation: &GenerationResult, span: &Range<usize>) -> Result<(), BackendError> {
    if span.is_empty() || span.end > generation.output_tokens.len() {
        return Err(BackendError::InvalidRequest(format!(
            "answer span {}..{} outside {} output tokens",
            span.start,
            span.end,
            generation.output_tokens.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub components: Vec<f64>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.components.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Hex SHA-256 of a prompt; the key scripted fixtures use.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub trait Backend: Send {
    fn model_tag(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn generate(&mut self, prompt: &str, spec: &DecodingSpec) -> Result<GenerationResult, BackendError>;

    /// Final-layer attention averaged over heads, for each answer token.
    ///
    /// `generation` must be the greedy generation of `prompt`.
    fn attention_attribution(
        &mut self,
        _prompt: &str,
        _generation: &GenerationResult,
        _answer_span: Range<usize>,
    ) -> Result<AttributionMatrix, BackendError> {
        Err(BackendError::Capability {
            capability: Capability::Attention,
            model_tag: self.model_tag().to_string(),
        })
    }

    /// Integrated gradients from an EOS-embedding baseline, for each answer token.
    fn gradient_attribution(
        &mut self,
        _prompt: &str,
        _generation: &GenerationResult,
        _answer_span: Range<usize>,
        _steps: usize,
    ) -> Result<AttributionMatrix, BackendError> {
        Err(BackendError::Capability {
            capability: Capability::Gradients,
            model_tag: self.model_tag().to_string(),
        })
    }

    fn embed(&mut self, _texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        Err(BackendError::Capability {
            capability: Capability::Embed,
            model_tag: self.model_tag().to_string(),
        })
    }
}

/// Opens backend handles.
pub trait BackendProvider: Send + Sync {
    fn model_tag(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn open(&self) -> Result<Box<dyn Backend>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    Remote,
    Mock,
}

fn default_ig_steps() -> usize {
    500
}

fn default_context_window() -> usize {
    8192
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

/// The `[backend]` configuration block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_tag: String,
    /// Capabilities the run may use; defaults to whatever the backend advertises.
    #[serde(default)]
    pub capabilities: Option<Vec<Capability>>,
    #[serde(default = "default_ig_steps")]
    pub ig_steps_default: usize,
    #[serde(default = "default_context_window")]
    pub context_window: usize,
    /// Mock: fixture file.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    /// Remote: base URL of the backend server.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Local: command line of a backend process speaking JSON lines on stdio.
    #[serde(default)]
    pub command: Option<Vec<String>>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("backend config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl BackendConfig {
    pub fn mock(model_tag: &str, fixture: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            model_tag: model_tag.into(),
            capabilities: None,
            ig_steps_default: default_ig_steps(),
            context_window: default_context_window(),
            fixture: Some(fixture.into()),
            endpoint: None,
            command: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
        }
    }

    /// Build the provider, resolving relative paths against `base_dir`.
    pub fn provider(&self, base_dir: &Path) -> Result<Arc<dyn BackendProvider>, ConfigError> {
        let inner: Arc<dyn BackendProvider> = match self.kind {
            BackendKind::Mock => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("mock backend requires `fixture`".into()))?;
                let path = base_dir.join(path);
                let fixture =
                    MockFixture::load(&path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
                Arc::new(MockProvider::new(&self.model_tag, fixture, self.context_window))
            }
            BackendKind::Remote => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("remote backend requires `endpoint`".into()))?;
                Arc::new(RemoteProvider::connect(
                    &endpoint,
                    &self.model_tag,
                    self.timeout_secs,
                    self.max_retries,
                )?)
            }
            BackendKind::Local => {
                let command = self
                    .command
                    .clone()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| ConfigError::Invalid("local backend requires `command`".into()))?;
                Arc::new(StdioProvider::spawn(command, base_dir, &self.model_tag)?)
            }
        };
        match &self.capabilities {
            None => Ok(inner),
            Some(declared) => {
                let declared: Capabilities = declared.iter().copied().collect();
                let offered = inner.capabilities();
                if let Some(missing) = declared.difference(&offered).next() {
                    return Err(ConfigError::Invalid(format!(
                        "declared capability `{missing}` is not offered by backend `{}`",
                        self.model_tag
                    )));
                }
                Ok(Arc::new(Restricted {
                    inner,
                    allowed: declared,
                }))
            }
        }
    }
}

/// A provider whose advertised capabilities are narrowed by configuration.
struct Restricted {
    inner: Arc<dyn BackendProvider>,
    allowed: Capabilities,
}

impl BackendProvider for Restricted {
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }

    fn capabilities(&self) -> Capabilities {
        self.allowed.clone()
    }

    fn open(&self) -> Result<Box<dyn Backend>, BackendError> {
        self.inner.open()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_ignores_temperature_and_seed() {
        let mut spec = DecodingSpec::greedy(32);
        spec.temperature = Some(0.7);
        spec.seed = Some(9);
        assert_eq!(spec.canonical(), DecodingSpec::greedy(32));
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn sampling_requires_positive_temperature() {
        assert!(DecodingSpec::sample(0.0, 10, None).is_err());
        assert!(DecodingSpec::sample(-1.0, 10, None).is_err());
        assert!(DecodingSpec::sample(1.0, 10, Some(3)).is_ok());
    }

    #[test]
    fn span_check_detects_gaps() {
        let text = "ab";
        let ok = vec![
            TokenSpan {
                text: "a".into(),
                start: 0,
                end: 1,
            },
            TokenSpan {
                text: "b".into(),
                start: 1,
                end: 2,
            },
        ];
        assert!(check_token_spans(text, &ok).is_ok());
        assert!(check_token_spans(text, &ok[..1]).is_err());
        assert!(check_token_spans(text, &[ok[1].clone()]).is_err());
    }

    #[test]
    fn rows_include_prior_output_tokens() {
        let gen = GenerationResult {
            text: "Answer: (B)".into(),
            prompt_tokens: tokenize::tokenize("Pick one"),
            output_tokens: tokenize::tokenize("Answer: (B)"),
        };
        // output tokens: Answer | : | " (" | B | )
        let rows = context_rows(&gen, &(2..5));
        assert_eq!(rows.len(), 2 + 4);
        assert_eq!(rows[2].region, Region::Output);
    }
}
