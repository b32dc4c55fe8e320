//! JSON protocol for out-of-process backends.
//!
//! Every request is an object with an `op` field (`info`, `generate`,
//! `attention`, `gradients`, `embed`). Over HTTP it is POSTed to
//! `{endpoint}/{op}`; over stdio it is written as one line and answered with
//! one line. Token offsets on the wire count Unicode scalar values, not bytes,
//! so that servers written in Python can use plain string indices.
//!
//! Failures come back as `{"error": "...", "retryable": bool, "kind": "..."}`.

use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_answer_span, context_rows, AttributionMatrix, AttributionMethod, Backend, BackendError, BackendProvider,
    Capabilities, Capability, DecodingSpec, EmbeddingVector, GenerationResult, TokenSpan,
};

/// Environment variable holding a bearer token for remote backends.
pub const TOKEN_ENV: &str = "SRNLE_BACKEND_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireToken {
    text: String,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireGeneration {
    text: String,
    prompt_tokens: Vec<WireToken>,
    output_tokens: Vec<WireToken>,
}

#[derive(Debug, Deserialize)]
struct WireMatrix {
    values: Vec<Vec<f64>>,
    #[serde(default)]
    convergence_delta: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct WireInfo {
    model_tag: String,
    capabilities: Vec<Capability>,
}

/// Byte offset of every char boundary, plus the end.
fn boundaries(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect()
}

fn tokens_from_wire(text: &str, tokens: Vec<WireToken>) -> Result<Vec<TokenSpan>, BackendError> {
    let b = boundaries(text);
    let to_byte = |c: usize| {
        b.get(c)
            .copied()
            .ok_or_else(|| BackendError::Protocol(format!("char offset {c} past end of text")))
    };
    let spans = tokens
        .into_iter()
        .map(|t| {
            Ok(TokenSpan {
                start: to_byte(t.start)?,
                end: to_byte(t.end)?,
                text: t.text,
            })
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    super::check_token_spans(text, &spans).map_err(BackendError::Protocol)?;
    Ok(spans)
}

fn tokens_to_wire(text: &str, tokens: &[TokenSpan]) -> Vec<WireToken> {
    let b = boundaries(text);
    let to_char = |byte: usize| b.partition_point(|x| *x < byte);
    tokens
        .iter()
        .map(|t| WireToken {
            text: t.text.clone(),
            start: to_char(t.start),
            end: to_char(t.end),
        })
        .collect()
}

fn generation_to_wire(prompt: &str, g: &GenerationResult) -> WireGeneration {
    WireGeneration {
        text: g.text.clone(),
        prompt_tokens: tokens_to_wire(prompt, &g.prompt_tokens),
        output_tokens: tokens_to_wire(&g.text, &g.output_tokens),
    }
}

fn generation_from_wire(prompt: &str, g: WireGeneration) -> Result<GenerationResult, BackendError> {
    Ok(GenerationResult {
        prompt_tokens: tokens_from_wire(prompt, g.prompt_tokens)?,
        output_tokens: tokens_from_wire(&g.text, g.output_tokens)?,
        text: g.text,
    })
}

pub fn encode_error(err: &BackendError) -> Value {
    let mut v = json!({ "error": err.to_string(), "retryable": err.is_retryable() });
    let extra = match err {
        BackendError::Capability { capability, .. } => json!({ "kind": "capability", "capability": capability }),
        BackendError::ContextOverflow {
            prompt_tokens,
            max_new_tokens,
            context_window,
        } => json!({
            "kind": "context_overflow",
            "prompt_tokens": prompt_tokens,
            "max_new_tokens": max_new_tokens,
            "context_window": context_window,
        }),
        BackendError::Transport(_) => json!({ "kind": "transport" }),
        BackendError::NonFinite { target, token } => json!({ "kind": "non_finite", "target": target, "token": token }),
        BackendError::Unscripted { prompt_hash } => json!({ "kind": "unscripted", "prompt_hash": prompt_hash }),
        BackendError::InvalidRequest(_) => json!({ "kind": "invalid_request" }),
        BackendError::Protocol(_) => json!({ "kind": "protocol" }),
    };
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

pub fn decode_error(v: &Value, model_tag: &str) -> Option<BackendError> {
    let message = v.get("error")?.as_str().unwrap_or("unknown error").to_string();
    let num = |k: &str| v.get(k).and_then(Value::as_u64).unwrap_or(0) as usize;
    let err = match v.get("kind").and_then(Value::as_str) {
        Some("capability") => match v.get("capability").and_then(|c| serde_json::from_value(c.clone()).ok()) {
            Some(capability) => BackendError::Capability {
                capability,
                model_tag: model_tag.to_string(),
            },
            None => BackendError::Protocol(message),
        },
        Some("context_overflow") => BackendError::ContextOverflow {
            prompt_tokens: num("prompt_tokens"),
            max_new_tokens: num("max_new_tokens"),
            context_window: num("context_window"),
        },
        Some("non_finite") => BackendError::NonFinite {
            target: num("target"),
            token: v.get("token").and_then(Value::as_str).unwrap_or_default().to_string(),
        },
        Some("invalid_request") => BackendError::InvalidRequest(message),
        _ if v.get("retryable").and_then(Value::as_bool).unwrap_or(false) => BackendError::Transport(message),
        _ => BackendError::Protocol(message),
    };
    Some(err)
}

/// Moves one request to a backend and brings back its reply.
pub trait Transport: Send {
    fn call(&mut self, request: &Value) -> Result<Value, BackendError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    max_retries: u32,
    backoff: Duration,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &str, timeout_secs: u64, max_retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            max_retries,
            backoff: Duration::from_millis(250),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn once(&self, request: &Value) -> Result<Value, BackendError> {
        let op = request.get("op").and_then(Value::as_str).unwrap_or("unknown");
        let mut req = self.agent.post(format!("{}/{op}", self.endpoint));
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body: Result<Value, _> = resp.body_mut().read_json();
        match body {
            Ok(v) if v.get("error").is_some() => Err(decode_error(&v, "").expect("error field present")),
            Ok(v) if status.is_success() => Ok(v),
            _ if status.is_server_error() || status.as_u16() == 429 => {
                Err(BackendError::Transport(format!("HTTP {status}")))
            }
            Ok(_) => Err(BackendError::Protocol(format!("HTTP {status}"))),
            Err(e) => Err(BackendError::Protocol(format!("HTTP {status}: {e}"))),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&mut self, request: &Value) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            match self.once(request) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    log::warn!(
                        "backend call failed ({e}); retry {} of {}",
                        attempt + 1,
                        self.max_retries
                    );
                    thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// A child process speaking the protocol as JSON lines on stdin and stdout.
pub struct StdioTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioTransport {
    pub fn spawn(command: &[String], base_dir: &Path) -> Result<Self, BackendError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| BackendError::InvalidRequest("empty backend command".into()))?;
        let mut program = PathBuf::from(program);
        if program.is_relative() && program.components().count() > 1 {
            program = base_dir.join(program);
        }
        let mut child = Command::new(&program)
            .args(args)
            .current_dir(base_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("spawn {}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioTransport { child, stdin, stdout })
    }
}

impl Transport for StdioTransport {
    fn call(&mut self, request: &Value) -> Result<Value, BackendError> {
        let line = serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| BackendError::Transport(format!("write to backend: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| BackendError::Transport(format!("read from backend: {e}")))?;
        if n == 0 {
            return Err(BackendError::Transport("backend process closed its output".into()));
        }
        let v: Value = serde_json::from_str(&reply).map_err(|e| BackendError::Protocol(e.to_string()))?;
        match decode_error(&v, "") {
            Some(err) => Err(err),
            None => Ok(v),
        }
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A [`Backend`] that forwards every call over a [`Transport`].
pub struct ProtocolBackend<T: Transport> {
    transport: T,
    model_tag: String,
    capabilities: Capabilities,
}

impl<T: Transport> ProtocolBackend<T> {
    pub fn new(transport: T, model_tag: &str, capabilities: Capabilities) -> Self {
        ProtocolBackend {
            transport,
            model_tag: model_tag.to_string(),
            capabilities,
        }
    }

    fn require(&self, cap: Capability) -> Result<(), BackendError> {
        if self.capabilities.contains(&cap) {
            Ok(())
        } else {
            Err(BackendError::Capability {
                capability: cap,
                model_tag: self.model_tag.clone(),
            })
        }
    }

    fn call(&mut self, request: Value) -> Result<Value, BackendError> {
        self.transport.call(&request).map_err(|e| match e {
            BackendError::Capability { capability, .. } => BackendError::Capability {
                capability,
                model_tag: self.model_tag.clone(),
            },
            other => other,
        })
    }

    fn matrix(
        &mut self,
        request: Value,
        generation: &GenerationResult,
        answer_span: Range<usize>,
        method: AttributionMethod,
    ) -> Result<AttributionMatrix, BackendError> {
        let reply = self.call(request)?;
        let wire: WireMatrix = serde_json::from_value(reply).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let matrix = AttributionMatrix {
            values: wire
                .values
                .iter()
                .map(|r| r.iter().map(|x| x.abs()).collect())
                .collect(),
            rows: context_rows(generation, &answer_span),
            target_span: answer_span,
            method,
            convergence_delta: wire.convergence_delta,
        };
        matrix.validate().map_err(BackendError::Protocol)?;
        Ok(matrix)
    }
}

fn info<T: Transport>(transport: &mut T, model_tag: &str) -> Result<Capabilities, BackendError> {
    let reply = transport.call(&json!({ "op": "info" }))?;
    let info: WireInfo = serde_json::from_value(reply).map_err(|e| BackendError::Protocol(e.to_string()))?;
    if info.model_tag != model_tag {
        log::warn!(
            "backend reports model `{}`, configured as `{model_tag}`",
            info.model_tag
        );
    }
    Ok(info.capabilities.into_iter().collect())
}

impl<T: Transport> Backend for ProtocolBackend<T> {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities.clone()
    }

    fn generate(&mut self, prompt: &str, spec: &DecodingSpec) -> Result<GenerationResult, BackendError> {
        spec.validate()?;
        let reply = self.call(json!({ "op": "generate", "prompt": prompt, "decoding": spec.canonical() }))?;
        let wire: WireGeneration = serde_json::from_value(reply).map_err(|e| BackendError::Protocol(e.to_string()))?;
        generation_from_wire(prompt, wire)
    }

    fn attention_attribution(
        &mut self,
        prompt: &str,
        generation: &GenerationResult,
        answer_span: Range<usize>,
    ) -> Result<AttributionMatrix, BackendError> {
        self.require(Capability::Attention)?;
        check_answer_span(generation, &answer_span)?;
        let request = json!({
            "op": "attention",
            "prompt": prompt,
            "generation": generation_to_wire(prompt, generation),
            "answer_span": [answer_span.start, answer_span.end],
        });
        self.matrix(request, generation, answer_span, AttributionMethod::Attention)
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
        let request = json!({
            "op": "gradients",
            "prompt": prompt,
            "generation": generation_to_wire(prompt, generation),
            "answer_span": [answer_span.start, answer_span.end],
            "steps": steps,
        });
        self.matrix(request, generation, answer_span, AttributionMethod::IntegratedGradients)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.require(Capability::Embed)?;
        let reply = self.call(json!({ "op": "embed", "texts": texts }))?;
        let vectors: Vec<Vec<f64>> = reply
            .get("embeddings")
            .cloned()
            .ok_or_else(|| BackendError::Protocol("missing `embeddings`".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string())))?;
        if vectors.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "{} embeddings for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors
            .into_iter()
            .map(|components| EmbeddingVector {
                components,
                model_tag: self.model_tag.clone(),
            })
            .collect())
    }
}

pub struct RemoteProvider {
    endpoint: String,
    model_tag: String,
    capabilities: Capabilities,
    timeout_secs: u64,
    max_retries: u32,
}

impl RemoteProvider {
    pub fn connect(endpoint: &str, model_tag: &str, timeout_secs: u64, max_retries: u32) -> Result<Self, BackendError> {
        let mut transport = HttpTransport::new(endpoint, timeout_secs, max_retries);
        let capabilities = info(&mut transport, model_tag)?;
        Ok(RemoteProvider {
            endpoint: endpoint.to_string(),
            model_tag: model_tag.to_string(),
            capabilities,
            timeout_secs,
            max_retries,
        })
    }
}

impl BackendProvider for RemoteProvider {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities.clone()
    }

    fn open(&self) -> Result<Box<dyn Backend>, BackendError> {
        let transport = HttpTransport::new(&self.endpoint, self.timeout_secs, self.max_retries);
        Ok(Box::new(ProtocolBackend::new(
            transport,
            &self.model_tag,
            self.capabilities.clone(),
        )))
    }
}

/// Starts one backend process per handle.
pub struct StdioProvider {
    command: Vec<String>,
    base_dir: PathBuf,
    model_tag: String,
    capabilities: Capabilities,
}

impl StdioProvider {
    pub fn spawn(command: Vec<String>, base_dir: &Path, model_tag: &str) -> Result<Self, BackendError> {
        let mut transport = StdioTransport::spawn(&command, base_dir)?;
        let capabilities = info(&mut transport, model_tag)?;
        Ok(StdioProvider {
            command,
            base_dir: base_dir.to_path_buf(),
            model_tag: model_tag.to_string(),
            capabilities,
        })
    }
}

impl BackendProvider for StdioProvider {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities.clone()
    }

    fn open(&self) -> Result<Box<dyn Backend>, BackendError> {
        let transport = StdioTransport::spawn(&self.command, &self.base_dir)?;
        Ok(Box::new(ProtocolBackend::new(
            transport,
            &self.model_tag,
            self.capabilities.clone(),
        )))
    }
}

#[derive(Debug, Deserialize)]
struct AttributionRequest {
    prompt: String,
    generation: WireGeneration,
    answer_span: (usize, usize),
    #[serde(default)]
    steps: Option<usize>,
}

fn dispatch(backend: &mut dyn Backend, request: &Value) -> Result<Value, BackendError> {
    let bad = |e: serde_json::Error| BackendError::InvalidRequest(e.to_string());
    let op = request
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::InvalidRequest("missing `op`".into()))?;
    match op {
        "info" => Ok(json!({ "model_tag": backend.model_tag(), "capabilities": backend.capabilities() })),
        "generate" => {
            #[derive(Deserialize)]
            struct Req {
                prompt: String,
                decoding: DecodingSpec,
            }
            let req: Req = serde_json::from_value(request.clone()).map_err(bad)?;
            let g = backend.generate(&req.prompt, &req.decoding)?;
            Ok(serde_json::to_value(generation_to_wire(&req.prompt, &g)).expect("serializable"))
        }
        "attention" | "gradients" => {
            let req: AttributionRequest = serde_json::from_value(request.clone()).map_err(bad)?;
            let g = generation_from_wire(&req.prompt, req.generation)?;
            let span = req.answer_span.0..req.answer_span.1;
            let m = if op == "attention" {
                backend.attention_attribution(&req.prompt, &g, span)?
            } else {
                let steps = req
                    .steps
                    .ok_or_else(|| BackendError::InvalidRequest("missing `steps`".into()))?;
                backend.gradient_attribution(&req.prompt, &g, span, steps)?
            };
            Ok(json!({ "values": m.values, "convergence_delta": m.convergence_delta }))
        }
        "embed" => {
            #[derive(Deserialize)]
            struct Req {
                texts: Vec<String>,
            }
            let req: Req = serde_json::from_value(request.clone()).map_err(bad)?;
            let out = backend.embed(&req.texts)?;
            Ok(json!({ "embeddings": out.into_iter().map(|e| e.components).collect::<Vec<_>>() }))
        }
        other => Err(BackendError::InvalidRequest(format!("unknown op `{other}`"))),
    }
}

/// Answer one request on behalf of `backend`.
pub fn handle_request(backend: &mut dyn Backend, request: &Value) -> Value {
    dispatch(backend, request).unwrap_or_else(|e| encode_error(&e))
}

/// Serve JSON-line requests from `input` until it closes.
pub fn serve_lines(backend: &mut dyn Backend, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => handle_request(backend, &req),
            Err(e) => encode_error(&BackendError::InvalidRequest(e.to_string())),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

/// In-process transport, mostly for tests.
pub struct Loopback(pub Box<dyn Backend>);

impl Transport for Loopback {
    fn call(&mut self, request: &Value) -> Result<Value, BackendError> {
        let reply = handle_request(self.0.as_mut(), request);
        match decode_error(&reply, "") {
            Some(err) => Err(err),
            None => Ok(reply),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockFixture, MockProvider};
    use crate::backend::toy::ToyConfig;

    fn loopback() -> ProtocolBackend<Loopback> {
        let fixture = MockFixture {
            default_output: Some("Réponse: (B)".into()),
            toy: Some(ToyConfig::default()),
            embedding_dim: Some(16),
            ..Default::default()
        };
        let provider = MockProvider::new("m", fixture, 4096);
        let caps = provider.capabilities();
        ProtocolBackend::new(Loopback(provider.open().unwrap()), "m", caps)
    }

    #[test]
    fn offsets_survive_the_round_trip() {
        let prompt = "naïve café question";
        let mut remote = loopback();
        let mut local = MockProvider::new(
            "m",
            MockFixture {
                default_output: Some("Réponse: (B)".into()),
                ..Default::default()
            },
            4096,
        )
        .backend();
        let a = remote.generate(prompt, &DecodingSpec::greedy(16)).unwrap();
        let b = local.generate(prompt, &DecodingSpec::greedy(16)).unwrap();
        assert_eq!(a, b);
        let w = tokens_to_wire(prompt, &a.prompt_tokens);
        assert_eq!(w[1].start, 5);
    }

    #[test]
    fn attribution_and_embedding_over_the_wire() {
        let mut remote = loopback();
        let prompt = "Pick one option";
        let g = remote.generate(prompt, &DecodingSpec::greedy(16)).unwrap();
        let m = remote.gradient_attribution(prompt, &g, 2..5, 20).unwrap();
        assert_eq!(m.n_cols(), 3);
        assert!(m.convergence_delta.is_some());
        let e = remote.embed(&["a b".into(), "c".into()]).unwrap();
        assert_eq!(e.len(), 2);
    }

    #[test]
    fn errors_keep_their_kind() {
        let errs = [
            BackendError::ContextOverflow {
                prompt_tokens: 5,
                max_new_tokens: 6,
                context_window: 7,
            },
            BackendError::Transport("x".into()),
            BackendError::InvalidRequest("bad".into()),
        ];
        for e in errs {
            let back = decode_error(&encode_error(&e), "m").unwrap();
            assert_eq!(back.is_retryable(), e.is_retryable());
            assert_eq!(std::mem::discriminant(&back), std::mem::discriminant(&e));
        }
    }

    #[test]
    fn serve_lines_answers_each_request() {
        let provider = MockProvider::new(
            "m",
            MockFixture {
                default_output: Some("Answer: (A)".into()),
                ..Default::default()
            },
            4096,
        );
        let mut backend = provider.open().unwrap();
        let input = "{\"op\":\"info\"}\n\nnot json\n";
        let mut out = Vec::new();
        serve_lines(backend.as_mut(), input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["model_tag"], "m");
        assert!(lines[1].get("error").is_some());
    }
}
