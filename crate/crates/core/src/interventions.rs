//! Intervention generation through an external chat-completion model.
//!
//! The model is asked for numbered edits of one input text, each inserting a
//! single bracketed adjective or adverb. Edits are kept only when removing the
//! bracketed word gives back the original text.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datasets::{check_one_word_diff, Instance, Intervention, Task, MAX_INTERVENTIONS};
use crate::prompts::intervention_template;

#[derive(Debug, thiserror::Error)]
pub enum InterventionError {
    #[error("cannot build an intervention prompt for an empty sentence")]
    EmptySentence,
    #[error("edit count must be 10 or 20, got {0}")]
    BadCount(usize),
    #[error("no usable edits in model output {raw:?}")]
    NoEdits { raw: String },
    #[error("chat client: {message}")]
    Client { message: String, retryable: bool },
    #[error("chat client is not configured: {0}")]
    Unavailable(String),
}

pub fn build_intervention_prompt(sentence: &str, count: usize) -> Result<String, InterventionError> {
    if sentence.trim().is_empty() {
        return Err(InterventionError::EmptySentence);
    }
    if count != 10 && count != 20 {
        return Err(InterventionError::BadCount(count));
    }
    let vars = BTreeMap::from([
        ("count".to_string(), count.to_string()),
        ("sentence".to_string(), sentence.to_string()),
    ]);
    Ok(intervention_template()
        .render(&vars)
        .expect("intervention template uses count and sentence")
        .text)
}

/// One numbered output line that was not accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedEdit {
    pub line: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedEdits {
    /// Accepted `(inserted_word, edited_text)` pairs in output order.
    pub accepted: Vec<(String, String)>,
    pub rejected: Vec<RejectedEdit>,
    pub duplicates: usize,
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[.)]\s*(.+?)\s*$").expect("valid regex"))
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("valid regex"))
}

fn parse_line(body: &str, original: &str) -> Result<(String, String), String> {
    let brackets: Vec<_> = bracket_re().captures_iter(body).collect();
    if brackets.len() != 1 {
        return Err(format!("expected one bracketed word, found {}", brackets.len()));
    }
    let word = brackets[0][1].trim().to_string();
    if word.is_empty() || word.split_whitespace().count() != 1 {
        return Err(format!("bracket holds `{word}`, not a single word"));
    }
    let m = brackets[0].get(0).expect("match");
    let edited = format!("{}{}{}", &body[..m.start()], &brackets[0][1], &body[m.end()..]);
    if edited.contains('[') || edited.contains(']') {
        return Err("unbalanced brackets".into());
    }
    let candidate = Intervention {
        instance_id: String::new(),
        slot: String::new(),
        inserted_word: word.clone(),
        edited_text: edited.clone(),
        index: 1,
    };
    check_one_word_diff(original, &candidate)?;
    Ok((word, edited))
}

/// Parse numbered edit lines of `raw` against `original`.
pub fn parse_edits(raw: &str, original: &str) -> Result<ParsedEdits, InterventionError> {
    let mut out = ParsedEdits::default();
    let mut seen = HashSet::new();
    for line in raw.lines() {
        let Some(c) = numbered_re().captures(line) else {
            continue;
        };
        match parse_line(&c[1], original) {
            Ok((word, edited)) => {
                if seen.insert(edited.clone()) {
                    out.accepted.push((word, edited));
                } else {
                    out.duplicates += 1;
                }
            }
            Err(reason) => out.rejected.push(RejectedEdit {
                line: line.trim().to_string(),
                reason,
            }),
        }
    }
    if out.accepted.is_empty() {
        return Err(InterventionError::NoEdits { raw: raw.to_string() });
    }
    Ok(out)
}

/// Requests per task: one per slot, with the number of edits to ask for.
pub fn request_plan(task: Task) -> Vec<(&'static str, usize)> {
    match task {
        Task::Ecqa => vec![("question", 20)],
        Task::Comve | Task::Esnli => task.slot_names().iter().map(|s| (*s, 10)).collect(),
    }
}

/// A chat-completion endpoint.
pub trait ChatClient: Send {
    fn tag(&self) -> &str;
    fn complete(&mut self, prompt: &str) -> Result<String, InterventionError>;
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

/// An OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: Option<f64>,
}

pub struct HttpChatClient {
    config: ClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    backoff: Duration,
}

impl HttpChatClient {
    pub fn new(config: ClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        HttpChatClient {
            config,
            agent,
            api_key,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn once(&self, prompt: &str) -> Result<String, InterventionError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| InterventionError::Client {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(InterventionError::Client {
                message: format!("HTTP {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let v: Value = resp.body_mut().read_json().map_err(|e| InterventionError::Client {
            message: e.to_string(),
            retryable: false,
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| InterventionError::Client {
                message: "response lacks choices[0].message.content".into(),
                retryable: false,
            })
    }
}

impl ChatClient for HttpChatClient {
    fn tag(&self) -> &str {
        &self.config.model
    }

    fn complete(&mut self, prompt: &str) -> Result<String, InterventionError> {
        let mut attempt = 0;
        loop {
            match self.once(prompt) {
                Err(InterventionError::Client {
                    retryable: true,
                    message,
                }) if attempt < self.config.max_retries => {
                    log::warn!("chat request failed ({message}); retry {}", attempt + 1);
                    thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Validated interventions for one instance and what fell short.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Generated {
    pub interventions: Vec<Intervention>,
    pub rejected: Vec<RejectedEdit>,
    pub duplicates: usize,
    /// Edits requested but not delivered.
    pub shortfall: usize,
}

/// Request, parse and validate interventions for every slot of `instance`.
pub fn generate_interventions(
    instance: &Instance,
    client: &mut dyn ChatClient,
) -> Result<Generated, InterventionError> {
    let mut out = Generated::default();
    let mut index = 0u32;
    for (slot, count) in request_plan(instance.task) {
        let original = instance
            .slot(slot)
            .ok_or_else(|| InterventionError::Unavailable(format!("instance lacks slot `{slot}`")))?;
        let prompt = build_intervention_prompt(original, count)?;
        let raw = client.complete(&prompt)?;
        let parsed = match parse_edits(&raw, original) {
            Ok(p) => p,
            Err(InterventionError::NoEdits { .. }) => ParsedEdits::default(),
            Err(e) => return Err(e),
        };
        out.rejected.extend(parsed.rejected);
        out.duplicates += parsed.duplicates;
        let mut kept = 0;
        for (word, edited) in parsed.accepted.into_iter().take(count) {
            if out.interventions.len() >= MAX_INTERVENTIONS {
                break;
            }
            index += 1;
            let iv = Intervention {
                instance_id: instance.id.clone(),
                slot: slot.to_string(),
                inserted_word: word,
                edited_text: edited,
                index,
            };
            // second check against the instance itself
            check_one_word_diff(original, &iv).map_err(InterventionError::Unavailable)?;
            out.interventions.push(iv);
            kept += 1;
        }
        out.shortfall += count.saturating_sub(kept);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    struct Scripted(Vec<String>);

    impl ChatClient for Scripted {
        fn tag(&self) -> &str {
            "scripted"
        }
        fn complete(&mut self, _prompt: &str) -> Result<String, InterventionError> {
            Ok(self.0.remove(0))
        }
    }

    #[test]
    fn prompt_numbering() {
        let p = build_intervention_prompt("The leafs are useless.", 10).unwrap();
        assert!(p.contains("- Generate 10 different edits.\n"));
        assert!(p.ends_with("...\n10. [Edited Sentence]\n\nSentence:\nThe leafs are useless."));
        let p = build_intervention_prompt("x", 20).unwrap();
        assert!(p.contains("\n20. [Edited Sentence]\n"));
        assert!(build_intervention_prompt("  ", 10).is_err());
        assert!(build_intervention_prompt("x", 5).is_err());
    }

    #[test]
    fn edit_parsing() {
        let original = "The leafs are useless.";
        let raw = "1. The [fallen] leafs are useless.\n\
                   2. The [green] [dry] leafs are useless.\n\
                   3. The leaves are [truly] useless.\n\
                   4. The [fallen] leafs are useless.\n\
                   5. The leafs are [very useless].\n\
                   Some chatter";
        let p = parse_edits(raw, original).unwrap();
        assert_eq!(
            p.accepted,
            vec![("fallen".to_string(), "The fallen leafs are useless.".to_string())]
        );
        assert_eq!(p.rejected.len(), 3);
        assert_eq!(p.duplicates, 1);
        assert!(parse_edits("no numbered lines", original).is_err());
    }

    #[test]
    fn slots_and_counts() {
        let mut slots = IndexMap::new();
        slots.insert("premise".to_string(), "A man rides a bike.".to_string());
        slots.insert("hypothesis".to_string(), "A man sits.".to_string());
        let inst = Instance {
            id: "e1".into(),
            task: Task::Esnli,
            slots,
            options: vec![],
            gold: "A".into(),
        };
        let mut client = Scripted(vec![
            "1. A [tall] man rides a bike.\n2. A man rides a [red] bike.".into(),
            "1. A man [quietly] sits.".into(),
        ]);
        let g = generate_interventions(&inst, &mut client).unwrap();
        let idx: Vec<(u32, &str)> = g.interventions.iter().map(|i| (i.index, i.slot.as_str())).collect();
        assert_eq!(idx, [(1, "premise"), (2, "premise"), (3, "hypothesis")]);
        assert_eq!(g.shortfall, 8 + 9);
        assert_eq!(request_plan(Task::Ecqa), [("question", 20)]);
    }
}
