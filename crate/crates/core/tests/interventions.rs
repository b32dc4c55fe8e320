use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::{json, Value};

use srnle::datasets::{Instance, Task};
use srnle::interventions::{generate_interventions, ChatClient, ClientConfig, HttpChatClient, InterventionError};

/// Serves `statuses` in order (the last one repeats), answering 200s with
/// `reply(request body)`. Returns the endpoint and a request counter.
fn serve(statuses: Vec<u16>, reply: fn(&Value) -> String) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let seen = Arc::clone(&count);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut path = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if path.is_empty() {
                    path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let n = seen.fetch_add(1, Ordering::SeqCst);
            let status = statuses[n.min(statuses.len() - 1)];
            let payload = if path != "/v1/chat/completions" {
                "{}".to_string()
            } else if status == 200 {
                let request: Value = serde_json::from_slice(&body).unwrap();
                json!({"choices": [{"message": {"role": "assistant", "content": reply(&request)}}]}).to_string()
            } else {
                "{\"error\": \"busy\"}".to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (format!("http://{addr}/v1"), count)
}

fn edits(request: &Value) -> String {
    let prompt = request["messages"][0]["content"].as_str().unwrap();
    if prompt.ends_with("The leafs are useless.") {
        "1. The [fallen] leafs are useless.\n2. The leafs are [truly] useless.\n3. The leafs are [truly] useless."
            .into()
    } else {
        "Here you go:\n1. Leaves turn brown in [late] autumn.\n2) Leaves [slowly] turn brown in autumn.\n3. Leaves turn [dark brown] in autumn.".into()
    }
}

fn client(endpoint: String, max_retries: u32) -> HttpChatClient {
    HttpChatClient::new(ClientConfig {
        endpoint,
        model: "editor".into(),
        api_key_env: "SRNLE_TEST_UNSET_KEY".into(),
        timeout_secs: 5,
        max_retries,
        temperature: None,
    })
    .with_backoff(Duration::from_millis(1))
}

fn instance() -> Instance {
    Instance {
        id: "s01".into(),
        task: Task::Comve,
        slots: IndexMap::from([
            ("sentence0".to_string(), "The leafs are useless.".to_string()),
            ("sentence1".to_string(), "Leaves turn brown in autumn.".to_string()),
        ]),
        options: vec![("A".into(), "Sentence 0".into()), ("B".into(), "Sentence 1".into())],
        gold: "A".into(),
    }
}

#[test]
fn server_errors_are_retried() {
    let (endpoint, count) = serve(vec![503, 200], edits);
    let mut c = client(endpoint, 3);
    let generated = generate_interventions(&instance(), &mut c).unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 3);
    let got: Vec<(&str, &str, u32)> = generated
        .interventions
        .iter()
        .map(|iv| (iv.slot.as_str(), iv.inserted_word.as_str(), iv.index))
        .collect();
    assert_eq!(
        got,
        vec![
            ("sentence0", "fallen", 1),
            ("sentence0", "truly", 2),
            ("sentence1", "late", 3),
            ("sentence1", "slowly", 4),
        ]
    );
    assert_eq!(generated.duplicates, 1);
    assert_eq!(generated.rejected.len(), 1);
    assert_eq!(generated.shortfall, 20 - 4);
}

#[test]
fn retries_are_bounded() {
    let (endpoint, count) = serve(vec![503], edits);
    let mut c = client(endpoint, 2);
    let err = c.complete("x").unwrap_err();
    assert!(
        matches!(err, InterventionError::Client { retryable: true, .. }),
        "{err}"
    );
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, count) = serve(vec![400], edits);
    let mut c = client(endpoint, 3);
    let err = c.complete("x").unwrap_err();
    assert!(
        matches!(err, InterventionError::Client { retryable: false, .. }),
        "{err}"
    );
    assert_eq!(count.load(Ordering::SeqCst), 1);
}
