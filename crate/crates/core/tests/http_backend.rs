//! The HTTP client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use evolve_core::backend::{
    Backend, BackendConfig, BackendError, ChatMessage, GenerationParams, HttpBackend,
};
use evolve_core::{ModelRef, ModelRole};
use serde_json::{json, Value};

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves one scripted `(status, body)` per connection, in order.
fn stub(responses: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&requests);
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_owned();
            seen.lock()
                .unwrap()
                .push((path, serde_json::from_slice(&payload).unwrap_or(Value::Null)));
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Stub { url, requests }
}

fn config() -> BackendConfig {
    BackendConfig {
        backoff_initial_ms: 5,
        max_attempts: 3,
        timeout_seconds: 10,
        ..BackendConfig::default()
    }
}

fn chat_body(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn generator() -> ModelRef {
    ModelRef::new("http://unused", "gen", ModelRole::Generator)
}

#[test]
fn rate_limit_is_retried_then_succeeds() {
    let s = stub(vec![
        (429, "{\"error\":\"slow down\"}".into()),
        (200, chat_body("Restart the fan controller.")),
    ]);
    let backend = HttpBackend::new(&s.url, &config());
    let params = GenerationParams {
        seed: Some(3),
        ..GenerationParams::default()
    };
    let out = backend
        .generate(&generator(), &[ChatMessage::user("q?")], &params)
        .unwrap();
    assert_eq!(out, "Restart the fan controller.");
    let requests = s.requests.lock().unwrap();
    assert_eq!(requests.len(), 2);
    assert_eq!(requests[1].0, "/v1/chat/completions");
    assert_eq!(requests[1].1["model"], "gen");
    assert_eq!(requests[1].1["seed"], 3);
    assert_eq!(requests[1].1["messages"][0]["content"], "q?");
}

#[test]
fn retries_are_bounded() {
    let s = stub(vec![(503, "{}".into()); 3]);
    let backend = HttpBackend::new(&s.url, &config());
    let err = backend
        .generate(&generator(), &[ChatMessage::user("q?")], &GenerationParams::default())
        .unwrap_err();
    assert_eq!(
        err,
        BackendError::Status {
            status: 503,
            attempts: 3,
            body: "{}".into()
        }
    );
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![(400, "{\"error\":\"bad\"}".into()), (200, chat_body("late"))]);
    let backend = HttpBackend::new(&s.url, &config());
    let err = backend
        .generate(&generator(), &[ChatMessage::user("q?")], &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, attempts: 1, .. }), "{err}");
}

#[test]
fn echo_scoring_keeps_continuation_tokens() {
    let context = "Question: q\nAnswer:\n";
    let body = json!({"choices": [{"logprobs": {
        "tokens": ["Question", ":", " q", "\n", "Answer", ":", "\n", "Re", "start"],
        "token_logprobs": [null, -0.5, -1.0, -0.1, -0.2, -0.1, -0.3, -1.5, -0.25],
        "text_offset": [0, 8, 9, 11, 12, 18, 19, 20, 22]
    }}]});
    let s = stub(vec![(200, body.to_string())]);
    let backend = HttpBackend::new(&format!("{}/v1", s.url), &config());
    let scorer = ModelRef::new(&s.url, "scorer", ModelRole::Scorer);
    let scored = backend.score_continuation(&scorer, context, "Restart").unwrap();
    assert_eq!(scored.logprobs(), vec![-1.5, -0.25]);
    let requests = s.requests.lock().unwrap();
    let (path, req) = &requests[0];
    assert_eq!(path, "/v1/completions");
    assert_eq!(req["prompt"], format!("{context}Restart"));
    assert_eq!(req["echo"], true);
    assert_eq!(req["logprobs"], 1);
    assert_eq!(req["max_tokens"], 0);
}

#[test]
fn missing_logprobs_is_reported() {
    let s = stub(vec![(200, json!({"choices": [{"text": ""}]}).to_string())]);
    let backend = HttpBackend::new(&s.url, &config());
    let scorer = ModelRef::new(&s.url, "scorer", ModelRole::Scorer);
    let err = backend.score_continuation(&scorer, "", "text").unwrap_err();
    assert!(matches!(err, BackendError::LogprobsUnsupported(_)), "{err}");
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}"), &config());
    let err = backend
        .generate(&generator(), &[ChatMessage::user("q?")], &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err}");
}
