//! The OpenAI-compatible client against a local one-shot HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use memgym_core::backend::live::{LiveBackend, LiveConfig};
use memgym_core::backend::{
    complete_with_retry, BackendError, ChatBackend, ChatRequest, EmbeddingBackend, RetryPolicy,
};
use memgym_core::model::Message;
use serde_json::{json, Value};

struct Captured {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and reports
/// what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut length, mut authorization) = (0, None);
            loop {
                let mut header = String::new();
                reader.read_line(&mut header).unwrap();
                let header = header.trim_end();
                if header.is_empty() {
                    break;
                }
                let (name, value) = header.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Captured {
                path,
                authorization,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn backend(url: &str, key: Option<&str>) -> LiveBackend {
    LiveBackend::new(LiveConfig {
        base_url: url.to_string(),
        api_key: key.map(String::from),
        embed_dim: 3,
        timeout_s: 10,
        ..LiveConfig::default()
    })
    .unwrap()
}

fn chat_reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn chat_request_shape_and_reply() {
    let (url, rx) = serve(vec![(200, chat_reply("hello there"))]);
    let b = backend(&url, Some("sk-test"));
    let req = ChatRequest::new("t", vec![Message::system("be brief"), Message::user("hi")]);
    assert_eq!(b.complete(&req).unwrap(), "hello there");
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/v1/chat/completions");
    assert_eq!(seen.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen.body["model"], "gpt-4.1-mini");
    assert_eq!(
        seen.body["messages"][0],
        json!({"role": "system", "content": "be brief"})
    );
    assert_eq!(seen.body["messages"][1], json!({"role": "user", "content": "hi"}));
}

#[test]
fn rate_limit_is_retried() {
    let (url, _rx) = serve(vec![(429, "{}".into()), (200, chat_reply("ok"))]);
    let b = backend(&url, None);
    let done = complete_with_retry(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(3)).unwrap();
    assert_eq!((done.text.as_str(), done.attempts), ("ok", 2));
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, _rx) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let b = backend(&url, Some("wrong"));
    let err = complete_with_retry(&b, &ChatRequest::user("t", "hi"), &RetryPolicy::immediate(3)).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 401, .. }), "{err:?}");
}

#[test]
fn missing_content_is_malformed() {
    let (url, _rx) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let err = backend(&url, None).complete(&ChatRequest::user("t", "hi")).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err:?}");
}

#[test]
fn embeddings_are_reordered_by_index() {
    let reply = json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0, 0.0]},
        {"index": 0, "embedding": [1.0, 0.0, 0.0]},
    ]});
    let (url, rx) = serve(vec![(200, reply.to_string())]);
    let b = backend(&url, None);
    let out = b.embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/v1/embeddings");
    assert_eq!(seen.body["input"], json!(["a", "b"]));
}

#[test]
fn wrong_embedding_dimension_is_malformed() {
    let reply = json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]});
    let (url, _rx) = serve(vec![(200, reply.to_string())]);
    let err = backend(&url, None).embed(&["a".into()]).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err:?}");
}
