//! The HTTP client against a scripted local endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use anyecg_llm::{complete_all, ChatClient, ChatRequest, ClientConfig, HttpChatClient, LlmError};

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one scripted `(status, body)` per connection, recording requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(endpoint: String) -> ClientConfig {
    ClientConfig {
        endpoint,
        model: "judge-model".into(),
        api_key_env: None,
        backoff_ms: 1,
        ..ClientConfig::default()
    }
}

#[test]
fn sends_openai_style_body_and_retries_rate_limits() {
    let (url, seen) = serve(vec![(429, "slow down".into()), (500, "oops".into()), (200, completion("4"))]);
    std::env::set_var("ANYECG_HTTP_TEST_TOKEN", "sekret");
    let client = HttpChatClient::new(ClientConfig {
        api_key_env: Some("ANYECG_HTTP_TEST_TOKEN".into()),
        ..config(url)
    })
    .unwrap();
    let req = ChatRequest::user("score this").with_temperature(0.0).with_seed(Some(11));
    assert_eq!(client.complete(&req).unwrap(), "4");
    assert_eq!(client.model_tag(), "judge-model");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let last = &seen[2];
    assert_eq!(last.auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(last.body["model"], "judge-model");
    assert_eq!(last.body["messages"][0]["role"], "user");
    assert_eq!(last.body["messages"][0]["content"], "score this");
    assert_eq!(last.body["seed"], 11);
    assert_eq!(last.body["temperature"], 0.0);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad request".into())]);
    let client = HttpChatClient::new(config(url)).unwrap();
    let err = client.complete(&ChatRequest::user("x")).unwrap_err();
    assert!(matches!(err, LlmError::Status { status: 400, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retry_budget_is_bounded() {
    let (url, seen) = serve(vec![(503, String::new()); 3]);
    let client = HttpChatClient::new(ClientConfig {
        max_retries: 2,
        ..config(url)
    })
    .unwrap();
    assert!(matches!(
        client.complete(&ChatRequest::user("x")),
        Err(LlmError::Exhausted { attempts: 3, .. })
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn batches_keep_request_order() {
    let (url, _) = serve((0..4).map(|i| (200, completion(&format!("r{i}")))).collect());
    let client = HttpChatClient::new(config(url)).unwrap();
    let reqs: Vec<ChatRequest> = (0..4).map(|i| ChatRequest::user(format!("q{i}"))).collect();
    let out: Vec<String> = complete_all(&client, &reqs, 1).into_iter().map(Result::unwrap).collect();
    assert_eq!(out, vec!["r0", "r1", "r2", "r3"]);
}
