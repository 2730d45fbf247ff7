use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use iap::gateway::{CacheStore, CompletionRequest, Gateway, GatewayError, OpenAiBackend, RetryPolicy};
use serde_json::{json, Value};

struct Canned {
    status: u16,
    headers: Vec<(&'static str, String)>,
    body: String,
}

fn ok(text: &str, finish: &str) -> Canned {
    Canned {
        status: 200,
        headers: vec![],
        body: json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish}]})
            .to_string(),
    }
}

fn status(code: u16, headers: Vec<(&'static str, String)>) -> Canned {
    Canned {
        status: code,
        headers,
        body: json!({"error": {"message": "nope"}}).to_string(),
    }
}

struct Seen {
    auth: Option<String>,
    path: String,
    body: Value,
}

/// Serves the canned responses in order, one per connection.
fn serve(responses: Vec<Canned>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for canned in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                path,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut out = stream;
            let mut head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                canned.status,
                canned.body.len()
            );
            for (k, v) in &canned.headers {
                head.push_str(&format!("{k}: {v}\r\n"));
            }
            head.push_str("\r\n");
            out.write_all(head.as_bytes()).unwrap();
            out.write_all(canned.body.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn gateway(endpoint: &str, sleeps: Arc<Mutex<Vec<Duration>>>) -> Gateway {
    let backend = OpenAiBackend::new(endpoint, "sk-test", Duration::from_secs(5));
    Gateway::new(Arc::new(backend), CacheStore::in_memory())
        .with_retry(RetryPolicy {
            jitter: false,
            ..RetryPolicy::default()
        })
        .with_sleeper(move |d| sleeps.lock().unwrap().push(d))
}

#[test]
fn successful_completion_round_trip() {
    let (endpoint, seen) = serve(vec![ok("No", "stop")]);
    let gw = gateway(&endpoint, Default::default());
    let mut req = CompletionRequest::user("gpt-4-1106-preview", "Is this manipulative?");
    req.temperature = 0.0;
    let c = gw.complete(&req).unwrap();
    assert_eq!(c.text, "No");
    assert!(!c.from_cache);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "gpt-4-1106-preview");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["messages"][0]["role"], "user");
    assert_eq!(seen[0].body["messages"][0]["content"], "Is this manipulative?");
    drop(seen);
    // Second identical request is served from the cache.
    assert!(gw.complete(&req).unwrap().from_cache);
    assert_eq!(gw.backend_calls(), 1);
}

#[test]
fn unauthorized_is_fatal_without_retry() {
    let (endpoint, seen) = serve(vec![status(401, vec![]), ok("Yes", "stop")]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let gw = gateway(&endpoint, sleeps.clone());
    let err = gw.complete(&CompletionRequest::user("m", "p")).unwrap_err();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(sleeps.lock().unwrap().is_empty());
}

#[test]
fn rate_limit_honors_retry_after() {
    let (endpoint, seen) = serve(vec![
        status(429, vec![("Retry-After", "7".into())]),
        ok("Yes", "stop"),
    ]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let gw = gateway(&endpoint, sleeps.clone());
    assert_eq!(gw.complete(&CompletionRequest::user("m", "p")).unwrap().text, "Yes");
    assert_eq!(seen.lock().unwrap().len(), 2);
    let sleeps = sleeps.lock().unwrap();
    assert_eq!(sleeps.len(), 1);
    assert!(sleeps[0] >= Duration::from_secs(7), "{sleeps:?}");
}

#[test]
fn server_errors_retry_then_give_up() {
    let (endpoint, seen) = serve(vec![
        status(500, vec![]),
        status(503, vec![]),
        status(502, vec![]),
    ]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let gw = gateway(&endpoint, sleeps.clone());
    let err = gw.complete(&CompletionRequest::user("m", "p")).unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(*sleeps.lock().unwrap(), [Duration::from_secs(1), Duration::from_secs(2)]);
}

#[test]
fn non_stop_finish_reason_is_a_refusal() {
    let (endpoint, _) = serve(vec![ok("I can't help with", "content_filter")]);
    let gw = gateway(&endpoint, Default::default());
    let err = gw.complete(&CompletionRequest::user("m", "p")).unwrap_err();
    assert!(
        matches!(&err, GatewayError::BackendRefusal { finish_reason, .. } if finish_reason == "content_filter"),
        "{err:?}"
    );
    assert!(gw.cache().is_empty());
}
