//! HTTP caption backend against a throwaway local server.
#![cfg(feature = "service")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use vidclip::captionkit::{CaptionBackend, ServiceBackend};
use vidclip::Error;

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and hands back each request body it saw.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap_or((line, ""));
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = v.trim().to_string(),
                    _ => {}
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            tx.send((String::from_utf8(req).unwrap(), auth)).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn reads_the_first_choice_and_sends_both_messages() {
    let (url, seen) = serve(vec![(200, reply("a ring moving upward."))]);
    let backend = ServiceBackend::new(url, "small-model").with_token(Some("secret".into()));
    assert_eq!(backend.complete("SYS", "USER").unwrap(), "a ring moving upward.");
    let (body, auth) = seen.recv().unwrap();
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["model"], "small-model");
    assert_eq!(v["messages"][0]["role"], "system");
    assert_eq!(v["messages"][0]["content"], "SYS");
    assert_eq!(v["messages"][1]["content"], "USER");
    assert_eq!(auth, "Bearer secret");
}

#[test]
fn retries_transient_failures() {
    let (url, _seen) = serve(vec![(503, "{}".into()), (200, "not json".into()), (200, reply("ok"))]);
    let backend = ServiceBackend::new(url, "m").with_retry(3, Duration::from_millis(1));
    assert_eq!(backend.complete("s", "u").unwrap(), "ok");
}

#[test]
fn gives_up_after_the_last_attempt() {
    let (url, _seen) = serve(vec![(500, "{}".into()), (500, "{}".into()), (200, "{\"choices\": []}".into())]);
    let backend = ServiceBackend::new(url, "m").with_retry(3, Duration::from_millis(1));
    match backend.complete("s", "u") {
        Err(Error::BackendUnavailable { attempts, detail }) => {
            assert_eq!(attempts, 3);
            assert!(detail.contains("choices"), "{detail}");
        }
        other => panic!("expected BackendUnavailable, got {other:?}"),
    }
}
