use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cxr_instruct::client::{
    self, AnswerRecord, FileExchange, HttpEndpoint, InferenceRequest, RetryPolicy,
};
use cxr_instruct::Error;

fn requests(n: usize) -> Vec<InferenceRequest> {
    (0..n)
        .map(|i| InferenceRequest {
            qa_id: format!("q{i}"),
            image: format!("img{i}.jpg"),
            prompt: format!("<image>\nquestion {i}?"),
        })
        .collect()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(10),
        multiplier: 2,
    }
}

/// What the scripted server does with the k-th request it receives.
#[derive(Clone, Copy)]
enum Reply {
    Status(u16),
    Answer,
    DropOne,
    Garbage,
}

/// Serves scripted replies (the last one repeats) and counts requests.
fn serve(script: Vec<Reply>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/infer", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 {
                    break;
                }
                let l = line.to_ascii_lowercase();
                if let Some(v) = l.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let k = counter.fetch_add(1, Ordering::SeqCst);
            let reply = script[k.min(script.len() - 1)];
            let reqs: Vec<InferenceRequest> = serde_json::from_slice(&body).unwrap();
            let mut answers: Vec<AnswerRecord> = reqs
                .iter()
                .map(|r| AnswerRecord {
                    qa_id: r.qa_id.clone(),
                    answer: format!("echo {}", r.prompt),
                })
                .collect();
            let (status, text) = match reply {
                Reply::Status(s) => (s, "{}".to_string()),
                Reply::Answer => (200, serde_json::to_string(&answers).unwrap()),
                Reply::DropOne => {
                    answers.pop();
                    (200, serde_json::to_string(&answers).unwrap())
                }
                Reply::Garbage => (200, "not json".to_string()),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    (url, hits)
}

#[test]
fn http_round_trip_preserves_order() {
    let (url, hits) = serve(vec![Reply::Answer]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    let preds = client::submit_batch(&requests(5), &ep, &fast_retry(), "r0").unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let ids: Vec<_> = preds.iter().map(|p| p.qa_id.as_str()).collect();
    assert_eq!(ids, ["q0", "q1", "q2", "q3", "q4"]);
    assert_eq!(preds[2].answer_text, "echo <image>\nquestion 2?");
    assert!(preds.iter().all(|p| p.run_id == "r0"));
}

#[test]
fn http_retries_server_errors_then_succeeds() {
    let (url, hits) = serve(vec![Reply::Status(503), Reply::Status(429), Reply::Answer]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    let preds = client::submit_batch(&requests(3), &ep, &fast_retry(), "r").unwrap();
    assert_eq!(preds.len(), 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_gives_up_after_attempts() {
    let (url, hits) = serve(vec![Reply::Status(500)]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    let err = client::submit_batch(&requests(2), &ep, &fast_retry(), "r").unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_client_errors_are_not_retried() {
    let (url, hits) = serve(vec![Reply::Status(400)]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    assert!(client::submit_batch(&requests(2), &ep, &fast_retry(), "r").is_err());
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn http_missing_answer_is_reported() {
    let (url, _) = serve(vec![Reply::DropOne]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    match client::submit_batch(&requests(4), &ep, &fast_retry(), "r") {
        Err(Error::MissingIds(ids)) => assert_eq!(ids, ["q3"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn http_garbage_is_malformed() {
    let (url, hits) = serve(vec![Reply::Garbage]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    let err = client::submit_batch(&requests(1), &ep, &fast_retry(), "r").unwrap_err();
    assert!(matches!(err, Error::MalformedResponse(_)), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn http_unreachable_endpoint_fails_as_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let ep = HttpEndpoint::new(url, Duration::from_secs(2));
    let err = client::submit_batch(&requests(1), &ep, &fast_retry(), "r").unwrap_err();
    assert_eq!(err.kind(), cxr_instruct::ErrorKind::Transport);
}

#[test]
fn sharded_submission_keeps_input_order() {
    let (url, hits) = serve(vec![Reply::Answer]);
    let ep = HttpEndpoint::new(url, Duration::from_secs(10));
    let reqs = requests(23);
    let preds = client::submit_sharded(&reqs, &ep, &fast_retry(), "r", 5, 3).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 5);
    let got: Vec<_> = preds.iter().map(|p| p.qa_id.clone()).collect();
    let want: Vec<_> = reqs.iter().map(|r| r.qa_id.clone()).collect();
    assert_eq!(got, want);
}

/// Answers every request file that appears in `dir`, `limit` times.
fn responder(dir: std::path::PathBuf, skip_first: bool, limit: usize) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut answered = 0;
        let mut k = 0;
        for _ in 0..400 {
            let req = FileExchange::request_path(&dir, k);
            if req.exists() {
                if !(skip_first && k == 0) {
                    let reqs: Vec<InferenceRequest> = std::fs::read_to_string(&req)
                        .unwrap()
                        .lines()
                        .map(|l| serde_json::from_str(l).unwrap())
                        .collect();
                    let mut out = String::new();
                    for r in reqs.iter().rev() {
                        out += &serde_json::to_string(&AnswerRecord {
                            qa_id: r.qa_id.clone(),
                            answer: "yes".into(),
                        })
                        .unwrap();
                        out.push('\n');
                    }
                    let resp = FileExchange::response_path(&dir, k);
                    let tmp = resp.with_extension("part");
                    std::fs::write(&tmp, out).unwrap();
                    std::fs::rename(tmp, resp).unwrap();
                    answered += 1;
                    if answered == limit {
                        return;
                    }
                }
                k += 1;
            }
            thread::sleep(Duration::from_millis(10));
        }
    })
}

#[test]
fn file_exchange_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FileExchange::new(dir.path(), Duration::from_secs(5));
    let h = responder(dir.path().to_path_buf(), false, 1);
    let preds = client::submit_batch(&requests(4), &ex, &fast_retry(), "r").unwrap();
    h.join().unwrap();
    assert_eq!(preds.iter().map(|p| p.qa_id.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2", "q3"]);
    assert!(preds.iter().all(|p| p.answer_text == "yes"));
}

#[test]
fn file_exchange_timeout_is_retried() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FileExchange::new(dir.path(), Duration::from_millis(150));
    let h = responder(dir.path().to_path_buf(), true, 1);
    let preds = client::submit_batch(&requests(2), &ex, &fast_retry(), "r").unwrap();
    h.join().unwrap();
    assert_eq!(preds.len(), 2);
    assert!(FileExchange::request_path(dir.path(), 1).exists());
}

#[test]
fn file_exchange_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let ex = FileExchange::new(dir.path(), Duration::from_millis(30));
    let policy = RetryPolicy {
        attempts: 2,
        initial_backoff: Duration::from_millis(1),
        multiplier: 2,
    };
    let err = client::submit_batch(&requests(1), &ex, &policy, "r").unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
}
