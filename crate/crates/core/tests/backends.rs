//! Backend adapters against a local mock service, and latency wrappers.

use std::sync::Arc;
use std::time::Duration;

use frameoracle::backends::{
    BackendSuite, LatencyInjected, PlantedAgent, PlantedConfig, PlantedQa, PlantedWorld, QaOracle,
};
use frameoracle::pipeline::{build_dataset, MiningConfig, PromptTemplates};
use frameoracle::types::TaskRecord;
use frameoracle::Exec;

#[test]
fn injected_latency_does_not_change_mining_output() {
    let world = Arc::new(PlantedWorld::generate(PlantedConfig::mining(4, 8)).unwrap());
    let corpus: Vec<TaskRecord> = (0..8).map(|id| world.task_record(id).unwrap()).collect();
    let fast = BackendSuite::planted(world.clone(), 2);
    let mut slow = fast.clone();
    let delay = Duration::from_millis(2);
    slow.agent = Some(Arc::new(LatencyInjected::new(PlantedAgent::new(world.clone()), delay)));
    slow.verifiers = (0..2)
        .map(|i| {
            Arc::new(LatencyInjected::new(
                PlantedQa::new(world.clone(), format!("verifier-{i}")),
                delay,
            )) as Arc<dyn QaOracle>
        })
        .collect();
    let run = |suite: &BackendSuite| {
        build_dataset(
            &corpus,
            suite,
            &PromptTemplates::default(),
            &MiningConfig::default(),
            Exec::Parallel,
        )
        .unwrap()
    };
    let a = run(&fast);
    let b = run(&slow);
    assert_eq!(a.examples, b.examples);
    assert_eq!(a.logs, b.logs);
}

#[cfg(feature = "http")]
mod http {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Duration;

    use frameoracle::backends::{BackendError, HttpQaOracle, QaOracle, QaRequest};

    /// Serves one canned `(status line, extra headers, body)` per connection, in
    /// order, and records every request body it receives.
    fn mock_server(replies: Vec<(&'static str, &'static str, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/answer", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (status, headers, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{headers}\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn request(frames: Vec<usize>) -> QaRequest {
        QaRequest {
            id: 7,
            video: "clip.mp4".into(),
            question: "what is on the table?".into(),
            frames,
        }
    }

    #[test]
    fn http_oracle_maps_statuses() {
        let (url, seen) = mock_server(vec![
            ("200 OK", "", r#"{"answer": "a red kettle"}"#),
            ("429 Too Many Requests", "Retry-After: 3\r\n", ""),
            ("503 Service Unavailable", "", ""),
            ("404 Not Found", "", ""),
            ("200 OK", "", r#"{"reply": "wrong shape"}"#),
        ]);
        let oracle = HttpQaOracle::new("remote", url, Duration::from_secs(5));

        assert_eq!(oracle.answer(&request(vec![1, 4])).unwrap(), "a red kettle");
        let sent: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["frames"], serde_json::json!([1, 4]));
        assert_eq!(sent["question"], "what is on the table?");

        let e = oracle.answer(&request(vec![0])).unwrap_err();
        assert_eq!(e, BackendError::RateLimited { retry_after_ms: 3000 });
        assert!(e.is_retryable());

        let e = oracle.answer(&request(vec![0])).unwrap_err();
        assert!(
            matches!(
                e,
                BackendError::Transport {
                    retry_after_ms: None,
                    ..
                }
            ),
            "{e:?}"
        );

        assert!(matches!(
            oracle.answer(&request(vec![0])).unwrap_err(),
            BackendError::Protocol(_)
        ));
        assert!(matches!(
            oracle.answer(&request(vec![0])).unwrap_err(),
            BackendError::Protocol(_)
        ));
    }

    #[test]
    fn http_oracle_rejects_empty_frames_without_calling_out() {
        let oracle = HttpQaOracle::new("remote", "http://127.0.0.1:9/unused", Duration::from_millis(200));
        assert!(matches!(
            oracle.answer(&request(vec![])).unwrap_err(),
            BackendError::Precondition(_)
        ));
    }

    #[test]
    fn unreachable_service_is_a_retryable_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let oracle = HttpQaOracle::new(
            "remote",
            format!("http://127.0.0.1:{port}/"),
            Duration::from_millis(500),
        );
        let e = oracle.answer(&request(vec![2])).unwrap_err();
        assert!(e.is_retryable(), "{e:?}");
    }
}
