use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use rgbtvg_core::annotation::{
    build_manifest, AnnotationClient, AnnotationRequest, BuildConfig, HttpClient, PromptKind, RawDetectionRecord,
};
use rgbtvg_core::dataset::{Illumination, SceneType, Source, Split, Weather};
use rgbtvg_core::geometry::PixelBox;

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves `n` requests; `reply` maps the prompt text to (status, body).
fn serve(n: usize, reply: fn(&str) -> (u16, String)) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/annotate", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let h = thread::spawn(move || {
        for _ in 0..n {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
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
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let (status, text) = reply(body["prompt"].as_str().unwrap_or(""));
            log.lock().unwrap().push(Seen { auth, body });
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            )
            .unwrap();
        }
    });
    (url, seen, h)
}

#[test]
fn posts_base64_image_and_prompt_with_bearer_token() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    std::fs::write(&img, b"\x89PNG fake bytes").unwrap();
    let (url, seen, h) = serve(1, |_| (200, "2".into()));
    let client = HttpClient::new(url, Some("s3cret".into()), Duration::from_secs(10));
    let req = AnnotationRequest {
        instance_id: "a:car",
        kind: PromptKind::Lighting,
        image: &img,
        prompt: "how bright?",
    };
    assert_eq!(client.send(&req).unwrap(), "2");
    h.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen[0].body["prompt"], "how bright?");
    let decoded = base64::engine::general_purpose::STANDARD
        .decode(seen[0].body["image"].as_str().unwrap())
        .unwrap();
    assert_eq!(decoded, b"\x89PNG fake bytes");
}

#[test]
fn server_errors_and_missing_images_are_client_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    std::fs::write(&img, b"x").unwrap();
    let (url, _, h) = serve(1, |_| (500, "boom".into()));
    let client = HttpClient::new(url.clone(), None, Duration::from_secs(10));
    let mut req = AnnotationRequest {
        instance_id: "a:car",
        kind: PromptKind::Occlusion,
        image: &img,
        prompt: "p",
    };
    let err = client.send(&req).unwrap_err().to_string();
    assert!(err.contains(&url), "{err}");
    h.join().unwrap();
    let missing = dir.path().join("missing.png");
    req.image = &missing;
    assert!(client.send(&req).is_err());
}

#[test]
fn builds_a_manifest_over_http() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("rgb")).unwrap();
    std::fs::write(dir.path().join("rgb/0001.png"), b"img").unwrap();
    let raw = RawDetectionRecord {
        rgb_path: "rgb/0001.png".into(),
        tir_path: "tir/0001.png".into(),
        width: 640,
        height: 512,
        category: "car".into(),
        boxes: vec![PixelBox::new(20.0, 30.0, 200.0, 100.0).unwrap()],
        alignment_offset: None,
        source: Source::RefFlir,
        split: Split::Test,
    };
    // The first scene answer is malformed, so five requests in all.
    static SCENE_CALLS: AtomicUsize = AtomicUsize::new(0);
    let (url, seen, h) = serve(5, |prompt| {
        let body = if prompt.starts_with("Comprehensively analyze the global scene") {
            if SCENE_CALLS.fetch_add(1, Ordering::SeqCst) == 0 {
                "3"
            } else {
                "3 0"
            }
        } else if prompt.starts_with("Analyze the occlusion level") {
            "1"
        } else if prompt.starts_with("You are an expert at analyzing lighting") {
            "0"
        } else {
            "the car near the gate"
        };
        (200, body.into())
    });
    let client = HttpClient::new(url, None, Duration::from_secs(10));
    let (m, stats) = build_manifest(&[raw], &BuildConfig::default(), &client, Some(dir.path())).unwrap();
    h.join().unwrap();
    assert_eq!((m.len(), stats.retries), (1, 1), "{stats:?}");
    let r = &m.records[0];
    assert_eq!(r.scene, SceneType::from_index(3).unwrap());
    assert_eq!(r.weather, Weather::from_index(0).unwrap());
    assert_eq!(r.illumination, Illumination::VeryWeak);
    assert_eq!(r.expression, "the car near the gate");
    assert_eq!(seen.lock().unwrap().len(), 5);
}
