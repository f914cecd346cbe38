use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_lerf");

struct Setup {
    _dir: tempfile::TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn lerf(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small fixture and a briefly trained checkpoint shared by every test.
fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("fixture");
        let o = lerf(&["make-fixture", "--out", s(&data), "--width", "64", "--height", "48", "--train-views", "6"]);
        assert!(o.status.success(), "make-fixture failed: {}", stderr(&o));
        let checkpoint = dir.path().join("model.ckpt");
        let o = lerf(&[
            "--config",
            s(&data.join("config.toml")),
            "train",
            "--data",
            s(&data),
            "--embeddings",
            s(&data.join("embeddings.lerf")),
            "--out",
            s(&checkpoint),
            "--max-steps",
            "150",
            "--rays-per-step",
            "128",
        ]);
        assert!(o.status.success(), "train failed: {}", stderr(&o));
        Setup {
            _dir: dir,
            data,
            checkpoint,
        }
    })
}

fn text_table(data: &Path) -> BTreeMap<String, Vec<f64>> {
    serde_json::from_str(&std::fs::read_to_string(data.join("text_embeddings.json")).unwrap()).unwrap()
}

/// Serves `POST /embed` from a fixed table on a background thread.
fn mock_provider(table: BTreeMap<String, Vec<f64>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let texts: Vec<String> = serde_json::from_value(req["texts"].clone()).unwrap_or_default();
            let (status, reply) = if request_line.starts_with("POST /embed ") && texts.iter().all(|t| table.contains_key(t)) {
                let e: Vec<&Vec<f64>> = texts.iter().map(|t| &table[t]).collect();
                ("200 OK", json!({ "embeddings": e }))
            } else {
                ("400 Bad Request", json!({ "error": "unknown text" }))
            };
            let payload = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    format!("http://{addr}")
}

fn query_args<'a>(st: &'a Setup, out_dir: &'a Path, view: &'a str) -> Vec<&'a str> {
    vec![
        "query",
        "--checkpoint",
        s(&st.checkpoint),
        "--data",
        s(&st.data),
        "--view",
        view,
        "--out-dir",
        s(out_dir),
        "--no-visibility",
    ]
}

#[test]
fn train_logs_one_row_per_step() {
    let st = setup();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let csv = dir.path().join("loss.csv");
    let o = lerf(&[
        "train",
        "--data",
        s(&st.data),
        "--embeddings",
        s(&st.data.join("embeddings.lerf")),
        "--out",
        s(&out),
        "--loss-csv",
        s(&csv),
        "--max-steps",
        "10",
        "--rays-per-step",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,rgb,lang,dino,lr"));
    assert_eq!(lines.count(), 10);
    assert!(out.exists());
}

#[test]
fn train_with_missing_embeddings_exits_2() {
    let st = setup();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("embeddings.lerf");
    let o = lerf(&["train", "--data", s(&st.data), "--embeddings", s(&missing), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn query_with_manual_scale_writes_outputs() {
    let st = setup();
    let out = tempfile::tempdir().unwrap();
    let mut args = query_args(st, out.path(), "test_00");
    let file = st.data.join("queries").join("box_a.json");
    args.extend(["--embedding-file", s(&file), "--scale", "0.5"]);
    let o = lerf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("test_00_box_a.json")).unwrap()).unwrap();
    assert_eq!(side["scale_source"], "manual");
    assert_eq!(side["selected_scale"], 0.5);
    assert_eq!(side["query"], "box_a");
    let raster = std::fs::read(out.path().join("test_00_box_a.lrfr")).unwrap();
    assert_eq!(&raster[..4], b"LRFR");
    assert!(out.path().join("test_00_box_a_overlay.png").exists());
}

#[test]
fn query_sweep_reports_auto_scale() {
    let st = setup();
    let out = tempfile::tempdir().unwrap();
    let mut args = query_args(st, out.path(), "train_01");
    let table = st.data.join("text_embeddings.json");
    args.extend(["--text", "box_b", "--text-table", s(&table), "--search-stride", "4"]);
    let o = lerf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("train_01_box_b.json")).unwrap()).unwrap();
    assert_eq!(side["scale_source"], "auto");
    let scale = side["selected_scale"].as_f64().unwrap();
    let k = scale / (2.0 / 30.0);
    assert!((k - k.round()).abs() < 1e-9 && (1.0..=30.0).contains(&k.round()), "scale {scale}");
}

#[test]
fn query_unknown_view_exits_2() {
    let st = setup();
    let out = tempfile::tempdir().unwrap();
    let mut args = query_args(st, out.path(), "no_such_view");
    let file = st.data.join("queries").join("box_a.json");
    args.extend(["--embedding-file", s(&file)]);
    let o = lerf(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_view"), "{}", stderr(&o));
}

#[test]
fn unreachable_provider_suggests_embedding_file() {
    let st = setup();
    let out = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    let mut args = query_args(st, out.path(), "test_00");
    args.extend(["--text", "box_a", "--provider", &url]);
    let o = lerf(&args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--embedding-file"), "{}", stderr(&o));
}

#[test]
fn query_through_provider() {
    let st = setup();
    let url = mock_provider(text_table(&st.data));
    let out = tempfile::tempdir().unwrap();
    let mut args = query_args(st, out.path(), "test_01");
    args.extend(["--text", "box_a", "--provider", &url, "--scale", "0.4"]);
    let o = lerf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.path().join("test_01_box_a.lrfr").exists());
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(st: &Setup, provider: &str) -> Self {
        let mut child = Command::new(BIN)
            .args([
                "serve",
                "--checkpoint",
                s(&st.checkpoint),
                "--data",
                s(&st.data),
                "--port",
                "0",
                "--no-visibility",
                "--provider",
                provider,
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner '{line}'"))
            .to_string();
        Self { child, base }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(300)).build().unwrap()
}

#[test]
fn serve_endpoints() {
    let st = setup();
    let provider = mock_provider(text_table(&st.data));
    let server = Server::start(st, &provider);
    let http = client();

    let health: Value = http.get(server.url("/health")).send().unwrap().json().unwrap();
    assert_eq!(health, json!({ "status": "ok", "checkpoint_step": 150 }));

    let views: Value = http.get(server.url("/views")).send().unwrap().json().unwrap();
    let ids: Vec<&str> = views["views"].as_array().unwrap().iter().map(|v| v["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 9);
    assert!(ids.contains(&"train_00") && ids.contains(&"test_02"));

    let r = http.get(server.url("/render?view=test_00")).send().unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert_eq!(&r.bytes().unwrap()[1..4], b"PNG");
    assert_eq!(http.get(server.url("/render?view=nope")).send().unwrap().status(), 404);

    let body = json!({ "text": "box_a", "view": "test_00", "scale": 0.4 });
    let q: Value = http.post(server.url("/query")).json(&body).send().unwrap().json().unwrap();
    assert_eq!(q["selected_scale"], 0.4);
    assert_eq!(q["scale_source"], "manual");
    assert!(q["max_score"].is_number());
    let first = http.get(server.url(q["raster_url"].as_str().unwrap())).send().unwrap();
    assert_eq!(first.status(), 200);
    let first = first.bytes().unwrap();
    let overlay = http.get(server.url(q["overlay_url"].as_str().unwrap())).send().unwrap();
    assert_eq!(overlay.headers()["content-type"], "image/png");

    let again: Value = http.post(server.url("/query")).json(&body).send().unwrap().json().unwrap();
    assert_eq!(again, q);
    let second = http.get(server.url(again["raster_url"].as_str().unwrap())).send().unwrap().bytes().unwrap();
    assert_eq!(first, second);

    // An explicit embedding with the same vector renders the same raster.
    let table = text_table(&st.data);
    let by_vector = json!({ "embedding": table["box_a"], "view": "test_00", "scale": 0.4 });
    let v: Value = http.post(server.url("/query")).json(&by_vector).send().unwrap().json().unwrap();
    let third = http.get(server.url(v["raster_url"].as_str().unwrap())).send().unwrap().bytes().unwrap();
    assert_eq!(first, third);

    let empty = http.post(server.url("/query")).json(&json!({ "text": "", "view": "test_00" })).send().unwrap();
    assert_eq!(empty.status(), 400);
    let neither = http.post(server.url("/query")).json(&json!({ "view": "test_00" })).send().unwrap();
    assert_eq!(neither.status(), 400);
    let unknown = http
        .post(server.url("/query"))
        .json(&json!({ "text": "box_a", "view": "nope" }))
        .send()
        .unwrap();
    assert_eq!(unknown.status(), 404);
    assert_eq!(http.get(server.url("/rasters/ffffffffffffffffffffffff")).send().unwrap().status(), 404);
}

#[test]
fn rasters_match_across_processes() {
    let st = setup();
    let provider = mock_provider(text_table(&st.data));
    let body = json!({ "text": "box_b", "view": "test_02", "scale": 0.6 });
    let fetch = || {
        let server = Server::start(st, &provider);
        let http = client();
        let q: Value = http.post(server.url("/query")).json(&body).send().unwrap().json().unwrap();
        http.get(server.url(q["raster_url"].as_str().unwrap())).send().unwrap().bytes().unwrap()
    };
    let a = fetch();
    let b = fetch();
    assert_eq!(a, b);

    let out = tempfile::tempdir().unwrap();
    let mut args = query_args(st, out.path(), "test_02");
    let file = st.data.join("queries").join("box_b.json");
    args.extend(["--embedding-file", s(&file), "--scale", "0.6"]);
    assert!(lerf(&args).status.success());
    assert_eq!(std::fs::read(out.path().join("test_02_box_b.lrfr")).unwrap(), a.to_vec());
}

#[cfg(unix)]
#[test]
fn serve_shuts_down_on_interrupt() {
    let st = setup();
    let mut server = Server::start(st, "http://127.0.0.1:9");
    let health = client().get(server.url("/health")).send().unwrap();
    assert_eq!(health.status(), 200);
    let killed = Command::new("kill").args(["-INT", &server.child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = server.child.wait().unwrap();
    assert!(status.success(), "{status:?}");
}

#[test]
fn serve_on_busy_port_exits_2() {
    let st = setup();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = lerf(&["serve", "--checkpoint", s(&st.checkpoint), "--data", s(&st.data), "--port", &port]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&port), "{}", stderr(&o));
}
