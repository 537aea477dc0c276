use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mf_cli::server::{router, AppState};
use mf_core::conditioning::parse_spec;
use mf_core::io::{decode_png, read_png};
use mf_core::synth::{make_dataset, read_annotation, DatasetOptions};
use mf_dit::train::load_training_set;
use mf_dit::{train, ModelConfig, RunConfig, Stage, TrainConfig};

const FRAMES: usize = 5;

struct Fixture {
    _tmp: tempfile::TempDir,
    clip: PathBuf,
    checkpoint: PathBuf,
    app: Router,
}

fn fixture(workers: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let opts = DatasetOptions {
        num_frames: FRAMES,
        width: 16,
        height: 16,
        focal: 16.0,
        threads: 1,
        ..DatasetOptions::default()
    };
    make_dataset(2, 3, &data, &opts).unwrap();
    let run = RunConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            schedule: vec![(Stage::Base, 1)],
            warmup: 1,
            ..TrainConfig::default()
        },
    };
    let checkpoint = tmp.path().join("run");
    let ex = load_training_set(&data, &run.model).unwrap();
    train(&ex, &run, &checkpoint, None, &mut |_, _, _| {}).unwrap();
    let state = AppState::new(tmp.path().join("service"), workers);
    Fixture {
        clip: data.join("clip_0000"),
        checkpoint,
        app: router(Arc::clone(&state)),
        _tmp: tmp,
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn session_body(clip: &Path) -> Value {
    let ann = read_annotation(&clip.join("annotation.json")).unwrap();
    let k = ann.intrinsics;
    json!({
        "image_path": clip.join("frames").join("000.png"),
        "depth_path": clip.join("depth0.pfm"),
        "intrinsics": { "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height },
        "num_frames": FRAMES,
    })
}

async fn new_session(f: &Fixture) -> String {
    let (s, v) = call_json(&f.app, Method::POST, "/sessions", Some(session_body(&f.clip))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_terminal(app: &Router, job: &str) -> Value {
    let start = Instant::now();
    let mut last_progress = 0.0;
    loop {
        let (s, v) = call_json(app, Method::GET, &format!("/jobs/{job}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let p = v["progress"].as_f64().unwrap();
        assert!(p >= last_progress, "progress went back from {last_progress} to {p}");
        last_progress = p;
        if matches!(v["state"].as_str(), Some("done" | "failed")) {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {job} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[tokio::test]
async fn sessions_are_created_with_distinct_ids() {
    let f = fixture(1);
    let a = new_session(&f).await;
    let b = new_session(&f).await;
    assert_ne!(a, b);

    let mut body = session_body(&f.clip);
    body["intrinsics"]["width"] = json!(32);
    let (s, v) = call_json(&f.app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");

    let mut body = session_body(&f.clip);
    body["image_path"] = json!("/nonexistent/image.png");
    let (s, _) = call_json(&f.app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn inline_uploads_match_path_uploads() {
    let f = fixture(1);
    let png = std::fs::read(f.clip.join("frames").join("000.png")).unwrap();
    let pfm = std::fs::read(f.clip.join("depth0.pfm")).unwrap();
    let mut body = session_body(&f.clip);
    let obj = body.as_object_mut().unwrap();
    obj.remove("image_path");
    obj.remove("depth_path");
    obj.insert("image".into(), json!(B64.encode(png)));
    obj.insert("depth".into(), json!(B64.encode(pfm)));
    let (s, inline) = call_json(&f.app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{inline}");
    let (_, by_path) = call_json(&f.app, Method::POST, "/sessions", Some(session_body(&f.clip))).await;
    assert_eq!(inline["num_points"], by_path["num_points"]);
}

#[tokio::test]
async fn selections_fit_boxes_or_fail_cleanly() {
    let f = fixture(1);
    let id = new_session(&f).await;
    let uri = format!("/sessions/{id}/select");
    let (s, v) = call_json(&f.app, Method::POST, &uri, Some(json!({ "label": "red cube", "rect": [0, 0, 15, 15] }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["object_id"], 1);
    let half = v["box"]["half_extents"].as_array().unwrap();
    assert!(half.iter().all(|h| h.as_f64().unwrap() > 0.0));

    let (s, _) = call_json(&f.app, Method::POST, &uri, Some(json!({ "label": "red cube", "rect": [3, 3, 3, 4] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "two pixels cannot fit a box");
    let (s, _) = call_json(&f.app, Method::POST, &uri, Some(json!({ "label": "spaceship", "rect": [0, 0, 15, 15] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call_json(&f.app, Method::POST, &uri, Some(json!({ "label": "red cube", "rect": [0, 0, 16, 15] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mask = json!({ "label": "cube", "mask": { "width": 16, "height": 16, "data": vec![true; 256] } });
    let (s, v) = call_json(&f.app, Method::POST, &uri, Some(mask)).await;
    assert_eq!((s, v["object_id"].clone()), (StatusCode::OK, json!(2)));
    let (s, _) = call_json(&f.app, Method::POST, "/sessions/nope/select", Some(json!({ "label": "cube", "rect": [0, 0, 1, 1] }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn zero_delta_preview_starts_with_the_reference() {
    let f = fixture(1);
    let id = new_session(&f).await;
    let uri = format!("/sessions/{id}/preview");
    let (s, v) = call_json(&f.app, Method::POST, &uri, Some(json!({ "camera": {}, "stride": 1 }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), FRAMES);
    let reference = read_png(&f.clip.join("frames").join("000.png")).unwrap();
    let decoded: Vec<_> = frames
        .iter()
        .map(|fr| decode_png(&B64.decode(fr.as_str().unwrap()).unwrap()).unwrap())
        .collect();
    assert_eq!(decoded[0].to_rgb8(), reference.to_rgb8());
    // later frames are re-rendered from the cloud; every pixel has depth
    for img in &decoded[1..] {
        assert_eq!(img.to_rgb8(), reference.to_rgb8());
    }

    let (s, _) = call_json(&f.app, Method::POST, &uri, Some(json!({ "camera": { "elevation": 91.0 } }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(&f.app, Method::POST, &uri, Some(json!({ "camera": { "azimuth": 20.0 }, "stride": 4 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["frames"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn keyframed_objects_appear_in_the_exported_spec() {
    let f = fixture(1);
    let id = new_session(&f).await;
    let (_, b) = call_json(
        &f.app,
        Method::POST,
        &format!("/sessions/{id}/select"),
        Some(json!({ "label": "green cube", "rect": [4, 4, 11, 11] })),
    )
    .await;
    let c = b["box"]["center"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>();
    let moved = [c[0] + 0.3, c[1], c[2]];
    let body = json!({ "objects": [{ "id": 1, "keyframes": [[1, c], [FRAMES, moved]] }] });
    let (s, v) = call_json(&f.app, Method::POST, &format!("/sessions/{id}/preview"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let bad = json!({ "objects": [{ "id": 1, "keyframes": [[2, c]] }] });
    let (s, _) = call_json(&f.app, Method::POST, &format!("/sessions/{id}/preview"), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, text) = call(&f.app, Method::POST, &format!("/sessions/{id}/spec"), Some(json!({ "seed": 9 })), None).await;
    assert_eq!(s, StatusCode::OK);
    let spec = parse_spec(std::str::from_utf8(&text).unwrap()).unwrap();
    assert_eq!(spec.seed, 9);
    assert_eq!(spec.num_frames, FRAMES);
    assert_eq!(spec.objects.len(), 1);
    assert_eq!(spec.caption, "a green cube");
}

#[tokio::test]
async fn jobs_run_to_completion_and_serve_frames() {
    let f = fixture(2);
    let sid = new_session(&f).await;
    let mut ids = Vec::new();
    for seed in [1, 2] {
        let body = json!({ "session_id": sid, "checkpoint": f.checkpoint, "steps": 3, "seed": seed });
        let (s, v) = call_json(&f.app, Method::POST, "/jobs/generate", Some(body)).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{v}");
        ids.push(v["id"].as_str().unwrap().to_string());
    }
    let mut dirs = Vec::new();
    for id in &ids {
        let v = wait_terminal(&f.app, id).await;
        assert_eq!(v["state"], "done", "{v}");
        assert_eq!(v["progress"], 1.0);
        assert_eq!(v["frames"], FRAMES);
        dirs.push(v["output_dir"].as_str().unwrap().to_string());
        let (s, png) = call(&f.app, Method::GET, &format!("/jobs/{id}/frames/0.png"), None, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(decode_png(&png).unwrap().width, 16);
        let (s, _) = call(&f.app, Method::GET, &format!("/jobs/{id}/frames/{FRAMES}.png"), None, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
    }
    assert_ne!(dirs[0], dirs[1]);

    // deleting a finished job removes it
    let (s, _) = call(&f.app, Method::DELETE, &format!("/jobs/{}", ids[0]), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!Path::new(&dirs[0]).exists());
    let (s, _) = call(&f.app, Method::GET, &format!("/jobs/{}", ids[0]), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn missing_checkpoint_fails_immediately() {
    let f = fixture(1);
    let sid = new_session(&f).await;
    let body = json!({ "session_id": sid, "checkpoint": "/nonexistent/run" });
    let (s, v) = call_json(&f.app, Method::POST, "/jobs/generate", Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["state"], "failed");
    assert!(v["error"].as_str().unwrap().contains("checkpoint"), "{v}");
}

#[tokio::test]
async fn cancelling_a_running_job_fails_it() {
    let f = fixture(1);
    let sid = new_session(&f).await;
    let body = json!({ "session_id": sid, "checkpoint": f.checkpoint, "steps": 1_000_000 });
    let (_, v) = call_json(&f.app, Method::POST, "/jobs/generate", Some(body)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let start = Instant::now();
    while call_json(&f.app, Method::GET, &format!("/jobs/{id}"), None).await.1["state"] != "running" {
        assert!(start.elapsed() < Duration::from_secs(60));
        std::thread::sleep(Duration::from_millis(5));
    }
    let (s, _) = call(&f.app, Method::DELETE, &format!("/jobs/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let v = wait_terminal(&f.app, &id).await;
    assert_eq!((v["state"].as_str(), v["error"].as_str()), (Some("failed"), Some("cancelled")));
}

#[tokio::test]
async fn idempotency_keys_replay_responses() {
    let f = fixture(1);
    let body = session_body(&f.clip);
    let (s1, a) = call(&f.app, Method::POST, "/sessions", Some(body.clone()), Some("k1")).await;
    let (s2, b) = call(&f.app, Method::POST, "/sessions", Some(body.clone()), Some("k1")).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a, b);
    let (s3, c) = call(&f.app, Method::POST, "/sessions", Some(body.clone()), Some("k2")).await;
    assert_eq!(s3, StatusCode::CREATED);
    assert_ne!(a, c);

    let mut other = body;
    other["num_frames"] = json!(9);
    let (s, _) = call(&f.app, Method::POST, "/sessions", Some(other), Some("k1")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let sid: Value = serde_json::from_slice(&a).unwrap();
    let sel = json!({ "label": "red cube", "rect": [0, 0, 15, 15] });
    let uri = format!("/sessions/{}/select", sid["id"].as_str().unwrap());
    let (_, x) = call(&f.app, Method::POST, &uri, Some(sel.clone()), Some("sel")).await;
    let (_, y) = call(&f.app, Method::POST, &uri, Some(sel), Some("sel")).await;
    assert_eq!(x, y, "a retried selection must not register a second object");
}

#[tokio::test]
async fn sessions_are_isolated() {
    let f = fixture(1);
    let a = new_session(&f).await;
    let b = new_session(&f).await;
    let sel = json!({ "label": "red cube", "rect": [0, 0, 15, 15] });
    call_json(&f.app, Method::POST, &format!("/sessions/{a}/select"), Some(sel)).await;
    let (_, text) = call(&f.app, Method::POST, &format!("/sessions/{b}/spec"), None, None).await;
    let spec = parse_spec(std::str::from_utf8(&text).unwrap()).unwrap();
    assert!(spec.objects.is_empty());
}
