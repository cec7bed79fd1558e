use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use atnf_core::checkpoint::Checkpoint;
use atnf_core::denoiser::{Denoiser, DenoiserConfig};
use atnf_core::diffusion::ScheduleConfig;
use atnf_core::image_io::decode_png;
use atnf_core::rng::{gaussian, StreamId};
use atnf_service::api::{decode_base64, EditResponse, HeatmapValues, SessionResource};
use atnf_service::{router, AppState, Engine, ServiceConfig, SessionStore};

const PROMPT: &str = "a big red square on a white background";

fn tiny_checkpoint() -> Checkpoint {
    let mut net = Denoiser::new(DenoiserConfig::tiny(), 1).unwrap();
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let shape = net.params().value(id).shape().to_vec();
        let noise = gaussian::<f32>(1, StreamId(500 + id.0 as u64), &shape);
        let v = net.params_mut().value_mut(id);
        *v = v.zip_map(&noise, |a, n| a + 0.2 * n).unwrap();
    }
    Checkpoint::new(net, ScheduleConfig::default())
}

fn app_with(ck: Checkpoint, workers: usize, timeout: Duration) -> Router {
    let state = AppState::new(Engine::new(ck).unwrap(), SessionStore::in_memory(), workers, timeout);
    router(Arc::new(state), None).unwrap()
}

fn app() -> Router {
    app_with(tiny_checkpoint(), 8, Duration::from_secs(60))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, HeaderMap, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    (status, headers, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, _, b) = call(app, method, uri, body.map(|v| v.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn session(app: &Router, prompt: &str, seed: u64) -> SessionResource {
    let (s, v) = json_call(app, "POST", "/api/sessions", Some(json!({"prompt": prompt, "seed": seed, "steps": 8}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_reports_checkpoint_fingerprint() {
    let ck = tiny_checkpoint();
    let fp = ck.fingerprint();
    let app = app_with(ck, 1, Duration::from_secs(5));
    let (s, v) = json_call(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "checkpoint": fp}));
}

#[tokio::test]
async fn sessions_are_deterministic_and_list_tokens() {
    let app = app();
    let a = session(&app, PROMPT, 4).await;
    let b = session(&app, PROMPT, 4).await;
    assert_ne!(a.id, b.id);
    assert_eq!(a.image, b.image);
    assert_eq!(a.tokens.len(), 8);
    assert_eq!(a.tokens[3], "square");
    let png = decode_base64(&a.image).unwrap();
    let img = decode_png(&png, std::path::Path::new("response")).unwrap();
    assert_eq!(img.shape(), &[3, 8, 8]);
    let (s, v) = json_call(&app, "GET", &format!("/api/sessions/{}", a.id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_value::<SessionResource>(v).unwrap(), a);
}

#[tokio::test]
async fn unknown_word_is_rejected_by_name() {
    let app = app();
    let (s, v) = json_call(&app, "POST", "/api/sessions", Some(json!({"prompt": "a purple square on a white background"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["unknown_word"], "purple");
    let (s, _) = json_call(&app, "POST", "/api/sessions", Some(json!({"prompt": PROMPT, "colour": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = json_call(&app, "POST", "/api/sessions", Some(json!({"prompt": PROMPT, "steps": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn identity_reweight_returns_the_source_bytes() {
    let app = app();
    let s = session(&app, PROMPT, 9).await;
    let edit = json!({"type": "reweight", "target_prompt": PROMPT, "weights": {"3": 1.0}});
    let (st, v) = json_call(&app, "POST", &format!("/api/sessions/{}/edits", s.id), Some(edit)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let r: EditResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.image, s.image);
    assert_eq!(r.metrics.l2_to_source, 0.0);
}

#[tokio::test]
async fn zero_tau_swap_matches_fresh_generation() {
    let app = app();
    let target = "a big blue square on a white background";
    let s = session(&app, PROMPT, 10).await;
    let fresh = session(&app, target, 10).await;
    let edit = json!({"type": "swap", "target_prompt": target, "tau": 0.0});
    let (st, v) = json_call(&app, "POST", &format!("/api/sessions/{}/edits", s.id), Some(edit)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let r: EditResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r.image, fresh.image);
    assert!(r.metrics.l2_to_source > 0.0);
}

#[tokio::test]
async fn edit_errors_carry_status_and_fields() {
    let app = app();
    let s = session(&app, PROMPT, 11).await;
    let (st, _) = json_call(&app, "POST", "/api/sessions/nope/edits", Some(json!({"type": "swap", "target_prompt": PROMPT}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let uri = format!("/api/sessions/{}/edits", s.id);
    let (st, v) = json_call(&app, "POST", &uri, Some(json!({"type": "swap", "target_prompt": PROMPT, "tau": 1.5}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["errors"][0]["field"], "/tau");
    let (st, v) = json_call(&app, "POST", &uri, Some(json!({"type": "swap", "target_prompt": "a big purple square"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["errors"][0]["field"], "/target_prompt");
    let (st, v) = json_call(&app, "POST", &uri, Some(json!({"type": "reweight", "target_prompt": PROMPT, "weights": {"40": 2.0}}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["errors"][0]["field"], "/weights/40");
    let (st, _, _) = call(&app, "POST", &uri, Some("{not json".into())).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn attention_heatmaps_are_normalized_pngs() {
    let app = app();
    let s = session(&app, PROMPT, 12).await;
    let base = format!("/api/sessions/{}/attention", s.id);
    let (st, h, body) = call(&app, "GET", &format!("{base}?token=3&resolution=4"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(h["content-type"], "image/png");
    let img = image_gray(&body);
    assert_eq!((img.width(), img.height()), (4, 4));
    let px: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
    assert_eq!(px.iter().max(), Some(&255));
    assert_eq!(px.iter().min(), Some(&0));

    let (st, v) = json_call(&app, "GET", &format!("{base}?token=3&resolution=4&kind=cross&format=json"), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let raw: HeatmapValues = serde_json::from_value(v).unwrap();
    assert_eq!(raw.values.len(), 16);
    for t in &raw.column_total {
        assert!((t - 1.0).abs() < 1e-5, "{t}");
    }

    let (st, v) = json_call(&app, "GET", &format!("{base}?token=8"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "token");
    let (st, _) = json_call(&app, "GET", &format!("{base}?token=1&resolution=5"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = json_call(&app, "GET", &format!("{base}?token=x"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = json_call(&app, "GET", "/api/sessions/nope/attention?token=0", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

fn image_gray(png: &[u8]) -> image::GrayImage {
    image::load_from_memory(png).unwrap().to_luma8()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_equal_their_serial_results() {
    let app = app_with(tiny_checkpoint(), 16, Duration::from_secs(60));
    let s = session(&app, PROMPT, 13).await;
    let uri = format!("/api/sessions/{}/edits", s.id);
    let edits: Vec<String> = [
        json!({"type": "swap", "target_prompt": "a big blue square on a white background", "tau": 1.0}),
        json!({"type": "swap", "target_prompt": "a big green square on a white background", "tau": 0.5}),
        json!({"type": "refine", "target_prompt": "a big red square on a white background, striped"}),
        json!({"type": "reweight", "target_prompt": PROMPT, "weights": {"2": -2.0}}),
        json!({"type": "reweight", "target_prompt": PROMPT, "weights": {"3": 2.0}}),
    ]
    .iter()
    .map(|v| v.to_string())
    .collect();
    let mut serial = Vec::new();
    for e in &edits {
        serial.push(call(&app, "POST", &uri, Some(e.clone())).await.2);
    }
    let parallel = futures_join(edits.iter().cycle().take(10).map(|e| {
        let app = app.clone();
        let uri = uri.clone();
        let e = e.clone();
        tokio::spawn(async move { call(&app, "POST", &uri, Some(e)).await })
    }))
    .await;
    for (i, (st, _, body)) in parallel.into_iter().enumerate() {
        assert_eq!(st, StatusCode::OK);
        assert_eq!(body, serial[i % edits.len()], "edit {i}");
    }
}

async fn futures_join<T>(tasks: impl Iterator<Item = tokio::task::JoinHandle<T>>) -> Vec<T> {
    let mut out = Vec::new();
    for t in tasks.collect::<Vec<_>>() {
        out.push(t.await.unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn saturated_pool_answers_503() {
    let app = app_with(tiny_checkpoint(), 1, Duration::from_secs(60));
    let body = json!({"prompt": PROMPT, "seed": 1, "steps": 100}).to_string();
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&app, "POST", "/api/sessions", Some(body)).await.0 })
        })
        .collect();
    let codes = futures_join(handles.into_iter()).await;
    assert!(codes.contains(&StatusCode::CREATED), "{codes:?}");
    assert!(codes.contains(&StatusCode::SERVICE_UNAVAILABLE), "{codes:?}");
    assert!(codes
        .iter()
        .all(|c| *c == StatusCode::CREATED || *c == StatusCode::SERVICE_UNAVAILABLE));
}

#[tokio::test]
async fn slow_requests_time_out() {
    let app = app_with(tiny_checkpoint(), 1, Duration::from_millis(1));
    let (st, v) = json_call(&app, "POST", "/api/sessions", Some(json!({"prompt": PROMPT, "steps": 100}))).await;
    assert_eq!(st, StatusCode::GATEWAY_TIMEOUT, "{v}");
}

#[tokio::test]
async fn persisted_sessions_are_replayed() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        persist: Some(dir.path().join("sessions.jsonl")),
        ..ServiceConfig::default()
    };
    let first = router(Arc::new(AppState::open(tiny_checkpoint(), &config).unwrap()), None).unwrap();
    let s = session(&first, PROMPT, 14).await;
    drop(first);
    let second = router(Arc::new(AppState::open(tiny_checkpoint(), &config).unwrap()), None).unwrap();
    let (st, v) = json_call(&second, "GET", &format!("/api/sessions/{}", s.id), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(serde_json::from_value::<SessionResource>(v).unwrap(), s);

    let mut other = tiny_checkpoint();
    let id = other.model.params().ids().next().unwrap();
    other.model.params_mut().value_mut(id).data_mut()[0] += 1.0;
    let third = AppState::open(other, &config).unwrap();
    assert!(third.store.is_empty());
}

#[tokio::test]
async fn inversion_sessions_report_reconstruction() {
    // Untrained full-size network: its noise estimate is zero, so inversion
    // is exact and the reconstruction equals the dataset image.
    let ck = Checkpoint::new(
        Denoiser::new(DenoiserConfig::default(), 0).unwrap(),
        ScheduleConfig::default(),
    );
    let app = app_with(ck, 2, Duration::from_secs(60));
    let (st, v) = json_call(&app, "POST", "/api/inversions", Some(json!({"dataset_seed": 5, "steps": 4}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    let r: SessionResource = serde_json::from_value(v).unwrap();
    let inv = r.inversion.clone().unwrap();
    assert_eq!(r.prompt, atnf_core::dataset::gen_scene(5).prompt);
    assert_eq!(inv.original, r.image);
    let edit = json!({"type": "reweight", "target_prompt": r.prompt, "weights": {"3": 1.0}});
    let (st, v) = json_call(&app, "POST", &format!("/api/sessions/{}/edits", r.id), Some(edit)).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["image"], json!(r.image));
}

#[tokio::test]
async fn live_server_speaks_http_with_cors() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = app();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /api/health HTTP/1.1\r\nHost: x\r\nOrigin: http://localhost:5173\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).await.unwrap();
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.to_ascii_lowercase().contains("access-control-allow-origin: *"), "{text}");
    assert!(text.contains("\"status\":\"ok\""));
    server.abort();
}
