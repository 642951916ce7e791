mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

use lvgan_cli::serve::{router, Snapshot};

fn snapshot() -> (tempfile::TempDir, Arc<Snapshot>) {
    let dir = tempfile::tempdir().unwrap();
    let ck = common::tiny_checkpoint(dir.path());
    let state = lvgan_core::trainer::read_state(&ck).unwrap();
    (dir, Arc::new(Snapshot::from_state(state)))
}

async fn call(s: &Arc<Snapshot>, method: &str, uri: &str, accept: Option<&str>, body: &str) -> (StatusCode, String, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(a) = accept {
        req = req.header("accept", a);
    }
    let resp = router(s.clone()).oneshot(req.body(Body::from(body.to_string())).unwrap()).await.unwrap();
    let status = resp.status();
    let ct = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, bytes)
}

#[tokio::test]
async fn model_and_health() {
    let (_d, s) = snapshot();
    let (st, _, _) = call(&s, "GET", "/healthz", None, "").await;
    assert_eq!(st, StatusCode::OK);
    let (st, ct, body) = call(&s, "GET", "/model", None, "").await;
    assert_eq!(st, StatusCode::OK);
    assert!(ct.starts_with("application/json"));
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["d"], 4);
    assert_eq!(v["s"], 2);
    assert_eq!(v["partitions"], serde_json::json!([[0, 2], [2, 4]]));
    assert_eq!(v["latent_ranges"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn generate_is_pure_and_negotiates_format() {
    let (_d, s) = snapshot();
    let body = r#"{"latent":[0.1,-0.5,1.0,0.0]}"#;
    let (st, ct, a) = call(&s, "POST", "/generate", None, body).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ct, "image/png");
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    let (_, _, b) = call(&s, "POST", "/generate", None, body).await;
    assert_eq!(a, b);
    let (st, ct, p) = call(&s, "POST", "/generate", Some("image/x-portable-anymap"), body).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ct, "image/x-portable-graymap");
    let img = lvgan_core::image::Image::from_pnm(&p).unwrap();
    assert_eq!(img.shape, lvgan_core::image::ImageShape::new(1, 8, 8));
}

#[tokio::test]
async fn generate_rejects_bad_requests() {
    let (_d, s) = snapshot();
    for body in [r#"{"latent":[0.1,0.2]}"#, "{not json", r#"{"latent":[0,0,0,2.5]}"#, r#"{"z":[0,0,0,0]}"#] {
        let (st, ct, b) = call(&s, "POST", "/generate", None, body).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{body}");
        assert!(ct.starts_with("application/json"));
        let v: serde_json::Value = serde_json::from_slice(&b).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn interpolate_frames() {
    let (_d, s) = snapshot();
    let from = [0.5, -0.5, 0.2, 0.0];
    let to = [-1.0, 1.0, 0.0, 0.3];
    let req = |steps: usize| serde_json::json!({ "from": from, "to": to, "steps": steps }).to_string();
    let (st, _, b) = call(&s, "POST", "/interpolate", None, &req(2)).await;
    assert_eq!(st, StatusCode::OK);
    let frames: Vec<String> = serde_json::from_slice(&b).unwrap();
    assert_eq!(frames.len(), 2);
    let b64 = base64::engine::general_purpose::STANDARD;
    for (frame, h) in frames.iter().zip([from, to]) {
        let (_, _, direct) = call(&s, "POST", "/generate", None, &serde_json::json!({ "latent": h }).to_string()).await;
        assert_eq!(b64.decode(frame).unwrap(), direct);
    }
    let (_, _, b) = call(&s, "POST", "/interpolate", None, &req(64)).await;
    assert_eq!(serde_json::from_slice::<Vec<String>>(&b).unwrap().len(), 64);
    let (st, _, _) = call(&s, "POST", "/interpolate", None, &req(65)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}
