use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use bodyscene::raster::Frame;
use bodyscene::stimpipe::{version_dir, StimulusVersion};
use expserver::{router, AppState, Catalog, Store, StoreConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup() -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    let k = 6;
    let clips: Vec<(String, usize)> = (0..k).map(|c| (format!("a{c:02}-000"), c)).collect();
    for (id, c) in &clips {
        for v in StimulusVersion::ALL {
            let d = version_dir(dir.path(), v, id);
            std::fs::create_dir_all(&d).unwrap();
            for t in 0..3 {
                let f = Frame::from_fn(32, 32, |y, x| {
                    [(*c as f32) / 8.0, y as f32 / 32.0, x as f32 / 32.0]
                });
                let _ = t;
                f.save_png(&d.join(format!("frame_{t:04}.png"))).unwrap();
            }
        }
    }
    let catalog = Catalog {
        categories: (0..k).map(|c| format!("action-{c}")).collect(),
        frames: vec![3; clips.len()],
        clips,
    };
    let config = StoreConfig {
        n_categories: k,
        ..StoreConfig::default()
    };
    let store = Store::open(catalog, config, Some(dir.path().join("responses.jsonl"))).unwrap();
    let app = router(AppState {
        store: Arc::new(store),
        data_root: dir.path().to_path_buf(),
    });
    (dir, app)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (
        status,
        to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap()
            .to_vec(),
    )
}

async fn call_json(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn full_session_over_http() {
    let (dir, app) = setup();
    let (s, created) = call_json(&app, "POST", "/session", Some(json!({"seed": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    let pid = created["participant"].as_str().unwrap().to_string();
    assert_eq!(created["total"], 18);

    let (_, first) = call_json(&app, "GET", &format!("/trial/{pid}"), None).await;
    assert_eq!(first["status"], "trial");
    assert_eq!(
        (first["block"].as_u64(), first["trial"].as_u64()),
        (Some(1), Some(1))
    );
    assert_eq!(first["version"], "bg");
    let (_, again) = call_json(&app, "GET", &format!("/trial/{pid}"), None).await;
    assert_eq!(first, again);

    let mut answered = 0;
    loop {
        let (_, t) = call_json(&app, "GET", &format!("/trial/{pid}"), None).await;
        if t["status"] == "done" {
            break;
        }
        // Pick the choice whose name matches the clip's category.
        let clip = t["clip_id"].as_str().unwrap();
        let label: u64 = clip[1..3].parse().unwrap();
        let block = t["block"].as_u64().unwrap();
        let choice = if block == 3 {
            label
        } else {
            t["choices"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| c["label"].as_u64().unwrap())
                .find(|&c| c != label)
                .unwrap()
        };
        let body = json!({"block": block, "trial": t["trial"], "choice": choice});
        let (s, rec) = call_json(
            &app,
            "POST",
            &format!("/response/{pid}"),
            Some(body.clone()),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(rec["correct"], block == 3);
        let (s, _) = call_json(&app, "POST", &format!("/response/{pid}"), Some(body)).await;
        assert_eq!(s, StatusCode::CONFLICT);
        answered += 1;
    }
    assert_eq!(answered, 18);
    let (s, acc) = call_json(&app, "GET", &format!("/results/{pid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (
            acc["bg"].as_f64(),
            acc["body"].as_f64(),
            acc["orig"].as_f64()
        ),
        (Some(0.0), Some(0.0), Some(1.0))
    );
    assert_eq!(acc["complete"], true);

    let lines = std::fs::read_to_string(dir.path().join("responses.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1 + 18);
}

#[tokio::test]
async fn clip_frames_are_png() {
    let (_dir, app) = setup();
    let (s, bytes) = call(&app, "GET", "/clip/body/a02-000/1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (32, 32));
    assert_eq!(img.get_pixel(0, 0)[0], 64);

    for uri in [
        "/clip/body/a02-000/3",
        "/clip/nope/a02-000/0",
        "/clip/orig/..%2F..%2Fetc/0",
        "/clip/orig/zzz/0",
    ] {
        let (s, _) = call(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let (_dir, app) = setup();
    let (s, body) = call_json(&app, "GET", "/trial/p9999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("p9999"));
    let (_, created) = call_json(&app, "POST", "/session", None).await;
    let pid = created["participant"].as_str().unwrap().to_string();
    assert_eq!(pid, "p0001");
    let (s, _) = call_json(
        &app,
        "POST",
        &format!("/response/{pid}"),
        Some(json!({"block": 2, "trial": 1, "choice": 0})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call_json(
        &app,
        "POST",
        &format!("/response/{pid}"),
        Some(json!({"block": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}
